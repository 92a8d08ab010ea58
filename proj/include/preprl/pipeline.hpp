#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "preprl/agent.hpp"
#include "preprl/data.hpp"
#include "preprl/environment.hpp"
#include "preprl/loss.hpp"
#include "preprl/network.hpp"
#include "preprl/optim.hpp"
#include "preprl/transforms.hpp"

namespace preprl {

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
  std::string source = "glyphs";  // glyphs | idx
  std::string name = "glyphs";    // label used in reports
  // glyphs
  std::size_t k = 2;
  std::size_t size = 16;
  std::size_t train_per_class = 500;
  std::size_t val_per_class = 100;
  std::size_t test_per_class = 250;
  double noise = 0.0;
  double max_shift = 1.0;
  std::uint64_t seed = 7;
  std::vector<GlyphClass> glyphs;  // empty = the first k shapes
  bool marker = false;
  // idx: <dir>/train-images-idx3-ubyte etc.
  std::string dir;
  std::size_t val_count = 5000;  // carved off the end of the training file
  std::size_t train_limit = 0;   // 0 keeps everything
  std::size_t test_limit = 0;
  std::vector<std::size_t> classes;  // optional label subset, remapped to 0..k-1
};

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  AdamConfig adam;
};

struct RlConfig {
  long steps = 20000;  // environment steps
  DqnConfig dqn;
  AdamConfig adam;
  double eps_start = 1.0;
  double eps_end = 0.1;
  long anneal_steps = 0;  // 0 means steps / 2
  long eval_every = 2000;
  std::size_t train_every = 1;
  TransformMode actions = TransformMode::standard;

  long anneal() const { return anneal_steps > 0 ? anneal_steps : std::max(1L, steps / 2); }
};

struct ExperimentConfig {
  ArchPreset arch = ArchPreset::arch1;
  DataConfig data;
  EnvConfig env;
  TrainConfig nn;
  RlConfig rl;
  TrainConfig cl{2, 32, {}};
  DistortionConfig distortion;
  std::size_t runs = 5;
  std::uint64_t seed = 0;
  std::size_t trace_count = 100;
  std::size_t threads = 0;  // parallel runs; 0 = hardware concurrency

  void validate() const {
    if (runs < 1) throw std::invalid_argument("experiment: runs must be >= 1");
    env.validate();
    distortion.validate();
    if (rl.steps < 0) throw std::invalid_argument("rl.steps must be >= 0");
    if (rl.dqn.gamma < 0 || rl.dqn.gamma >= 1)
      throw std::invalid_argument("agent.gamma must be in [0, 1)");
    if (nn.batch_size == 0 || cl.batch_size == 0 || rl.dqn.batch_size == 0)
      throw std::invalid_argument("batch sizes must be positive");
  }

  std::uint64_t run_seed(std::size_t run) const {
    return seed * 1000003ULL + 7919ULL * (run + 1);
  }
};

// Optional progress sink; nullptr silences logging.
using LogFn = std::function<void(const std::string&)>;

// ---------------------------------------------------------------------------
// Data

template <typename T>
Dataset<T> filter_classes(const Dataset<T>& ds, const std::vector<std::size_t>& classes) {
  if (classes.empty()) return ds;
  Dataset<T> out;
  out.k = classes.size();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto it = std::find(classes.begin(), classes.end(), ds.labels[i]);
    if (it == classes.end()) continue;
    out.images.push_back(ds.images[i]);
    out.labels.push_back(static_cast<std::size_t>(it - classes.begin()));
  }
  return out;
}

template <typename T>
Splits<T> load_splits(const DataConfig& cfg) {
  Splits<T> s;
  if (cfg.source == "glyphs") {
    GlyphConfig g{cfg.train_per_class, cfg.k,         cfg.size,   cfg.seed,
                  cfg.noise,           cfg.max_shift, cfg.glyphs, cfg.marker};
    s.train = gen_glyphs<T>(g);
    g.n_per_class = cfg.val_per_class;
    g.seed = cfg.seed + 1;
    s.val = gen_glyphs<T>(g);
    g.n_per_class = cfg.test_per_class;
    g.seed = cfg.seed + 2;
    s.test = gen_glyphs<T>(g);
    return s;
  }
  if (cfg.source == "idx") {
    const std::string d = cfg.dir.empty() ? std::string(".") : cfg.dir;
    auto load = [&](const std::string& prefix) {
      return filter_classes(load_idx<T>(d + "/" + prefix + "-images-idx3-ubyte",
                                        d + "/" + prefix + "-labels-idx1-ubyte"),
                            cfg.classes);
    };
    Dataset<T> train = load("train");
    if (std::filesystem::exists(d + "/val-images-idx3-ubyte")) {
      s.val = load("val");
    } else {
      const std::size_t nval = std::min(cfg.val_count, train.size() / 2);
      s.val = train.subset(train.size() - nval, train.size());
      train = train.subset(0, train.size() - nval);
    }
    s.train = std::move(train);
    s.test = load("t10k");
    if (cfg.train_limit && s.train.size() > cfg.train_limit)
      s.train = s.train.subset(0, cfg.train_limit);
    if (cfg.test_limit && s.test.size() > cfg.test_limit)
      s.test = s.test.subset(0, cfg.test_limit);
    s.train.k = s.val.k = s.test.k = std::max({s.train.k, s.val.k, s.test.k});
    return s;
  }
  throw std::invalid_argument("unknown data.source '" + cfg.source + "'");
}

// ---------------------------------------------------------------------------
// Classifiers (NN and CL)

struct EvalResult {
  double accuracy = 0;
  std::vector<std::size_t> predictions;
};

inline double accuracy_of(const std::vector<std::size_t>& predictions,
                          const std::vector<std::size_t>& labels) {
  if (labels.empty()) return 0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

template <typename T>
EvalResult evaluate_classifier(Network<T>& net, const Dataset<T>& ds,
                               std::size_t batch_size = 64) {
  EvalResult r;
  r.predictions.reserve(ds.size());
  for (std::size_t b = 0; b < ds.size(); b += batch_size) {
    const std::size_t e = std::min(ds.size(), b + batch_size);
    std::vector<const Tensor<T>*> items;
    for (std::size_t i = b; i < e; ++i) items.push_back(&ds.images[i]);
    const Tensor<T> logits =
        net.forward(stack<T>(std::span<const Tensor<T>* const>(items)), Mode::inference);
    const std::size_t k = logits.dim(1);
    for (std::size_t i = 0; i < e - b; ++i)
      r.predictions.push_back(argmax(logits.data().subspan(i * k, k)));
  }
  r.accuracy = accuracy_of(r.predictions, ds.labels);
  return r;
}

template <typename T>
double classifier_loss(Network<T>& net, const Dataset<T>& ds) {
  double total = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor<T> logits = net.forward_one(ds.images[i]);
    total += softmax_cross_entropy<T>(logits.data(), ds.labels[i]).loss;
  }
  return ds.size() ? total / static_cast<double>(ds.size()) : 0;
}

template <typename T>
struct TrainedClassifier {
  Network<T> net;
  double val_accuracy = 0;
  std::size_t best_epoch = 0;  // 0 = initial parameters
  std::vector<double> epoch_loss;
};

// Minibatch softmax cross-entropy with Adam; keeps the parameters with the
// best validation accuracy (the initial parameters included).
template <typename T>
TrainedClassifier<T> fit_classifier(Network<T> net, const Dataset<T>& train,
                                    const Dataset<T>& val, const TrainConfig& cfg,
                                    std::uint64_t seed, const LogFn& log = {}) {
  std::mt19937_64 rng(seed);
  Adam<T> opt(cfg.adam);
  TrainedClassifier<T> best{net, evaluate_classifier(net, val).accuracy, 0, {}};
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      std::vector<const Tensor<T>*> items;
      for (std::size_t i = b; i < e; ++i) items.push_back(&train.images[order[i]]);
      const Tensor<T> logits =
          net.forward(stack<T>(std::span<const Tensor<T>* const>(items)), Mode::training);
      const std::size_t k = logits.dim(1), n = e - b;
      Tensor<T> grad(logits.shape());
      for (std::size_t i = 0; i < n; ++i) {
        auto lr = softmax_cross_entropy<T>(logits.data().subspan(i * k, k),
                                           train.labels[order[b + i]]);
        if (!std::isfinite(static_cast<double>(lr.loss)))
          throw NumericError("classifier: non-finite loss in epoch " + std::to_string(epoch));
        total += lr.loss;
        for (std::size_t j = 0; j < k; ++j)
          grad[i * k + j] = lr.grad[j] / static_cast<T>(n);
      }
      net.backward(grad);
      opt.step(net.params());
    }
    best.epoch_loss.push_back(total / static_cast<double>(std::max<std::size_t>(1, train.size())));
    const double acc = evaluate_classifier(net, val).accuracy;
    if (log) {
      std::ostringstream os;
      os << "  epoch " << epoch << " loss " << best.epoch_loss.back() << " val " << acc;
      log(os.str());
    }
    if (acc > best.val_accuracy) {
      best.net = net;
      best.val_accuracy = acc;
      best.best_epoch = epoch;
    }
  }
  return best;
}

template <typename T>
TrainedClassifier<T> train_nn(const ExperimentConfig& cfg, const Splits<T>& data,
                              std::uint64_t seed, const LogFn& log = {}) {
  Network<T> net(classifier_spec(cfg.arch, data.train.image_shape(), data.train.k), seed);
  return fit_classifier(std::move(net), data.train, data.val, cfg.nn, seed + 1, log);
}

// ---------------------------------------------------------------------------
// Test-time policy and traces

template <typename T>
struct EpisodeTrace {
  std::size_t image_id = 0;
  std::size_t true_label = 0;
  std::vector<std::string> steps;  // transform strings, then "stop(i)"
  std::size_t predicted = 0;
  std::vector<double> q_values;    // Q-value of the chosen action per step
  TransformChain distortion;       // chain applied before the agent saw it

  TransformChain transforms() const {
    TransformChain c;
    for (const auto& s : steps)
      if (s.rfind("stop(", 0) != 0) c.push_back(TransformId::parse(s));
    return c;
  }
};

// Greedy multi-step episode without recovery; the chain is capped at max_len
// by forcing a stop action there.
template <typename T>
EpisodeTrace<T> run_policy(QNetwork<T>& net, const Tensor<T>& image, std::size_t label,
                           const TransformSet& actions, std::size_t max_len) {
  EpisodeTrace<T> trace;
  trace.true_label = label;
  TransformChain chain;
  Tensor<T> current = image;
  std::mt19937_64 unused(0);
  for (;;) {
    const QOutput<T> q = net.q_forward(current);
    const Action a = select_action(q, 0.0, unused, PolicyMode::test, chain.size(), max_len);
    trace.q_values.push_back(static_cast<double>(q.at(a.flat(q.k()))));
    if (a.is_stop()) {
      trace.steps.push_back("stop(" + std::to_string(a.index) + ")");
      trace.predicted = a.index;
      return trace;
    }
    chain.push_back(actions[a.index]);
    trace.steps.push_back(actions[a.index].str());
    current = apply_chain(image, chain, max_len);
  }
}

// Re-applies the trace's chain and checks the recorded stop decision.
template <typename T>
bool replay_trace(QNetwork<T>& net, const Tensor<T>& image, const EpisodeTrace<T>& trace,
                  std::size_t max_len) {
  const TransformChain chain = trace.transforms();
  if (chain.size() > max_len || trace.steps.empty() ||
      trace.steps.back() != "stop(" + std::to_string(trace.predicted) + ")")
    return false;
  const Tensor<T> current = apply_chain(image, chain, max_len);
  std::mt19937_64 unused(0);
  const Action a = select_action(net.q_forward(current), 0.0, unused, PolicyMode::test,
                                 chain.size(), max_len);
  return a == Action::stop(trace.predicted);
}

struct AgentEval {
  double accuracy = 0;
  std::vector<std::size_t> predictions;
  std::vector<TransformChain> chains;
};

template <typename T>
AgentEval evaluate_agent(QNetwork<T>& net, const Dataset<T>& ds, const TransformSet& actions,
                         std::size_t max_len) {
  AgentEval r;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto tr = run_policy(net, ds.images[i], ds.labels[i], actions, max_len);
    r.predictions.push_back(tr.predicted);
    r.chains.push_back(tr.transforms());
  }
  r.accuracy = accuracy_of(r.predictions, ds.labels);
  return r;
}

// Accuracy of the epsilon-greedy behaviour policy, with the training-time
// step budget and recovery in force.
template <typename T>
double evaluate_behaviour(QNetwork<T>& net, const Dataset<T>& ds, const Environment<T>& env,
                          double eps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> predictions;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    State<T> s = env.reset(ds.images[i], ds.labels[i]);
    for (std::size_t step = 0;; ++step) {
      const QOutput<T> q = net.q_forward(s.current);
      Action a = select_action(q, eps, rng, PolicyMode::train, s.chain.size(),
                               env.config().max_len);
      if (!a.is_stop() && step + 1 >= env.config().budget()) a = Action::stop(q.argmax_stop());
      auto r = env.step(s, a);
      if (r.terminal) {
        predictions.push_back(*r.predicted_class);
        break;
      }
      s = std::move(r.next_state);
    }
  }
  return accuracy_of(predictions, ds.labels);
}

// ---------------------------------------------------------------------------
// RL training

template <typename T>
struct TrainedAgent {
  QNetwork<T> net;
  double val_accuracy = 0;
  long best_step = 0;
  long env_steps = 0;
  long episodes = 0;
  std::size_t max_episode_length = 0;
  long forced_stops = 0;
  long recoveries = 0;
};

template <typename T>
TrainedAgent<T> train_rl(const ExperimentConfig& cfg, const Splits<T>& data,
                         std::uint64_t seed, const LogFn& log = {}) {
  const TransformSet actions = TransformSet::of(cfg.rl.actions);
  EnvConfig ecfg = cfg.env;
  ecfg.k = data.train.k;
  const Environment<T> env(ecfg, actions);
  QNetwork<T> net(cfg.arch, data.train.image_shape(), ecfg.k, actions.size(), seed);
  DqnLearner<T> learner(net, cfg.rl.dqn, cfg.rl.adam);
  const EpsilonSchedule sched{cfg.rl.eps_start, cfg.rl.eps_end, cfg.rl.anneal()};
  std::mt19937_64 rng(seed + 17);

  TrainedAgent<T> best;
  best.net = learner.net();
  best.val_accuracy = evaluate_agent(learner.net(), data.val, actions, ecfg.max_len).accuracy;

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  std::optional<State<T>> state;
  std::size_t episode_steps = 0;
  TrainedAgent<T> stats;
  double loss_acc = 0;
  long loss_n = 0;

  for (long step = 0; step < cfg.rl.steps; ++step) {
    if (!state) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      state = env.reset(data.train.images[i], data.train.labels[i]);
      episode_steps = 0;
    }
    const QOutput<T> q = learner.net().q_forward(state->current);
    Action a = select_action(q, sched.at(step), rng, PolicyMode::train, state->chain.size(),
                             ecfg.max_len);
    if (!a.is_stop() && episode_steps + 1 >= ecfg.budget()) {
      a = Action::stop(q.argmax_stop());
      ++stats.forced_stops;
    }
    auto r = env.step(*state, a);
    ++episode_steps;
    stats.recoveries += r.recovered;
    learner.observe({state->current, a, r.reward, r.next_state.current, r.terminal});
    if (r.terminal) {
      ++stats.episodes;
      stats.max_episode_length = std::max(stats.max_episode_length, episode_steps);
      state.reset();
    } else {
      state = std::move(r.next_state);
    }
    if (learner.ready() && step % static_cast<long>(std::max<std::size_t>(1, cfg.rl.train_every)) == 0) {
      loss_acc += learner.learn(rng);
      ++loss_n;
    }
    const bool last = step + 1 == cfg.rl.steps;
    if ((cfg.rl.eval_every > 0 && (step + 1) % cfg.rl.eval_every == 0) || last) {
      const double acc =
          evaluate_agent(learner.net(), data.val, actions, ecfg.max_len).accuracy;
      if (log) {
        std::ostringstream os;
        os << "  step " << step + 1 << " eps " << std::setprecision(3) << sched.at(step)
           << " loss " << (loss_n ? loss_acc / static_cast<double>(loss_n) : 0.0) << " val "
           << acc << " episodes " << stats.episodes;
        log(os.str());
      }
      loss_acc = 0;
      loss_n = 0;
      if (acc > best.val_accuracy) {
        best.net = learner.net();
        best.val_accuracy = acc;
        best.best_step = step + 1;
      }
    }
  }
  best.env_steps = cfg.rl.steps;
  best.episodes = stats.episodes;
  best.max_episode_length = stats.max_episode_length;
  best.forced_stops = stats.forced_stops;
  best.recoveries = stats.recoveries;
  return best;
}

// ---------------------------------------------------------------------------
// CL: classifier fine-tuned from the policy network

// Body of the policy network plus a k-unit head taken from the stop-action
// rows of the advantage branch. V(s) and mean(A) are shared by every stop
// action, so the argmax of this head matches the argmax over stop Q-values.
template <typename T>
Network<T> classifier_from_qnet(const QNetwork<T>& qnet) {
  const auto& body = qnet.body().spec();
  NetworkSpec spec{body.name, body.input, body.layers, "classifier"};
  spec.layers.push_back(LayerSpec::dense(qnet.k()));
  Network<T> net(spec, 0);
  NamedTensors<T> state = qnet.body().state();
  const auto& adv = qnet.advantage_head();
  const std::size_t in = adv.in_features(), k = qnet.k();
  if (adv.units() != qnet.action_count())
    throw ShapeError("cl: advantage head has " + std::to_string(adv.units()) + " units");
  std::vector<T> w(adv.weight().value.vec().begin(),
                   adv.weight().value.vec().begin() + static_cast<std::ptrdiff_t>(k * in));
  std::vector<T> b(adv.bias().value.vec().begin(),
                   adv.bias().value.vec().begin() + static_cast<std::ptrdiff_t>(k));
  const std::string head = std::to_string(body.layers.size()) + ".dense.";
  state.emplace_back(head + "weight", Tensor<T>({k, in}, std::move(w)));
  state.emplace_back(head + "bias", Tensor<T>({k}, std::move(b)));
  net.load_state(state);
  return net;
}

// Runs every image through the test-time policy and keeps the image as it
// was when the agent stopped; cardinality and labels are preserved.
template <typename T>
Dataset<T> preprocess_dataset(QNetwork<T>& qnet, const Dataset<T>& ds,
                              const TransformSet& actions, std::size_t max_len) {
  Dataset<T> out;
  out.k = ds.k;
  out.labels = ds.labels;
  out.images.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto tr = run_policy(qnet, ds.images[i], ds.labels[i], actions, max_len);
    out.images.push_back(apply_chain(ds.images[i], tr.transforms(), max_len));
  }
  return out;
}

template <typename T>
TrainedClassifier<T> train_cl(const ExperimentConfig& cfg, QNetwork<T>& qnet,
                              const Splits<T>& data, std::uint64_t seed,
                              const LogFn& log = {}) {
  if (qnet.k() != data.train.k)
    throw ShapeError("cl: policy network has " + std::to_string(qnet.k()) +
                     " stop actions, dataset has " + std::to_string(data.train.k) + " classes");
  const TransformSet actions = TransformSet::of(cfg.rl.actions);
  if (qnet.n() != actions.size())
    throw ShapeError("cl: policy network transform count does not match rl.actions");
  const Dataset<T> train = preprocess_dataset(qnet, data.train, actions, cfg.env.max_len);
  const Dataset<T> val = preprocess_dataset(qnet, data.val, actions, cfg.env.max_len);
  return fit_classifier(classifier_from_qnet(qnet), train, val, cfg.cl, seed + 2, log);
}

// ---------------------------------------------------------------------------
// Experiment

enum class ModelKind { nn, rl, cl };
inline const char* to_string(ModelKind m) {
  switch (m) {
    case ModelKind::nn: return "NN";
    case ModelKind::rl: return "RL";
    case ModelKind::cl: return "CL";
  }
  return "?";
}

struct RunRecord {
  std::size_t run = 0;
  std::uint64_t seed = 0;
  std::string model;      // NN | RL | CL
  std::string condition;  // clean | distorted
  double accuracy = 0;
};

struct MetricCell {
  std::string model, arch, dataset, condition;
  double mean = 0, std = 0;
  std::size_t runs = 0;
};

struct MetricsReport {
  std::vector<MetricCell> cells;

  const MetricCell* find(const std::string& model, const std::string& condition) const {
    for (const auto& c : cells)
      if (c.model == model && c.condition == condition) return &c;
    return nullptr;
  }
};

// Mean and population standard deviation per (model, condition).
inline MetricsReport aggregate(const std::vector<RunRecord>& records, const std::string& arch,
                               const std::string& dataset) {
  MetricsReport rep;
  for (const char* model : {"NN", "RL", "CL"}) {
    for (const char* cond : {"clean", "distorted"}) {
      std::vector<double> v;
      for (const auto& r : records)
        if (r.model == model && r.condition == cond) v.push_back(r.accuracy);
      if (v.empty()) continue;
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double var = 0;
      for (double x : v) var += (x - mean) * (x - mean);
      var /= static_cast<double>(v.size());
      rep.cells.push_back({model, arch, dataset, cond, mean, std::sqrt(var), v.size()});
    }
  }
  return rep;
}

inline std::string format_table(const MetricsReport& rep) {
  std::ostringstream os;
  std::string arch = rep.cells.empty() ? "" : rep.cells.front().arch;
  std::string dataset = rep.cells.empty() ? "" : rep.cells.front().dataset;
  os << std::left << std::setw(8) << arch << std::setw(22) << dataset + " clean"
     << std::setw(22) << dataset + " distorted" << "\n";
  for (const char* model : {"NN", "RL", "CL"}) {
    os << std::left << std::setw(8) << model;
    for (const char* cond : {"clean", "distorted"}) {
      const MetricCell* c = rep.find(model, cond);
      std::ostringstream cell;
      if (c) cell << std::fixed << std::setprecision(4) << c->mean << " +/- " << c->std;
      else cell << "-";
      os << std::setw(22) << cell.str();
    }
    os << "\n";
  }
  return os.str();
}

template <typename T>
struct RunArtifacts {
  TrainedClassifier<T> nn;
  TrainedAgent<T> rl;
  TrainedClassifier<T> cl;
};

template <typename T>
struct ExperimentResult {
  std::vector<RunRecord> records;
  MetricsReport report;
  std::vector<EpisodeTrace<T>> traces;  // from the first run
  std::vector<RunArtifacts<T>> runs;
  Distorted<T> distorted_test;
  // Per run: among distorted test images the agent classified correctly, the
  // fraction whose agent chain exactly undid the distortion.
  std::vector<double> inversion_rate;
};

// Samples `count` test indices evenly across the set.
inline std::vector<std::size_t> trace_sample(std::size_t n, std::size_t count) {
  std::vector<std::size_t> idx;
  count = std::min(count, n);
  for (std::size_t i = 0; i < count; ++i) idx.push_back(i * n / count);
  return idx;
}

template <typename T>
std::vector<EpisodeTrace<T>> collect_traces(QNetwork<T>& net, const Distorted<T>& test,
                                            const TransformSet& actions, std::size_t max_len,
                                            std::size_t count) {
  std::vector<EpisodeTrace<T>> out;
  for (auto i : trace_sample(test.data.size(), count)) {
    auto tr = run_policy(net, test.data.images[i], test.data.labels[i], actions, max_len);
    tr.image_id = i;
    tr.distortion = test.chains[i];
    out.push_back(std::move(tr));
  }
  return out;
}

template <typename T>
double inversion_rate(const Distorted<T>& test, const AgentEval& eval) {
  std::size_t correct = 0, inverted = 0;
  for (std::size_t i = 0; i < test.data.size(); ++i) {
    if (test.chains[i].empty() || eval.predictions[i] != test.data.labels[i]) continue;
    ++correct;
    TransformChain total = test.chains[i];
    total.insert(total.end(), eval.chains[i].begin(), eval.chains[i].end());
    inverted += CanonicalTransform::of(total).is_identity();
  }
  return correct ? static_cast<double>(inverted) / static_cast<double>(correct) : 0.0;
}

namespace detail {

template <typename T>
struct RunOutput {
  std::vector<RunRecord> records;
  RunArtifacts<T> artifacts;
  double inversion = 0;
  std::vector<EpisodeTrace<T>> traces;
};

}  // namespace detail

// Trains NN, RL and CL per run and evaluates each on the clean and the
// distorted test set. Runs are independent and may execute on several
// threads; results do not depend on the thread count. Stage failures are
// rethrown labelled with the stage.
template <typename T>
ExperimentResult<T> run_experiment(const ExperimentConfig& cfg, const LogFn& log = {}) {
  cfg.validate();
  std::mutex log_mutex;
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(msg);
  };
  auto stage = [&](const std::string& name, auto&& fn) {
    say("[" + name + "]");
    try {
      return fn();
    } catch (const std::exception& e) {
      throw std::runtime_error("stage " + name + " failed: " + e.what());
    }
  };
  const Splits<T> data = stage("load-data", [&] { return load_splits<T>(cfg.data); });
  ExperimentResult<T> res;
  res.distorted_test = distort(data.test, cfg.distortion);
  const TransformSet actions = TransformSet::of(cfg.rl.actions);

  auto one_run = [&](std::size_t run) {
    const std::uint64_t seed = cfg.run_seed(run);
    const std::string tag = "run " + std::to_string(run);
    const LogFn run_log = log ? LogFn([&, tag](const std::string& m) { say(tag + m); })
                              : LogFn();
    detail::RunOutput<T> out;
    auto& art = out.artifacts;
    art.nn = stage(tag + " train-nn", [&] { return train_nn(cfg, data, seed, run_log); });
    art.rl = stage(tag + " train-rl", [&] { return train_rl(cfg, data, seed, run_log); });
    art.cl = stage(tag + " train-cl",
                   [&] { return train_cl(cfg, art.rl.net, data, seed, run_log); });
    stage(tag + " evaluate", [&] {
      const Dataset<T>& dist = res.distorted_test.data;
      auto add = [&](const char* model, const char* cond, double acc) {
        out.records.push_back({run, seed, model, cond, acc});
        std::ostringstream os;
        os << tag << " " << model << " " << cond << " " << acc;
        say(os.str());
      };
      add("NN", "clean", evaluate_classifier(art.nn.net, data.test).accuracy);
      add("NN", "distorted", evaluate_classifier(art.nn.net, dist).accuracy);
      add("RL", "clean", evaluate_agent(art.rl.net, data.test, actions, cfg.env.max_len).accuracy);
      const AgentEval rl_dist = evaluate_agent(art.rl.net, dist, actions, cfg.env.max_len);
      add("RL", "distorted", rl_dist.accuracy);
      add("CL", "clean", evaluate_classifier(art.cl.net, data.test).accuracy);
      add("CL", "distorted", evaluate_classifier(art.cl.net, dist).accuracy);
      out.inversion = inversion_rate(res.distorted_test, rl_dist);
      if (run == 0)
        out.traces = collect_traces(art.rl.net, res.distorted_test, actions, cfg.env.max_len,
                                    cfg.trace_count);
      return 0;
    });
    return out;
  };

  std::vector<std::optional<detail::RunOutput<T>>> outputs(cfg.runs);
  std::vector<std::exception_ptr> errors(cfg.runs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t run; (run = next++) < cfg.runs;) {
      try {
        outputs[run] = one_run(run);
      } catch (...) {
        errors[run] = std::current_exception();
      }
    }
  };
  std::size_t threads = cfg.threads ? cfg.threads : std::thread::hardware_concurrency();
  threads = std::clamp<std::size_t>(threads, 1, cfg.runs);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (auto& o : outputs) {
    res.records.insert(res.records.end(), o->records.begin(), o->records.end());
    res.inversion_rate.push_back(o->inversion);
    if (!o->traces.empty()) res.traces = std::move(o->traces);
    res.runs.push_back(std::move(o->artifacts));
  }
  res.report = aggregate(res.records, to_string(cfg.arch), cfg.data.name);
  return res;
}

}  // namespace preprl
