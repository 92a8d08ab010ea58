// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <utility>

#include "preprl/config.hpp"
#include "preprl/data.hpp"
#include "preprl/environment.hpp"
#include "preprl/pipeline.hpp"
#include "preprl/records.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace preprl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects failures inside a criterion; the first few are kept for the report.
struct Check {
  std::size_t failures = 0;
  std::string first;
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    if (failures++ < 3) first += (first.empty() ? "" : "; ") + what;
  }
  Outcome done(const std::string& summary) const {
    if (failures == 0) return {true, summary};
    return {false, std::to_string(failures) + " failure(s): " + first};
  }
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome reward_balance() {
  Check c;
  for (std::size_t k = 2; k <= 20; ++k) {
    for (std::size_t label = 0; label < k; ++label) {
      // expected reward of a uniform guess is (sum over predictions) / k; the
      // numerator is summed in exact integer arithmetic
      long long numerator = 0;
      for (std::size_t p = 0; p < k; ++p) {
        const double r = stop_reward(p, label, k, RewardMode::balanced);
        const auto ri = static_cast<long long>(r);
        c.expect(static_cast<double>(ri) == r, "non-integral reward at k=" + std::to_string(k));
        numerator += ri;
      }
      c.expect(numerator == 0, "k=" + std::to_string(k) + " label " + std::to_string(label) +
                                   " sums to " + std::to_string(numerator) + "/" +
                                   std::to_string(k));
    }
  }
  return c.done("k=2..20, every label: sum of (k-1) and (k-1)*(-1) is exactly 0");
}

Outcome chain_inverses() {
  Check c;
  std::mt19937_64 rng(2024);
  const auto set = TransformSet::standard();
  std::uniform_int_distribution<std::size_t> side(6, 20);
  std::uniform_real_distribution<float> px(0, 1);
  for (int i = 0; i < 1000; ++i) {
    Tensor<float> img({side(rng), side(rng), 1});
    for (auto& v : img.data()) v = px(rng);
    const auto chain = random_chain(rng, {1, 10}, set);
    TransformChain there_and_back = chain;
    const auto inv = inverse(chain);
    there_and_back.insert(there_and_back.end(), inv.begin(), inv.end());
    c.expect(apply_chain(img, there_and_back, 20) == img,
             "case " + std::to_string(i) + " chain " + chain_str(chain));
  }
  return c.done("1000 random chains (length 1..10, standard set) undone bit-exactly");
}

Outcome gradients() {
  Check c;
  double worst = 0;
  std::size_t instances = 0;
  for (const auto& lc : fixture::layer_cases()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(1000 + seed);
      auto layer = lc.make(rng);
      for (auto* p : layer->params())
        if (p->role != ParamRole::buffer)
          for (auto& v : p->value.data()) v += std::uniform_real_distribution<>(-0.5, 0.5)(rng);
      const double e = oracle::check_layer(*layer, lc.input(rng), rng).worst();
      worst = std::max(worst, e);
      ++instances;
      c.expect(e < 1e-6, std::string(lc.name) + " seed " + std::to_string(seed) + " error " +
                             std::to_string(e));
    }
  }
  // random inputs can land within eps of a relu or max kink; such draws are
  // detected by the oracle and replaced
  std::size_t dueling = 0, kinks = 0;
  std::mt19937_64 rng(2000);
  for (std::uint64_t seed = 0; dueling < 20 && seed < 200; ++seed) {
    auto net = fixture::small_qnet(seed);
    const auto rep =
        oracle::check_qnetwork(net, oracle::random_tensor({3, 4, 4, 1}, rng, 0, 1), rng);
    if (!rep.smooth) {
      ++kinks;
      continue;
    }
    worst = std::max(worst, rep.worst());
    ++instances;
    ++dueling;
    c.expect(rep.worst() < 1e-6,
             "dueling seed " + std::to_string(seed) + " error " + std::to_string(rep.worst()));
  }
  c.expect(dueling == 20, "only " + std::to_string(dueling) + " smooth dueling instances");
  std::ostringstream os;
  os << instances << " instances over 6 layer kinds and the dueling head (" << kinks
     << " kink draws replaced), worst relative error " << std::scientific << worst;
  return c.done(os.str());
}

Outcome batched_matches_loops() {
  Check c;
  std::mt19937_64 rng(4);
  double worst = 0;
  for (int block = 0; block < 10; ++block) {
    auto net = fixture::small_qnet(40 + block);
    auto target = fixture::small_qnet(80 + block);
    std::vector<Transition<double>> ts;
    Tensor<double> batch({100, 4, 4, 1});
    for (int i = 0; i < 100; ++i) {
      ts.push_back({fixture::random_image(rng), Action::transform(i % 4),
                    static_cast<double>(i % 3) - 1.0, fixture::random_image(rng), i % 5 == 0});
      for (std::size_t j = 0; j < 16; ++j) batch[i * 16 + j] = ts.back().state[j];
    }
    std::vector<const Transition<double>*> ptrs;
    for (const auto& t : ts) ptrs.push_back(&t);
    const auto y = bellman_targets<double>(ptrs, target, 0.9);
    const auto qs = net.q_forward_batch(batch);
    for (int i = 0; i < 100; ++i) {
      const double dy = std::abs(y[i] - oracle::bellman_loop(target, ts[i], 0.9));
      worst = std::max(worst, dy);
      c.expect(dy <= 1e-12, "bellman case " + std::to_string(block * 100 + i));
      const auto want = oracle::q_loop(net, ts[i].state);
      const auto got = qs[i].flat();
      c.expect(got.size() == want.size(), "q size");
      for (std::size_t a = 0; a < want.size() && a < got.size(); ++a) {
        const double dq = std::abs(got[a] - want[a]);
        worst = std::max(worst, dq);
        c.expect(dq <= 1e-12, "q_forward case " + std::to_string(block * 100 + i));
      }
    }
  }
  std::ostringstream os;
  os << "1000 transitions and 1000 images, worst abs difference " << std::scientific << worst;
  return c.done(os.str());
}

Outcome environment_properties() {
  Check c;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> px(0, 1);
  std::size_t recoveries = 0, stops = 0, transforms = 0;
  for (std::size_t k = 2; k <= 10; ++k) {
    for (const auto& set : {TransformSet::standard(), TransformSet::extended()}) {
      Environment<float> env({k, 10}, set);
      std::uniform_int_distribution<std::size_t> pick(0, env.action_count() - 1);
      // mostly transforms so that chains regularly reach max_len
      std::bernoulli_distribution stop_now(0.02);
      for (int episode = 0; episode < 40; ++episode) {
        Tensor<float> img({8, 8, 1});
        for (auto& v : img.data()) v = px(rng);
        const auto start = env.reset(img, episode % k);
        auto s = start;
        for (int t = 0; t < 300; ++t) {
          const Action a = stop_now(rng) ? Action::stop(pick(rng) % k)
                                         : Action::transform(pick(rng) % set.size());
          const auto r = env.step(s, a);
          c.expect(r.next_state.chain.size() <= 10, "chain longer than max_len");
          if (a.is_stop()) {
            ++stops;
            c.expect(r.terminal, "stop not terminal");
            const double want = a.index == start.label ? static_cast<double>(k) - 1 : -1.0;
            c.expect(r.reward == want, "terminal reward " + std::to_string(r.reward));
            break;
          }
          ++transforms;
          c.expect(r.reward == 0 && !r.terminal, "transform reward " + std::to_string(r.reward));
          if (s.chain.size() == 10) {
            c.expect(r.recovered, "no recovery at max_len");
            c.expect(r.next_state == start, "recovered state differs from reset state");
            ++recoveries;
          } else {
            c.expect(!r.recovered, "early recovery");
            c.expect(r.next_state.current == apply_chain(img, r.next_state.chain),
                     "current image differs from chain applied to original");
          }
          s = r.next_state;
        }
      }
    }
  }
  if (recoveries == 0) c.expect(false, "max_len never reached");
  return c.done(std::to_string(recoveries) + " recoveries equal to reset state, " +
                std::to_string(transforms) + " zero-reward transforms, " + std::to_string(stops) +
                " terminal rewards in {k-1, -1}");
}

Outcome idx_round_trip() {
  Check c;
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int i = 0; i < 200; ++i) {
    const std::uint32_t n = 1 + i % 17, h = 1 + i % 9, w = 1 + i % 13;
    std::vector<std::uint8_t> px(std::size_t{n} * h * w), lb(n);
    for (auto& b : px) b = static_cast<std::uint8_t>(byte(rng));
    for (auto& b : lb) b = static_cast<std::uint8_t>(byte(rng) % 10);
    const auto img_bytes = oracle::idx_bytes(kIdxImagesMagic, {n, h, w}, px);
    const auto lbl_bytes = oracle::idx_bytes(kIdxLabelsMagic, {n}, lb);
    const auto img = decode_idx(img_bytes, "img", kIdxImagesMagic);
    const auto lbl = decode_idx(lbl_bytes, "lbl", kIdxLabelsMagic);
    c.expect(encode_idx(img) == img_bytes && encode_idx(lbl) == lbl_bytes,
             "raw round trip " + std::to_string(i));
    // through the float dataset and back
    const auto ds = dataset_from_idx<float>(img, lbl, 10);
    const auto [img2, lbl2] = dataset_to_idx(ds);
    c.expect(encode_idx(img2) == img_bytes && encode_idx(lbl2) == lbl_bytes,
             "dataset round trip " + std::to_string(i));
  }

  auto rejects = [&](const std::string& name, const std::function<void()>& fn,
                     const std::string& needle) {
    try {
      fn();
      c.expect(false, name + " accepted");
    } catch (const FormatError& e) {
      c.expect(std::string(e.what()).find(needle) != std::string::npos,
               name + " diagnostic lacks '" + needle + "': " + e.what());
    }
  };
  const auto good = oracle::idx_bytes(kIdxImagesMagic, {3, 2, 2}, std::vector<std::uint8_t>(12, 9));
  auto bad_magic = good;
  bad_magic[3] = 0x05;
  rejects("bad magic", [&] { decode_idx(bad_magic, "f", kIdxImagesMagic); }, "bad magic");
  rejects("truncated header", [&] { decode_idx(good.substr(0, 7), "f", kIdxImagesMagic); },
          "offset");
  rejects("truncated payload",
          [&] { decode_idx(good.substr(0, good.size() - 3), "f", kIdxImagesMagic); },
          "truncated");
  rejects("count mismatch",
          [&] {
            dataset_from_idx<float>(
                decode_idx(good, "img", kIdxImagesMagic),
                decode_idx(oracle::idx_bytes(kIdxLabelsMagic, {2}, {1, 2}), "lbl",
                           kIdxLabelsMagic));
          },
          "count mismatch");
  return c.done("200 files byte-exact raw and via dataset; bad magic, truncation and count "
                "mismatch rejected with diagnostics");
}

// ---------------------------------------------------------------------------
// Criteria backed by the full experiment.

struct Experiment {
  ExperimentConfig cfg;
  ExperimentResult<float> res;
  double seconds = 0;
};

double mean_of(const std::vector<RunRecord>& records, const std::string& model,
               const std::string& condition) {
  double s = 0;
  std::size_t n = 0;
  for (const auto& r : records)
    if (r.model == model && r.condition == condition) s += r.accuracy, ++n;
  return n ? s / static_cast<double>(n) : 0.0;
}

Outcome rl_beats_nn_distorted(const Experiment& e) {
  Check c;
  const double rl = mean_of(e.res.records, "RL", "distorted");
  const double nn = mean_of(e.res.records, "NN", "distorted");
  c.expect(e.cfg.runs >= 3, "fewer than 3 runs");
  c.expect(rl >= nn + 0.05, "RL " + fmt(rl) + " < NN " + fmt(nn) + " + 0.05");
  c.expect(e.seconds < 1800, "took " + fmt(e.seconds, 0) + " s");
  return c.done("RL distorted " + fmt(rl) + " vs NN distorted " + fmt(nn) + " over " +
                std::to_string(e.cfg.runs) + " runs in " + fmt(e.seconds, 0) + " s");
}

Outcome rl_matches_nn_clean(const Experiment& e) {
  Check c;
  const double rl = mean_of(e.res.records, "RL", "clean");
  const double nn = mean_of(e.res.records, "NN", "clean");
  c.expect(std::abs(rl - nn) <= 0.05, "|" + fmt(rl) + " - " + fmt(nn) + "| > 0.05");
  return c.done("RL clean " + fmt(rl) + " vs NN clean " + fmt(nn));
}

Outcome zero_step_cl(Experiment& e, const Splits<float>& data) {
  Check c;
  const TransformSet actions = TransformSet::of(e.cfg.rl.actions);
  const std::size_t max_len = e.cfg.env.max_len;
  std::size_t checked = 0;
  for (std::size_t run = 0; run < e.res.runs.size(); ++run) {
    auto& qnet = e.res.runs[run].rl.net;
    Network<float> cl = classifier_from_qnet(qnet);
    for (const Dataset<float>* src : {&data.test, &std::as_const(e.res.distorted_test.data)}) {
      const Dataset<float> pre = preprocess_dataset(qnet, *src, actions, max_len);
      c.expect(pre.size() == src->size() && pre.labels == src->labels && pre.k == src->k,
               "preprocess changed cardinality or labels");
      const auto cl_pred = evaluate_classifier(cl, pre).predictions;
      const auto rl = evaluate_agent(qnet, *src, actions, max_len);
      for (std::size_t i = 0; i < pre.size(); ++i) {
        const std::size_t stop = qnet.q_forward(pre.images[i]).argmax_stop();
        c.expect(cl_pred[i] == stop, "run " + std::to_string(run) + " image " +
                                         std::to_string(i) + ": CL " +
                                         std::to_string(cl_pred[i]) + " vs stop argmax " +
                                         std::to_string(stop));
        c.expect(rl.predictions[i] == stop, "agent decision differs from stop argmax");
        ++checked;
      }
    }
  }
  return c.done(std::to_string(checked) +
                " clean and distorted test images across all runs, cardinality preserved");
}

Outcome traces_replay(Experiment& e) {
  Check c;
  auto& qnet = e.res.runs.at(0).rl.net;
  const TransformSet actions = TransformSet::of(e.cfg.rl.actions);
  const std::size_t max_len = e.cfg.env.max_len;
  const auto& test = e.res.distorted_test;
  c.expect(e.res.traces.size() == 100, std::to_string(e.res.traces.size()) + " traces, want 100");
  std::size_t correct = 0, inverted = 0;
  for (const auto& original : e.res.traces) {
    // replay from the serialized record, as a consumer of traces.jsonl would
    const auto tr = trace_from_json<float>(json::parse(trace_to_json(original).dump()));
    const auto& img = test.data.images.at(tr.image_id);
    c.expect(tr.transforms().size() <= max_len, "trace longer than max_len");
    c.expect(replay_trace(qnet, img, tr, max_len),
             "trace " + std::to_string(tr.image_id) + " does not replay to its stop");
    const auto again = run_policy(qnet, img, tr.true_label, actions, max_len);
    c.expect(again.steps == tr.steps, "trace " + std::to_string(tr.image_id) + " not reproduced");
    c.expect(tr.distortion == test.chains.at(tr.image_id), "distortion not recorded");
    if (tr.distortion.empty() || tr.predicted != tr.true_label) continue;
    ++correct;
    TransformChain total = tr.distortion;
    const auto undo = tr.transforms();
    total.insert(total.end(), undo.begin(), undo.end());
    inverted += CanonicalTransform::of(total).is_identity();
  }
  const double rate = correct ? static_cast<double>(inverted) / static_cast<double>(correct) : 0;
  c.expect(correct > 0, "no distorted trace classified correctly");
  c.expect(rate >= 0.5, "trace inversion rate " + fmt(rate) + " < 0.5");
  std::string runs;
  for (double r : e.res.inversion_rate) {
    runs += (runs.empty() ? "" : ", ") + fmt(r, 3);
    c.expect(r >= 0.5, "run inversion rate " + fmt(r) + " < 0.5");
  }
  return c.done(std::to_string(e.res.traces.size()) + " traces replayed; " +
                std::to_string(inverted) + "/" + std::to_string(correct) +
                " distorted-then-correct traces exactly inverted; per-run rates " + runs);
}

}  // namespace

int main() {
  std::size_t failed = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    const double s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << name << " - "
              << o.detail << " [" << fmt(s, 1) << " s]" << std::endl;
  };

  report(1, "reward balance", reward_balance);
  report(2, "chain inverses", chain_inverses);
  report(3, "gradient checks", gradients);
  report(4, "batched vs scalar", batched_matches_loops);
  report(5, "environment properties", environment_properties);

  std::optional<Experiment> exp;
  std::optional<Splits<float>> data;
  std::string exp_error;
  try {
    Experiment e;
    apply_config_text(e.cfg, detail::read_file(PREPRL_ACCEPTANCE_CONFIG), PREPRL_ACCEPTANCE_CONFIG);
    e.cfg.trace_count = 100;
    std::cout << "running experiment from " << PREPRL_ACCEPTANCE_CONFIG << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    e.res = run_experiment<float>(e.cfg, [](const std::string& m) {
      if (m.find(" clean ") != std::string::npos || m.find(" distorted ") != std::string::npos)
        std::cout << "  " << m << std::endl;
    });
    e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    data = load_splits<float>(e.cfg.data);
    std::cout << format_table(e.res.report) << std::flush;
    exp = std::move(e);
  } catch (const std::exception& ex) {
    exp_error = ex.what();
  }
  auto needs_exp = [&](auto fn) {
    return [&, fn]() -> Outcome {
      if (!exp) return {false, "experiment failed: " + exp_error};
      return fn();
    };
  };
  report(6, "RL beats NN on distorted",
         needs_exp([&] { return rl_beats_nn_distorted(*exp); }));
  report(7, "RL matches NN on clean", needs_exp([&] { return rl_matches_nn_clean(*exp); }));
  report(8, "zero-step CL equals stop argmax",
         needs_exp([&] { return zero_step_cl(*exp, *data); }));
  report(9, "trace replay and inversion", needs_exp([&] { return traces_replay(*exp); }));
  report(10, "IDX round trip", idx_round_trip);

  std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed")
            << std::endl;
  return failed ? 1 : 0;
}
