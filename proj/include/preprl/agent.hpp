#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "preprl/environment.hpp"
#include "preprl/loss.hpp"
#include "preprl/network.hpp"
#include "preprl/optim.hpp"

namespace preprl {

// Q-values split into the k stop actions and the n transformation actions.
template <typename T>
struct QOutput {
  std::vector<T> stop_q;
  std::vector<T> transform_q;

  std::size_t k() const { return stop_q.size(); }
  std::size_t size() const { return stop_q.size() + transform_q.size(); }
  T at(std::size_t flat) const {
    return flat < stop_q.size() ? stop_q[flat] : transform_q[flat - stop_q.size()];
  }
  std::vector<T> flat() const {
    std::vector<T> out = stop_q;
    out.insert(out.end(), transform_q.begin(), transform_q.end());
    return out;
  }
  std::size_t argmax_all() const {
    std::size_t best = 0;
    for (std::size_t a = 1; a < size(); ++a)
      if (at(a) > at(best)) best = a;
    return best;
  }
  std::size_t argmax_stop() const {
    return argmax(std::span<const T>(stop_q));
  }
  T max() const { return at(argmax_all()); }

  static QOutput from_flat(std::span<const T> q, std::size_t k) {
    return {std::vector<T>(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(k)),
            std::vector<T>(q.begin() + static_cast<std::ptrdiff_t>(k), q.end())};
  }
};

// Batched dueling aggregation Q = V + (A - mean(A)); value is N x 1 and
// advantage N x A.
template <typename T>
Tensor<T> dueling_combine(const Tensor<T>& value, const Tensor<T>& advantage) {
  const std::size_t n = advantage.dim(0), na = advantage.dim(1);
  if (value.size() != n) throw ShapeError("dueling: value/advantage batch mismatch");
  Tensor<T> q({n, na});
  for (std::size_t b = 0; b < n; ++b) {
    T mean = 0;
    for (std::size_t a = 0; a < na; ++a) mean += advantage[b * na + a];
    mean /= static_cast<T>(na);
    for (std::size_t a = 0; a < na; ++a)
      q[b * na + a] = value[b] + (advantage[b * na + a] - mean);
  }
  return q;
}

// Policy network: a preset body shared with the classifier, followed by a
// scalar value branch and a (k + n)-wide advantage branch.
template <typename T>
class QNetwork {
 public:
  QNetwork() = default;

  QNetwork(NetworkSpec body, std::size_t k, std::size_t n, std::uint64_t seed)
      : body_(std::move(body), seed), k_(k), n_(n) {
    if (k < 1 || k + n < 2) throw ShapeError("qnetwork: needs k + n >= 2 actions");
    const Shape& feat = body_.output_shape();
    if (feat.size() != 1) {
      throw ShapeError("qnetwork: body must end in flat features, got " +
                       shape_str(feat));
    }
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    value_ = Dense<T>(feat[0], 1, rng);
    advantage_ = Dense<T>(feat[0], k + n, rng);
  }

  QNetwork(ArchPreset arch, Shape input, std::size_t k, std::size_t n,
           std::uint64_t seed)
      : QNetwork(body_spec(arch, std::move(input)), k, n, seed) {}

  std::size_t k() const { return k_; }
  std::size_t n() const { return n_; }
  std::size_t action_count() const { return k_ + n_; }
  const Network<T>& body() const { return body_; }
  Network<T>& body() { return body_; }
  Dense<T>& value_head() { return value_; }
  Dense<T>& advantage_head() { return advantage_; }
  const Dense<T>& value_head() const { return value_; }
  const Dense<T>& advantage_head() const { return advantage_; }
  const Shape& input_shape() const { return body_.input_shape(); }

  // Returns N x (k + n) Q-values; caches the branches for backward.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode = Mode::inference) {
    const Tensor<T> feat = body_.forward(batch, mode);
    last_value_ = value_.forward(feat, mode);
    last_advantage_ = advantage_.forward(feat, mode);
    return dueling_combine(last_value_, last_advantage_);
  }

  const Tensor<T>& last_value() const { return last_value_; }
  const Tensor<T>& last_advantage() const { return last_advantage_; }

  QOutput<T> q_forward(const Tensor<T>& image) {
    const Tensor<T> q = forward(as_batch(image), Mode::inference);
    return QOutput<T>::from_flat(q.data(), k_);
  }

  std::vector<QOutput<T>> q_forward_batch(const Tensor<T>& batch) {
    const Tensor<T> q = forward(batch, Mode::inference);
    std::vector<QOutput<T>> out;
    const std::size_t na = action_count();
    for (std::size_t b = 0; b < q.dim(0); ++b)
      out.push_back(QOutput<T>::from_flat(q.data().subspan(b * na, na), k_));
    return out;
  }

  // `dq` is N x (k + n); returns the gradient with respect to the input batch.
  Tensor<T> backward(const Tensor<T>& dq) {
    const std::size_t n = dq.dim(0), na = action_count();
    Tensor<T> dv({n, 1});
    Tensor<T> da({n, na});
    for (std::size_t b = 0; b < n; ++b) {
      T sum = 0;
      for (std::size_t a = 0; a < na; ++a) sum += dq[b * na + a];
      dv[b] = sum;
      const T mean = sum / static_cast<T>(na);
      for (std::size_t a = 0; a < na; ++a) da[b * na + a] = dq[b * na + a] - mean;
    }
    Tensor<T> df = value_.backward(dv);
    const Tensor<T> dfa = advantage_.backward(da);
    for (std::size_t i = 0; i < df.size(); ++i) df[i] += dfa[i];
    return body_.backward(df);
  }

  std::vector<Param<T>*> params() {
    auto out = body_.params();
    for (auto* p : value_.params()) out.push_back(p);
    for (auto* p : advantage_.params()) out.push_back(p);
    return out;
  }

  NamedTensors<T> state() const {
    NamedTensors<T> out;
    for (auto& [name, t] : body_.state()) out.emplace_back("body." + name, t);
    for (const Dense<T>* head : {&value_, &advantage_}) {
      const std::string prefix = head == &value_ ? "value." : "advantage.";
      out.emplace_back(prefix + head->weight().name, head->weight().value);
      out.emplace_back(prefix + head->bias().name, head->bias().value);
    }
    return out;
  }

  void load_state(const NamedTensors<T>& state) {
    const std::size_t nb = body_.params().size();
    if (state.size() != nb + 4) {
      throw FormatError("qnetwork: checkpoint has " + std::to_string(state.size()) +
                        " tensors, expected " + std::to_string(nb + 4));
    }
    NamedTensors<T> body_state;
    for (std::size_t i = 0; i < nb; ++i) {
      const auto& [name, t] = state[i];
      if (name.rfind("body.", 0) != 0) throw FormatError("qnetwork: unexpected '" + name + "'");
      body_state.emplace_back(name.substr(5), t);
    }
    auto heads = value_.params();
    for (auto* p : advantage_.params()) heads.push_back(p);
    const char* prefix[] = {"value.", "value.", "advantage.", "advantage."};
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& [name, t] = state[nb + i];
      if (name != prefix[i] + heads[i]->name || t.shape() != heads[i]->value.shape()) {
        throw FormatError("qnetwork: head tensor '" + name + "' " + shape_str(t.shape()) +
                          " does not match");
      }
    }
    body_.load_state(body_state);
    for (std::size_t i = 0; i < 4; ++i) heads[i]->value = state[nb + i].second;
  }

 private:
  Network<T> body_;
  Dense<T> value_;
  Dense<T> advantage_;
  std::size_t k_ = 0, n_ = 0;
  Tensor<T> last_value_, last_advantage_;
};

// Copies the online parameters into the target network bit-exactly.
template <typename T>
void sync_target(const QNetwork<T>& net, QNetwork<T>& target) {
  if (net.body().spec() != target.body().spec() || net.k() != target.k() ||
      net.n() != target.n()) {
    throw ShapeError("sync_target: network specs differ");
  }
  target.load_state(net.state());
}

enum class PolicyMode { train, test };

// Epsilon-greedy over all k + n actions in training. At test time the choice
// is greedy, and restricted to stop actions once the chain is at max_len.
template <typename T, typename Rng>
Action select_action(const QOutput<T>& q, double eps, Rng& rng, PolicyMode mode,
                     std::size_t chain_len, std::size_t max_len) {
  const std::size_t k = q.k();
  if (mode == PolicyMode::test) {
    if (chain_len >= max_len) return Action::stop(q.argmax_stop());
    return Action::from_flat(q.argmax_all(), k);
  }
  if (eps > 0) {
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (coin(rng) < eps) {
      std::uniform_int_distribution<std::size_t> pick(0, q.size() - 1);
      return Action::from_flat(pick(rng), k);
    }
  }
  return Action::from_flat(q.argmax_all(), k);
}

// Linear anneal from `start` to `end` over `anneal_steps`, then flat.
struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.1;
  long anneal_steps = 1;

  double at(long step) const {
    if (step <= 0) return start;
    if (anneal_steps <= 0 || step >= anneal_steps) return end;
    const double f = static_cast<double>(step) / static_cast<double>(anneal_steps);
    return start + (end - start) * f;
  }
};

inline double epsilon_at(const EpsilonSchedule& sched, long step) {
  return sched.at(step);
}

template <typename T>
struct Transition {
  Tensor<T> state;
  Action action;
  double reward = 0;
  Tensor<T> next_state;
  bool terminal = false;
};

// Fixed-capacity ring buffer; the oldest transition is evicted first.
template <typename T>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay: capacity must be positive");
    items_.reserve(std::min<std::size_t>(capacity, 4096));
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t total_pushed() const { return pushed_; }

  void push(Transition<T> t) {
    if (items_.size() < capacity_) {
      items_.push_back(std::move(t));
    } else {
      items_[head_] = std::move(t);
      head_ = (head_ + 1) % capacity_;
    }
    ++pushed_;
  }

  // Logical index 0 is the oldest retained transition.
  const Transition<T>& operator[](std::size_t i) const {
    return items_[(head_ + i) % items_.size()];
  }
  const Transition<T>& newest() const { return (*this)[items_.size() - 1]; }

  template <typename Rng>
  std::vector<const Transition<T>*> sample(std::size_t batch, Rng& rng) const {
    if (items_.size() < batch || batch == 0) {
      throw std::length_error("replay: " + std::to_string(items_.size()) +
                              " transitions, batch of " + std::to_string(batch) +
                              " requested");
    }
    std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
    std::vector<const Transition<T>*> out(batch);
    for (auto& p : out) p = &items_[pick(rng)];
    return out;
  }

 private:
  std::size_t capacity_;
  std::vector<Transition<T>> items_;
  std::size_t head_ = 0;
  std::size_t pushed_ = 0;
};

template <typename T>
void check_finite_q(const Tensor<T>& q, const char* what) {
  if (!q.all_finite()) throw NumericError(std::string(what) + ": non-finite Q-value");
}

// y = r for terminal transitions, r + gamma * max_a' Q_target(s', a') otherwise.
template <typename T>
std::vector<double> bellman_targets(std::span<const Transition<T>* const> batch,
                                    QNetwork<T>& target_net, double gamma) {
  if (gamma < 0 || gamma >= 1) throw std::invalid_argument("bellman: gamma outside [0, 1)");
  std::vector<double> y(batch.size());
  std::vector<const Tensor<T>*> next;
  std::vector<std::size_t> slot;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    y[i] = batch[i]->reward;
    if (!batch[i]->terminal) {
      next.push_back(&batch[i]->next_state);
      slot.push_back(i);
    }
  }
  if (!next.empty()) {
    const Tensor<T> q =
        target_net.forward(stack<T>(std::span<const Tensor<T>* const>(next)), Mode::inference);
    check_finite_q(q, "bellman target");
    const std::size_t na = target_net.action_count();
    for (std::size_t j = 0; j < next.size(); ++j) {
      T best = q[j * na];
      for (std::size_t a = 1; a < na; ++a) best = std::max(best, q[j * na + a]);
      y[slot[j]] += gamma * static_cast<double>(best);
    }
  }
  return y;
}

template <typename T>
double bellman_target(const Transition<T>& t, QNetwork<T>& target_net, double gamma) {
  const Transition<T>* p = &t;
  return bellman_targets<T>(std::span<const Transition<T>* const>(&p, 1), target_net, gamma)[0];
}

// One gradient step on the mean squared Bellman error over `batch`; only the
// taken action's Q-value receives gradient.
template <typename T>
double train_on_batch(QNetwork<T>& net, QNetwork<T>& target_net,
                      std::span<const Transition<T>* const> batch, double gamma,
                      Adam<T>& opt) {
  const std::vector<double> y = bellman_targets<T>(batch, target_net, gamma);
  std::vector<const Tensor<T>*> states;
  for (const auto* t : batch) states.push_back(&t->state);
  const Tensor<T> q =
      net.forward(stack<T>(std::span<const Tensor<T>* const>(states)), Mode::training);
  check_finite_q(q, "train step");
  const std::size_t na = net.action_count(), b = batch.size();
  Tensor<T> dq({b, na});
  double loss = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t a = batch[i]->action.flat(net.k());
    const double err = static_cast<double>(q[i * na + a]) - y[i];
    loss += err * err;
    dq[i * na + a] = static_cast<T>(2.0 * err / static_cast<double>(b));
  }
  net.backward(dq);
  opt.step(net.params());
  return loss / static_cast<double>(b);
}

template <typename T, typename Rng>
double train_step(QNetwork<T>& net, QNetwork<T>& target_net, const ReplayBuffer<T>& buffer,
                  std::size_t batch_size, double gamma, Adam<T>& opt, Rng& rng) {
  const auto batch = buffer.sample(batch_size, rng);
  return train_on_batch<T>(net, target_net, std::span<const Transition<T>* const>(batch),
                           gamma, opt);
}

struct DqnConfig {
  double gamma = 0.99;
  std::size_t batch_size = 32;
  std::size_t buffer_capacity = 50000;
  std::size_t target_sync = 500;  // 0 disables the target network
  bool replay = true;             // false trains on the newest transition only
  std::size_t warmup = 0;         // 0 means batch_size
};

// Online network, target network, optimizer and replay buffer owned by one
// training loop.
template <typename T>
class DqnLearner {
 public:
  DqnLearner(QNetwork<T> net, DqnConfig cfg, AdamConfig adam)
      : cfg_(cfg), net_(std::move(net)), target_(net_), opt_(adam),
        buffer_(cfg.replay ? cfg.buffer_capacity : 1) {}

  QNetwork<T>& net() { return net_; }
  QNetwork<T>& target() { return cfg_.target_sync ? target_ : net_; }
  ReplayBuffer<T>& buffer() { return buffer_; }
  const DqnConfig& config() const { return cfg_; }
  long train_steps() const { return steps_; }
  Adam<T>& optimizer() { return opt_; }

  void observe(Transition<T> t) { buffer_.push(std::move(t)); }

  bool ready() const {
    if (!cfg_.replay) return buffer_.size() >= 1;
    const std::size_t warm = cfg_.warmup ? cfg_.warmup : cfg_.batch_size;
    return buffer_.size() >= std::max(warm, cfg_.batch_size);
  }

  // Returns the loss; syncs the target every `target_sync` train steps.
  template <typename Rng>
  double learn(Rng& rng) {
    double loss;
    if (cfg_.replay) {
      loss = train_step(net_, target(), buffer_, cfg_.batch_size, cfg_.gamma, opt_, rng);
    } else {
      const Transition<T>* p = &buffer_.newest();
      loss = train_on_batch<T>(net_, target(), std::span<const Transition<T>* const>(&p, 1),
                               cfg_.gamma, opt_);
    }
    ++steps_;
    if (cfg_.target_sync && steps_ % static_cast<long>(cfg_.target_sync) == 0)
      sync_target(net_, target_);
    return loss;
  }

 private:
  DqnConfig cfg_;
  QNetwork<T> net_;
  QNetwork<T> target_;
  Adam<T> opt_;
  ReplayBuffer<T> buffer_;
  long steps_ = 0;
};

}  // namespace preprl
