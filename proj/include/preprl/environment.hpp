#pragma once

#include <optional>
#include <string>

#include "preprl/tensor.hpp"
#include "preprl/transforms.hpp"

namespace preprl {

// Flat action index a in [0, k + n): a < k is Stop(a), otherwise
// Transform(a - k).
struct Action {
  enum class Kind { stop, transform };
  Kind kind = Kind::stop;
  std::size_t index = 0;

  static Action stop(std::size_t cls) { return {Kind::stop, cls}; }
  static Action transform(std::size_t j) { return {Kind::transform, j}; }
  static Action from_flat(std::size_t a, std::size_t k) {
    return a < k ? stop(a) : transform(a - k);
  }

  bool is_stop() const { return kind == Kind::stop; }
  std::size_t flat(std::size_t k) const { return is_stop() ? index : k + index; }

  friend bool operator==(const Action&, const Action&) = default;
};

enum class RewardMode { balanced, simple };

inline RewardMode parse_reward_mode(const std::string& s) {
  if (s == "balanced") return RewardMode::balanced;
  if (s == "simple") return RewardMode::simple;
  throw std::invalid_argument("unknown reward mode '" + s + "'");
}

inline const char* to_string(RewardMode m) {
  return m == RewardMode::balanced ? "balanced" : "simple";
}

struct EnvConfig {
  std::size_t k = 10;
  std::size_t max_len = 10;
  RewardMode reward_mode = RewardMode::balanced;
  std::size_t step_budget = 0;  // 0 means 3 * max_len

  std::size_t budget() const { return step_budget ? step_budget : 3 * max_len; }

  void validate() const {
    if (k < 2) throw std::invalid_argument("env: k must be >= 2");
    if (max_len < 1) throw std::invalid_argument("env: max_len must be >= 1");
  }
};

// Terminal reward for predicting `predicted` when the truth is `label`.
inline double stop_reward(std::size_t predicted, std::size_t label,
                          std::size_t k, RewardMode mode) {
  if (predicted == label)
    return mode == RewardMode::balanced ? static_cast<double>(k) - 1.0 : 1.0;
  return -1.0;
}

template <typename T>
struct State {
  Tensor<T> original;
  TransformChain chain;
  Tensor<T> current;
  std::size_t label = 0;

  friend bool operator==(const State&, const State&) = default;
};

template <typename T>
struct StepResult {
  State<T> next_state;
  double reward = 0;
  bool terminal = false;
  bool recovered = false;
  std::optional<std::size_t> predicted_class;
};

// Applies transformation actions by replaying the chain against the original
// image; a transformation requested at max_len restores the original instead.
template <typename T>
class Environment {
 public:
  Environment(EnvConfig cfg, TransformSet actions)
      : cfg_(cfg), actions_(std::move(actions)) {
    cfg_.validate();
  }

  const EnvConfig& config() const { return cfg_; }
  const TransformSet& actions() const { return actions_; }
  std::size_t action_count() const { return cfg_.k + actions_.size(); }

  State<T> reset(const Tensor<T>& image, std::size_t label) const {
    return State<T>{image, {}, image, label};
  }

  StepResult<T> step(const State<T>& state, const Action& action) const {
    StepResult<T> r;
    r.next_state = state;
    if (action.is_stop()) {
      if (action.index >= cfg_.k) {
        throw std::out_of_range("env: stop class " + std::to_string(action.index) +
                                " outside [0, " + std::to_string(cfg_.k) + ")");
      }
      r.terminal = true;
      r.predicted_class = action.index;
      r.reward = stop_reward(action.index, state.label, cfg_.k, cfg_.reward_mode);
      return r;
    }
    if (action.index >= actions_.size()) {
      throw std::out_of_range("env: transform " + std::to_string(action.index) +
                              " outside [0, " + std::to_string(actions_.size()) + ")");
    }
    if (state.chain.size() >= cfg_.max_len) {
      r.next_state.chain.clear();
      r.next_state.current = state.original;
      r.recovered = true;
    } else {
      r.next_state.chain.push_back(actions_[action.index]);
      r.next_state.current =
          apply_chain(state.original, r.next_state.chain, cfg_.max_len);
    }
    return r;
  }

 private:
  EnvConfig cfg_;
  TransformSet actions_;
};

}  // namespace preprl
