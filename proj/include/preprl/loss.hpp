#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "preprl/tensor.hpp"

namespace preprl {

template <typename T>
struct LossResult {
  T loss;
  std::vector<T> grad;  // dLoss/dLogits
};

// Numerically stable log-softmax cross-entropy for one logit vector.
template <typename T>
LossResult<T> softmax_cross_entropy(std::span<const T> logits, std::size_t label) {
  if (logits.empty()) throw ShapeError("softmax_cross_entropy: empty logits");
  if (label >= logits.size()) {
    throw std::out_of_range("softmax_cross_entropy: label " +
                            std::to_string(label) + " outside [0, " +
                            std::to_string(logits.size()) + ")");
  }
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum = 0;
  std::vector<T> p(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  const T loss = -(logits[label] - mx - std::log(sum));
  p[label] -= T(1);
  return {std::max(loss, T(0)), std::move(p)};
}

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  std::vector<T> p(logits.size());
  T sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

// Lowest index wins ties.
template <typename T>
std::size_t argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace preprl
