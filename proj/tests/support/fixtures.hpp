#pragma once

// Shared layer and network fixtures for gradient and agent checks.

#include <algorithm>
#include <functional>
#include <memory>
#include <random>
#include <vector>

#include "support/oracles.hpp"

namespace fixture {

using namespace preprl;

struct LayerCase {
  const char* name;
  std::function<std::unique_ptr<Layer<double>>(std::mt19937_64&)> make;
  std::function<Tensor<double>(std::mt19937_64&)> input;
};

// Inputs avoid the non-differentiable points of relu and max pooling.
inline std::vector<LayerCase> layer_cases() {
  return {
      {"conv2d",
       [](auto& rng) { return std::make_unique<Conv2d<double>>(2, 3, 3, 1, rng); },
       [](auto& rng) { return oracle::random_tensor({2, 5, 4, 2}, rng); }},
      {"maxpool2d", [](auto&) { return std::make_unique<MaxPool2d<double>>(); },
       [](auto& rng) {
         Tensor<double> t({2, 4, 6, 2});
         std::vector<double> v(t.size());
         for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i);
         std::shuffle(v.begin(), v.end(), rng);
         return Tensor<double>(t.shape(), v);
       }},
      {"batchnorm", [](auto&) { return std::make_unique<BatchNorm<double>>(3); },
       [](auto& rng) { return oracle::random_tensor({5, 2, 2, 3}, rng); }},
      {"relu", [](auto&) { return std::make_unique<Relu<double>>(); },
       [](auto& rng) {
         auto t = oracle::random_tensor({3, 7}, rng, 0.05, 1);
         std::bernoulli_distribution neg(0.5);
         for (auto& v : t.data())
           if (neg(rng)) v = -v;
         return t;
       }},
      {"flatten", [](auto&) { return std::make_unique<Flatten<double>>(); },
       [](auto& rng) { return oracle::random_tensor({2, 3, 2, 2}, rng); }},
      {"dense", [](auto& rng) { return std::make_unique<Dense<double>>(6, 4, rng); },
       [](auto& rng) { return oracle::random_tensor({3, 6}, rng); }},
  };
}

// conv, relu, pool, flatten, dense, relu body on 4x4x1 images.
inline QNetwork<double> small_qnet(std::uint64_t seed, std::size_t k = 3, std::size_t n = 4) {
  NetworkSpec body{"small", {4, 4, 1}, {LayerSpec::conv(2, 3, 1), LayerSpec::relu(),
                                        LayerSpec::maxpool(), LayerSpec::flatten(),
                                        LayerSpec::dense(5), LayerSpec::relu()},
                   "features"};
  return QNetwork<double>(body, k, n, seed);
}

inline Tensor<double> random_image(std::mt19937_64& rng) {
  return oracle::random_tensor({4, 4, 1}, rng, 0, 1);
}

}  // namespace fixture
