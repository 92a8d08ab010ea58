#pragma once

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "preprl/layers.hpp"
#include "preprl/tensor.hpp"

namespace preprl {

// Three CNN presets of increasing depth. Every convolution pads by one so the
// presets compose on any input of at least 8x8.
enum class ArchPreset { arch1, arch2, arch3 };

inline const char* to_string(ArchPreset a) {
  switch (a) {
    case ArchPreset::arch1: return "arch1";
    case ArchPreset::arch2: return "arch2";
    case ArchPreset::arch3: return "arch3";
  }
  return "?";
}

inline ArchPreset parse_arch(const std::string& s) {
  if (s == "arch1" || s == "Arch1") return ArchPreset::arch1;
  if (s == "arch2" || s == "Arch2") return ArchPreset::arch2;
  if (s == "arch3" || s == "Arch3") return ArchPreset::arch3;
  throw std::invalid_argument("unknown architecture preset '" + s + "'");
}

// Feature extractor of a preset: everything but the output layer.
inline std::vector<LayerSpec> preset_body(ArchPreset arch) {
  using L = LayerSpec;
  switch (arch) {
    case ArchPreset::arch1:
      return {L::conv(8, 3, 1), L::relu(), L::maxpool(), L::flatten()};
    case ArchPreset::arch2:
      return {L::conv(16, 3, 1), L::relu(),    L::maxpool(),
              L::conv(32, 3, 1), L::relu(),    L::maxpool(),
              L::flatten(),      L::dense(128), L::relu()};
    case ArchPreset::arch3:
      return {L::conv(16, 3, 1), L::batchnorm(), L::relu(), L::maxpool(),
              L::conv(32, 3, 1), L::batchnorm(), L::relu(), L::maxpool(),
              L::conv(64, 3, 1), L::batchnorm(), L::relu(), L::maxpool(),
              L::flatten(),      L::dense(128),  L::relu()};
  }
  return {};
}

struct NetworkSpec {
  std::string name;
  Shape input;
  std::vector<LayerSpec> layers;
  std::string head;  // "classifier", "features", ...

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

inline NetworkSpec classifier_spec(ArchPreset arch, Shape input, std::size_t k) {
  NetworkSpec spec{to_string(arch), std::move(input), preset_body(arch),
                   "classifier"};
  spec.layers.push_back(LayerSpec::dense(k));
  return spec;
}

inline NetworkSpec body_spec(ArchPreset arch, Shape input) {
  return {to_string(arch), std::move(input), preset_body(arch), "features"};
}

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

// Sequential network over the fixed layer menu. Forward caches what the next
// backward call needs; a backward without a preceding forward is rejected.
template <typename T>
class Network {
 public:
  Network() = default;

  Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    std::mt19937_64 rng(seed);
    Shape shape = spec_.input;
    if (shape.empty()) throw ShapeError("network: empty input shape");
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      try {
        auto layer = make_layer<T>(spec_.layers[i], shape, rng);
        shape = layer->output_shape(shape);
        layers_.push_back(std::move(layer));
      } catch (const ShapeError& e) {
        throw ShapeError(layer_label(i) + ": " + e.what());
      }
    }
    output_ = shape;
  }

  Network(const Network& other)
      : spec_(other.spec_), output_(other.output_), cached_(false) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Network& operator=(const Network& other) {
    if (this != &other) {
      Network tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const NetworkSpec& spec() const { return spec_; }
  const Shape& input_shape() const { return spec_.input; }
  const Shape& output_shape() const { return output_; }
  std::size_t layer_count() const { return layers_.size(); }

  // `batch` is N x input_shape.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode = Mode::inference) {
    if (batch.rank() != spec_.input.size() + 1 ||
        detail::inner_shape(batch.shape()) != spec_.input) {
      throw ShapeError(layer_label(0) + ": expected batch of " +
                       shape_str(spec_.input) + ", got " +
                       shape_str(batch.shape()));
    }
    Tensor<T> x = batch;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      try {
        x = layers_[i]->forward(x, mode);
      } catch (const ShapeError& e) {
        cached_ = false;
        throw ShapeError(layer_label(i) + ": " + e.what());
      }
    }
    cached_ = true;
    return x;
  }

  // Single-sample convenience; returns the per-sample output.
  Tensor<T> forward_one(const Tensor<T>& input) {
    Tensor<T> y = forward(as_batch(input), Mode::inference);
    return y.reshaped(output_);
  }

  // Returns the gradient wrt the network input; parameter gradients are left
  // in each Param::grad.
  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (!cached_) throw std::logic_error("network: backward without forward");
    if (detail::inner_shape(grad_out.shape()) != output_) {
      throw ShapeError("network: gradient shape " +
                       shape_str(grad_out.shape()) + " does not match output " +
                       shape_str(output_));
    }
    cached_ = false;
    Tensor<T> g = grad_out;
    for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i]->backward(g);
    return g;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (auto* p : layers_[i]->params())
        names.push_back(std::to_string(i) + "." + to_string(layers_[i]->kind()) +
                        "." + p->name);
    return names;
  }

  NamedTensors<T> state() const {
    NamedTensors<T> out;
    auto names = param_names();
    std::size_t j = 0;
    for (const auto& l : layers_)
      for (auto* p : l->params()) out.emplace_back(names[j++], p->value);
    return out;
  }

  void load_state(const NamedTensors<T>& state) {
    auto names = param_names();
    auto ps = params();
    if (state.size() != ps.size()) {
      throw FormatError("network: checkpoint has " +
                        std::to_string(state.size()) + " tensors, expected " +
                        std::to_string(ps.size()));
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (state[i].first != names[i] ||
          state[i].second.shape() != ps[i]->value.shape()) {
        throw FormatError("network: checkpoint tensor '" + state[i].first +
                          "' " + shape_str(state[i].second.shape()) +
                          " does not match '" + names[i] + "' " +
                          shape_str(ps[i]->value.shape()));
      }
    }
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = state[i].second;
  }

  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }

 private:
  std::string layer_label(std::size_t i) const {
    std::string s = "layer " + std::to_string(i);
    if (i < spec_.layers.size())
      s += std::string(" (") + to_string(spec_.layers[i].kind) + ")";
    return s;
  }

  NetworkSpec spec_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  Shape output_;
  bool cached_ = false;
};

}  // namespace preprl
