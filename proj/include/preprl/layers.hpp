#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "preprl/tensor.hpp"

namespace preprl {

enum class LayerKind { conv2d, maxpool2d, batchnorm, relu, flatten, dense };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
  }
  return "?";
}

// Convolutions always use a 1x1 stride and max pooling a 2x2 window with a
// 2x2 stride; neither is configurable.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t units = 0;   // conv filters or dense units
  std::size_t kernel = 3;  // square conv kernel
  std::size_t pad = 0;     // zero padding on each side

  static LayerSpec conv(std::size_t filters, std::size_t kernel = 3,
                        std::size_t pad = 0) {
    return {LayerKind::conv2d, filters, kernel, pad};
  }
  static LayerSpec maxpool() { return {LayerKind::maxpool2d}; }
  static LayerSpec batchnorm() { return {LayerKind::batchnorm}; }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }
  static LayerSpec dense(std::size_t units) {
    return {LayerKind::dense, units};
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class Mode { inference, training };

enum class ParamRole { weight, bias, buffer };

template <typename T>
struct Param {
  std::string name;
  ParamRole role = ParamRole::weight;
  Tensor<T> value;
  Tensor<T> grad;

  bool trainable() const { return role != ParamRole::buffer; }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  // Per-sample output shape; throws ShapeError if `in` is unusable.
  virtual Shape output_shape(const Shape& in) const = 0;
  // `x` carries a leading batch dimension.
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  // Writes parameter gradients and returns the gradient wrt the input of the
  // last forward call.
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
};

namespace detail {

template <typename T>
void init_uniform(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
}

inline Shape batched(std::size_t n, const Shape& inner) {
  Shape s{n};
  s.insert(s.end(), inner.begin(), inner.end());
  return s;
}

inline Shape inner_shape(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

}  // namespace detail

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(std::size_t in_channels, std::size_t filters, std::size_t kernel,
         std::size_t pad, std::mt19937_64& rng)
      : channels_(in_channels), filters_(filters), kernel_(kernel), pad_(pad) {
    weight_.name = "weight";
    weight_.role = ParamRole::weight;
    weight_.value = Tensor<T>({filters, kernel, kernel, in_channels});
    weight_.grad = Tensor<T>(weight_.value.shape());
    bias_.name = "bias";
    bias_.role = ParamRole::bias;
    bias_.value = Tensor<T>({filters});
    bias_.grad = Tensor<T>({filters});
    detail::init_uniform(weight_.value, kernel * kernel * in_channels, rng);
  }

  LayerKind kind() const override { return LayerKind::conv2d; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3 || in[2] != channels_) {
      throw ShapeError("conv2d: expected H x W x " + std::to_string(channels_) +
                       " input, got " + shape_str(in));
    }
    if (in[0] + 2 * pad_ < kernel_ || in[1] + 2 * pad_ < kernel_) {
      throw ShapeError("conv2d: input " + shape_str(in) +
                       " smaller than kernel " + std::to_string(kernel_));
    }
    return {in[0] + 2 * pad_ - kernel_ + 1, in[1] + 2 * pad_ - kernel_ + 1,
            filters_};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    const Shape in = detail::inner_shape(x.shape());
    const Shape out = output_shape(in);
    input_ = x;
    const std::size_t n = x.dim(0), h = in[0], w = in[1], c = channels_;
    const std::size_t oh = out[0], ow = out[1], f = filters_, k = kernel_;
    Tensor<T> y(detail::batched(n, out));
    const T* xd = x.data().data();
    const T* wd = weight_.value.data().data();
    const T* bd = bias_.value.data().data();
    T* yd = y.data().data();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T* yo = yd + ((b * oh + oy) * ow + ox) * f;
          for (std::size_t fi = 0; fi < f; ++fi) yo[fi] = bd[fi];
          for (std::size_t ky = 0; ky < k; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy + ky) -
                            static_cast<std::ptrdiff_t>(pad_);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox + kx) -
                              static_cast<std::ptrdiff_t>(pad_);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const T* xi = xd + ((b * h + iy) * w + ix) * c;
              for (std::size_t fi = 0; fi < f; ++fi) {
                const T* wk = wd + ((fi * k + ky) * k + kx) * c;
                T acc = 0;
                for (std::size_t ci = 0; ci < c; ++ci) acc += xi[ci] * wk[ci];
                yo[fi] += acc;
              }
            }
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    const Shape in = detail::inner_shape(input_.shape());
    const std::size_t n = input_.dim(0), h = in[0], w = in[1], c = channels_;
    const std::size_t oh = g.dim(1), ow = g.dim(2), f = filters_, k = kernel_;
    Tensor<T> dx(input_.shape());
    weight_.grad.fill(0);
    bias_.grad.fill(0);
    const T* xd = input_.data().data();
    const T* wd = weight_.value.data().data();
    const T* gd = g.data().data();
    T* dxd = dx.data().data();
    T* dwd = weight_.grad.data().data();
    T* dbd = bias_.grad.data().data();
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T* go = gd + ((b * oh + oy) * ow + ox) * f;
          for (std::size_t fi = 0; fi < f; ++fi) dbd[fi] += go[fi];
          for (std::size_t ky = 0; ky < k; ++ky) {
            const auto iy = static_cast<std::ptrdiff_t>(oy + ky) -
                            static_cast<std::ptrdiff_t>(pad_);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const auto ix = static_cast<std::ptrdiff_t>(ox + kx) -
                              static_cast<std::ptrdiff_t>(pad_);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              const std::size_t xoff = ((b * h + iy) * w + ix) * c;
              for (std::size_t fi = 0; fi < f; ++fi) {
                const T gv = go[fi];
                if (gv == T(0)) continue;
                const std::size_t woff = ((fi * k + ky) * k + kx) * c;
                for (std::size_t ci = 0; ci < c; ++ci) {
                  dwd[woff + ci] += gv * xd[xoff + ci];
                  dxd[xoff + ci] += gv * wd[woff + ci];
                }
              }
            }
          }
        }
      }
    }
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Conv2d>(*this);
  }

 private:
  std::size_t channels_, filters_, kernel_, pad_;
  Param<T> weight_, bias_;
  Tensor<T> input_;
};

template <typename T>
class MaxPool2d final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::maxpool2d; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3 || in[0] < 2 || in[1] < 2) {
      throw ShapeError("maxpool2d: needs H x W x C with H, W >= 2, got " +
                       shape_str(in));
    }
    return {in[0] / 2, in[1] / 2, in[2]};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    const Shape in = detail::inner_shape(x.shape());
    const Shape out = output_shape(in);
    in_shape_ = x.shape();
    const std::size_t n = x.dim(0), w = in[1], c = in[2];
    const std::size_t oh = out[0], ow = out[1];
    Tensor<T> y(detail::batched(n, out));
    argmax_.assign(y.size(), 0);
    std::size_t o = 0;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          for (std::size_t ci = 0; ci < c; ++ci, ++o) {
            std::size_t best = ((b * in[0] + 2 * oy) * w + 2 * ox) * c + ci;
            for (std::size_t dy = 0; dy < 2; ++dy) {
              for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t idx =
                    ((b * in[0] + 2 * oy + dy) * w + 2 * ox + dx) * c + ci;
                if (x[idx] > x[best]) best = idx;
              }
            }
            argmax_[o] = best;
            y[o] = x[best];
          }
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx(in_shape_);
    for (std::size_t o = 0; o < g.size(); ++o) dx[argmax_[o]] += g[o];
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<MaxPool2d>(*this);
  }

 private:
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

// Normalizes over every axis except the last (channels, or dense units).
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  explicit BatchNorm(std::size_t channels, T momentum = T(0.1), T eps = T(1e-5))
      : channels_(channels), momentum_(momentum), eps_(eps) {
    gamma_ = {"gamma", ParamRole::bias, Tensor<T>({channels}, T(1)),
              Tensor<T>({channels})};
    beta_ = {"beta", ParamRole::bias, Tensor<T>({channels}),
             Tensor<T>({channels})};
    running_mean_ = {"running_mean", ParamRole::buffer, Tensor<T>({channels}),
                     Tensor<T>({channels})};
    running_var_ = {"running_var", ParamRole::buffer,
                    Tensor<T>({channels}, T(1)), Tensor<T>({channels})};
  }

  LayerKind kind() const override { return LayerKind::batchnorm; }

  Shape output_shape(const Shape& in) const override {
    if (in.empty() || in.back() != channels_) {
      throw ShapeError("batchnorm: expected trailing dimension " +
                       std::to_string(channels_) + ", got " + shape_str(in));
    }
    return in;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override {
    output_shape(detail::inner_shape(x.shape()));
    const std::size_t c = channels_;
    const std::size_t m = x.size() / c;
    mode_ = mode;
    std::vector<T> mean(c, 0), var(c, 0);
    if (mode == Mode::training) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t ci = 0; ci < c; ++ci) mean[ci] += x[i * c + ci];
      for (auto& v : mean) v /= static_cast<T>(m);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t ci = 0; ci < c; ++ci) {
          const T d = x[i * c + ci] - mean[ci];
          var[ci] += d * d;
        }
      for (auto& v : var) v /= static_cast<T>(m);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T unbiased = m > 1 ? var[ci] * static_cast<T>(m) /
                                       static_cast<T>(m - 1)
                                 : var[ci];
        running_mean_.value[ci] =
            (1 - momentum_) * running_mean_.value[ci] + momentum_ * mean[ci];
        running_var_.value[ci] =
            (1 - momentum_) * running_var_.value[ci] + momentum_ * unbiased;
      }
    } else {
      for (std::size_t ci = 0; ci < c; ++ci) {
        mean[ci] = running_mean_.value[ci];
        var[ci] = running_var_.value[ci];
      }
    }
    inv_std_.resize(c);
    for (std::size_t ci = 0; ci < c; ++ci)
      inv_std_[ci] = T(1) / std::sqrt(var[ci] + eps_);
    xhat_ = Tensor<T>(x.shape());
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t ci = 0; ci < c; ++ci) {
        const std::size_t idx = i * c + ci;
        xhat_[idx] = (x[idx] - mean[ci]) * inv_std_[ci];
        y[idx] = gamma_.value[ci] * xhat_[idx] + beta_.value[ci];
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    const std::size_t c = channels_;
    const std::size_t m = g.size() / c;
    gamma_.grad.fill(0);
    beta_.grad.fill(0);
    std::vector<T> sum_dxhat(c, 0), sum_dxhat_xhat(c, 0);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t ci = 0; ci < c; ++ci) {
        const std::size_t idx = i * c + ci;
        gamma_.grad[ci] += g[idx] * xhat_[idx];
        beta_.grad[ci] += g[idx];
        const T dxhat = g[idx] * gamma_.value[ci];
        sum_dxhat[ci] += dxhat;
        sum_dxhat_xhat[ci] += dxhat * xhat_[idx];
      }
    }
    Tensor<T> dx(g.shape());
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t ci = 0; ci < c; ++ci) {
        const std::size_t idx = i * c + ci;
        const T dxhat = g[idx] * gamma_.value[ci];
        if (mode_ == Mode::training) {
          dx[idx] = inv_std_[ci] / static_cast<T>(m) *
                    (static_cast<T>(m) * dxhat - sum_dxhat[ci] -
                     xhat_[idx] * sum_dxhat_xhat[ci]);
        } else {
          dx[idx] = dxhat * inv_std_[ci];
        }
      }
    }
    return dx;
  }

  std::vector<Param<T>*> params() override {
    return {&gamma_, &beta_, &running_mean_, &running_var_};
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<BatchNorm>(*this);
  }

 private:
  std::size_t channels_;
  T momentum_, eps_;
  Param<T> gamma_, beta_, running_mean_, running_var_;
  Mode mode_ = Mode::inference;
  std::vector<T> inv_std_;
  Tensor<T> xhat_;
};

template <typename T>
class Relu final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::relu; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    Tensor<T> y = x;
    mask_.assign(x.size(), 0);
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] > T(0)) {
        mask_[i] = 1;
      } else {
        y[i] = 0;
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!mask_[i]) dx[i] = 0;
    return dx;
  }

  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Relu>(*this);
  }

 private:
  std::vector<unsigned char> mask_;
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  LayerKind kind() const override { return LayerKind::flatten; }
  Shape output_shape(const Shape& in) const override {
    return {shape_size(in)};
  }
  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    in_shape_ = x.shape();
    return x.reshaped({x.dim(0), x.size() / x.dim(0)});
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    return g.reshaped(in_shape_);
  }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Flatten>(*this);
  }

 private:
  Shape in_shape_;
};

template <typename T>
class Dense final : public Layer<T> {
 public:
  Dense() = default;
  Dense(std::size_t in, std::size_t units, std::mt19937_64& rng)
      : in_(in), units_(units) {
    weight_ = {"weight", ParamRole::weight, Tensor<T>({units, in}),
               Tensor<T>({units, in})};
    bias_ = {"bias", ParamRole::bias, Tensor<T>({units}), Tensor<T>({units})};
    detail::init_uniform(weight_.value, in, rng);
  }

  LayerKind kind() const override { return LayerKind::dense; }
  std::size_t in_features() const { return in_; }
  std::size_t units() const { return units_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 1 || in[0] != in_) {
      throw ShapeError("dense: expected [" + std::to_string(in_) +
                       "] input, got " + shape_str(in));
    }
    return {units_};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode) override {
    output_shape(detail::inner_shape(x.shape()));
    input_ = x;
    const std::size_t n = x.dim(0);
    Tensor<T> y({n, units_});
    const T* wd = weight_.value.data().data();
    for (std::size_t b = 0; b < n; ++b) {
      const T* xb = x.data().data() + b * in_;
      for (std::size_t u = 0; u < units_; ++u) {
        const T* wu = wd + u * in_;
        T acc = 0;
        for (std::size_t i = 0; i < in_; ++i) acc += wu[i] * xb[i];
        y[b * units_ + u] = acc + bias_.value[u];
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& g) override {
    const std::size_t n = input_.dim(0);
    weight_.grad.fill(0);
    bias_.grad.fill(0);
    Tensor<T> dx(input_.shape());
    const T* wd = weight_.value.data().data();
    T* dwd = weight_.grad.data().data();
    for (std::size_t b = 0; b < n; ++b) {
      const T* xb = input_.data().data() + b * in_;
      T* dxb = dx.data().data() + b * in_;
      for (std::size_t u = 0; u < units_; ++u) {
        const T gv = g[b * units_ + u];
        bias_.grad[u] += gv;
        if (gv == T(0)) continue;
        const T* wu = wd + u * in_;
        T* dwu = dwd + u * in_;
        for (std::size_t i = 0; i < in_; ++i) {
          dwu[i] += gv * xb[i];
          dxb[i] += gv * wu[i];
        }
      }
    }
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer<T>> clone() const override {
    return std::make_unique<Dense>(*this);
  }

 private:
  std::size_t in_ = 0, units_ = 0;
  Param<T> weight_, bias_;
  Tensor<T> input_;
};

// Builds a layer consuming per-sample shape `in`.
template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec, const Shape& in,
                                     std::mt19937_64& rng) {
  switch (spec.kind) {
    case LayerKind::conv2d:
      if (in.size() != 3) {
        throw ShapeError("conv2d: expected H x W x C input, got " +
                         shape_str(in));
      }
      return std::make_unique<Conv2d<T>>(in[2], spec.units, spec.kernel,
                                         spec.pad, rng);
    case LayerKind::maxpool2d: return std::make_unique<MaxPool2d<T>>();
    case LayerKind::batchnorm:
      if (in.empty()) throw ShapeError("batchnorm: empty input shape");
      return std::make_unique<BatchNorm<T>>(in.back());
    case LayerKind::relu: return std::make_unique<Relu<T>>();
    case LayerKind::flatten: return std::make_unique<Flatten<T>>();
    case LayerKind::dense:
      if (in.size() != 1) {
        throw ShapeError("dense: expected flat input, got " + shape_str(in) +
                         " (missing flatten?)");
      }
      return std::make_unique<Dense<T>>(in[0], spec.units, rng);
  }
  throw ShapeError("unknown layer kind");
}

}  // namespace preprl
