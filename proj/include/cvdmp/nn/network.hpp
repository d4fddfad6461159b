#pragma once

// Sequential network of conv1d / dense / relu / flatten layers with an
// explicit activation tape for reverse-mode gradients.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "cvdmp/error.hpp"
#include "cvdmp/nn/tensor.hpp"

namespace cvdmp::nn {

/// y = W x + b on [batch, in] inputs. weight is [out, in].
struct Dense {
  Tensor weight;
  Tensor bias;

  std::size_t in() const { return weight.dim(1); }
  std::size_t out() const { return weight.dim(0); }
};

/// Valid (unpadded) 1D convolution on [batch, channels, length] inputs.
/// weight is [out_channels, in_channels, kernel].
struct Conv1d {
  std::size_t stride = 1;
  Tensor weight;
  Tensor bias;

  std::size_t in_channels() const { return weight.dim(1); }
  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t kernel() const { return weight.dim(2); }
  std::size_t out_length(std::size_t length) const {
    return length < kernel() ? 0 : (length - kernel()) / stride + 1;
  }
};

struct Relu {};
struct Flatten {};

using Layer = std::variant<Dense, Conv1d, Relu, Flatten>;

inline std::string layer_kind(const Layer& layer) {
  return std::visit(
      [](const auto& l) -> std::string {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Dense>) return "dense";
        else if constexpr (std::is_same_v<T, Conv1d>) return "conv1d";
        else if constexpr (std::is_same_v<T, Relu>) return "relu";
        else return "flatten";
      },
      layer);
}

inline Dense make_dense(std::size_t in, std::size_t out) {
  return Dense{Tensor({out, in}), Tensor({out})};
}

inline Conv1d make_conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                          std::size_t stride) {
  if (stride == 0 || kernel == 0) throw UsageError("conv1d kernel and stride must be positive");
  return Conv1d{stride, Tensor({out_channels, in_channels, kernel}), Tensor({out_channels})};
}

class Network {
 public:
  Network() : id_(next_id()) {}
  explicit Network(std::vector<Layer> layers) : layers_(std::move(layers)), id_(next_id()) {}
  Network(const Network& o) : layers_(o.layers_), revision_(o.revision_), id_(next_id()) {}
  Network& operator=(const Network& o) {
    layers_ = o.layers_;
    revision_ = o.revision_ + 1;
    id_ = next_id();
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t size() const { return layers_.size(); }

  /// Mutable access counts as a modification and invalidates outstanding tapes.
  Layer& layer(std::size_t i) {
    ++revision_;
    return layers_.at(i);
  }

  std::vector<Tensor*> parameters() {
    ++revision_;
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      if (auto* d = std::get_if<Dense>(&l)) {
        out.push_back(&d->weight);
        out.push_back(&d->bias);
      } else if (auto* c = std::get_if<Conv1d>(&l)) {
        out.push_back(&c->weight);
        out.push_back(&c->bias);
      }
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers_) {
      if (const auto* d = std::get_if<Dense>(&l)) {
        out.push_back(&d->weight);
        out.push_back(&d->bias);
      } else if (const auto* c = std::get_if<Conv1d>(&l)) {
        out.push_back(&c->weight);
        out.push_back(&c->bias);
      }
    }
    return out;
  }

  /// "<prefix>.<layer index>.weight" style names in parameters() order.
  std::vector<std::string> parameter_names(const std::string& prefix) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (std::holds_alternative<Dense>(layers_[i]) || std::holds_alternative<Conv1d>(layers_[i])) {
        out.push_back(prefix + "." + std::to_string(i) + ".weight");
        out.push_back(prefix + "." + std::to_string(i) + ".bias");
      }
    }
    return out;
  }

  /// Index into parameters() of the first block belonging to layer i, or the
  /// number of blocks before it when the layer has none.
  std::size_t first_block_of_layer(std::size_t i) const {
    std::size_t blocks = 0;
    for (std::size_t k = 0; k < i && k < layers_.size(); ++k)
      if (std::holds_alternative<Dense>(layers_[k]) || std::holds_alternative<Conv1d>(layers_[k]))
        blocks += 2;
    return blocks;
  }

  /// He-style uniform initialization U(-sqrt(6 / fan_in), sqrt(6 / fan_in)),
  /// zero biases.
  void initialize(std::mt19937_64& rng) {
    ++revision_;
    for (auto& l : layers_) {
      Tensor* w = nullptr;
      Tensor* b = nullptr;
      std::size_t fan_in = 0;
      if (auto* d = std::get_if<Dense>(&l)) {
        w = &d->weight;
        b = &d->bias;
        fan_in = d->in();
      } else if (auto* c = std::get_if<Conv1d>(&l)) {
        w = &c->weight;
        b = &c->bias;
        fan_in = c->in_channels() * c->kernel();
      }
      if (!w) continue;
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (double& v : w->values()) v = dist(rng);
      b->fill(0.0);
    }
  }

  std::uint64_t revision() const { return revision_; }
  std::uint64_t id() const { return id_; }

 private:
  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter++;
  }

  std::vector<Layer> layers_;
  std::uint64_t revision_ = 0;
  std::uint64_t id_ = 0;
};

/// Inputs seen by every layer during one forward pass.
struct Tape {
  std::uint64_t network_id = 0;
  std::uint64_t revision = 0;
  std::vector<Tensor> inputs;  // inputs[i] is the input of layer i
};

struct Gradients {
  std::vector<Tensor> params;  // same order as Network::parameters()
  Tensor input;
};

namespace detail {

inline Tensor dense_forward(const Dense& l, const Tensor& x, std::size_t index) {
  if (x.rank() != 2 || x.dim(1) != l.in())
    throw DataError("layer " + std::to_string(index) + " (dense): expected input [batch, " +
                    std::to_string(l.in()) + "], got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), in = l.in(), out = l.out();
  Tensor y({batch, out});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.data() + b * in;
    double* yb = y.data() + b * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wo = l.weight.data() + o * in;
      double acc = l.bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += wo[i] * xb[i];
      yb[o] = acc;
    }
  }
  return y;
}

inline Tensor dense_backward(const Dense& l, const Tensor& x, const Tensor& gy, Tensor& gw,
                             Tensor& gb) {
  const std::size_t batch = x.dim(0), in = l.in(), out = l.out();
  if (gy.rank() != 2 || gy.dim(0) != batch || gy.dim(1) != out)
    throw DataError("dense backward: gradient shape " + shape_string(gy.shape()) +
                    " does not match output [" + std::to_string(batch) + ", " +
                    std::to_string(out) + "]");
  Tensor gx({batch, in});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* xb = x.data() + b * in;
    const double* gyb = gy.data() + b * out;
    double* gxb = gx.data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = gyb[o];
      if (g == 0.0) continue;
      gb[o] += g;
      const double* wo = l.weight.data() + o * in;
      double* gwo = gw.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        gwo[i] += g * xb[i];
        gxb[i] += g * wo[i];
      }
    }
  }
  return gx;
}

inline Tensor conv_forward(const Conv1d& l, const Tensor& x, std::size_t index) {
  if (x.rank() != 3 || x.dim(1) != l.in_channels() || l.out_length(x.dim(2)) == 0)
    throw DataError("layer " + std::to_string(index) + " (conv1d): expected input [batch, " +
                    std::to_string(l.in_channels()) + ", length >= " +
                    std::to_string(l.kernel()) + "], got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), cin = l.in_channels(), len = x.dim(2);
  const std::size_t cout = l.out_channels(), k = l.kernel(), olen = l.out_length(len);
  Tensor y({batch, cout, olen});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < olen; ++t) {
        double acc = l.bias[o];
        const std::size_t start = t * l.stride;
        for (std::size_t c = 0; c < cin; ++c) {
          const double* w = l.weight.data() + (o * cin + c) * k;
          const double* xs = x.data() + (b * cin + c) * len + start;
          for (std::size_t j = 0; j < k; ++j) acc += w[j] * xs[j];
        }
        y.at(b, o, t) = acc;
      }
  return y;
}

inline Tensor conv_backward(const Conv1d& l, const Tensor& x, const Tensor& gy, Tensor& gw,
                            Tensor& gb) {
  const std::size_t batch = x.dim(0), cin = l.in_channels(), len = x.dim(2);
  const std::size_t cout = l.out_channels(), k = l.kernel(), olen = l.out_length(len);
  if (gy.rank() != 3 || gy.dim(0) != batch || gy.dim(1) != cout || gy.dim(2) != olen)
    throw DataError("conv1d backward: gradient shape " + shape_string(gy.shape()) +
                    " does not match the layer output");
  Tensor gx({batch, cin, len});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t t = 0; t < olen; ++t) {
        const double g = gy.at(b, o, t);
        if (g == 0.0) continue;
        gb[o] += g;
        const std::size_t start = t * l.stride;
        for (std::size_t c = 0; c < cin; ++c) {
          const double* w = l.weight.data() + (o * cin + c) * k;
          double* gwc = gw.data() + (o * cin + c) * k;
          const double* xs = x.data() + (b * cin + c) * len + start;
          double* gxs = gx.data() + (b * cin + c) * len + start;
          for (std::size_t j = 0; j < k; ++j) {
            gwc[j] += g * xs[j];
            gxs[j] += g * w[j];
          }
        }
      }
  return gx;
}

}  // namespace detail

/// Runs the network and records what backward() needs.
inline std::pair<Tensor, Tape> forward(const Network& net, const Tensor& input) {
  Tape tape;
  tape.network_id = net.id();
  tape.revision = net.revision();
  tape.inputs.reserve(net.size());
  Tensor x = input;
  for (std::size_t i = 0; i < net.size(); ++i) {
    tape.inputs.push_back(x);
    const Layer& layer = net.layers()[i];
    if (const auto* d = std::get_if<Dense>(&layer)) {
      x = detail::dense_forward(*d, x, i);
    } else if (const auto* c = std::get_if<Conv1d>(&layer)) {
      x = detail::conv_forward(*c, x, i);
    } else if (std::holds_alternative<Relu>(layer)) {
      for (double& v : x.values()) v = v > 0.0 ? v : 0.0;
    } else {
      if (x.rank() < 2)
        throw DataError("layer " + std::to_string(i) + " (flatten): expected a batched input, got " +
                        shape_string(x.shape()));
      x = x.reshaped({x.dim(0), x.size() / x.dim(0)});
    }
  }
  return {std::move(x), std::move(tape)};
}

/// Reverse pass. Fails if the network changed since the tape was recorded.
inline Gradients backward(const Network& net, const Tape& tape, const Tensor& grad_output) {
  if (tape.network_id != net.id() || tape.revision != net.revision() ||
      tape.inputs.size() != net.size())
    throw UsageError("stale tape: the network changed after the forward pass");
  Gradients grads;
  for (const Tensor* p : net.parameters()) grads.params.emplace_back(p->shape());
  std::size_t block = grads.params.size();
  Tensor g = grad_output;
  for (std::size_t n = net.size(); n-- > 0;) {
    const Layer& layer = net.layers()[n];
    const Tensor& x = tape.inputs[n];
    if (const auto* d = std::get_if<Dense>(&layer)) {
      block -= 2;
      g = detail::dense_backward(*d, x, g, grads.params[block], grads.params[block + 1]);
    } else if (const auto* c = std::get_if<Conv1d>(&layer)) {
      block -= 2;
      g = detail::conv_backward(*c, x, g, grads.params[block], grads.params[block + 1]);
    } else if (std::holds_alternative<Relu>(layer)) {
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!(x[i] > 0.0)) g[i] = 0.0;
    } else {
      g = g.reshaped(x.shape());
    }
  }
  grads.input = std::move(g);
  return grads;
}

}  // namespace cvdmp::nn
