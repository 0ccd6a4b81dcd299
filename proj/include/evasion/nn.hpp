#ifndef EVASION_NN_HPP
#define EVASION_NN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evasion/errors.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

enum class Activation { relu, tanh, identity };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "identity";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ArgumentError("unknown activation '" + std::string(s) + "'");
}

/// Fully connected layer: out = act(W in + b), W stored row-major (out x in).
struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<double> weights;
  std::vector<double> bias;
  Activation activation = Activation::identity;

  double weight(std::size_t o, std::size_t i) const { return weights[o * inputs + i]; }
};

/// Stack of dense layers over a flattened c x h x w input. The last layer
/// emits the class scores; probabilities are softmax of those scores.
class Network {
 public:
  Network() = default;
  Network(Shape input_shape, std::vector<DenseLayer> layers)
      : input_shape_(input_shape), layers_(std::move(layers)) {
    validate();
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
  std::vector<DenseLayer>& mutable_layers() noexcept { return layers_; }
  std::size_t n_classes() const noexcept { return layers_.empty() ? 0 : layers_.back().outputs; }

  void validate() const {
    if (layers_.empty()) throw DimensionError("network has no layers");
    if (layers_.front().inputs != input_shape_.size()) {
      throw DimensionError("first layer expects " + std::to_string(layers_.front().inputs) +
                           " inputs but input shape " + input_shape_.str() + " has " +
                           std::to_string(input_shape_.size()));
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      if (layer.weights.size() != layer.inputs * layer.outputs ||
          layer.bias.size() != layer.outputs || layer.outputs == 0) {
        throw DimensionError("layer " + std::to_string(l) + " has inconsistent parameter sizes");
      }
      if (l + 1 < layers_.size() && layers_[l + 1].inputs != layer.outputs) {
        throw DimensionError("layer " + std::to_string(l) + " emits " +
                             std::to_string(layer.outputs) + " values but layer " +
                             std::to_string(l + 1) + " expects " +
                             std::to_string(layers_[l + 1].inputs));
      }
    }
  }

  friend bool operator==(const Network& a, const Network& b) {
    if (a.input_shape_ != b.input_shape_ || a.layers_.size() != b.layers_.size()) return false;
    for (std::size_t l = 0; l < a.layers_.size(); ++l) {
      const auto& x = a.layers_[l];
      const auto& y = b.layers_[l];
      if (x.inputs != y.inputs || x.outputs != y.outputs || x.activation != y.activation ||
          x.weights != y.weights || x.bias != y.bias) {
        return false;
      }
    }
    return true;
  }

 private:
  Shape input_shape_;
  std::vector<DenseLayer> layers_;
};

namespace detail {

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
    case Activation::identity: return z;
  }
  return z;
}

// Derivative expressed through the pre-activation z and the output y.
inline double activate_grad(Activation a, double z, double y) {
  switch (a) {
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: return 1.0 - y * y;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

inline void dense_forward(const DenseLayer& layer, std::span<const double> in,
                          std::vector<double>& pre, std::vector<double>& out) {
  pre.resize(layer.outputs);
  out.resize(layer.outputs);
  for (std::size_t o = 0; o < layer.outputs; ++o) {
    const double* w = layer.weights.data() + o * layer.inputs;
    double acc = 0.0;
    for (std::size_t i = 0; i < layer.inputs; ++i) acc += w[i] * in[i];
    pre[o] = acc + layer.bias[o];
    out[o] = activate(layer.activation, pre[o]);
  }
}

}  // namespace detail

/// Activations recorded by a forward pass, reused by backpropagation.
struct ForwardTrace {
  std::vector<std::vector<double>> inputs;  // input of each layer
  std::vector<std::vector<double>> pre;     // pre-activation of each layer
  std::vector<double> scores;               // output of the last layer
};

inline void check_input(const Network& net, const Tensor& x) {
  if (x.shape() != net.input_shape()) {
    throw DimensionError("input shape " + x.shape().str() + " does not match network input " +
                         net.input_shape().str());
  }
}

inline ForwardTrace forward_trace(const Network& net, std::span<const double> x) {
  ForwardTrace t;
  t.inputs.reserve(net.layers().size());
  t.pre.resize(net.layers().size());
  std::vector<double> current(x.begin(), x.end());
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    std::vector<double> out;
    detail::dense_forward(net.layers()[l], current, t.pre[l], out);
    t.inputs.push_back(std::move(current));
    current = std::move(out);
  }
  t.scores = std::move(current);
  return t;
}

/// Numerically stable softmax (max-subtracted).
inline std::vector<double> softmax(std::span<const double> scores) {
  std::vector<double> p(scores.begin(), scores.end());
  if (p.empty()) return p;
  const double m = *std::max_element(p.begin(), p.end());
  double total = 0.0;
  for (double& v : p) {
    v = std::exp(v - m);
    total += v;
  }
  for (double& v : p) v /= total;
  return p;
}

inline std::vector<double> logits(const Network& net, const Tensor& x) {
  check_input(net, x);
  std::vector<double> current(x.values().begin(), x.values().end());
  std::vector<double> pre;
  std::vector<double> out;
  for (const auto& layer : net.layers()) {
    detail::dense_forward(layer, current, pre, out);
    std::swap(current, out);
  }
  return current;
}

inline std::vector<double> forward(const Network& net, const Tensor& x) {
  return softmax(logits(net, x));
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline void check_class(const Network& net, std::size_t target) {
  if (target >= net.n_classes()) {
    throw DomainError("class index " + std::to_string(target) + " outside [0, " +
                      std::to_string(net.n_classes()) + ")");
  }
}

/// Backpropagates dL/dscores through the network. Returns dL/dinput and, when
/// `weight_grads` is non-null, accumulates parameter gradients into it
/// (laid out as weights followed by bias per layer).
inline std::vector<double> backpropagate(const Network& net, const ForwardTrace& t,
                                         std::vector<double> delta,
                                         std::vector<std::vector<double>>* weight_grads = nullptr) {
  const auto& layers = net.layers();
  for (std::size_t l = layers.size(); l-- > 0;) {
    const DenseLayer& layer = layers[l];
    const std::vector<double>& out =
        (l + 1 < layers.size()) ? t.inputs[l + 1] : t.scores;
    for (std::size_t o = 0; o < layer.outputs; ++o) {
      delta[o] *= detail::activate_grad(layer.activation, t.pre[l][o], out[o]);
    }
    if (weight_grads != nullptr) {
      auto& g = (*weight_grads)[l];
      const auto& in = t.inputs[l];
      for (std::size_t o = 0; o < layer.outputs; ++o) {
        const double d = delta[o];
        if (d == 0.0) continue;
        double* row = g.data() + o * layer.inputs;
        for (std::size_t i = 0; i < layer.inputs; ++i) row[i] += d * in[i];
        g[layer.inputs * layer.outputs + o] += d;
      }
    }
    std::vector<double> prev(layer.inputs, 0.0);
    for (std::size_t o = 0; o < layer.outputs; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const double* w = layer.weights.data() + o * layer.inputs;
      for (std::size_t i = 0; i < layer.inputs; ++i) prev[i] += d * w[i];
    }
    delta = std::move(prev);
  }
  return delta;
}

/// Gradient of the cross-entropy loss -log softmax(scores)[target] with
/// respect to the input image. Softmax and cross-entropy are fused: the score
/// gradient is p - onehot(target).
inline Tensor input_gradient(const Network& net, const Tensor& x, std::size_t target) {
  check_input(net, x);
  check_class(net, target);
  ForwardTrace t = forward_trace(net, x.values());
  std::vector<double> delta = softmax(t.scores);
  delta[target] -= 1.0;
  return Tensor(x.shape(), backpropagate(net, t, std::move(delta)));
}

/// Glorot-uniform initialised MLP: hidden layers use `hidden_activation`, the
/// output layer is linear.
inline Network make_mlp(Shape input_shape, const std::vector<std::size_t>& hidden,
                        std::size_t n_classes, Activation hidden_activation,
                        std::uint64_t seed) {
  if (n_classes < 2) throw ArgumentError("a classifier needs at least two classes");
  std::mt19937_64 rng(seed);
  std::vector<DenseLayer> layers;
  std::size_t fan_in = input_shape.size();
  auto add = [&](std::size_t fan_out, Activation act) {
    DenseLayer layer;
    layer.inputs = fan_in;
    layer.outputs = fan_out;
    layer.activation = act;
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    layer.weights.resize(fan_in * fan_out);
    for (double& w : layer.weights) w = dist(rng);
    layer.bias.assign(fan_out, 0.0);
    layers.push_back(std::move(layer));
    fan_in = fan_out;
  };
  for (std::size_t h : hidden) add(h, hidden_activation);
  add(n_classes, Activation::identity);
  return Network(input_shape, std::move(layers));
}

}  // namespace evasion

#endif  // EVASION_NN_HPP
