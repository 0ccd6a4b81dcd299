#ifndef EVASION_TRAIN_HPP
#define EVASION_TRAIN_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "evasion/dataset.hpp"
#include "evasion/errors.hpp"
#include "evasion/nn.hpp"

namespace evasion {

struct TrainConfig {
  double learning_rate = 0.05;
  int epochs = 30;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  double momentum = 0.0;  // heavy-ball coefficient in [0, 1)
};

/// Minibatch SGD on mean cross-entropy. Deterministic given `cfg.seed`
/// (which drives the shuffling).
inline Network train_sgd(Network net, const LabeledDataset& data, const TrainConfig& cfg) {
  if (data.empty()) throw ArgumentError("cannot train on an empty dataset");
  if (!(cfg.learning_rate > 0.0)) throw ArgumentError("learning_rate must be > 0");
  if (cfg.epochs < 1) throw ArgumentError("epochs must be >= 1");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ArgumentError("momentum must be in [0, 1)");
  if (cfg.batch_size == 0) throw ArgumentError("batch_size must be >= 1");
  for (const auto& it : data.items) {
    check_input(net, it.image);
    if (it.label >= net.n_classes()) {
      throw DomainError("label " + std::to_string(it.label) + " outside the network's classes");
    }
  }

  // Train on mean-centered pixels and fold the offset into the first-layer
  // bias, so the returned network still takes raw inputs.
  double center = 0.0;
  for (const auto& it : data.items) {
    for (double v : it.image.values()) center += v;
  }
  center /= static_cast<double>(data.size() * data.items.front().image.size());
  auto shift_first_bias = [&](double sign) {
    auto& first = net.mutable_layers().front();
    for (std::size_t o = 0; o < first.outputs; ++o) {
      double row = 0.0;
      for (std::size_t i = 0; i < first.inputs; ++i) row += first.weights[o * first.inputs + i];
      first.bias[o] += sign * center * row;
    }
  };
  shift_first_bias(+1.0);
  std::vector<double> centered;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  auto& layers = net.mutable_layers();
  std::vector<std::vector<double>> grads(layers.size());
  std::vector<std::vector<double>> velocity(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    grads[l].assign(layers[l].weights.size() + layers[l].bias.size(), 0.0);
    velocity[l].assign(grads[l].size(), 0.0);
  }

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t b = start; b < stop; ++b) {
        const auto& item = data.items[order[b]];
        centered = item.image.vector();
        for (double& v : centered) v -= center;
        ForwardTrace t = forward_trace(net, centered);
        std::vector<double> delta = softmax(t.scores);
        delta[item.label] -= 1.0;
        backpropagate(net, t, std::move(delta), &grads);
      }
      const double scale = cfg.learning_rate / static_cast<double>(stop - start);
      for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& layer = layers[l];
        auto& v = velocity[l];
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = cfg.momentum * v[i] + scale * grads[l][i];
        const std::size_t nw = layer.weights.size();
        for (std::size_t i = 0; i < nw; ++i) layer.weights[i] -= v[i];
        for (std::size_t o = 0; o < layer.outputs; ++o) layer.bias[o] -= v[nw + o];
      }
    }
    for (const auto& layer : layers) {
      for (double w : layer.weights) {
        if (!std::isfinite(w)) throw ArgumentError("training diverged (non-finite weight)");
      }
    }
  }
  shift_first_bias(-1.0);
  return net;
}

inline double accuracy(const Network& net, const LabeledDataset& data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& it : data.items) {
    if (argmax(logits(net, it.image)) == it.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace evasion

#endif  // EVASION_TRAIN_HPP
