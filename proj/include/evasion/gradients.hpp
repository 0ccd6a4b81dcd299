#ifndef EVASION_GRADIENTS_HPP
#define EVASION_GRADIENTS_HPP

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <vector>

#include "evasion/api.hpp"
#include "evasion/errors.hpp"
#include "evasion/nn.hpp"
#include "evasion/preprocess.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

/// A substitute network together with the resize that maps attack-space
/// images to its native input size.
struct EnsembleMember {
  std::shared_ptr<const Network> network;
  Preprocessor pre;

  static EnsembleMember for_attack_space(std::shared_ptr<const Network> net, Shape attack_shape) {
    Preprocessor pre = Preprocessor::to_native(attack_shape, net->input_shape());
    return {std::move(net), std::move(pre)};
  }
};

class EnsembleSpec {
 public:
  EnsembleSpec() = default;
  explicit EnsembleSpec(std::vector<EnsembleMember> members)
      : EnsembleSpec(std::move(members), {}) {}

  EnsembleSpec(std::vector<EnsembleMember> members, std::vector<double> weights)
      : members_(std::move(members)), weights_(std::move(weights)) {
    if (weights_.empty()) weights_.assign(members_.size(), 1.0);
    if (weights_.size() != members_.size()) {
      throw ArgumentError("ensemble weights and members differ in count");
    }
    double total = 0.0;
    for (double w : weights_) {
      if (!(w > 0.0)) throw ArgumentError("ensemble weights must be positive");
      total += w;
    }
    for (double& w : weights_) w /= total;
  }

  std::size_t size() const noexcept { return members_.size(); }
  bool empty() const noexcept { return members_.empty(); }
  const std::vector<EnsembleMember>& members() const noexcept { return members_; }
  const std::vector<double>& weights() const noexcept { return weights_; }

  /// First `k` members, weights renormalised.
  EnsembleSpec prefix(std::size_t k) const {
    k = std::min(k, members_.size());
    return EnsembleSpec({members_.begin(), members_.begin() + static_cast<std::ptrdiff_t>(k)},
                        {weights_.begin(), weights_.begin() + static_cast<std::ptrdiff_t>(k)});
  }

 private:
  std::vector<EnsembleMember> members_;
  std::vector<double> weights_;
};

/// MIFGSM accumulator. `reset` must be called at the start of every attack.
struct MomentumState {
  Tensor accumulated;
  double mu = 1.0;

  void reset(Shape shape) { accumulated = Tensor(shape, 0.0); }
};

/// Weighted sum over members of the target-class ascent direction (negated
/// cross-entropy gradient), each member seen through its own preprocessor and
/// pulled back to attack space. Returns the raw, un-normalised sum.
inline Tensor ensemble_raw_direction(const EnsembleSpec& ens, const Tensor& x, std::size_t target) {
  if (ens.empty()) throw ArgumentError("ensemble has no members");
  Tensor total(x.shape(), 0.0);
  for (std::size_t m = 0; m < ens.size(); ++m) {
    const auto& member = ens.members()[m];
    const Tensor native = member.pre.apply(x);
    const Tensor g = member.pre.pullback(input_gradient(*member.network, native, target), x.shape());
    const double w = ens.weights()[m];
    for (std::size_t i = 0; i < total.size(); ++i) total[i] -= w * g[i];
  }
  return total;
}

/// One MIFGSM accumulation: state <- mu * state + d / ||d||_1 where d is the
/// ensemble ascent direction for `target`. Returns the updated accumulator.
/// Touches no prediction API.
inline const Tensor& ensemble_grad(const EnsembleSpec& ens, const Tensor& x, std::size_t target,
                                   MomentumState& state) {
  Tensor d = ensemble_raw_direction(ens, x, target);
  if (state.accumulated.shape() != x.shape() || state.accumulated.size() == 0) {
    state.reset(x.shape());
  }
  const double norm = l1_norm(d.values());
  const double inv = norm > 0.0 ? 1.0 / norm : 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    state.accumulated[i] = state.mu * state.accumulated[i] + d[i] * inv;
  }
  return state.accumulated;
}

/// Random member subset: size drawn uniformly from {1..K}, then that many
/// members without replacement (kept in original order).
template <std::uniform_random_bit_generator Rng>
EnsembleSpec subsample(const EnsembleSpec& ens, Rng& rng) {
  if (ens.empty()) throw ArgumentError("ensemble has no members");
  const std::size_t k = ens.size();
  std::uniform_int_distribution<std::size_t> size_dist(1, k);
  const std::size_t s = size_dist(rng);
  std::vector<std::size_t> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates for the first s slots.
  for (std::size_t i = 0; i < s; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, k - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(s);
  std::sort(idx.begin(), idx.end());
  std::vector<EnsembleMember> members;
  std::vector<double> weights;
  for (std::size_t i : idx) {
    members.push_back(ens.members()[i]);
    weights.push_back(ens.weights()[i]);
  }
  return EnsembleSpec(std::move(members), std::move(weights));
}

struct NesConfig {
  std::size_t n_queries = 100;
  double sigma = 1e-3;
  bool antithetic = true;

  void validate() const {
    if (n_queries < 2 || (antithetic && n_queries % 2 != 0)) {
      throw ArgumentError("NES needs an even n_queries >= 2");
    }
    if (!(sigma > 0.0)) throw ArgumentError("NES sigma must be > 0");
  }
};

/// NES gradient estimate of a scalar score: (1/(sigma n)) sum_i s(x + sigma d_i) d_i
/// with Gaussian d_i drawn in antithetic pairs (d, -d). Calls `score`
/// exactly n_queries times.
template <typename Scorer, std::uniform_random_bit_generator Rng>
  requires std::invocable<Scorer&, const Tensor&>
Tensor nes_estimate(Scorer&& score, const Tensor& x, const NesConfig& cfg, Rng& rng) {
  cfg.validate();
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor estimate(x.shape(), 0.0);
  Tensor probe(x.shape());
  Tensor delta(x.shape());
  const std::size_t draws = cfg.antithetic ? cfg.n_queries / 2 : cfg.n_queries;
  for (std::size_t k = 0; k < draws; ++k) {
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = normal(rng);
    for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] + cfg.sigma * delta[i];
    double s = static_cast<double>(score(static_cast<const Tensor&>(probe)));
    if (cfg.antithetic) {
      for (std::size_t i = 0; i < x.size(); ++i) probe[i] = x[i] - cfg.sigma * delta[i];
      s -= static_cast<double>(score(static_cast<const Tensor&>(probe)));
    }
    for (std::size_t i = 0; i < estimate.size(); ++i) estimate[i] += s * delta[i];
  }
  const double scale = 1.0 / (cfg.sigma * static_cast<double>(cfg.n_queries));
  for (double& v : estimate.values()) v *= scale;
  return estimate;
}

/// NES against a prediction API, scoring the target with top-k mask
/// semantics (0 when absent). Consumes exactly cfg.n_queries ledger queries;
/// BudgetExceeded propagates and the partial estimate is dropped.
template <std::uniform_random_bit_generator Rng>
Tensor nes_estimate(PredictionApi& api, const Tensor& x, std::size_t target, const NesConfig& cfg,
                    Rng& rng) {
  return nes_estimate([&](const Tensor& probe) { return masked_score(api.query(probe), target); },
                      x, cfg, rng);
}

}  // namespace evasion

#endif  // EVASION_GRADIENTS_HPP
