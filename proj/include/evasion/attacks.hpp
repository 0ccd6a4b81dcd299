#ifndef EVASION_ATTACKS_HPP
#define EVASION_ATTACKS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "evasion/api.hpp"
#include "evasion/errors.hpp"
#include "evasion/gradients.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

/// s = (x_start, x_goal, y', eps). The victim API is passed alongside; its
/// ledger carries the budget B.
struct AttackSetting {
  Tensor x_start;
  Tensor x_goal;
  std::size_t target = 0;
  double epsilon = 0.05;
  /// Label the victim assigns to x_start, when known from planning. Attacks
  /// that start from x_start require it to equal `target`.
  std::optional<std::size_t> start_class;

  void validate() const {
    require_same_shape(x_start, x_goal, "attack setting");
    if (!in_unit_range(x_start) || !in_unit_range(x_goal)) {
      throw ArgumentError("attack images must lie in [0,1]");
    }
    if (!(epsilon > 0.0)) throw ArgumentError("epsilon must be > 0");
  }

  void require_partial_information_start() const {
    if (start_class && *start_class != target) {
      throw ArgumentError("x_start is classified as " + std::to_string(*start_class) +
                          ", not the target " + std::to_string(target));
    }
  }
};

/// One attack iteration. `d`, `queried`, `top1`, `score_target` and
/// `linf_to_goal` form the exported record; the rest support replay checks.
struct TraceRecord {
  std::size_t iter = 0;
  double d = 0.0;
  bool queried = false;
  std::optional<std::size_t> top1;
  std::optional<double> score_target;
  double linf_to_goal = 0.0;

  std::uint64_t queries_so_far = 0;
  bool in_unit_range = true;
  bool accepted = false;
  bool backtracked = false;
};

struct AttackOutcome {
  std::string method;
  bool success = false;
  Tensor x_adv;
  std::uint64_t queries_used = 0;
  std::size_t iterations = 0;
  std::vector<TraceRecord> trace;
  bool budget_exhausted = false;
  /// Queries spent inside gradient estimation (QO only).
  std::uint64_t estimation_queries = 0;
};

inline nlohmann::json trace_record_json(const TraceRecord& r) {
  nlohmann::json j{{"iter", r.iter}, {"d", r.d}, {"queried", r.queried}, {"linf_to_goal", r.linf_to_goal}};
  j["top1"] = r.top1 ? nlohmann::json(*r.top1) : nlohmann::json(nullptr);
  j["score_target"] = r.score_target ? nlohmann::json(*r.score_target) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json outcome_json(const AttackOutcome& o) {
  return {{"success", o.success}, {"queries", o.queries_used}, {"iterations", o.iterations},
          {"method", o.method}};
}

/// Perturbation x_adv - x_goal mapped from [-1,1] to [0,1] for rendering.
inline Tensor perturbation_image(const Tensor& x_adv, const Tensor& x_goal) {
  require_same_shape(x_adv, x_goal, "perturbation_image");
  Tensor out(x_adv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(0.5 + 0.5 * (x_adv[i] - x_goal[i]), 0.0, 1.0);
  return out;
}

namespace detail {

inline bool contains_target(const ApiResponse& r, std::size_t target) {
  if (const auto* l = std::get_if<LabelResponse>(&r)) return l->label == target;
  return score_of(r, target).has_value();
}

inline double target_score(const ApiResponse& r, std::size_t target) {
  if (const auto* l = std::get_if<LabelResponse>(&r)) return l->label == target ? 1.0 : 0.0;
  return masked_score(r, target);
}

}  // namespace detail

// --- ENS -------------------------------------------------------------------

struct EnsConfig {
  double eta = 0.005;
  double mu = 1.0;
  std::size_t max_iterations = 20000;
};

/// Transfer attack: MIFGSM from x_goal until the perturbation saturates at
/// eps, then alternate (query, MIFGSM step) until the victim answers y' or
/// the ledger runs out.
inline AttackOutcome run_ens(const AttackSetting& s, PredictionApi& api, const EnsembleSpec& ens,
                             const EnsConfig& cfg = {}) {
  s.validate();
  if (ens.empty()) throw ArgumentError("ENS needs a non-empty ensemble");
  AttackOutcome out;
  out.method = "ENS";
  const std::uint64_t start_used = api.ledger().used();
  const std::size_t min_steps =
      static_cast<std::size_t>(std::ceil(s.epsilon / cfg.eta - 1e-9));
  const std::size_t saturation_cap = std::max<std::size_t>(10 * min_steps, 10);

  MomentumState state;
  state.mu = cfg.mu;
  state.reset(s.x_goal.shape());
  Tensor x = s.x_goal;
  bool saturated = false;
  std::size_t iter = 0;

  auto record = [&](bool queried, std::optional<std::size_t> top1, std::optional<double> score) {
    TraceRecord r;
    r.iter = iter;
    r.d = s.epsilon;
    r.queried = queried;
    r.top1 = top1;
    r.score_target = score;
    r.linf_to_goal = linf_distance(x, s.x_goal);
    r.queries_so_far = api.ledger().used() - start_used;
    r.in_unit_range = in_unit_range(x);
    out.trace.push_back(r);
  };

  try {
    for (; iter < cfg.max_iterations; ++iter) {
      if (saturated) {
        const ApiResponse resp = api.query(x);
        const std::size_t label = top1(resp);
        record(true, label, detail::target_score(resp, s.target));
        if (label == s.target) {
          out.success = true;
          break;
        }
      } else {
        record(false, std::nullopt, std::nullopt);
      }
      const Tensor& g = ensemble_grad(ens, x, s.target, state);
      x = sign_step(x, g, cfg.eta);
      project_ball(x, s.x_goal, s.epsilon);
      if (!saturated) {
        const std::size_t steps = iter + 1;
        saturated = (steps >= min_steps && linf_distance(x, s.x_goal) >= s.epsilon - 1e-12) ||
                    steps >= saturation_cap;
      }
    }
  } catch (const BudgetExceeded&) {
    out.budget_exhausted = true;
  }
  out.x_adv = x;
  out.iterations = out.trace.size();
  out.queries_used = api.ledger().used() - start_used;
  return out;
}

// --- PRISM / PRISM_R -------------------------------------------------------

struct PrismConfig {
  double d0 = 0.50;
  double delta_eps = 0.005;
  std::size_t patience = 5;
  double t_adv = 0.20;
  double eta = 0.005;
  double mu = 1.0;
  bool reset_momentum_on_backtrack = false;
  std::optional<std::size_t> max_iterations;

  std::size_t iteration_cap(double epsilon) const {
    if (max_iterations) return *max_iterations;
    const double span = std::max(0.0, d0 - epsilon);
    return static_cast<std::size_t>(std::ceil(5.0 * span / delta_eps)) + 1000;
  }

  void validate(double epsilon) const {
    if (!(delta_eps > 0.0)) throw ArgumentError("delta_eps must be > 0");
    if (d0 > epsilon && delta_eps > d0 - epsilon + 1e-12) {
      throw ArgumentError("delta_eps must not exceed d0 - epsilon");
    }
    if (patience < 1) throw ArgumentError("patience must be >= 1");
    if (t_adv < 0.0 || t_adv > 1.0) throw ArgumentError("t_adv must lie in [0,1]");
    if (!(eta > 0.0)) throw ArgumentError("eta must be > 0");
  }
};

/// Gradient source for the PRISM loop: called with the current proposal and
/// the caller-owned momentum state.
using PrismGradient = std::function<const Tensor&(const Tensor&, MomentumState&)>;

/// The PRISM loop. The L-inf limit d starts at d0 and shrinks by delta_eps
/// per accepted step; while d > eps the target is pseudolabelled and no query
/// is made. Once d = eps every proposal is queried. Misses count towards the
/// patience C, after which the state backtracks to the last confident point.
inline AttackOutcome run_prism_loop(const AttackSetting& s, PredictionApi& api,
                                    const PrismGradient& gradient, const PrismConfig& cfg,
                                    std::string method) {
  s.validate();
  s.require_partial_information_start();
  cfg.validate(s.epsilon);

  AttackOutcome out;
  out.method = std::move(method);
  const std::uint64_t start_used = api.ledger().used();
  const std::size_t cap = cfg.iteration_cap(s.epsilon);

  double d = std::max(cfg.d0, s.epsilon);
  Tensor x_adv = s.x_start;
  project_ball(x_adv, s.x_goal, d);
  Tensor x_backtrack = x_adv;
  Tensor proposal = x_adv;
  std::size_t misses = 0;
  MomentumState state;
  state.mu = cfg.mu;
  state.reset(s.x_goal.shape());

  try {
    for (std::size_t iter = 0; iter < cap; ++iter) {
      const Tensor& g = gradient(proposal, state);
      proposal = sign_step(x_adv, g, cfg.eta);
      project_ball(proposal, s.x_goal, d);

      TraceRecord r;
      r.iter = iter;
      r.d = d;
      r.linf_to_goal = linf_distance(proposal, s.x_goal);
      r.in_unit_range = in_unit_range(proposal);

      const bool at_eps = d <= s.epsilon;
      bool in_topk = true;
      double score = 1.0;  // pseudolabel
      std::optional<std::size_t> label;
      if (at_eps) {
        const ApiResponse resp = api.query(proposal);
        r.queried = true;
        label = top1(resp);
        in_topk = detail::contains_target(resp, s.target);
        score = detail::target_score(resp, s.target);
        r.top1 = label;
        r.score_target = score;
      }
      r.queries_so_far = api.ledger().used() - start_used;

      if (in_topk) {
        x_adv = proposal;
        misses = 0;
        r.accepted = true;
        if (score >= cfg.t_adv) x_backtrack = x_adv;
        out.trace.push_back(r);
        if (at_eps && label == s.target) {
          out.success = true;
          break;
        }
        d = std::max(s.epsilon, d - cfg.delta_eps);
      } else {
        ++misses;
        if (misses > cfg.patience) {
          x_adv = x_backtrack;
          misses = 0;
          r.backtracked = true;
          if (cfg.reset_momentum_on_backtrack) state.reset(s.x_goal.shape());
        }
        out.trace.push_back(r);
      }
    }
  } catch (const BudgetExceeded&) {
    out.budget_exhausted = true;
  }
  out.x_adv = x_adv;
  out.iterations = out.trace.size();
  out.queries_used = api.ledger().used() - start_used;
  return out;
}

inline AttackOutcome run_prism(const AttackSetting& s, PredictionApi& api, const EnsembleSpec& ens,
                               const PrismConfig& cfg = {}) {
  if (ens.empty()) throw ArgumentError("PRISM needs a non-empty ensemble");
  return run_prism_loop(
      s, api,
      [&](const Tensor& x, MomentumState& st) -> const Tensor& {
        return ensemble_grad(ens, x, s.target, st);
      },
      cfg, "PRISM");
}

/// PRISM with a fresh random member subset per iteration; momentum carries
/// across subsets.
template <std::uniform_random_bit_generator Rng>
AttackOutcome run_prism_r(const AttackSetting& s, PredictionApi& api, const EnsembleSpec& ens,
                          const PrismConfig& cfg, Rng& rng) {
  if (ens.empty()) throw ArgumentError("PRISM_R needs a non-empty ensemble");
  return run_prism_loop(
      s, api,
      [&](const Tensor& x, MomentumState& st) -> const Tensor& {
        return ensemble_grad(subsample(ens, rng), x, s.target, st);
      },
      cfg, "PRISM_R");
}

// --- QO --------------------------------------------------------------------

/// Partial-information NES attack. Step sizes halve from eta_max down to
/// eta_min until a verification query keeps y' on top; when no step size
/// works the shrink delta halves (to zero below delta_eps_min, i.e. a pure
/// ascent step inside the current ball). eta_max drops by plateau_drop when
/// the target score fails to improve over plateau_length accepted steps.
struct QoConfig {
  NesConfig nes;
  double d0 = 0.50;
  double eta0 = 0.01;
  double eta_min = 5e-5;
  double delta_eps = 0.005;
  double delta_eps_min = 0.0005;
  std::size_t plateau_length = 5;
  double plateau_drop = 2.0;
  std::size_t max_iterations = 1'000'000;

  void validate() const {
    nes.validate();
    if (!(eta_min > 0.0) || eta0 < eta_min) throw ArgumentError("QO needs eta0 >= eta_min > 0");
    if (!(delta_eps > 0.0) || !(delta_eps_min > 0.0)) throw ArgumentError("QO delta_eps must be > 0");
    if (plateau_length < 1 || !(plateau_drop > 1.0)) throw ArgumentError("QO plateau rules invalid");
  }
};

template <std::uniform_random_bit_generator Rng>
AttackOutcome run_qo(const AttackSetting& s, PredictionApi& api, const QoConfig& cfg, Rng& rng) {
  s.validate();
  s.require_partial_information_start();
  cfg.validate();

  AttackOutcome out;
  out.method = "QO";
  const std::uint64_t start_used = api.ledger().used();
  double d = std::max(cfg.d0, s.epsilon);
  Tensor x_adv = s.x_start;
  project_ball(x_adv, s.x_goal, d);
  double eta_max = cfg.eta0;
  double delta = cfg.delta_eps;
  std::deque<double> history;
  std::size_t iter = 0;

  try {
    for (std::size_t step = 0; step < cfg.max_iterations; ++step) {
      // Never start an estimate that cannot be completed and verified.
      if (api.ledger().remaining() < cfg.nes.n_queries + 1) {
        out.budget_exhausted = true;
        break;
      }
      const Tensor g = nes_estimate(api, x_adv, s.target, cfg.nes, rng);
      out.estimation_queries += cfg.nes.n_queries;

      const double proposed_d = std::max(s.epsilon, d - delta);
      bool accepted = false;
      double accepted_score = 0.0;
      for (double eta = eta_max; eta >= cfg.eta_min; eta *= 0.5) {
        Tensor proposal = sign_step(x_adv, g, eta);
        project_ball(proposal, s.x_goal, proposed_d);
        const ApiResponse resp = api.query(proposal);
        const std::size_t label = top1(resp);

        TraceRecord r;
        r.iter = iter++;
        r.d = proposed_d;
        r.queried = true;
        r.top1 = label;
        r.score_target = detail::target_score(resp, s.target);
        r.linf_to_goal = linf_distance(proposal, s.x_goal);
        r.in_unit_range = in_unit_range(proposal);
        r.queries_so_far = api.ledger().used() - start_used;
        if (label == s.target) {
          r.accepted = true;
          out.trace.push_back(r);
          x_adv = std::move(proposal);
          d = proposed_d;
          accepted = true;
          accepted_score = *r.score_target;
          break;
        }
        out.trace.push_back(r);
      }

      if (accepted) {
        if (d <= s.epsilon) {
          out.success = true;
          break;
        }
        if (delta == 0.0) delta = cfg.delta_eps_min;
        history.push_back(accepted_score);
        if (history.size() > cfg.plateau_length) {
          if (history.back() < history.front()) {
            eta_max = std::max(cfg.eta_min, eta_max / cfg.plateau_drop);
            history.clear();
          } else {
            history.pop_front();
          }
        }
      } else {
        delta *= 0.5;
        if (delta < cfg.delta_eps_min) delta = 0.0;
      }
    }
  } catch (const BudgetExceeded&) {
    out.budget_exhausted = true;
  }
  out.x_adv = x_adv;
  out.iterations = out.trace.size();
  out.queries_used = api.ledger().used() - start_used;
  return out;
}

}  // namespace evasion

#endif  // EVASION_ATTACKS_HPP
