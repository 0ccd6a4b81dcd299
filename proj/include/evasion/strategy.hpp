#ifndef EVASION_STRATEGY_HPP
#define EVASION_STRATEGY_HPP

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "evasion/api.hpp"
#include "evasion/attacks.hpp"
#include "evasion/errors.hpp"
#include "evasion/gradients.hpp"

namespace evasion {

/// Evasion methods in their fixed tie-break order.
enum class Method { ens = 0, prism = 1, prism_r = 2, qo = 3 };

inline constexpr std::array<Method, 4> kAllMethods{Method::ens, Method::prism, Method::prism_r,
                                                   Method::qo};

inline std::string method_name(Method m) {
  switch (m) {
    case Method::ens: return "ENS";
    case Method::prism: return "PRISM";
    case Method::prism_r: return "PRISM_R";
    case Method::qo: return "QO";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
  std::string up;
  for (char c : s) up.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  for (Method m : kAllMethods) {
    if (up == method_name(m)) return m;
  }
  if (up == "PRISMR" || up == "PRISM-R") return Method::prism_r;
  return std::nullopt;
}

/// Everything an attack needs besides the setting and the victim.
struct AttackContext {
  EnsembleSpec ensemble;
  EnsConfig ens;
  PrismConfig prism;
  QoConfig qo;
  std::uint64_t seed = 0;
};

/// Per-(setting, method) RNG seed, so a method behaves identically whether it
/// runs alone or as a schedule stage.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t setting_id, Method m) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ setting_id) ^ static_cast<std::uint64_t>(m));
}

inline AttackOutcome run_method(Method m, const AttackSetting& s, PredictionApi& api,
                                const AttackContext& ctx, std::uint64_t setting_id) {
  std::mt19937_64 rng(derive_seed(ctx.seed, setting_id, m));
  switch (m) {
    case Method::ens: return run_ens(s, api, ctx.ensemble, ctx.ens);
    case Method::prism: return run_prism(s, api, ctx.ensemble, ctx.prism);
    case Method::prism_r: return run_prism_r(s, api, ctx.ensemble, ctx.prism, rng);
    case Method::qo: return run_qo(s, api, ctx.qo, rng);
  }
  throw ArgumentError("unknown method");
}

struct Stage {
  Method method = Method::ens;
  std::uint64_t until = 1;  // cumulative query threshold
};

struct Schedule {
  std::string name;
  std::vector<Stage> stages;
  std::uint64_t budget = 0;

  void validate() const {
    if (stages.empty()) throw ArgumentError("schedule has no stages");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (stages[i].until == 0) throw ArgumentError("stage thresholds must be positive");
      if (i > 0 && stages[i].until <= stages[i - 1].until) {
        throw ArgumentError("stage thresholds must strictly increase");
      }
    }
    if (stages.back().until != budget) {
      throw ArgumentError("last stage threshold must equal the budget");
    }
  }

  static Schedule single(Method m, std::uint64_t budget) {
    return {method_name(m), {{m, budget}}, budget};
  }
  static Schedule eq() { return {"EQ", {{Method::ens, 1}, {Method::qo, 100000}}, 100000}; }
  static Schedule epq() {
    return {"EPQ", {{Method::ens, 1}, {Method::prism, 1000}, {Method::qo, 100000}}, 100000};
  }
  static Schedule epprq() {
    return {"EPPRQ",
            {{Method::ens, 1}, {Method::prism, 50}, {Method::prism_r, 1000}, {Method::qo, 100000}},
            100000};
  }
  static Schedule eppr() {
    return {"EPPR", {{Method::ens, 1}, {Method::prism, 50}, {Method::prism_r, 1000}}, 1000};
  }
  static std::vector<Schedule> named() { return {eq(), epq(), epprq(), eppr()}; }

  static std::optional<Schedule> by_name(std::string_view name) {
    for (auto& s : named()) {
      if (s.name == name) return s;
    }
    return std::nullopt;
  }
};

inline nlohmann::json schedule_to_json(const Schedule& s) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& st : s.stages) stages.push_back({{"method", method_name(st.method)}, {"until", st.until}});
  nlohmann::json j{{"stages", stages}, {"budget", s.budget}};
  if (!s.name.empty()) j["name"] = s.name;
  return j;
}

namespace detail {
inline bool is_count(const nlohmann::json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}
}  // namespace detail

inline Schedule schedule_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("/", "schedule must be an object");
  if (!j.contains("stages") || !j["stages"].is_array()) throw ParseError("/stages", "expected array");
  if (!j.contains("budget") || !detail::is_count(j["budget"])) {
    throw ParseError("/budget", "expected positive integer");
  }
  Schedule s;
  s.name = j.value("name", std::string("custom"));
  s.budget = j["budget"].get<std::uint64_t>();
  for (std::size_t i = 0; i < j["stages"].size(); ++i) {
    const auto& st = j["stages"][i];
    const std::string at = "/stages/" + std::to_string(i);
    if (!st.is_object() || !st.contains("method") || !st["method"].is_string()) {
      throw ParseError(at + "/method", "expected method name");
    }
    auto m = parse_method(st["method"].get<std::string>());
    if (!m) throw ParseError(at + "/method", "unknown method '" + st["method"].get<std::string>() + "'");
    if (!st.contains("until") || !detail::is_count(st["until"])) {
      throw ParseError(at + "/until", "expected positive integer");
    }
    s.stages.push_back({*m, st["until"].get<std::uint64_t>()});
  }
  try {
    s.validate();
  } catch (const ArgumentError& e) {
    throw ParseError("/stages", e.what());
  }
  return s;
}

struct ScheduleOutcome {
  AttackOutcome outcome;                     // aggregate over stages
  std::optional<std::size_t> winning_stage;  // index into the schedule
  std::vector<AttackOutcome> stages;         // per-stage outcomes, in order
};

/// Runs stages over one shared ledger. A stage may issue queries until the
/// ledger reaches its cumulative threshold; it ends early on success. Each
/// stage restarts from its method's canonical start point unless
/// `carry_state` hands a partial-information stage the previous one's x_adv.
inline ScheduleOutcome run_schedule(const AttackSetting& s, PredictionApi& api, const Schedule& sched,
                                    const AttackContext& ctx, std::uint64_t setting_id,
                                    bool carry_state = false) {
  sched.validate();
  ScheduleOutcome result;
  result.outcome.method = sched.name;
  const std::uint64_t start_used = api.ledger().used();
  AttackSetting current = s;
  std::optional<Tensor> carried;

  for (std::size_t i = 0; i < sched.stages.size(); ++i) {
    const Stage& stage = sched.stages[i];
    if (api.ledger().used() - start_used >= stage.until) continue;
    api.ledger().set_stage_limit(start_used + stage.until);
    AttackSetting staged = current;
    if (carry_state && carried && stage.method != Method::ens) staged.x_start = *carried;
    AttackOutcome o = run_method(stage.method, staged, api, ctx, setting_id);
    api.ledger().set_stage_limit(std::nullopt);

    result.outcome.iterations += o.iterations;
    result.outcome.trace.insert(result.outcome.trace.end(), o.trace.begin(), o.trace.end());
    result.outcome.x_adv = o.x_adv;
    result.outcome.estimation_queries += o.estimation_queries;
    if (stage.method != Method::ens) carried = o.x_adv;
    const bool success = o.success;
    result.stages.push_back(std::move(o));
    if (success) {
      result.outcome.success = true;
      result.winning_stage = i;
      break;
    }
  }
  result.outcome.queries_used = api.ledger().used() - start_used;
  result.outcome.budget_exhausted = !result.outcome.success;
  if (result.outcome.x_adv.size() == 0) result.outcome.x_adv = s.x_goal;
  return result;
}

}  // namespace evasion

#endif  // EVASION_STRATEGY_HPP
