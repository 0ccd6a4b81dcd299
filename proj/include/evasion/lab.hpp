#ifndef EVASION_LAB_HPP
#define EVASION_LAB_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evasion/api.hpp"
#include "evasion/errors.hpp"
#include "evasion/eval.hpp"
#include "evasion/gradients.hpp"
#include "evasion/remote.hpp"
#include "evasion/strategy.hpp"
#include "evasion/zoo.hpp"

namespace evasion {

/// Run configuration shared by the command-line tool and the benchmarks.
/// Every field has a default; a JSON file may override any subset.
struct LabConfig {
  Task task = Task::shapes;
  std::filesystem::path zoo_dir = "zoo";
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 1;
  std::size_t settings = 50;
  std::optional<double> epsilon;  // task default when unset
  std::size_t k = 1;
  std::size_t jobs = 1;
  bool carry_state = false;
  std::optional<std::uint64_t> budget;  // overrides per-method budgets when set
  std::optional<std::string> remote;    // host:port of a served victim

  /// 0.05 on shapes, 0.3 on blobs unless set explicitly.
  double effective_epsilon() const {
    if (epsilon) return *epsilon;
    return task == Task::blobs ? 0.3 : 0.05;
  }
};

inline LabConfig lab_config_from_json(const nlohmann::json& j) {
  LabConfig c;
  if (!j.is_object()) throw ParseError("/", "config must be an object");
  try {
    if (j.contains("task")) c.task = task_from_name(j.at("task").get<std::string>());
    if (j.contains("zoo_dir")) c.zoo_dir = j.at("zoo_dir").get<std::string>();
    if (j.contains("out")) c.out_dir = j.at("out").get<std::string>();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("settings")) c.settings = j.at("settings").get<std::size_t>();
    if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
    if (j.contains("k")) c.k = j.at("k").get<std::size_t>();
    if (j.contains("jobs")) c.jobs = j.at("jobs").get<std::size_t>();
    if (j.contains("carry_state")) c.carry_state = j.at("carry_state").get<bool>();
    if (j.contains("budget")) c.budget = j.at("budget").get<std::uint64_t>();
    if (j.contains("remote")) c.remote = j.at("remote").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config", e.what());
  } catch (const ArgumentError& e) {
    throw ParseError("/task", e.what());
  }
  return c;
}

inline LabConfig load_lab_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + " byte " + std::to_string(e.byte), e.what());
  }
  return lab_config_from_json(j);
}

inline ZooConfig zoo_config_for(Task task, std::uint64_t seed) {
  return task == Task::blobs ? ZooConfig::blobs_default(seed) : ZooConfig::shapes_default(seed);
}

/// Parses "host:port".
inline std::pair<std::string, std::uint16_t> parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) {
    throw ArgumentError("endpoint must be host:port, got '" + s + "'");
  }
  unsigned long port = 0;
  try {
    std::size_t used = 0;
    port = std::stoul(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw ArgumentError("bad port in '" + s + "'");
  }
  if (port == 0 || port > 65535) throw ArgumentError("port out of range in '" + s + "'");
  return {s.substr(0, colon), static_cast<std::uint16_t>(port)};
}

/// A loaded zoo with everything needed to attack its victim.
struct Lab {
  Zoo zoo;
  LabConfig config;

  /// Fresh victim API per call: in process, or over TCP when `remote` is set.
  ApiFactory api_factory() const {
    if (config.remote) {
      auto [host, port] = parse_endpoint(*config.remote);
      return [host, port](std::optional<std::uint64_t> budget) {
        return remote_api(std::make_unique<TcpChannel>(host, port), budget);
      };
    }
    auto net = zoo.victim.network;
    Shape shape = zoo.attack_shape;
    std::size_t k = config.k;
    return [net, shape, k](std::optional<std::uint64_t> budget) {
      return PredictionApi::local(net, shape, Postprocessor::top_k(k), budget);
    };
  }

  /// The victim's clean top-1 label, without touching any ledger of record.
  LabelFn victim_label() const {
    auto net = zoo.victim.network;
    auto pre = std::make_shared<Preprocessor>(Preprocessor::to_native(zoo.attack_shape, net->input_shape()));
    return [net, pre](const Tensor& x) { return argmax(forward(*net, pre->apply(x))); };
  }

  EnsembleSpec ensemble() const {
    std::vector<EnsembleMember> members;
    for (const auto& m : zoo.substitutes_by_accuracy()) {
      members.push_back(EnsembleMember::for_attack_space(m.network, zoo.attack_shape));
    }
    return EnsembleSpec(std::move(members));
  }

  AttackContext context() const {
    AttackContext ctx;
    ctx.ensemble = ensemble();
    ctx.seed = config.seed;
    return ctx;
  }

  ExperimentPlan plan(std::optional<std::size_t> n = std::nullopt) const {
    const LabelFn label = victim_label();
    const std::size_t count = n.value_or(config.settings);
    return build_plan(select_entries(zoo.test_set(), count, label), label, config.effective_epsilon());
  }
};

inline Lab open_lab(const LabConfig& cfg) {
  return {load_or_build_zoo(zoo_config_for(cfg.task, cfg.seed), cfg.zoo_dir), cfg};
}

}  // namespace evasion

#endif  // EVASION_LAB_HPP
