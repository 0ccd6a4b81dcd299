#include <csignal>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "evasion/dataset.hpp"
#include "evasion/errors.hpp"
#include "evasion/eval.hpp"
#include "evasion/lab.hpp"
#include "evasion/model_io.hpp"
#include "evasion/remote.hpp"
#include "evasion/strategy.hpp"
#include "evasion/zoo.hpp"

namespace fs = std::filesystem;
using namespace evasion;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitAttackFailed = 2;
constexpr int kExitUsage = 64;
constexpr int kExitUnavailable = 69;
constexpr int kExitIo = 74;

/// Flags shared by every subcommand; unset optionals leave the config file
/// (or built-in default) in charge.
struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> task;
  std::optional<std::string> zoo;
  std::optional<std::string> out;
  std::optional<std::size_t> jobs;
  std::optional<double> epsilon;
  std::optional<std::size_t> settings;
  std::optional<std::size_t> k;
  std::optional<std::string> remote;
  bool carry_state = false;

  void attach(CLI::App* app, bool with_out = true) {
    app->add_option("--config", config, "JSON run configuration");
    app->add_option("--seed", seed, "Seed for the zoo and every attack");
    app->add_option("--task", task, "shapes or blobs")->check(CLI::IsMember({"shapes", "blobs"}));
    app->add_option("--zoo", zoo, "Zoo directory (built on first use)");
    if (with_out) app->add_option("--out", out, "Output directory");
    app->add_option("--jobs", jobs, "Parallel settings")->check(CLI::PositiveNumber);
    app->add_option("--epsilon", epsilon, "L-infinity radius")->check(CLI::PositiveNumber);
    app->add_option("--settings", settings, "Number of plan entries")->check(CLI::Range(2, 100000));
    app->add_option("--k", k, "Labels returned by the victim API")->check(CLI::PositiveNumber);
    app->add_option("--remote", remote, "Attack a served victim at host:port");
    app->add_flag("--carry-state", carry_state, "Start each partial-information stage from the previous x_adv");
  }

  LabConfig resolve() const {
    LabConfig c = config.empty() ? LabConfig{} : load_lab_config(config);
    if (seed) c.seed = *seed;
    if (task) c.task = task_from_name(*task);
    if (zoo) c.zoo_dir = *zoo;
    if (out) c.out_dir = *out;
    if (jobs) c.jobs = *jobs;
    if (epsilon) c.epsilon = *epsilon;
    if (settings) c.settings = *settings;
    if (k) c.k = *k;
    if (remote) c.remote = *remote;
    if (carry_state) c.carry_state = true;
    return c;
  }
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// A method name, a named schedule, or a schedule JSON file.
struct AttackChoice {
  std::optional<Method> method;
  std::optional<Schedule> schedule;
  std::string name;
};

AttackChoice resolve_choice(const std::optional<std::string>& method, const std::optional<std::string>& schedule,
                            std::optional<std::uint64_t> budget) {
  if (method && schedule) throw CLI::ValidationError("--method and --schedule are exclusive");
  AttackChoice c;
  if (schedule) {
    if (auto named = Schedule::by_name(*schedule)) {
      c.schedule = *named;
    } else if (fs::exists(*schedule)) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(read_file(*schedule));
      } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(*schedule + " byte " + std::to_string(e.byte), e.what());
      }
      c.schedule = schedule_from_json(j);
    } else {
      throw CLI::ValidationError("--schedule", "unknown schedule '" + *schedule + "'");
    }
    c.name = c.schedule->name;
    if (budget) throw CLI::ValidationError("--budget", "a schedule carries its own budget");
    return c;
  }
  const std::string m = method.value_or("PRISM");
  c.method = parse_method(m);
  if (!c.method) throw CLI::ValidationError("--method", "unknown method '" + m + "'");
  c.name = method_name(*c.method);
  return c;
}

std::uint64_t default_budget(Method m) { return m == Method::qo ? 100000 : 1000; }

struct AttackRun {
  AttackOutcome outcome;
  bool budget_exhausted = false;
};

AttackRun run_choice(const Lab& lab, const AttackChoice& choice, const PlannedSetting& p,
                     std::optional<std::uint64_t> budget) {
  const ApiFactory make_api = lab.api_factory();
  const AttackContext ctx = lab.context();
  AttackRun r;
  if (choice.method) {
    PredictionApi api = make_api(budget.value_or(default_budget(*choice.method)));
    r.outcome = run_method(*choice.method, p.setting, api, ctx, p.id);
  } else {
    PredictionApi api = make_api(choice.schedule->budget);
    r.outcome = run_schedule(p.setting, api, *choice.schedule, ctx, p.id, lab.config.carry_state).outcome;
  }
  r.budget_exhausted = r.outcome.budget_exhausted;
  return r;
}

const PlannedSetting& planned(const ExperimentPlan& plan, std::size_t index) {
  if (index >= plan.settings.size()) {
    throw CLI::ValidationError("--setting", "setting " + std::to_string(index) + " outside the plan of " +
                                                std::to_string(plan.settings.size()));
  }
  const PlannedSetting& p = plan.settings[index];
  if (p.skip_reason) throw ArgumentError("setting " + std::to_string(index) + " is skipped: " + *p.skip_reason);
  return p;
}

// --- subcommands -------------------------------------------------------------

int cmd_zoo_build(const CommonFlags& flags) {
  LabConfig cfg = flags.resolve();
  const fs::path dir = flags.out ? fs::path(*flags.out) : cfg.zoo_dir;
  const ZooConfig zc = zoo_config_for(cfg.task, cfg.seed);
  Zoo zoo = build_zoo(zc);
  save_zoo(zoo, dir);
  std::cout << zoo_manifest(zoo)["models"].dump(2) << '\n';
  return kExitOk;
}

int cmd_attack(const CommonFlags& flags, const std::optional<std::string>& method,
               const std::optional<std::string>& schedule, const std::vector<std::size_t>& setting_ids,
               std::optional<std::uint64_t> budget, bool export_perturbation) {
  const AttackChoice choice = resolve_choice(method, schedule, budget);
  LabConfig cfg = flags.resolve();
  const Lab lab = open_lab(cfg);
  const ExperimentPlan plan = lab.plan();
  ensure_dir(cfg.out_dir);
  std::vector<std::size_t> ids = setting_ids.empty() ? std::vector<std::size_t>{0} : setting_ids;
  for (std::size_t id : ids) planned(plan, id);

  nlohmann::json results = nlohmann::json::array();
  bool all_ok = true;
  for (std::size_t id : ids) {
    const PlannedSetting& p = planned(plan, id);
    AttackRun run = run_choice(lab, choice, p, budget);
    nlohmann::json j = outcome_json(run.outcome);
    j["setting"] = id;
    j["method"] = choice.name;
    j["target"] = p.setting.target;
    j["budget_exhausted"] = run.budget_exhausted;
    results.push_back(j);
    std::cout << j.dump() << '\n';
    std::ostringstream trace;
    for (const auto& r : run.outcome.trace) trace << trace_record_json(r).dump() << '\n';
    const std::string stem = choice.name + "_" + std::to_string(id);
    write_file(cfg.out_dir / ("trace_" + stem + ".jsonl"), trace.str());
    if (export_perturbation) {
      write_file(cfg.out_dir / ("adv_" + stem + ".jsonl"),
                 image_record(run.outcome.x_adv, run.outcome.success ? p.setting.target : lab.victim_label()(run.outcome.x_adv)).dump() + "\n");
      write_file(cfg.out_dir / ("perturbation_" + stem + ".jsonl"),
                 image_record(perturbation_image(run.outcome.x_adv, p.setting.x_goal), p.setting.target).dump() + "\n");
    }
    all_ok = all_ok && run.outcome.success;
    write_file(cfg.out_dir / "attack.json", results.dump(2) + "\n");
  }
  return all_ok ? kExitOk : kExitAttackFailed;
}

int cmd_bench(const CommonFlags& flags, const std::vector<std::string>& only, bool resume, bool ablation) {
  LabConfig cfg = flags.resolve();
  const Lab lab = open_lab(cfg);
  const ExperimentPlan plan = lab.plan();
  ensure_dir(cfg.out_dir);

  std::vector<BenchEntry> entries;
  for (const auto& e : default_bench_entries()) {
    if (only.empty() || std::find(only.begin(), only.end(), e.name) != only.end()) entries.push_back(e);
  }
  for (const auto& name : only) {
    const bool known = std::any_of(entries.begin(), entries.end(), [&](const auto& e) { return e.name == name; });
    if (!known) throw CLI::ValidationError("--only", "unknown method or schedule '" + name + "'");
  }

  const fs::path csv = cfg.out_dir / "results.csv";
  std::vector<ResultRow> rows;
  BenchOptions opt;
  opt.jobs = cfg.jobs;
  opt.carry_state = cfg.carry_state;
  if (resume && fs::exists(csv)) {
    rows = rows_from_csv(read_file(csv));
    for (const auto& r : rows) opt.skip.insert({r.setting, r.method});
    std::cerr << "resuming with " << rows.size() << " finished runs\n";
  }
  {
    std::ofstream out(csv, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + csv.string());
    out << csv_header() << '\n';
    for (const auto& r : rows) out << csv_line(r) << '\n';
  }
  std::ofstream progress(csv, std::ios::binary | std::ios::app);
  if (!progress) throw IoError("cannot append to " + csv.string());
  opt.on_row = [&](const ResultRow& r) {
    progress << csv_line(r) << '\n';
    progress.flush();
  };

  std::vector<BenchRun> runs = run_bench(plan, lab.api_factory(), entries, lab.context(), opt);
  progress.close();
  std::size_t violations = 0;
  for (const auto& run : runs) {
    rows.push_back(run.row);
    for (const auto& v : run.violations) {
      std::cerr << "setting " << run.row.setting << " " << run.row.method << ": " << v << '\n';
      ++violations;
    }
  }
  const auto frontier = pareto_frontier(rows, base_method_names());
  const auto dominance = fit_dominance(frontier, 100000.0);
  write_report(cfg.out_dir, rows, frontier, dominance);
  nlohmann::json skipped = nlohmann::json::array();
  for (const auto& p : plan.settings) {
    if (p.skip_reason) skipped.push_back({{"setting", p.id}, {"reason", *p.skip_reason}});
  }
  write_file(cfg.out_dir / "skipped.json", skipped.dump(2) + "\n");
  if (ablation) {
    const auto cells = ablation_ensemble_size(plan, lab.api_factory(), lab.ensemble(), lab.context(), cfg.jobs);
    write_file(cfg.out_dir / "ablation.csv", ablation_csv(cells));
  }
  std::cout << summary_csv(rows);
  if (violations > 0) {
    std::cerr << violations << " soundness violations\n";
    return kExitFailure;
  }
  return kExitOk;
}

int cmd_scan(const CommonFlags& flags, const std::optional<std::string>& method, std::size_t setting) {
  const AttackChoice choice = resolve_choice(method, std::nullopt, std::nullopt);
  LabConfig cfg = flags.resolve();
  const Lab lab = open_lab(cfg);
  const ExperimentPlan plan = lab.plan();
  const PlannedSetting& p = planned(plan, setting);
  AttackRun run = run_choice(lab, choice, p, std::nullopt);
  if (!run.outcome.success) {
    std::cerr << choice.name << " failed on setting " << setting << "; no scan\n";
    return kExitAttackFailed;
  }
  PredictionApi viewer = lab.api_factory()(std::nullopt);
  SpanScanOptions range;
  range.v_max = std::max(range.v_max, 2.0 * p.setting.epsilon);
  SpanScan scan = span_scan([&](const Tensor& x) { return viewer.query(x); }, p.setting.x_start,
                            run.outcome.x_adv, p.setting.x_goal, p.setting.target, range);
  write_scan(cfg.out_dir, scan,
             {{"setting", setting}, {"method", choice.name}, {"queries", run.outcome.queries_used}});
  std::cout << nlohmann::json{{"setting", setting},
                              {"degenerate", scan.degenerate},
                              {"start_class", scan.start_class},
                              {"adv_class", scan.adv_class ? nlohmann::json(*scan.adv_class) : nlohmann::json(nullptr)},
                              {"target", scan.target}}
                   .dump()
            << '\n';
  return kExitOk;
}

int cmd_serve(const CommonFlags& flags, const std::optional<std::string>& model_file, std::uint16_t port) {
  LabConfig cfg = flags.resolve();
  std::shared_ptr<const Network> net;
  if (model_file) {
    net = std::make_shared<const Network>(load_model(*model_file));
  } else {
    net = open_lab(cfg).zoo.victim.network;
  }
  TopKServer server(local_top_k_classifier(net, cfg.k), port);
  server.on_disconnect([](std::uint64_t total) { std::cerr << "connection closed; " << total << " queries served\n"; });
  std::cout << "listening on 127.0.0.1:" << server.port() << std::endl;
  server.run();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Targeted black-box evasion lab: model zoo, attacks, benchmarks."};
  app.require_subcommand(1);

  CommonFlags zoo_flags, attack_flags, bench_flags, scan_flags, serve_flags;

  auto* zoo_cmd = app.add_subcommand("zoo-build", "Train the victim and substitute networks");
  zoo_flags.attach(zoo_cmd);

  auto* attack_cmd = app.add_subcommand("attack", "Run one method or schedule on plan settings");
  attack_flags.attach(attack_cmd);
  std::optional<std::string> attack_method, attack_schedule;
  std::vector<std::size_t> attack_settings;
  std::optional<std::uint64_t> attack_budget;
  bool export_perturbation = false;
  attack_cmd->add_option("--method", attack_method, "ENS, PRISM, PRISM_R or QO");
  attack_cmd->add_option("--schedule", attack_schedule, "EQ, EPQ, EPPR, EPPRQ or a schedule JSON file");
  attack_cmd->add_option("--setting", attack_settings, "Plan setting index (repeatable)");
  attack_cmd->add_option("--budget", attack_budget, "Query budget")->check(CLI::PositiveNumber);
  attack_cmd->add_flag("--export-perturbation", export_perturbation, "Write x_adv and perturbation records");

  auto* bench_cmd = app.add_subcommand("bench", "Run every method and schedule over the plan");
  bench_flags.attach(bench_cmd);
  bool resume = false;
  bool ablation = false;
  std::vector<std::string> only;
  bench_cmd->add_flag("--resume", resume, "Skip runs already in results.csv");
  bench_cmd->add_flag("--ablation", ablation, "Also run the ensemble-size ablation");
  bench_cmd->add_option("--only", only, "Restrict to these methods/schedules")->delimiter(',');

  auto* scan_cmd = app.add_subcommand("scan", "Classify the plane through x_goal, x_start and x_adv");
  scan_flags.attach(scan_cmd);
  std::optional<std::string> scan_method;
  std::size_t scan_setting = 0;
  scan_cmd->add_option("--method", scan_method, "Method producing x_adv (default PRISM)");
  scan_cmd->add_option("--setting", scan_setting, "Plan setting index");

  auto* serve_cmd = app.add_subcommand("serve", "Serve a model over the line-delimited JSON protocol");
  serve_flags.attach(serve_cmd, false);
  std::optional<std::string> serve_model;
  std::uint16_t serve_port = 0;
  serve_cmd->add_option("--model", serve_model, "Model file (default: the zoo victim)");
  serve_cmd->add_option("--port", serve_port, "TCP port on 127.0.0.1 (0 picks one)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*zoo_cmd) return cmd_zoo_build(zoo_flags);
    if (*attack_cmd) {
      return cmd_attack(attack_flags, attack_method, attack_schedule, attack_settings, attack_budget,
                        export_perturbation);
    }
    if (*bench_cmd) return cmd_bench(bench_flags, only, resume, ablation);
    if (*scan_cmd) return cmd_scan(scan_flags, scan_method, scan_setting);
    if (*serve_cmd) return cmd_serve(serve_flags, serve_model, serve_port);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const TransportError& e) {
    std::cerr << "unavailable: " << e.what() << '\n';
    return kExitUnavailable;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
