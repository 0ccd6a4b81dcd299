#ifndef EVASION_EVAL_HPP
#define EVASION_EVAL_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "evasion/api.hpp"
#include "evasion/attacks.hpp"
#include "evasion/dataset.hpp"
#include "evasion/errors.hpp"
#include "evasion/strategy.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

// --- experiment plans ------------------------------------------------------

struct PlannedSetting {
  std::size_t id = 0;
  AttackSetting setting;
  std::optional<std::string> skip_reason;
};

struct ExperimentPlan {
  std::vector<LabeledImage> entries;
  std::vector<PlannedSetting> settings;

  std::vector<const PlannedSetting*> active() const {
    std::vector<const PlannedSetting*> out;
    for (const auto& p : settings) {
      if (!p.skip_reason) out.push_back(&p);
    }
    return out;
  }
};

using LabelFn = std::function<std::size_t(const Tensor&)>;

/// Cyclic pairing: setting i attacks entry i towards the class of entry
/// i+1 (mod n), starting from that entry's image. Settings whose start image
/// the victim does not label as the target, or whose goal image already has
/// the target label, are kept and marked skipped.
inline ExperimentPlan build_plan(std::vector<LabeledImage> entries, const LabelFn& victim_label,
                                 double epsilon = 0.05) {
  if (entries.size() < 2) throw ArgumentError("an experiment plan needs at least 2 entries");
  ExperimentPlan plan;
  plan.entries = std::move(entries);
  const std::size_t n = plan.entries.size();
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = victim_label(plan.entries[i].image);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = (i + 1) % n;
    PlannedSetting p;
    p.id = i;
    p.setting.x_goal = plan.entries[i].image;
    p.setting.x_start = plan.entries[j].image;
    p.setting.target = plan.entries[j].label;
    p.setting.epsilon = epsilon;
    p.setting.start_class = labels[j];
    if (labels[j] != p.setting.target) {
      p.skip_reason = "victim labels x_start as " + std::to_string(labels[j]) + ", not " +
                      std::to_string(p.setting.target);
    } else if (labels[i] == p.setting.target) {
      p.skip_reason = "victim already labels x_goal as the target";
    }
    plan.settings.push_back(std::move(p));
  }
  return plan;
}

/// Picks `n` entries in dataset order that the victim classifies correctly,
/// each with a class different from the previous pick and the last different
/// from the first, so the cyclic plan has no skipped settings.
inline std::vector<LabeledImage> select_entries(const LabeledDataset& data, std::size_t n,
                                                const LabelFn& victim_label) {
  std::vector<LabeledImage> out;
  for (const auto& it : data.items) {
    if (out.size() == n) break;
    if (!out.empty() && out.back().label == it.label) continue;
    if (out.size() + 1 == n && !out.empty() && out.front().label == it.label) continue;
    if (victim_label(it.image) != it.label) continue;
    out.push_back(it);
  }
  if (out.size() < n) {
    throw ArgumentError("only " + std::to_string(out.size()) + " usable entries for a plan of " +
                        std::to_string(n));
  }
  return out;
}

// --- results ---------------------------------------------------------------

struct ResultRow {
  std::size_t setting = 0;
  std::string method;
  bool success = false;
  std::uint64_t queries = 0;  // meaningful when success; failures report the spend
  std::size_t iterations = 0;
  double wall_seconds = 0.0;

  friend bool operator==(const ResultRow& a, const ResultRow& b) {
    return a.setting == b.setting && a.method == b.method && a.success == b.success &&
           a.queries == b.queries && a.iterations == b.iterations;
  }
};

/// Fixed method order used for tie-breaks and row ordering; unknown names
/// sort after the four base methods.
inline int method_rank(const std::string& name) {
  static const std::vector<std::string> order{"ENS", "PRISM", "PRISM_R", "QO", "EQ", "EPQ", "EPPR", "EPPRQ"};
  auto it = std::find(order.begin(), order.end(), name);
  return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

inline bool row_less(const ResultRow& a, const ResultRow& b) {
  if (a.setting != b.setting) return a.setting < b.setting;
  const int ra = method_rank(a.method);
  const int rb = method_rank(b.method);
  if (ra != rb) return ra < rb;
  return a.method < b.method;
}

inline const std::string& csv_header() {
  static const std::string h = "setting,method,success,queries,iterations";
  return h;
}

inline std::string csv_line(const ResultRow& r) {
  return std::to_string(r.setting) + "," + r.method + "," + (r.success ? "1" : "0") + "," +
         std::to_string(r.queries) + "," + std::to_string(r.iterations);
}

inline std::string rows_to_csv(std::vector<ResultRow> rows) {
  std::sort(rows.begin(), rows.end(), row_less);
  std::string out = csv_header() + "\n";
  for (const auto& r : rows) out += csv_line(r) + "\n";
  return out;
}

/// Parses results CSV; a truncated final line (from an interrupted run) is
/// ignored, any other malformed line is a ParseError.
inline std::vector<ResultRow> rows_from_csv(const std::string& text) {
  std::vector<ResultRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  const bool ends_clean = text.empty() || text.back() == '\n';
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  for (std::size_t li = 0; li < lines.size(); ++li) {
    line = lines[li];
    ++line_no;
    if (line_no == 1) {
      if (line != csv_header()) throw ParseError("line 1", "unexpected CSV header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    const bool last = li + 1 == lines.size();
    try {
      if (f.size() != 5) throw std::invalid_argument("expected 5 fields");
      ResultRow r;
      r.setting = std::stoull(f[0]);
      r.method = f[1];
      if (f[2] != "0" && f[2] != "1") throw std::invalid_argument("success must be 0 or 1");
      r.success = f[2] == "1";
      r.queries = std::stoull(f[3]);
      r.iterations = std::stoull(f[4]);
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      if (last && !ends_clean) break;
      throw ParseError("line " + std::to_string(line_no), e.what());
    }
  }
  return rows;
}

struct MethodSummary {
  std::string method;
  std::size_t settings = 0;
  std::size_t successes = 0;
  double success_rate = 0.0;
  std::optional<double> mean_queries;    // over successes
  std::optional<double> median_queries;  // over successes
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of an empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline std::vector<MethodSummary> summarize(const std::vector<ResultRow>& rows) {
  std::map<std::string, std::vector<const ResultRow*>> by;
  for (const auto& r : rows) by[r.method].push_back(&r);
  std::vector<MethodSummary> out;
  for (const auto& [name, rs] : by) {
    MethodSummary s;
    s.method = name;
    s.settings = rs.size();
    std::vector<double> q;
    for (const auto* r : rs) {
      if (r->success) q.push_back(static_cast<double>(r->queries));
    }
    s.successes = q.size();
    s.success_rate = s.settings ? static_cast<double>(q.size()) / static_cast<double>(s.settings) : 0.0;
    if (!q.empty()) {
      s.mean_queries = std::accumulate(q.begin(), q.end(), 0.0) / static_cast<double>(q.size());
      s.median_queries = median_of(q);
    }
    out.push_back(s);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    const int ra = method_rank(a.method), rb = method_rank(b.method);
    return ra != rb ? ra < rb : a.method < b.method;
  });
  return out;
}

/// Query counts of two methods on the settings both solved, paired by setting.
struct PairedQueries {
  std::vector<double> a;
  std::vector<double> b;
};

inline PairedQueries jointly_successful(const std::vector<ResultRow>& rows, const std::string& a,
                                        const std::string& b) {
  std::map<std::size_t, double> qa, qb;
  for (const auto& r : rows) {
    if (!r.success) continue;
    if (r.method == a) qa[r.setting] = static_cast<double>(r.queries);
    if (r.method == b) qb[r.setting] = static_cast<double>(r.queries);
  }
  PairedQueries p;
  for (const auto& [s, q] : qa) {
    auto it = qb.find(s);
    if (it == qb.end()) continue;
    p.a.push_back(q);
    p.b.push_back(it->second);
  }
  return p;
}

// --- pareto frontier -------------------------------------------------------

struct FrontierPoint {
  std::size_t setting = 0;
  std::string method;
  std::uint64_t queries = 0;
};

/// Per setting, the successful method with the fewest queries; ties go to
/// the earlier method in the fixed order. Settings without a success are
/// absent. Only rows whose method is in `methods` are considered (all rows
/// when empty).
inline std::vector<FrontierPoint> pareto_frontier(const std::vector<ResultRow>& rows,
                                                  const std::vector<std::string>& methods = {}) {
  std::map<std::size_t, FrontierPoint> best;
  for (const auto& r : rows) {
    if (!r.success) continue;
    if (!methods.empty() && std::find(methods.begin(), methods.end(), r.method) == methods.end()) continue;
    auto it = best.find(r.setting);
    if (it == best.end()) {
      best[r.setting] = {r.setting, r.method, r.queries};
      continue;
    }
    FrontierPoint& b = it->second;
    if (r.queries < b.queries ||
        (r.queries == b.queries && (method_rank(r.method) < method_rank(b.method) ||
                                    (method_rank(r.method) == method_rank(b.method) && r.method < b.method)))) {
      b = {r.setting, r.method, r.queries};
    }
  }
  std::vector<FrontierPoint> out;
  for (auto& [s, p] : best) out.push_back(p);
  return out;
}

inline std::vector<std::string> base_method_names() {
  std::vector<std::string> out;
  for (Method m : kAllMethods) out.push_back(method_name(m));
  return out;
}

// --- dominance regions -----------------------------------------------------

struct DominanceRegion {
  std::string method;
  double from = 0.0;  // queries, inclusive
  double to = 0.0;    // queries
};

struct DominanceModel {
  std::vector<std::string> classes;
  std::vector<double> intercepts;
  std::vector<double> slopes;  // on log10 q*
  bool degenerate = false;
  std::size_t iterations = 0;
  double gradient_norm = 0.0;
  std::vector<double> nll_history;  // after each accepted step, starting at the initial NLL
  std::vector<DominanceRegion> regions;
  std::map<std::string, std::optional<double>> onsets;

  std::size_t predict_index(double q) const {
    const double x = std::log10(q);
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const double v = intercepts[c] + slopes[c] * x;
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    return best;
  }
  const std::string& predict(double q) const { return classes[predict_index(q)]; }
};

struct DominanceOptions {
  double gradient_tolerance = 1e-6;
  std::size_t max_iterations = 100000;
  std::size_t scan_points = 2001;
};

namespace detail {

// Mean multinomial NLL of samples (x, y) under per-class (a, b); the gradient
// is written into `grad` as [da..., db...] when non-null.
inline double softmax_nll(const std::vector<double>& xs, const std::vector<std::size_t>& ys,
                          const std::vector<double>& theta, std::size_t k, std::vector<double>* grad) {
  double nll = 0.0;
  if (grad) grad->assign(2 * k, 0.0);
  std::vector<double> z(k);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      z[c] = theta[c] + theta[k + c] * xs[i];
      m = std::max(m, z[c]);
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += std::exp(z[c] - m);
    const double lse = m + std::log(sum);
    nll += lse - z[ys[i]];
    if (grad) {
      for (std::size_t c = 0; c < k; ++c) {
        const double p = std::exp(z[c] - lse) - (c == ys[i] ? 1.0 : 0.0);
        (*grad)[c] += p;
        (*grad)[k + c] += p * xs[i];
      }
    }
  }
  const double n = static_cast<double>(xs.size());
  if (grad) {
    for (double& g : *grad) g /= n;
  }
  return nll / n;
}

}  // namespace detail

/// Multinomial logistic regression of the frontier method on log10 q*, by
/// full-batch gradient descent with step halving so the NLL never rises.
/// Regions are read off a log-spaced scan of q* over [1, budget].
inline DominanceModel fit_dominance(const std::vector<FrontierPoint>& points, double budget,
                                    const DominanceOptions& opt = {}) {
  if (!(budget >= 1.0)) throw ArgumentError("dominance scan needs budget >= 1");
  DominanceModel model;
  std::set<std::string> present;
  for (const auto& p : points) present.insert(p.method);
  for (const auto& p : present) model.classes.push_back(p);
  std::sort(model.classes.begin(), model.classes.end(), [](const auto& a, const auto& b) {
    const int ra = method_rank(a), rb = method_rank(b);
    return ra != rb ? ra < rb : a < b;
  });
  const std::size_t k = model.classes.size();
  model.intercepts.assign(k, 0.0);
  model.slopes.assign(k, 0.0);

  if (k < 2) {
    model.degenerate = true;
    if (k == 1) {
      model.regions.push_back({model.classes[0], 1.0, budget});
      model.onsets[model.classes[0]] = 1.0;
    }
    return model;
  }

  std::vector<double> xs;
  std::vector<std::size_t> ys;
  for (const auto& p : points) {
    xs.push_back(std::log10(static_cast<double>(std::max<std::uint64_t>(p.queries, 1))));
    ys.push_back(static_cast<std::size_t>(
        std::find(model.classes.begin(), model.classes.end(), p.method) - model.classes.begin()));
  }

  std::vector<double> theta(2 * k, 0.0);
  std::vector<double> grad;
  double nll = detail::softmax_nll(xs, ys, theta, k, &grad);
  model.nll_history.push_back(nll);
  double step = 1.0;
  std::vector<double> trial(2 * k);
  std::size_t it = 0;
  auto norm = [](const std::vector<double>& g) {
    double s = 0.0;
    for (double v : g) s += v * v;
    return std::sqrt(s);
  };
  double gnorm = norm(grad);
  while (it < opt.max_iterations && gnorm >= opt.gradient_tolerance) {
    bool accepted = false;
    while (step > 1e-16) {
      for (std::size_t i = 0; i < theta.size(); ++i) trial[i] = theta[i] - step * grad[i];
      const double trial_nll = detail::softmax_nll(xs, ys, trial, k, nullptr);
      if (trial_nll <= nll) {
        theta = trial;
        nll = trial_nll;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    ++it;
    if (!accepted) break;
    model.nll_history.push_back(nll);
    nll = detail::softmax_nll(xs, ys, theta, k, &grad);
    gnorm = norm(grad);
    step *= 2.0;
  }
  model.iterations = it;
  model.gradient_norm = gnorm;
  for (std::size_t c = 0; c < k; ++c) {
    model.intercepts[c] = theta[c];
    model.slopes[c] = theta[k + c];
  }

  const std::size_t n_scan = std::max<std::size_t>(opt.scan_points, 2);
  const double top = std::log10(budget);
  std::optional<std::size_t> current;
  for (const auto& c : model.classes) model.onsets[c] = std::nullopt;
  for (std::size_t i = 0; i < n_scan; ++i) {
    const double q = std::pow(10.0, top * static_cast<double>(i) / static_cast<double>(n_scan - 1));
    const std::size_t c = model.predict_index(q);
    if (!current || *current != c) {
      if (current) model.regions.back().to = q;
      model.regions.push_back({model.classes[c], q, budget});
      if (!model.onsets[model.classes[c]]) model.onsets[model.classes[c]] = q;
      current = c;
    }
  }
  return model;
}

/// True when every method in `order` owns a region and the onsets increase
/// in that order.
inline bool onsets_ordered(const DominanceModel& m, const std::vector<std::string>& order) {
  double last = -1.0;
  for (const auto& name : order) {
    auto it = m.onsets.find(name);
    if (it == m.onsets.end() || !it->second) return false;
    if (!(*it->second > last)) return false;
    last = *it->second;
  }
  return true;
}

inline nlohmann::json dominance_json(const DominanceModel& m) {
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    nlohmann::json onset = m.onsets.count(m.classes[c]) && m.onsets.at(m.classes[c])
                               ? nlohmann::json(*m.onsets.at(m.classes[c]))
                               : nlohmann::json(nullptr);
    classes.push_back({{"method", m.classes[c]},
                       {"intercept", m.intercepts[c]},
                       {"slope", m.slopes[c]},
                       {"onset", onset}});
  }
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& r : m.regions) regions.push_back({{"method", r.method}, {"from", r.from}, {"to", r.to}});
  return {{"feature", "log10_queries"}, {"degenerate", m.degenerate}, {"iterations", m.iterations},
          {"gradient_norm", m.gradient_norm}, {"classes", classes}, {"regions", regions}};
}

// --- parallel runner -------------------------------------------------------

/// Calls fn(i) for i in [0, n) on up to `jobs` threads. The first exception
/// thrown by any task is rethrown after all threads finish.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        next.store(n);
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < jobs; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);
}

// --- benchmark -------------------------------------------------------------

/// Makes a fresh API (with its own ledger) per run.
using ApiFactory = std::function<PredictionApi(std::optional<std::uint64_t> budget)>;

/// One benchmark column: a single method or a schedule under a budget.
struct BenchEntry {
  std::string name;
  std::optional<Method> method;
  std::optional<Schedule> schedule;
  std::uint64_t budget = 1000;

  static BenchEntry single(Method m, std::uint64_t budget) { return {method_name(m), m, std::nullopt, budget}; }
  static BenchEntry scheduled(const Schedule& s) { return {s.name, std::nullopt, s, s.budget}; }
};

/// Bench defaults: the four methods (QO at 100000, others at 1000) and the
/// four named schedules.
inline std::vector<BenchEntry> default_bench_entries() {
  return {BenchEntry::single(Method::ens, 1000),   BenchEntry::single(Method::prism, 1000),
          BenchEntry::single(Method::prism_r, 1000), BenchEntry::single(Method::qo, 100000),
          BenchEntry::scheduled(Schedule::eq()),   BenchEntry::scheduled(Schedule::epq()),
          BenchEntry::scheduled(Schedule::eppr()), BenchEntry::scheduled(Schedule::epprq())};
}

/// Soundness violations of one finished run (empty when sound).
inline std::vector<std::string> audit_run(const AttackSetting& s, const AttackOutcome& o, std::uint64_t ledger_delta,
                                          std::uint64_t budget, const LabelFn& replay, bool prism_like) {
  std::vector<std::string> v;
  if (o.queries_used != ledger_delta) v.push_back("queries_used differs from the ledger delta");
  if (o.queries_used > budget) v.push_back("queries_used exceeds the budget");
  if (o.success) {
    if (linf_distance(o.x_adv, s.x_goal) > s.epsilon + 1e-9) v.push_back("success outside the epsilon ball");
    if (replay(o.x_adv) != s.target) v.push_back("success does not replay as the target");
  }
  for (const auto& r : o.trace) {
    if (r.linf_to_goal > r.d + 1e-12) {
      v.push_back("iterate " + std::to_string(r.iter) + " leaves the d-ball");
      break;
    }
    if (!r.in_unit_range) {
      v.push_back("iterate " + std::to_string(r.iter) + " leaves [0,1]");
      break;
    }
  }
  if (prism_like) {
    for (const auto& r : o.trace) {
      if (r.d > s.epsilon && (r.queried || r.queries_so_far != 0)) {
        v.push_back("query issued while d > epsilon");
        break;
      }
    }
  }
  return v;
}

struct BenchRun {
  ResultRow row;
  std::vector<std::string> violations;
};

struct BenchOptions {
  std::size_t jobs = 1;
  bool carry_state = false;
  /// Called after each finished run (from worker threads, serialized).
  std::function<void(const ResultRow&)> on_row;
  /// (setting, method) pairs already done; they are not re-run.
  std::set<std::pair<std::size_t, std::string>> skip;
};

inline std::vector<BenchRun> run_bench(const ExperimentPlan& plan, const ApiFactory& make_api,
                                       const std::vector<BenchEntry>& entries, const AttackContext& ctx,
                                       const BenchOptions& opt = {}) {
  struct Job {
    const PlannedSetting* setting;
    const BenchEntry* entry;
  };
  std::vector<Job> jobs;
  for (const auto* p : plan.active()) {
    for (const auto& e : entries) {
      if (opt.skip.count({p->id, e.name})) continue;
      jobs.push_back({p, &e});
    }
  }
  std::vector<BenchRun> runs(jobs.size());
  std::mutex row_mutex;
  parallel_for(jobs.size(), opt.jobs, [&](std::size_t i) {
    const auto& job = jobs[i];
    const AttackSetting& s = job.setting->setting;
    PredictionApi api = make_api(job.entry->budget);
    const auto t0 = std::chrono::steady_clock::now();
    AttackOutcome o;
    bool prism_like = false;
    if (job.entry->method) {
      o = run_method(*job.entry->method, s, api, ctx, job.setting->id);
      prism_like = *job.entry->method == Method::prism || *job.entry->method == Method::prism_r;
    } else {
      o = run_schedule(s, api, *job.entry->schedule, ctx, job.setting->id, opt.carry_state).outcome;
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    PredictionApi replay_api = make_api(std::nullopt);
    LabelFn replay = [&](const Tensor& x) { return top1(replay_api.query(x)); };
    BenchRun run;
    run.violations = audit_run(s, o, api.ledger().used(), job.entry->budget, replay, prism_like);
    run.row = {job.setting->id, job.entry->name, o.success, o.queries_used, o.iterations, wall};
    runs[i] = run;
    if (opt.on_row) {
      std::lock_guard<std::mutex> lock(row_mutex);
      opt.on_row(run.row);
    }
  });
  return runs;
}

// --- ensemble-size ablation ------------------------------------------------

struct AblationCell {
  std::size_t k = 0;
  double ens_b1_success = 0.0;
  double ens_b1000_success = 0.0;
  double prism_success = 0.0;
  std::optional<double> ens_b1_median;
  std::optional<double> ens_b1000_median;
  std::optional<double> prism_median;
};

/// For K = 1..members, the ensemble of the first K members (callers order
/// them by held-out accuracy, best first) runs ENS(B=1), ENS(B=1000) and
/// PRISM(B=1000) over the plan.
inline std::vector<AblationCell> ablation_ensemble_size(const ExperimentPlan& plan, const ApiFactory& make_api,
                                                        const EnsembleSpec& ordered, const AttackContext& base,
                                                        std::size_t jobs = 1) {
  std::vector<AblationCell> cells;
  const auto active = plan.active();
  for (std::size_t k = 1; k <= ordered.size(); ++k) {
    AttackContext ctx = base;
    ctx.ensemble = ordered.prefix(k);
    std::vector<std::array<std::optional<std::uint64_t>, 3>> res(active.size());
    parallel_for(active.size(), jobs, [&](std::size_t i) {
      const auto& s = active[i]->setting;
      auto run = [&](Method m, std::uint64_t b) -> std::optional<std::uint64_t> {
        PredictionApi api = make_api(b);
        AttackOutcome o = run_method(m, s, api, ctx, active[i]->id);
        return o.success ? std::optional<std::uint64_t>(o.queries_used) : std::nullopt;
      };
      res[i] = {run(Method::ens, 1), run(Method::ens, 1000), run(Method::prism, 1000)};
    });
    AblationCell cell;
    cell.k = k;
    for (int col = 0; col < 3; ++col) {
      std::vector<double> q;
      for (const auto& r : res) {
        if (r[col]) q.push_back(static_cast<double>(*r[col]));
      }
      const double rate = active.empty() ? 0.0 : static_cast<double>(q.size()) / static_cast<double>(active.size());
      std::optional<double> med = q.empty() ? std::nullopt : std::optional<double>(median_of(q));
      if (col == 0) { cell.ens_b1_success = rate; cell.ens_b1_median = med; }
      if (col == 1) { cell.ens_b1000_success = rate; cell.ens_b1000_median = med; }
      if (col == 2) { cell.prism_success = rate; cell.prism_median = med; }
    }
    cells.push_back(cell);
  }
  return cells;
}

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
  auto opt = [](const std::optional<double>& v) {
    if (!v) return std::string();
    std::ostringstream os;
    os << *v;
    return os.str();
  };
  std::ostringstream os;
  os << "k,ens_b1_success,ens_b1_median,ens_b1000_success,ens_b1000_median,prism_success,prism_median\n";
  for (const auto& c : cells) {
    os << c.k << ',' << c.ens_b1_success << ',' << opt(c.ens_b1_median) << ',' << c.ens_b1000_success << ','
       << opt(c.ens_b1000_median) << ',' << c.prism_success << ',' << opt(c.prism_median) << '\n';
  }
  return os.str();
}

// --- linear span scan ------------------------------------------------------

struct SpanScan {
  std::size_t columns = 121;  // along axis 1 (towards x_start)
  std::size_t rows = 21;      // along axis 2 (towards x_adv)
  std::vector<double> u;      // axis-1 coordinates, size columns
  std::vector<double> v;      // axis-2 coordinates, size rows
  std::vector<std::size_t> classes;                // row-major rows x columns
  std::vector<std::optional<double>> target_scores;  // row-major
  bool degenerate = false;
  std::size_t target = 0;
  std::pair<std::size_t, std::size_t> start_cell;           // (row, column)
  std::optional<std::pair<std::size_t, std::size_t>> adv_cell;
  std::size_t start_class = 0;
  std::optional<std::size_t> adv_class;

  std::size_t at(std::size_t row, std::size_t col) const { return classes.at(row * columns + col); }
};

struct SpanScanOptions {
  std::size_t columns = 121;
  std::size_t rows = 21;
  double u_min = -0.1, u_max = 0.5;
  double v_min = 0.0, v_max = 0.1;
};

/// Classifies the plane through x_goal spanned by the directions to x_start
/// and to x_adv. Axis 1 is scaled so x_start sits at u = u_max; axis 2 is
/// scaled in L-infinity units of (x_adv - x_goal), snapped so x_adv falls on
/// a grid row. Cells are clipped to [0,1] before classification. When x_adv
/// is collinear with x_start (or equals x_goal) the scan is one row.
inline SpanScan span_scan(const std::function<ApiResponse(const Tensor&)>& classify, const Tensor& x_start,
                          const Tensor& x_adv, const Tensor& x_goal, std::size_t target,
                          const SpanScanOptions& opt = {}) {
  require_same_shape(x_start, x_goal, "span scan");
  require_same_shape(x_adv, x_goal, "span scan");
  if (opt.columns < 2 || opt.rows < 2) throw ArgumentError("span scan grid needs >= 2 points per axis");
  if (!(opt.u_max > 0.0) || !(opt.u_min < opt.u_max) || !(opt.v_min < opt.v_max)) {
    throw ArgumentError("span scan ranges invalid");
  }
  const std::size_t n = x_goal.size();
  std::vector<double> a1(n), a2(n);
  for (std::size_t i = 0; i < n; ++i) {
    a1[i] = x_start[i] - x_goal[i];
    a2[i] = x_adv[i] - x_goal[i];
  }
  double n1 = 0.0, n2 = 0.0, d12 = 0.0, linf2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    n1 += a1[i] * a1[i];
    n2 += a2[i] * a2[i];
    d12 += a1[i] * a2[i];
    linf2 = std::max(linf2, std::abs(a2[i]));
  }
  if (n1 == 0.0) throw ArgumentError("span scan needs x_start != x_goal");

  SpanScan out;
  out.target = target;
  out.columns = opt.columns;
  const double du = (opt.u_max - opt.u_min) / static_cast<double>(opt.columns - 1);
  for (std::size_t c = 0; c < opt.columns; ++c) {
    const double u = opt.u_min + du * static_cast<double>(c);
    out.u.push_back(std::abs(u) < 1e-9 * du ? 0.0 : u);
  }
  out.u.back() = opt.u_max;
  const std::size_t start_col = opt.columns - 1;

  out.degenerate = n2 == 0.0 || std::abs(d12) >= (1.0 - 1e-9) * std::sqrt(n1 * n2);
  const double dv = (opt.v_max - opt.v_min) / static_cast<double>(opt.rows - 1);
  std::optional<std::size_t> adv_row;
  if (out.degenerate) {
    out.rows = 1;
    out.v = {0.0};
  } else {
    out.rows = opt.rows;
    for (std::size_t r = 0; r < opt.rows; ++r) out.v.push_back(opt.v_min + dv * static_cast<double>(r));
    const double pos = (linf2 - opt.v_min) / dv;
    if (pos >= -0.5 && pos <= static_cast<double>(opt.rows) - 0.5) {
      adv_row = static_cast<std::size_t>(std::llround(std::max(0.0, pos)));
      if (out.v[*adv_row] <= 0.0) adv_row.reset();
    }
  }

  // Start cell sits at row with v = 0 when available, else the lowest row.
  std::size_t zero_row = 0;
  for (std::size_t r = 0; r < out.v.size(); ++r) {
    if (std::abs(out.v[r]) < std::abs(out.v[zero_row])) zero_row = r;
  }
  out.start_cell = {zero_row, start_col};
  if (adv_row) {
    // Column where u = 0.
    std::size_t zero_col = 0;
    for (std::size_t c = 0; c < out.u.size(); ++c) {
      if (std::abs(out.u[c]) < std::abs(out.u[zero_col])) zero_col = c;
    }
    out.adv_cell = {*adv_row, zero_col};
  }

  out.classes.resize(out.rows * out.columns);
  out.target_scores.resize(out.rows * out.columns);
  Tensor cell(x_goal.shape());
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.columns; ++c) {
      const bool is_start = r == out.start_cell.first && c == out.start_cell.second && out.v[r] == 0.0;
      const bool is_adv = out.adv_cell && r == out.adv_cell->first && c == out.adv_cell->second && out.u[c] == 0.0;
      if (is_start) {
        cell = x_start;
      } else if (is_adv) {
        cell = x_adv;
      } else {
        const double cu = out.u[c] / opt.u_max;
        const double cv = out.degenerate || !adv_row ? (linf2 > 0 ? out.v[r] / linf2 : 0.0)
                                                     : out.v[r] / out.v[*adv_row];
        for (std::size_t i = 0; i < n; ++i) cell[i] = x_goal[i] + cu * a1[i] + cv * a2[i];
        clip_unit(cell);
      }
      const ApiResponse resp = classify(cell);
      out.classes[r * out.columns + c] = top1(resp);
      out.target_scores[r * out.columns + c] = score_of(resp, target);
    }
  }
  out.start_class = out.at(out.start_cell.first, out.start_cell.second);
  if (out.adv_cell) out.adv_class = out.at(out.adv_cell->first, out.adv_cell->second);
  return out;
}

inline nlohmann::json span_scan_json(const SpanScan& s) {
  nlohmann::json grid = nlohmann::json::array();
  nlohmann::json scores = nlohmann::json::array();
  for (std::size_t r = 0; r < s.rows; ++r) {
    nlohmann::json row = nlohmann::json::array();
    nlohmann::json srow = nlohmann::json::array();
    for (std::size_t c = 0; c < s.columns; ++c) {
      row.push_back(s.at(r, c));
      const auto& sc = s.target_scores[r * s.columns + c];
      srow.push_back(sc ? nlohmann::json(*sc) : nlohmann::json(nullptr));
    }
    grid.push_back(row);
    scores.push_back(srow);
  }
  nlohmann::json j{{"columns", s.columns},
                   {"rows", s.rows},
                   {"u", s.u},
                   {"v", s.v},
                   {"classes", grid},
                   {"target_scores", scores},
                   {"degenerate", s.degenerate},
                   {"target", s.target},
                   {"start_cell", {s.start_cell.first, s.start_cell.second}},
                   {"start_class", s.start_class}};
  j["adv_cell"] = s.adv_cell ? nlohmann::json{s.adv_cell->first, s.adv_cell->second} : nlohmann::json(nullptr);
  j["adv_class"] = s.adv_class ? nlohmann::json(*s.adv_class) : nlohmann::json(nullptr);
  return j;
}

// --- reports ---------------------------------------------------------------

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

inline std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

inline const char* method_color(const std::string& m) {
  switch (method_rank(m)) {
    case 0: return "#1f77b4";
    case 1: return "#d62728";
    case 2: return "#2ca02c";
    case 3: return "#9467bd";
    case 4: return "#8c564b";
    case 5: return "#e377c2";
    case 6: return "#7f7f7f";
    case 7: return "#bcbd22";
  }
  return "#17becf";
}

}  // namespace detail

/// Per method, successful per-setting query counts sorted ascending against
/// their rank, on a log query axis; the frontier is a dotted polyline.
inline std::string pareto_svg(const std::vector<ResultRow>& rows, const std::vector<FrontierPoint>& frontier) {
  const double W = 640, H = 420, L = 60, R = 150, T = 20, B = 50;
  std::map<std::string, std::vector<double>> by;
  std::size_t max_n = 1;
  double max_q = 10.0;
  for (const auto& r : rows) {
    if (!r.success) continue;
    by[r.method].push_back(static_cast<double>(r.queries));
    max_q = std::max(max_q, static_cast<double>(r.queries));
  }
  std::vector<double> fq;
  for (const auto& p : frontier) fq.push_back(static_cast<double>(p.queries));
  std::sort(fq.begin(), fq.end());
  for (auto& [m, q] : by) {
    std::sort(q.begin(), q.end());
    max_n = std::max(max_n, q.size());
  }
  max_n = std::max(max_n, fq.size());
  const double top = std::ceil(std::log10(max_q));
  auto px = [&](std::size_t i) { return L + (W - L - R) * (static_cast<double>(i) + 0.5) / static_cast<double>(max_n); };
  auto py = [&](double q) { return T + (H - T - B) * (1.0 - std::log10(std::max(q, 1.0)) / top); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int e = 0; e <= static_cast<int>(top); ++e) {
    const double y = py(std::pow(10.0, e));
    os << "<text x=\"" << L - 8 << "\" y=\"" << detail::fmt(y + 4, 1)
       << "\" font-size=\"11\" text-anchor=\"end\">1e" << e << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 15
     << "\" font-size=\"12\" text-anchor=\"middle\">settings (sorted by queries)</text>\n";
  os << "<text x=\"15\" y=\"" << (T + H - B) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 15 "
     << (T + H - B) / 2 << ")\" text-anchor=\"middle\">queries</text>\n";
  std::vector<std::string> names;
  for (const auto& [m, q] : by) names.push_back(m);
  std::sort(names.begin(), names.end(), [](const auto& a, const auto& b) {
    const int ra = method_rank(a), rb = method_rank(b);
    return ra != rb ? ra < rb : a < b;
  });
  std::size_t legend = 0;
  for (const auto& m : names) {
    const auto& q = by[m];
    for (std::size_t i = 0; i < q.size(); ++i) {
      os << "<circle cx=\"" << detail::fmt(px(i), 2) << "\" cy=\"" << detail::fmt(py(q[i]), 2)
         << "\" r=\"3\" fill=\"" << detail::method_color(m) << "\"/>\n";
    }
    const double ly = T + 10 + 18.0 * static_cast<double>(legend++);
    os << "<circle cx=\"" << W - R + 15 << "\" cy=\"" << ly << "\" r=\"4\" fill=\"" << detail::method_color(m)
       << "\"/><text x=\"" << W - R + 25 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << m << "</text>\n";
  }
  if (!fq.empty()) {
    os << "<polyline fill=\"none\" stroke=\"black\" stroke-dasharray=\"2,3\" points=\"";
    for (std::size_t i = 0; i < fq.size(); ++i) {
      os << (i ? " " : "") << detail::fmt(px(i), 2) << ',' << detail::fmt(py(fq[i]), 2);
    }
    os << "\"/>\n";
    const double ly = T + 10 + 18.0 * static_cast<double>(legend);
    os << "<line x1=\"" << W - R + 8 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 22 << "\" y2=\"" << ly
       << "\" stroke=\"black\" stroke-dasharray=\"2,3\"/><text x=\"" << W - R + 25 << "\" y=\"" << ly + 4
       << "\" font-size=\"11\">frontier</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string scan_svg(const SpanScan& s) {
  const double cell = 5.0, L = 40, T = 20;
  const double W = L + cell * static_cast<double>(s.columns) + 20;
  const double H = T + cell * static_cast<double>(s.rows) + 40;
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
                                  "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t r = 0; r < s.rows; ++r) {
    for (std::size_t c = 0; c < s.columns; ++c) {
      const std::size_t k = s.at(r, c);
      const bool tgt = k == s.target;
      const double y = T + cell * static_cast<double>(s.rows - 1 - r);
      os << "<rect x=\"" << detail::fmt(L + cell * static_cast<double>(c), 1) << "\" y=\"" << detail::fmt(y, 1)
         << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"" << palette[k % 13] << "\""
         << (tgt ? " stroke=\"black\" stroke-width=\"0.3\"" : "") << "/>\n";
    }
  }
  auto mark = [&](std::pair<std::size_t, std::size_t> rc, const char* label) {
    const double x = L + cell * (static_cast<double>(rc.second) + 0.5);
    const double y = T + cell * (static_cast<double>(s.rows - 1 - rc.first) + 0.5);
    os << "<circle cx=\"" << detail::fmt(x, 1) << "\" cy=\"" << detail::fmt(y, 1)
       << "\" r=\"3\" fill=\"none\" stroke=\"black\"/><text x=\"" << detail::fmt(x - 10, 1) << "\" y=\""
       << detail::fmt(y - 6, 1) << "\" font-size=\"10\">" << label << "</text>\n";
  };
  mark(s.start_cell, "x_start");
  if (s.adv_cell) mark(*s.adv_cell, "x_adv");
  os << "<text x=\"" << L << "\" y=\"" << H - 12 << "\" font-size=\"11\">u from " << detail::fmt(s.u.front(), 2)
     << " to " << detail::fmt(s.u.back(), 2) << " (towards x_start); v up to " << detail::fmt(s.v.back(), 3)
     << " (towards x_adv)" << (s.degenerate ? "; degenerate span" : "") << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

inline std::string summary_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << "method,settings,successes,success_rate,mean_queries,median_queries\n";
  for (const auto& s : summarize(rows)) {
    os << s.method << ',' << s.settings << ',' << s.successes << ',' << detail::fmt(s.success_rate, 4) << ','
       << (s.mean_queries ? detail::fmt(*s.mean_queries, 2) : "") << ','
       << (s.median_queries ? detail::fmt(*s.median_queries, 1) : "") << '\n';
  }
  return os.str();
}

inline nlohmann::json frontier_json(const std::vector<FrontierPoint>& f) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& p : f) a.push_back({{"setting", p.setting}, {"method", p.method}, {"queries", p.queries}});
  return a;
}

/// Writes results.csv, summary.csv, frontier.json, dominance.json and
/// pareto.svg under `dir`. Output depends only on the inputs.
inline void write_report(const std::filesystem::path& dir, const std::vector<ResultRow>& rows,
                         const std::vector<FrontierPoint>& frontier, const DominanceModel& dominance) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  detail::write_text(dir / "results.csv", rows_to_csv(rows));
  detail::write_text(dir / "summary.csv", summary_csv(rows));
  detail::write_text(dir / "frontier.json", frontier_json(frontier).dump(2) + "\n");
  detail::write_text(dir / "dominance.json", dominance_json(dominance).dump(2) + "\n");
  std::vector<ResultRow> base;
  const auto names = base_method_names();
  for (const auto& r : rows) {
    if (std::find(names.begin(), names.end(), r.method) != names.end()) base.push_back(r);
  }
  detail::write_text(dir / "pareto.svg", pareto_svg(base, frontier));
}

inline void write_scan(const std::filesystem::path& dir, const SpanScan& scan, const nlohmann::json& extra = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  nlohmann::json j = span_scan_json(scan);
  if (extra.is_object()) {
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  }
  detail::write_text(dir / "scan.json", j.dump() + "\n");
  detail::write_text(dir / "scan.svg", scan_svg(scan));
}

}  // namespace evasion

#endif  // EVASION_EVAL_HPP
