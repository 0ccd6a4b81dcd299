#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>

#include "evasion/lab.hpp"
#include "evasion/remote.hpp"

namespace fs = std::filesystem;
using namespace evasion;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;

void report(int id, const std::string& name, const Verdict& v) {
  std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << v.detail << std::endl;
  if (!v.pass) ++g_failures;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::string pct(double rate) { return fmt(std::round(rate * 1000.0) / 10.0) + "%"; }

Tensor random_image(const Shape& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x(s);
  for (double& v : x.values()) v = u(rng);
  return x;
}

double cross_entropy(const Network& net, const Tensor& x, std::size_t y) { return -std::log(forward(net, x)[y]); }

// --- 1: input gradient against central differences --------------------------

Verdict gradient_oracle() {
  std::mt19937_64 rng(1);
  const double h = 1e-6;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t t = 0; t < 100; ++t) {
    const Activation act = t % 3 == 0 ? Activation::tanh : (t % 3 == 1 ? Activation::relu : Activation::identity);
    const std::size_t side = 4 + t % 5;
    const std::vector<std::size_t> hidden = t % 4 == 0 ? std::vector<std::size_t>{} : std::vector<std::size_t>{8 + t % 9, 6};
    const std::size_t classes = 2 + t % 9;
    const Network net = make_mlp(Shape{1, side, side}, hidden, classes, act, 500 + t);
    const Tensor x = random_image(net.input_shape(), rng);
    const std::size_t y = std::uniform_int_distribution<std::size_t>(0, classes - 1)(rng);
    const Tensor g = input_gradient(net, x, y);
    std::uniform_int_distribution<std::size_t> coord(0, x.size() - 1);
    for (int k = 0; k < 16; ++k) {
      const std::size_t i = coord(rng);
      Tensor plus = x, minus = x;
      plus[i] += h;
      minus[i] -= h;
      const double fd = (cross_entropy(net, plus, y) - cross_entropy(net, minus, y)) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-6});
      worst = std::max(worst, std::abs(fd - g[i]) / denom);
      ++checked;
    }
  }
  return {worst < 1e-3, "max relative error " + fmt(worst) + " over " + std::to_string(checked) +
                            " coordinates of 100 triples (limit 1e-3)"};
}

// --- 2: NES estimator ---------------------------------------------------------

Verdict nes_quality() {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal(0.0, 1.0);
  const NesConfig cfg{100, 1e-3, true};
  double total = 0.0;
  for (int t = 0; t < 50; ++t) {
    Tensor w(Shape{1, 1, 32});
    for (double& v : w.values()) v = normal(rng);
    const Tensor x = random_image(w.shape(), rng);
    const Tensor g = nes_estimate([&](const Tensor& z) { return dot(w.values(), z.values()); }, x, cfg, rng);
    total += dot(g.values(), w.values()) / std::sqrt(dot(g.values(), g.values()) * dot(w.values(), w.values()));
  }
  const double mean_cos = total / 50.0;
  const Tensor origin(Shape{1, 1, 32}, 0.0);
  const Tensor sym = nes_estimate([](const Tensor& z) { return dot(z.values(), z.values()); }, origin, cfg, rng);
  const double norm = std::sqrt(dot(sym.values(), sym.values()));
  return {mean_cos > 0.8 && norm < cfg.sigma,
          "mean cosine " + fmt(mean_cos) + " (> 0.8); antithetic norm at a critical point " + fmt(norm) +
              " (< " + fmt(cfg.sigma) + ")"};
}

// --- 3: top-k against a sort oracle ------------------------------------------

Verdict postprocessor_exactness() {
  std::mt19937_64 rng(3);
  std::size_t mismatches = 0;
  for (int t = 0; t < 10000; ++t) {
    const std::size_t n = 2 + t % 12;
    std::vector<double> p(n);
    if (t % 2 == 0) {
      std::uniform_int_distribution<int> level(0, 5);
      for (double& v : p) v = level(rng);
    } else {
      std::gamma_distribution<double> gamma(1.0, 1.0);
      for (double& v : p) v = gamma(rng);
    }
    const double sum = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& v : p) v = sum > 0 ? v / sum : 1.0 / static_cast<double>(n);
    const std::size_t k = 1 + static_cast<std::size_t>(t) % n;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    const auto r = std::get<TopKResponse>(postprocess(p, Postprocessor::top_k(k)));
    bool ok = r.entries.size() == k;
    for (std::size_t i = 0; ok && i < k; ++i) ok = r.entries[i].label == order[i] && r.entries[i].score == p[order[i]];
    if (k == n) ok = ok && masked_probabilities(r, n) == p;
    if (!ok) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in 10000 vectors (ties to the lower index)"};
}

// --- shared shapes benchmark -------------------------------------------------

struct SharedRuns {
  std::vector<ResultRow> rows;
  std::size_t violations = 0;
  std::vector<std::string> first_violations;
  std::size_t active = 0;
  std::vector<ResultRow> qo_tight;
  DominanceModel dominance;
};

std::optional<MethodSummary> summary_for(const std::vector<ResultRow>& rows, const std::string& method) {
  for (const auto& s : summarize(rows)) {
    if (s.method == method) return s;
  }
  return std::nullopt;
}

double rate(const std::vector<ResultRow>& rows, const std::string& method) {
  const auto s = summary_for(rows, method);
  return s ? s->success_rate : 0.0;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

SharedRuns shared_runs(const Lab& lab, const ExperimentPlan& plan, std::size_t jobs, const fs::path& out) {
  SharedRuns s;
  s.active = plan.active().size();
  BenchOptions opt;
  opt.jobs = jobs;
  for (const auto& run : run_bench(plan, lab.api_factory(), default_bench_entries(), lab.context(), opt)) {
    s.rows.push_back(run.row);
    for (const auto& v : run.violations) {
      ++s.violations;
      if (s.first_violations.size() < 3) {
        s.first_violations.push_back("setting " + std::to_string(run.row.setting) + " " + run.row.method + ": " + v);
      }
    }
  }
  BenchOptions tight = opt;
  for (const auto& run : run_bench(plan, lab.api_factory(), {BenchEntry::single(Method::qo, 1000)}, lab.context(), tight)) {
    s.qo_tight.push_back(run.row);
    s.violations += run.violations.size();
  }
  const auto frontier = pareto_frontier(s.rows, base_method_names());
  s.dominance = fit_dominance(frontier, 100000.0);
  write_report(out, s.rows, frontier, s.dominance);
  return s;
}

Verdict soundness(const SharedRuns& s) {
  std::string detail = std::to_string(s.rows.size() + s.qo_tight.size()) + " runs audited, " +
                       std::to_string(s.violations) + " violations";
  for (const auto& v : s.first_violations) detail += "; " + v;
  return {s.violations == 0 && !s.rows.empty(), detail};
}

Verdict table_direction(const SharedRuns& s) {
  const double ens = rate(s.rows, "ENS");
  const double prism = rate(s.rows, "PRISM");
  const double prism_r = rate(s.rows, "PRISM_R");
  const double qo = rate(s.qo_tight, "QO");
  const bool ok = prism >= ens + 0.15 - 1e-12 && prism_r >= prism - 0.05 - 1e-12 && qo == 0.0;
  return {ok, "B=1000 on " + std::to_string(s.active) + " settings: ENS " + pct(ens) + ", PRISM " + pct(prism) +
                  " (needs >= ENS + 15pp), PRISM_R " + pct(prism_r) + " (needs >= PRISM - 5pp), QO " + pct(qo) +
                  " (needs 0)"};
}

Verdict orders_of_magnitude(const SharedRuns& s) {
  const PairedQueries p = jointly_successful(s.rows, "PRISM", "QO");
  if (p.a.empty()) return {false, "no setting solved by both PRISM and QO"};
  const double mp = median_of(p.a);
  const double mq = median_of(p.b);
  return {mp <= mq / 10.0, std::to_string(p.a.size()) + " jointly solved settings: median PRISM " + fmt(mp) +
                               " vs median QO " + fmt(mq) + " (needs <= QO / 10)"};
}

Verdict agile_dominance(const SharedRuns& s) {
  const double epprq = rate(s.rows, "EPPRQ");
  const double qo = rate(s.rows, "QO");
  const double eq = rate(s.rows, "EQ");
  const PairedQueries p = jointly_successful(s.rows, "EPPRQ", "QO");
  const double me = mean(p.a);
  const double mq = mean(p.b);
  const bool cheaper = !p.a.empty() && me <= 0.5 * mq;
  const bool ordered = onsets_ordered(s.dominance, {"ENS", "PRISM", "PRISM_R", "QO"});
  std::string onsets;
  for (const auto& name : {"ENS", "PRISM", "PRISM_R", "QO"}) {
    auto it = s.dominance.onsets.find(name);
    onsets += std::string(" ") + name + "=" + (it != s.dominance.onsets.end() && it->second ? fmt(*it->second) : "none");
  }
  return {epprq >= std::max(qo, eq) && cheaper && ordered,
          "success EPPRQ " + pct(epprq) + " vs QO " + pct(qo) + ", EQ " + pct(eq) + "; mean queries on " +
              std::to_string(p.a.size()) + " joint settings EPPRQ " + fmt(me) + " vs QO " + fmt(mq) +
              " (needs <= 0.5x); onsets" + onsets + (ordered ? " (ordered)" : " (not ordered)")};
}

Verdict eppr_efficiency(const SharedRuns& s) {
  const PairedQueries p = jointly_successful(s.rows, "EPPR", "QO");
  if (p.a.empty()) return {false, "no setting solved by both EPPR and QO"};
  const double me = mean(p.a);
  const double mq = mean(p.b);
  return {me <= mq / 50.0, std::to_string(p.a.size()) + " joint settings: mean EPPR " + fmt(me) + " vs mean QO " +
                               fmt(mq) + " (needs <= QO / 50)"};
}

// --- 9: ensemble size ablation ------------------------------------------------

Verdict ablation_trend(const Lab& lab, const ExperimentPlan& plan, std::size_t jobs, const fs::path& out) {
  const auto cells = ablation_ensemble_size(plan, lab.api_factory(), lab.ensemble(), lab.context(), jobs);
  std::ofstream(out / "ablation.csv") << ablation_csv(cells);
  double small = 0.0, large = 0.0;
  std::size_t n_small = 0, n_large = 0;
  bool ens_monotone = true;
  std::string per_k;
  for (const auto& c : cells) {
    if (c.k <= 5) {
      small += c.prism_success;
      ++n_small;
    } else {
      large += c.prism_success;
      ++n_large;
    }
    ens_monotone = ens_monotone && c.ens_b1000_success >= c.ens_b1_success;
    per_k += " K" + std::to_string(c.k) + ":" + pct(c.prism_success);
  }
  if (n_small == 0 || n_large == 0) return {false, "ensemble has fewer than 6 members"};
  small /= static_cast<double>(n_small);
  large /= static_cast<double>(n_large);
  return {large >= small && ens_monotone, "PRISM mean success K6..10 " + pct(large) + " vs K1..5 " + pct(small) +
                                              "; ENS(B=1000) >= ENS(B=1) at every K: " +
                                              (ens_monotone ? "yes" : "no") + ";" + per_k};
}

// --- 10: span scan ------------------------------------------------------------

Verdict span_scan_check(const Lab& lab, const ExperimentPlan& plan, const fs::path& out) {
  const AttackContext ctx = lab.context();
  for (const auto* p : plan.active()) {
    PredictionApi api = lab.api_factory()(1000);
    const AttackOutcome o = run_method(Method::prism, p->setting, api, ctx, p->id);
    if (!o.success) continue;
    PredictionApi viewer = lab.api_factory()(std::nullopt);
    const SpanScan scan = span_scan([&](const Tensor& x) { return viewer.query(x); }, p->setting.x_start, o.x_adv,
                                    p->setting.x_goal, p->setting.target);
    write_scan(out, scan, {{"setting", p->id}, {"method", "PRISM"}, {"queries", o.queries_used}});
    const bool shape_ok = scan.columns == 121 && scan.rows == 21 && scan.classes.size() == 121 * 21;
    const std::size_t start_cls = scan.at(scan.start_cell.first, scan.start_cell.second);
    const bool adv_ok = scan.adv_cell && scan.at(scan.adv_cell->first, scan.adv_cell->second) == p->setting.target;
    return {shape_ok && start_cls == p->setting.target && adv_ok,
            "setting " + std::to_string(p->id) + ": grid " + std::to_string(scan.columns) + "x" +
                std::to_string(scan.rows) + ", start cell class " + std::to_string(start_cls) + ", adv cell class " +
                (scan.adv_cell ? std::to_string(scan.at(scan.adv_cell->first, scan.adv_cell->second)) : "none") +
                ", target " + std::to_string(p->setting.target)};
  }
  return {false, "no PRISM success to scan"};
}

// --- 11: dominance regression on a planted boundary ---------------------------

Verdict dominance_regression() {
  std::vector<FrontierPoint> pts;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> low(0.0, 1.0), high(2.0, 4.0);
  for (int i = 0; i < 40; ++i) pts.push_back({pts.size(), "A", static_cast<std::uint64_t>(std::pow(10.0, low(rng)))});
  for (int i = 0; i < 40; ++i) pts.push_back({pts.size(), "B", static_cast<std::uint64_t>(std::pow(10.0, high(rng)))});
  const DominanceModel m = fit_dominance(pts, 100000.0);
  bool monotone = true;
  for (std::size_t i = 1; i < m.nll_history.size(); ++i) monotone = monotone && m.nll_history[i] <= m.nll_history[i - 1];
  const auto it = m.onsets.find("B");
  const bool found = it != m.onsets.end() && it->second && *it->second >= 10.0 && *it->second <= 100.0;
  return {found && monotone && !m.degenerate,
          "boundary at " + (it != m.onsets.end() && it->second ? fmt(*it->second) : std::string("none")) +
              " (planted in [10,100]); NLL " + fmt(m.nll_history.front()) + " -> " + fmt(m.nll_history.back()) +
              " over " + std::to_string(m.nll_history.size()) + " steps, monotone: " + (monotone ? "yes" : "no")};
}

// --- 12: loopback transparency -------------------------------------------------

bool same_outcome(const AttackOutcome& a, const AttackOutcome& b) {
  if (a.success != b.success || a.queries_used != b.queries_used || a.iterations != b.iterations ||
      !(a.x_adv == b.x_adv) || a.trace.size() != b.trace.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.trace.size(); ++i) {
    if (trace_record_json(a.trace[i]) != trace_record_json(b.trace[i])) return false;
  }
  return true;
}

Verdict remote_transparency(const Lab& lab, const ExperimentPlan& plan) {
  TopKServer server(local_top_k_classifier(lab.zoo.victim.network, lab.config.k), 0);
  server.start();
  LabConfig remote_cfg = lab.config;
  remote_cfg.remote = "127.0.0.1:" + std::to_string(server.port());
  const Lab remote{lab.zoo, remote_cfg};
  const AttackContext ctx = lab.context();
  std::size_t compared = 0, identical = 0;
  const auto active = plan.active();
  const std::vector<std::pair<Method, std::uint64_t>> runs{
      {Method::ens, 1000}, {Method::prism, 1000}, {Method::prism_r, 1000}, {Method::qo, 3000}};
  for (std::size_t i = 0; i < std::min<std::size_t>(3, active.size()); ++i) {
    for (const auto& [m, budget] : runs) {
      PredictionApi local_api = lab.api_factory()(budget);
      PredictionApi remote_api = remote.api_factory()(budget);
      const AttackOutcome a = run_method(m, active[i]->setting, local_api, ctx, active[i]->id);
      const AttackOutcome b = run_method(m, active[i]->setting, remote_api, ctx, active[i]->id);
      ++compared;
      if (same_outcome(a, b) && local_api.ledger().used() == remote_api.ledger().used()) ++identical;
    }
  }
  server.stop();
  return {compared > 0 && identical == compared, std::to_string(identical) + "/" + std::to_string(compared) +
                                                     " runs bit-identical over loopback (" +
                                                     std::to_string(server.queries_served()) + " queries served)"};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_out";
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--out") == 0 && i + 1 < argc) out = argv[++i];
    else if (std::strcmp(argv[i], "--jobs") == 0 && i + 1 < argc) jobs = std::stoul(argv[++i]);
  }
  fs::create_directories(out);
  const auto started = std::chrono::steady_clock::now();
  try {
    report(1, "gradient oracle", gradient_oracle());
    report(2, "NES estimator", nes_quality());
    report(3, "postprocessor exactness", postprocessor_exactness());

    LabConfig cfg;
    cfg.task = Task::shapes;
    cfg.zoo_dir = fs::path(EVASION_TEST_ZOO_DIR) / "shapes";
    cfg.settings = 50;
    cfg.jobs = jobs;
    const Lab lab = open_lab(cfg);
    const ExperimentPlan plan = lab.plan();
    std::cout << "shapes plan: " << plan.active().size() << " of " << plan.settings.size()
              << " settings active, epsilon " << cfg.effective_epsilon() << std::endl;

    const SharedRuns shared = shared_runs(lab, plan, jobs, out);
    std::cout << summary_csv(shared.rows);
    report(4, "attack soundness", soundness(shared));
    report(5, "success ordering at B=1000", table_direction(shared));
    report(6, "PRISM vs QO query medians", orders_of_magnitude(shared));
    report(7, "agile dominance", agile_dominance(shared));
    report(8, "EPPR efficiency", eppr_efficiency(shared));
    report(9, "ensemble size ablation", ablation_trend(lab, plan, jobs, out));
    report(10, "span scan", span_scan_check(lab, plan, out));
    report(11, "dominance regression", dominance_regression());
    report(12, "remote transparency", remote_transparency(lab, plan));
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  std::cout << (12 - g_failures) << "/12 criteria passed in " << fmt(std::round(secs)) << " s" << std::endl;
  return g_failures == 0 ? 0 : 1;
}
