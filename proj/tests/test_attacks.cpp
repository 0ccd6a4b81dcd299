#include <algorithm>
#include <memory>
#include <random>

#include <gtest/gtest.h>

#include "evasion/attacks.hpp"
#include "evasion/eval.hpp"
#include "evasion/zoo.hpp"

using namespace evasion;

namespace {

constexpr double kBlobEpsilon = 0.3;

const Zoo& blob_zoo() {
  static const Zoo zoo = build_zoo(ZooConfig::blobs_default(1));
  return zoo;
}

LabelFn victim_label() {
  auto net = blob_zoo().victim.network;
  return [net](const Tensor& x) { return argmax(forward(*net, x)); };
}

const ExperimentPlan& blob_plan() {
  static const ExperimentPlan plan = [] {
    const LabelFn label = victim_label();
    return build_plan(select_entries(blob_zoo().test_set(), 50, label), label, kBlobEpsilon);
  }();
  return plan;
}

PredictionApi victim_api(std::optional<std::uint64_t> budget) {
  return PredictionApi::local(blob_zoo().victim.network, Shape{1, 1, 2}, Postprocessor::top_k(1), budget);
}

EnsembleSpec substitutes(std::size_t k) {
  std::vector<EnsembleMember> members;
  for (std::size_t i = 0; i < k; ++i) {
    members.push_back(EnsembleMember::for_attack_space(blob_zoo().substitutes[i].network, Shape{1, 1, 2}));
  }
  return EnsembleSpec(members);
}

EnsembleSpec white_box() {
  return EnsembleSpec({EnsembleMember::for_attack_space(blob_zoo().victim.network, Shape{1, 1, 2})});
}

bool same_trace(const std::vector<TraceRecord>& a, const std::vector<TraceRecord>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].d != b[i].d || a[i].queried != b[i].queried || a[i].top1 != b[i].top1 ||
        a[i].score_target != b[i].score_target || a[i].linf_to_goal != b[i].linf_to_goal) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(Ens, WhiteBoxSucceedsWithOneQuery) {
  std::size_t successes = 0;
  for (const auto* p : blob_plan().active()) {
    PredictionApi api = victim_api(1);
    const AttackOutcome o = run_ens(p->setting, api, white_box());
    EXPECT_LE(o.queries_used, 1u);
    if (o.success) {
      ++successes;
      EXPECT_EQ(top1(victim_api(std::nullopt).query(o.x_adv)), p->setting.target);
      EXPECT_LE(linf_distance(o.x_adv, p->setting.x_goal), kBlobEpsilon + 1e-12);
    }
  }
  EXPECT_GT(successes, blob_plan().active().size() / 2);
}

TEST(Ens, LargerBudgetKeepsFirstQuery) {
  for (const auto* p : blob_plan().active()) {
    PredictionApi small = victim_api(1);
    PredictionApi large = victim_api(1000);
    const AttackOutcome a = run_ens(p->setting, small, substitutes(5));
    const AttackOutcome b = run_ens(p->setting, large, substitutes(5));
    if (a.success) {
      EXPECT_TRUE(b.success);
      EXPECT_TRUE(same_trace(a.trace, b.trace));
    }
    const auto first_a = std::find_if(a.trace.begin(), a.trace.end(), [](const auto& r) { return r.queried; });
    const auto first_b = std::find_if(b.trace.begin(), b.trace.end(), [](const auto& r) { return r.queried; });
    ASSERT_NE(first_a, a.trace.end());
    ASSERT_NE(first_b, b.trace.end());
    EXPECT_EQ(first_a->top1, first_b->top1);
  }
}

TEST(Ens, QueriesOnlyAfterSaturation) {
  const auto* p = blob_plan().active().front();
  PredictionApi api = victim_api(50);
  const AttackOutcome o = run_ens(p->setting, api, substitutes(3));
  const auto first = std::find_if(o.trace.begin(), o.trace.end(), [](const auto& r) { return r.queried; });
  ASSERT_NE(first, o.trace.end());
  EXPECT_GE(first->iter, 10u);
  EXPECT_NEAR(first->linf_to_goal, kBlobEpsilon, 1e-9);
  EXPECT_EQ(o.queries_used, api.ledger().used());
}

TEST(Prism, DegenerateScheduleQueriesImmediately) {
  const auto* p = blob_plan().active().front();
  AttackSetting s = p->setting;
  s.epsilon = 0.6;
  PredictionApi api = victim_api(100);
  const AttackOutcome o = run_prism(s, api, substitutes(5));
  ASSERT_FALSE(o.trace.empty());
  EXPECT_TRUE(o.trace.front().queried);
  EXPECT_EQ(o.trace.front().queries_so_far, 1u);
}

TEST(Prism, BlobEnsembleSucceedsCheaply) {
  std::vector<double> queries;
  std::size_t successes = 0;
  for (const auto* p : blob_plan().active()) {
    PredictionApi api = victim_api(1000);
    const AttackOutcome o = run_prism(p->setting, api, substitutes(5));
    EXPECT_EQ(o.queries_used, api.ledger().used());
    for (const auto& r : o.trace) {
      EXPECT_LE(r.linf_to_goal, r.d + 1e-12);
      if (r.d > kBlobEpsilon) {
        EXPECT_FALSE(r.queried);
      }
    }
    if (o.success) {
      ++successes;
      queries.push_back(static_cast<double>(o.queries_used));
    }
  }
  ASSERT_GT(successes, blob_plan().active().size() / 2);
  EXPECT_LE(median_of(queries), 50.0);
}

TEST(Prism, ZeroGradientTerminatesAtCap) {
  auto zero = std::make_shared<Network>(*blob_zoo().substitutes[0].network);
  for (auto& layer : zero->mutable_layers()) std::fill(layer.weights.begin(), layer.weights.end(), 0.0);
  const EnsembleSpec ens({EnsembleMember::for_attack_space(zero, Shape{1, 1, 2})});
  const auto* p = blob_plan().active().front();
  AttackSetting s = p->setting;
  s.epsilon = 0.02;
  PrismConfig cfg;
  PredictionApi api = victim_api(std::nullopt);
  const AttackOutcome o = run_prism(s, api, ens, cfg);
  EXPECT_FALSE(o.success);
  EXPECT_EQ(o.iterations, cfg.iteration_cap(s.epsilon));
  // Every step is a pure projection of x_start; queried proposals never change.
  const auto last_accept = std::find_if(o.trace.rbegin(), o.trace.rend(), [](const auto& r) { return r.accepted; });
  ASSERT_NE(last_accept, o.trace.rend());
  Tensor expected = s.x_start;
  project_ball(expected, s.x_goal, last_accept->d);
  EXPECT_TRUE(o.x_adv == expected);
  for (const auto& r : o.trace) {
    if (r.queried) {
      EXPECT_EQ(r.linf_to_goal, o.trace.back().linf_to_goal);
    }
  }
}

TEST(Prism, RejectsMisclassifiedStart) {
  AttackSetting s = blob_plan().active().front()->setting;
  s.start_class = (s.target + 1) % 3;
  PredictionApi api = victim_api(10);
  EXPECT_THROW(run_prism(s, api, substitutes(2)), ArgumentError);
  s.start_class = s.target;
  PrismConfig bad;
  bad.delta_eps = 0.4;
  EXPECT_THROW(run_prism(s, api, substitutes(2), bad), ArgumentError);
  EXPECT_EQ(api.ledger().used(), 0u);
}

TEST(PrismR, SingleMemberMatchesPrism) {
  const EnsembleSpec one = substitutes(1);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& s = blob_plan().active()[i]->setting;
    PredictionApi a = victim_api(1000);
    PredictionApi b = victim_api(1000);
    std::mt19937_64 rng(i);
    const AttackOutcome x = run_prism(s, a, one);
    const AttackOutcome y = run_prism_r(s, b, one, PrismConfig{}, rng);
    EXPECT_TRUE(same_trace(x.trace, y.trace));
    EXPECT_EQ(x.success, y.success);
    EXPECT_TRUE(x.x_adv == y.x_adv);
  }
}

TEST(PrismR, SeedReproducesOutcome) {
  const auto& s = blob_plan().active()[1]->setting;
  PredictionApi a = victim_api(1000);
  PredictionApi b = victim_api(1000);
  std::mt19937_64 ra(42), rb(42);
  const AttackOutcome x = run_prism_r(s, a, substitutes(10), PrismConfig{}, ra);
  const AttackOutcome y = run_prism_r(s, b, substitutes(10), PrismConfig{}, rb);
  EXPECT_TRUE(same_trace(x.trace, y.trace));
  EXPECT_TRUE(x.x_adv == y.x_adv);
}

TEST(Qo, BlobSuccessAtFullBudget) {
  std::size_t successes = 0;
  for (const auto* p : blob_plan().active()) {
    PredictionApi api = victim_api(100000);
    std::mt19937_64 rng(p->id);
    const AttackOutcome o = run_qo(p->setting, api, QoConfig{}, rng);
    EXPECT_EQ(o.queries_used, api.ledger().used());
    const std::uint64_t verifications = std::count_if(o.trace.begin(), o.trace.end(), [](const auto& r) { return r.queried; });
    EXPECT_EQ(o.queries_used, o.estimation_queries + verifications);
    EXPECT_EQ(o.estimation_queries % 100, 0u);
    if (o.success) {
      ++successes;
      EXPECT_LE(linf_distance(o.x_adv, p->setting.x_goal), kBlobEpsilon + 1e-12);
      EXPECT_EQ(top1(victim_api(std::nullopt).query(o.x_adv)), p->setting.target);
    }
  }
  EXPECT_GE(successes, blob_plan().active().size() * 8 / 10);
}

TEST(Qo, TightBudgetFails) {
  std::size_t successes = 0;
  for (const auto* p : blob_plan().active()) {
    PredictionApi api = victim_api(500);
    std::mt19937_64 rng(p->id);
    const AttackOutcome o = run_qo(p->setting, api, QoConfig{}, rng);
    EXPECT_LE(o.queries_used, 500u);
    if (o.success) ++successes;
  }
  EXPECT_LE(successes, 2u);
}

TEST(Outcome, JsonAndPerturbation) {
  AttackOutcome o;
  o.method = "PRISM";
  o.success = true;
  o.queries_used = 7;
  o.iterations = 3;
  const auto j = outcome_json(o);
  EXPECT_EQ(j["queries"], 7);
  EXPECT_EQ(j["method"], "PRISM");
  const Tensor a(Shape{1, 1, 2}, {0.6, 0.4});
  const Tensor g(Shape{1, 1, 2}, {0.5, 0.5});
  const Tensor pimg = perturbation_image(a, g);
  EXPECT_NEAR(pimg[0], 0.55, 1e-12);
  EXPECT_NEAR(pimg[1], 0.45, 1e-12);
  TraceRecord r;
  r.top1 = 2;
  const auto tj = trace_record_json(r);
  EXPECT_EQ(tj["top1"], 2);
  EXPECT_TRUE(tj["score_target"].is_null());
}
