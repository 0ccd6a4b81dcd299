#ifndef EVASION_API_HPP
#define EVASION_API_HPP

#include <algorithm>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "evasion/errors.hpp"
#include "evasion/nn.hpp"
#include "evasion/preprocess.hpp"
#include "evasion/tensor.hpp"

namespace evasion {

// --- responses -------------------------------------------------------------

struct ScoredLabel {
  std::size_t label = 0;
  double score = 0.0;
  friend bool operator==(const ScoredLabel&, const ScoredLabel&) = default;
};

struct FullResponse {
  std::vector<double> probabilities;
  friend bool operator==(const FullResponse&, const FullResponse&) = default;
};
struct LabelResponse {
  std::size_t label = 0;
  friend bool operator==(const LabelResponse&, const LabelResponse&) = default;
};
/// Ordered by descending score; equal scores keep the lower class first.
struct TopKResponse {
  std::vector<ScoredLabel> entries;
  friend bool operator==(const TopKResponse&, const TopKResponse&) = default;
};

using ApiResponse = std::variant<FullResponse, LabelResponse, TopKResponse>;

inline std::size_t top1(const ApiResponse& r) {
  if (const auto* f = std::get_if<FullResponse>(&r)) return argmax(f->probabilities);
  if (const auto* l = std::get_if<LabelResponse>(&r)) return l->label;
  const auto& t = std::get<TopKResponse>(r);
  if (t.entries.empty()) throw ArgumentError("empty top-k response");
  return t.entries.front().label;
}

/// Score reported for `label`, if the response exposes one.
inline std::optional<double> score_of(const ApiResponse& r, std::size_t label) {
  if (const auto* f = std::get_if<FullResponse>(&r)) {
    if (label < f->probabilities.size()) return f->probabilities[label];
    return std::nullopt;
  }
  if (const auto* t = std::get_if<TopKResponse>(&r)) {
    for (const auto& e : t->entries) {
      if (e.label == label) return e.score;
    }
  }
  return std::nullopt;
}

/// Score with top-k mask semantics: labels outside the returned set score 0.
inline double masked_score(const ApiResponse& r, std::size_t label) {
  return score_of(r, label).value_or(0.0);
}

// --- postprocessors --------------------------------------------------------

struct Postprocessor {
  enum class Kind { identity, label_only, top_k };
  Kind kind = Kind::identity;
  std::size_t k = 0;

  static Postprocessor identity() { return {Kind::identity, 0}; }
  static Postprocessor label_only() { return {Kind::label_only, 0}; }
  static Postprocessor top_k(std::size_t k) {
    if (k == 0) throw ArgumentError("top-k needs k >= 1");
    return {Kind::top_k, k};
  }
};

/// Class indices of the k largest entries, ties broken by lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> p, std::size_t k) {
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  idx.resize(k);
  return idx;
}

inline ApiResponse postprocess(std::span<const double> p, const Postprocessor& post) {
  switch (post.kind) {
    case Postprocessor::Kind::identity:
      return FullResponse{std::vector<double>(p.begin(), p.end())};
    case Postprocessor::Kind::label_only:
      return LabelResponse{argmax(p)};
    case Postprocessor::Kind::top_k: {
      if (post.k == 0 || post.k > p.size()) {
        throw ArgumentError("top-k with k=" + std::to_string(post.k) + " over " +
                            std::to_string(p.size()) + " classes");
      }
      TopKResponse r;
      for (std::size_t i : top_k_indices(p, post.k)) r.entries.push_back({i, p[i]});
      return r;
    }
  }
  throw ArgumentError("unknown postprocessor");
}

/// The probability vector with every entry outside the top-k set zeroed.
inline std::vector<double> masked_probabilities(const TopKResponse& r, std::size_t n_classes) {
  std::vector<double> out(n_classes, 0.0);
  for (const auto& e : r.entries) {
    if (e.label < n_classes) out[e.label] = e.score;
  }
  return out;
}

// --- query accounting ------------------------------------------------------

/// Counts queries against a budget B (unlimited when absent). An optional
/// stage limit tightens the bound temporarily; it never loosens it.
class QueryLedger {
 public:
  static constexpr std::uint64_t kUnlimited = std::numeric_limits<std::uint64_t>::max();

  explicit QueryLedger(std::optional<std::uint64_t> budget = std::nullopt) : budget_(budget) {
    if (budget_ && *budget_ == 0) throw ArgumentError("query budget must be positive");
  }

  std::uint64_t used() const noexcept { return used_; }
  std::optional<std::uint64_t> budget() const noexcept { return budget_; }

  std::uint64_t limit() const noexcept {
    std::uint64_t l = budget_.value_or(kUnlimited);
    if (stage_limit_) l = std::min(l, *stage_limit_);
    return l;
  }
  std::uint64_t remaining() const noexcept { return used_ >= limit() ? 0 : limit() - used_; }

  void set_stage_limit(std::optional<std::uint64_t> limit) noexcept { stage_limit_ = limit; }

  void charge() {
    if (used_ >= limit()) throw BudgetExceeded(used_);
    ++used_;
  }

 private:
  std::uint64_t used_ = 0;
  std::optional<std::uint64_t> budget_;
  std::optional<std::uint64_t> stage_limit_;
};

// --- prediction APIs -------------------------------------------------------

/// Whatever answers a query: an in-process network or a remote service.
class ClassifierBackend {
 public:
  virtual ~ClassifierBackend() = default;
  virtual ApiResponse respond(const Tensor& x) = 0;
};

/// post . dnn . pre, evaluated in process.
class LocalBackend final : public ClassifierBackend {
 public:
  LocalBackend(std::shared_ptr<const Network> net, Preprocessor pre, Postprocessor post)
      : net_(std::move(net)), pre_(std::move(pre)), post_(post) {
    if (!net_) throw ArgumentError("local backend needs a network");
    if (post_.kind == Postprocessor::Kind::top_k && post_.k > net_->n_classes()) {
      throw ArgumentError("top-k with k > number of classes");
    }
  }

  ApiResponse respond(const Tensor& x) override {
    return postprocess(forward(*net_, pre_.apply(x)), post_);
  }

  const Network& network() const noexcept { return *net_; }
  const Preprocessor& preprocessor() const noexcept { return pre_; }
  const Postprocessor& postprocessor() const noexcept { return post_; }

 private:
  std::shared_ptr<const Network> net_;
  Preprocessor pre_;
  Postprocessor post_;
};

/// A victim endpoint. Every query goes through the ledger exactly once; no
/// other path reaches the backend.
class PredictionApi {
 public:
  PredictionApi(std::unique_ptr<ClassifierBackend> backend, QueryLedger ledger)
      : backend_(std::move(backend)), ledger_(ledger) {
    if (!backend_) throw ArgumentError("prediction API needs a backend");
  }

  /// In-process API for `net` that accepts images of `attack_shape`, resizing
  /// to the network's native size when needed.
  static PredictionApi local(std::shared_ptr<const Network> net, Shape attack_shape,
                             Postprocessor post, std::optional<std::uint64_t> budget = std::nullopt) {
    Preprocessor pre = Preprocessor::to_native(attack_shape, net->input_shape());
    return PredictionApi(std::make_unique<LocalBackend>(std::move(net), std::move(pre), post),
                         QueryLedger(budget));
  }

  ApiResponse query(const Tensor& x) {
    ledger_.charge();
    return backend_->respond(x);
  }

  QueryLedger& ledger() noexcept { return ledger_; }
  const QueryLedger& ledger() const noexcept { return ledger_; }

 private:
  std::unique_ptr<ClassifierBackend> backend_;
  QueryLedger ledger_;
};

}  // namespace evasion

#endif  // EVASION_API_HPP
