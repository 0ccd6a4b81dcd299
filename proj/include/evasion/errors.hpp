#ifndef EVASION_ERRORS_HPP
#define EVASION_ERRORS_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace evasion {

/// Tensor shapes or layer dimensions that do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A class index outside [0, N).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A precondition on an argument was violated (empty dataset, bad config, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed model, dataset or schedule document. `where()` names the field
/// (a JSON pointer) or byte offset that failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::string where, const std::string& what)
      : std::runtime_error(where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

class UnsupportedVersionError : public ParseError {
 public:
  explicit UnsupportedVersionError(std::int64_t version)
      : ParseError("/version", "unsupported version " + std::to_string(version)),
        version_(version) {}
  std::int64_t version() const noexcept { return version_; }

 private:
  std::int64_t version_;
};

/// Raised by the query ledger when a query would exceed the active limit.
class BudgetExceeded : public std::runtime_error {
 public:
  explicit BudgetExceeded(std::uint64_t used)
      : std::runtime_error("query budget exhausted after " + std::to_string(used) + " queries"),
        used_(used) {}
  std::uint64_t used() const noexcept { return used_; }

 private:
  std::uint64_t used_;
};

/// Remote classifier failures: timeouts, closed connections, replies that do
/// not follow the wire schema. Carries an excerpt of the offending payload.
class TransportError : public std::runtime_error {
 public:
  TransportError(const std::string& what, std::string payload = {})
      : std::runtime_error(payload.empty() ? what : what + " (payload: " + excerpt(payload) + ")"),
        payload_(std::move(payload)) {}
  const std::string& payload() const noexcept { return payload_; }

 private:
  static std::string excerpt(const std::string& s) {
    constexpr std::size_t kMax = 120;
    return s.size() <= kMax ? s : s.substr(0, kMax) + "...";
  }
  std::string payload_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace evasion

#endif  // EVASION_ERRORS_HPP
