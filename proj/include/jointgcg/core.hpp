#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

namespace jointgcg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Index into a Vocabulary.
using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

enum class ErrorCode {
  UnknownToken,
  IdOutOfRange,
  EmptyInput,
  ZeroVector,
  SpanOutOfRange,
  EmptyTarget,
  DimensionMismatch,
  TooFewSharedTokens,
  NonFiniteLoss,
  DegenerateSystem,
  EmptyGeneratorToken,
  IndexOutOfRange,
  KTooSmall,
  ShapeMismatch,
  EmptyQuerySet,
  GuardrailExceeded,
  EmptyCorpus,
  TokenMissing,
  RankOutOfRange,
  EmptyText,
  InvalidArgument,
  ConfigInvalid,
  ModelLoadError,
  VocabularyMismatch,
  IoError,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownToken: return "UnknownToken";
    case ErrorCode::IdOutOfRange: return "IdOutOfRange";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::SpanOutOfRange: return "SpanOutOfRange";
    case ErrorCode::EmptyTarget: return "EmptyTarget";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::TooFewSharedTokens: return "TooFewSharedTokens";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::DegenerateSystem: return "DegenerateSystem";
    case ErrorCode::EmptyGeneratorToken: return "EmptyGeneratorToken";
    case ErrorCode::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorCode::KTooSmall: return "KTooSmall";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyQuerySet: return "EmptyQuerySet";
    case ErrorCode::GuardrailExceeded: return "GuardrailExceeded";
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::TokenMissing: return "TokenMissing";
    case ErrorCode::RankOutOfRange: return "RankOutOfRange";
    case ErrorCode::EmptyText: return "EmptyText";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::ModelLoadError: return "ModelLoadError";
    case ErrorCode::VocabularyMismatch: return "VocabularyMismatch";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

/// Half-open character range [start, end) measured in bytes of the UTF-8 text.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - start; }
  bool empty() const { return end <= start; }
  bool contains(std::size_t i) const { return i >= start && i < end; }
  friend bool operator==(const Span&, const Span&) = default;
};

/// Seeded random source. The engine is std::mt19937_64, whose output sequence
/// is fixed by the standard; the distributions are written out here because
/// the std:: distributions are implementation-defined and would break
/// byte-identical reruns across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    if (n <= 1) return 0;
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x = engine_();
    while (x >= limit) x = engine_();
    return static_cast<std::size_t>(x % bound);
  }

  /// Uniform double in [0, 1).
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// k distinct indices drawn uniformly from [0, n), in draw order.
  std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t k) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    if (k > n) k = n;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + uniform_index(n - i);
      std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    return pool;
  }

  template <class T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::swap(values[i - 1], values[uniform_index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent stream seed from a base seed and a label.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t label) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (label + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// 64-bit FNV-1a digest, hex encoded.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
    h >>= 4;
  }
  return out;
}

/// Shortest decimal text that parses back to the identical double.
inline std::string format_double(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) fail(ErrorCode::InvalidArgument, "cannot format double");
  return std::string(buf, ptr);
}

inline double parse_double(std::string_view text) {
  double value = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (!text.empty() && text.front() == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) {
    if (text == "inf" || text == "+inf") return std::numeric_limits<double>::infinity();
    if (text == "-inf") return -std::numeric_limits<double>::infinity();
    fail(ErrorCode::InvalidArgument, "not a number: '" + std::string(text) + "'");
  }
  return value;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace jointgcg
