#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dadpo {

using TokenId = std::int32_t;

/// Probability floor applied before every log of a model probability.
inline constexpr double kProbFloor = 1e-12;
inline const double kLogProbFloor = std::log(kProbFloor);

enum class ErrorKind {
  kParse,
  kVocab,
  kInvalidArgument,
  kDomain,
  kSize,
  kIo,
  kNumeric,
  kTransport,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

// Numerically stable logistic helpers.
inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(sigma(z)) without overflow for large |z|.
inline double log_sigmoid(double z) {
  if (z >= 0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

inline double floored_log(double p) {
  return p > kProbFloor ? std::log(p) : kLogProbFloor;
}

double log_sum_exp(std::span<const double> xs);

/// 64-bit FNV-1a. Used for stable vocab, dataset, config and checkpoint hashes.
class Fnv1a {
 public:
  void update(std::string_view bytes);
  void update_bytes(const void* data, std::size_t n);
  template <class T>
  void update_pod(const T& v) {
    update_bytes(&v, sizeof(T));
  }
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hex64(std::uint64_t v);

/// Stateless seed mixing (splitmix64 finalizer) for per-item RNG streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace dadpo
