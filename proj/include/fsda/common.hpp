#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fsda {

/// Mask value excluded from every loss, prototype and metric.
inline constexpr std::uint8_t kIgnoreLabel = 255;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Support mask has no valid pixel.
class EmptySupport : public Error {
 public:
  using Error::Error;
};

/// Every pixel of a loss target is ignored.
class AllIgnored : public Error {
 public:
  using Error::Error;
};

/// Requested class has no pixel at feature resolution.
class ClassAbsent : public Error {
 public:
  using Error::Error;
};

/// Persisted file is truncated, corrupt or of an unknown version.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

/// Stored configuration does not match the expected one.
class ConfigMismatch : public Error {
 public:
  using Error::Error;
};

/// Deterministic random source.
///
/// All sampling is implemented on top of the raw 64-bit engine output so that
/// streams are identical across standard library implementations (the
/// std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

  bool bernoulli(double p) { return uniform() < p; }

  double normal();

  int poisson(double lambda);

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = uniform_index(i);
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Mixes a base seed with a stream index (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

/// Hex SHA-256 of a file's contents.
std::string sha256_file(const std::string& path);

}  // namespace fsda
