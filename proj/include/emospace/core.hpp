#pragma once
//
// Shared types for the emospace library: matrix aliases, the error
// hierarchy, and the counter-based random generator used by every
// generator and trainer.
//

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace emospace {

using Index = Eigen::Index;

/// Storage type for activations: row-major binary32, matching the on-disk layout.
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixD = Eigen::MatrixXd;
using VectorD = Eigen::VectorXd;
using RowVectorD = Eigen::RowVectorXd;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define EMOSPACE_DEFINE_ERROR(Name)      \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

EMOSPACE_DEFINE_ERROR(FormatError);      // shapes disagree with a manifest or declared layout
EMOSPACE_DEFINE_ERROR(DataError);        // non-finite or otherwise invalid values
EMOSPACE_DEFINE_ERROR(IntegrityError);   // declared file missing, label misalignment
EMOSPACE_DEFINE_ERROR(CorruptionError);  // checksum or size mismatch
EMOSPACE_DEFINE_ERROR(NotFoundError);
EMOSPACE_DEFINE_ERROR(ShapeError);       // dimension mismatch between arguments
EMOSPACE_DEFINE_ERROR(LabelError);
EMOSPACE_DEFINE_ERROR(RankError);
EMOSPACE_DEFINE_ERROR(ConfigError);
EMOSPACE_DEFINE_ERROR(UndefinedError);   // statistic undefined for the input (single class, zero variance, ...)
EMOSPACE_DEFINE_ERROR(CapabilityError);
EMOSPACE_DEFINE_ERROR(GeometryError);
EMOSPACE_DEFINE_ERROR(SampleError);
EMOSPACE_DEFINE_ERROR(AlignmentError);
EMOSPACE_DEFINE_ERROR(TrainingError);
EMOSPACE_DEFINE_ERROR(StateError);
EMOSPACE_DEFINE_ERROR(TapError);
EMOSPACE_DEFINE_ERROR(EmptyInputError);

#undef EMOSPACE_DEFINE_ERROR

// ---------------------------------------------------------------------------
// random numbers
// ---------------------------------------------------------------------------

/// Name recorded in manifests so fixtures can be traced back to their generator.
inline constexpr const char* kRngAlgorithm = "splitmix64-counter";

inline constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream key from a master seed and a stream id.
inline constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) noexcept {
  return splitmix64_mix(master ^ splitmix64_mix(stream + 0x9e3779b97f4a7c15ULL));
}

/// Counter-based generator: output i is mix(key + (i+1)·γ).  Satisfies
/// UniformRandomBitGenerator, so it plugs into <random> distributions.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t key = 0, std::uint64_t counter = 0) noexcept
      : key_(key), counter_(counter) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept {
    ++counter_;
    return splitmix64_mix(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box–Muller; independent of the standard library's
  /// distribution implementation so fixtures agree across toolchains.
  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % n;
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Fisher–Yates shuffle driven by CounterRng (std::shuffle's algorithm is unspecified).
template <typename It>
void shuffle(It first, It last, CounterRng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.below(i);
    std::iter_swap(first + static_cast<std::ptrdiff_t>(i - 1), first + static_cast<std::ptrdiff_t>(j));
  }
}

template <typename T>
Mat<T> random_normal(Index rows, Index cols, CounterRng& rng, double scale = 1.0) {
  Mat<T> m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = static_cast<T>(scale * rng.normal());
  return m;
}

// ---------------------------------------------------------------------------
// small numeric helpers
// ---------------------------------------------------------------------------

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// Stable 64-bit FNV-1a, used for config hashes.
inline std::uint64_t fnv1a64(const std::string& s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline constexpr double kSqrt1_2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

/// Exact (erf-based) GELU and its derivative.
template <typename T>
inline T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(kSqrt1_2)));
}

template <typename T>
inline T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(kSqrt1_2)));
  const T pdf = T(kInvSqrt2Pi) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

}  // namespace emospace
