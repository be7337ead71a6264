#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace ofnet {

// Error taxonomy. CLI maps these onto stable exit codes:
// usage/config -> 1, data -> 2, numeric -> 3.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

inline constexpr double kPi = std::numbers::pi_v<double>;

/// Wrap an angle into (-pi, pi]. wrap_angle(pi) == pi, wrap_angle(-pi) == pi.
inline double wrap_angle(double theta) {
  double r = std::fmod(theta + kPi, 2.0 * kPi);
  if (r <= 0.0) r += 2.0 * kPi;
  return r - kPi;
}

/// Dense row-major H x W grid. The plain-image counterpart of Tensor:
/// ground truth maps, masks, metric inputs. No gradients, no channels.
template <typename T>
struct Grid {
  int h = 0;
  int w = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int h_, int w_, T fill = T{}) : h(h_), w(w_), data(size_t(h_) * w_, fill) {}

  T& at(int y, int x) { return data[size_t(y) * w + x]; }
  const T& at(int y, int x) const { return data[size_t(y) * w + x]; }
  bool inside(int y, int x) const { return y >= 0 && y < h && x >= 0 && x < w; }
  size_t size() const { return data.size(); }

  bool operator==(const Grid&) const = default;
};

using GridF = Grid<float>;
using GridU8 = Grid<uint8_t>;

/// Deterministic RNG used everywhere seeds matter. splitmix64 core with
/// hand-rolled uniform/normal draws so streams are identical across
/// platforms and standard-library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * kPi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  /// Derive an independent child stream; deterministic in (seed, tag).
  Rng fork(uint64_t tag) const {
    Rng r(state_ ^ (0x9e6c63d0876a9a35ULL * (tag + 1)));
    r.next_u64();
    return r;
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Applies the OFNET_THREADS cap to the OpenMP runtime. Call once at
/// process start; safe to call when OpenMP is absent.
void init_threads_from_env();

}  // namespace ofnet
