#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace htr {

using idx = std::int64_t;
using Shape = std::vector<idx>;

inline idx numel_of(const Shape& s) {
  idx n = 1;
  for (idx d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); i++) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Counted warnings (clamped probabilities, skipped samples, ...). Mutated
// only on the single logical training thread.
struct Warnings {
  std::map<std::string, std::int64_t> counts;
  void bump(const std::string& key, std::int64_t n = 1) { counts[key] += n; }
  std::int64_t get(const std::string& key) const {
    auto it = counts.find(key);
    return it == counts.end() ? 0 : it->second;
  }
  void reset() { counts.clear(); }
  static Warnings& global() {
    static Warnings w;
    return w;
  }
};

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Dense row-major n-d array. The scalar type doubles as the dtype tag:
// fp32 for training, fp64 for oracle and gradient-check work.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(numel_of(shape), T(0)) {}
  Tensor(Shape s, T fill) : shape(std::move(s)), data(numel_of(shape), fill) {}
  Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    require(static_cast<idx>(data.size()) == numel_of(shape),
            "tensor data size does not match shape " + shape_str(shape));
  }

  idx numel() const { return static_cast<idx>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  idx dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T& operator[](idx i) { return data[static_cast<size_t>(i)]; }
  T operator[](idx i) const { return data[static_cast<size_t>(i)]; }

  T& at2(idx i, idx j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  T at2(idx i, idx j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }
  T& at3(idx i, idx j, idx k) {
    return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  T at3(idx i, idx j, idx k) const {
    return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  T& at4(idx i, idx j, idx k, idx l) {
    return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }
  T at4(idx i, idx j, idx k, idx l) const {
    return data[static_cast<size_t>(((i * shape[1] + j) * shape[2] + k) * shape[3] + l)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (idx i = 0; i < numel(); i++) out[i] = static_cast<U>(data[static_cast<size_t>(i)]);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Deterministic RNG. Self-contained so that seeded streams are bit-identical
// across platforms and standard-library versions; std distributions are not.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2));
  splitmix64(s);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // warm up so that small seeds diverge immediately
    splitmix64(state_);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller; the spare is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  idx below(idx n) {
    require(n > 0, "Rng::below needs n > 0");
    return static_cast<idx>(next_u64() % static_cast<std::uint64_t>(n));
  }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

template <typename T>
Tensor<T> randn(const Shape& s, Rng& rng, double stddev = 1.0) {
  Tensor<T> t(s);
  for (idx i = 0; i < t.numel(); i++) t[i] = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
Tensor<T> rand_uniform(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor<T> t(s);
  for (idx i = 0; i < t.numel(); i++) t[i] = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

}  // namespace htr
