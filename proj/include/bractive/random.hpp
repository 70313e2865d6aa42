// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace bractive {

// splitmix64 finaliser; derives independent stream seeds (e.g. per sample id)
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// mt19937_64 is fully specified by the standard; the distributions below are
// written out because std:: distributions differ between library vendors.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::size_t below(std::size_t n);  // uniform integer in [0, n)
  double normal();
  double trunc_normal(double std, double bound_in_std = 2.0);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace bractive
