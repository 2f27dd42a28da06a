#pragma once

// Philox4x64-10 counter-based generator (Salmon et al., Random123) plus the
// variate generators the samplers need. Streams are addressed by a
// (seed, stream) key pair, so chains and replicates get independent,
// reproducible sequences without sharing state. Variates are produced by
// explicit algorithms rather than <random> distributions, whose output is
// implementation-defined.

#include <Eigen/Dense>

#include <array>
#include <cstdint>

namespace lrbf {

class Philox4x64 {
 public:
  using result_type = std::uint64_t;
  using Block = std::array<std::uint64_t, 4>;
  using Key = std::array<std::uint64_t, 2>;

  Philox4x64(std::uint64_t seed, std::uint64_t stream) : key_{seed, stream} {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }

  result_type operator()();

  // The raw bijection: ten rounds applied to `counter` under `key`.
  static Block encrypt(Block counter, Key key);

 private:
  Key key_;
  Block counter_{0, 0, 0, 0};
  Block buffer_{};
  int position_ = 4;
};

class Rng {
 public:
  Rng(std::uint64_t seed, std::uint64_t stream) : engine_(seed, stream) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  // Gamma(shape, scale = 1), Marsaglia-Tsang.
  double gamma(double shape);
  double chi_squared(double dof) { return 2.0 * gamma(0.5 * dof); }
  double student_t(double dof);

  void fill_normal(Eigen::Ref<Eigen::MatrixXd> out);

 private:
  Philox4x64 engine_;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
};

// Mixes several words into one 64-bit seed (splitmix64 finalizer chain).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                          std::uint64_t b = 0, std::uint64_t c = 0);

}  // namespace lrbf
