#pragma once

#include <cstdint>
#include <vector>

#include "pathseg/tensor.hpp"

namespace pathseg {

/// Linear-beta DDPM schedule. Index t runs 1..T; the vectors are stored
/// zero-based so beta(t) == betas()[t - 1].
class NoiseSchedule {
 public:
  static constexpr int kDefaultSteps = 1000;
  static constexpr double kDefaultBetaStart = 1e-4;
  static constexpr double kDefaultBetaEnd = 0.02;

  int num_steps() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(check(t)); }
  double alpha(int t) const { return alphas_.at(check(t)); }
  double alpha_bar(int t) const { return alpha_bars_.at(check(t)); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

 private:
  friend NoiseSchedule build_schedule(int, double, double);
  std::size_t check(int t) const;

  std::vector<double> betas_, alphas_, alpha_bars_;
};

/// Linear interpolation from beta_start to beta_end over T steps, alpha_bar by
/// running product. Throws ErrorKind::Parameter on an invalid range.
NoiseSchedule build_schedule(int T = NoiseSchedule::kDefaultSteps,
                             double beta_start = NoiseSchedule::kDefaultBetaStart,
                             double beta_end = NoiseSchedule::kDefaultBetaEnd);

/// Latent tensor (n == 1, h, w, c_lat) tagged with its diffusion timestep;
/// timestep 0 is the clean latent.
struct Latent {
  Tensor values;
  int timestep = 0;
};

/// Closed-form forward noising z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
/// `noise` must match z0's shape.
Latent noise_latent(const Latent& z0, int t, const NoiseSchedule& schedule, const Tensor& noise);

/// Same as above with eps drawn from a standard normal seeded by `seed`.
Latent noise_latent(const Latent& z0, int t, const NoiseSchedule& schedule, std::uint64_t seed);

/// Standard-normal tensor of the given shape, deterministic in `seed`.
Tensor gaussian_noise(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed);

}  // namespace pathseg
