#include "pathseg/schedule.hpp"

#include <cmath>
#include <random>

#include "pathseg/random.hpp"

namespace pathseg {

std::size_t NoiseSchedule::check(int t) const {
  if (t < 1 || t > num_steps()) {
    fail(ErrorKind::Timestep,
         "timestep " + std::to_string(t) + " outside [1, " + std::to_string(num_steps()) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
  require(T >= 1, ErrorKind::Parameter, "schedule needs T >= 1");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorKind::Parameter,
          "schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.betas_.resize(static_cast<std::size_t>(T));
  s.alphas_.resize(s.betas_.size());
  s.alpha_bars_.resize(s.betas_.size());
  double running = 1.0;
  for (int k = 0; k < T; ++k) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(T - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    const auto i = static_cast<std::size_t>(k);
    s.betas_[i] = beta;
    s.alphas_[i] = 1.0 - beta;
    running *= s.alphas_[i];
    s.alpha_bars_[i] = running;
  }
  return s;
}

Tensor gaussian_noise(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Tensor out = Tensor::image(h, w, c);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : out.values()) v = normal(rng);
  return out;
}

Latent noise_latent(const Latent& z0, int t, const NoiseSchedule& schedule, const Tensor& noise) {
  const double abar = schedule.alpha_bar(t);
  require(noise.same_shape(z0.values), ErrorKind::Shape,
          "noise shape " + noise.shape_string() + " != latent shape " + z0.values.shape_string());
  const double signal_scale = std::sqrt(abar);
  const double noise_scale = std::sqrt(1.0 - abar);
  Latent out{Tensor(z0.values.n(), z0.values.h(), z0.values.w(), z0.values.c()), t};
  auto dst = out.values.values();
  auto src = z0.values.values();
  auto eps = noise.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = signal_scale * src[i] + noise_scale * eps[i];
  return out;
}

Latent noise_latent(const Latent& z0, int t, const NoiseSchedule& schedule, std::uint64_t seed) {
  schedule.alpha_bar(t);  // range check before drawing
  Tensor eps(z0.values.n(), z0.values.h(), z0.values.w(), z0.values.c());
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : eps.values()) v = normal(rng);
  return noise_latent(z0, t, schedule, eps);
}

}  // namespace pathseg
