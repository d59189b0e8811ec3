// SPDX-License-Identifier: Apache-2.0

#include "diffpoint/diffusion.hpp"

#include <cmath>
#include <string>

namespace diffpoint {

NoiseSchedule make_schedule(const DiffusionConfig& cfg) {
  if (cfg.T < 1) throw ContractError("make_schedule: T must be >= 1");
  if (!(cfg.beta_1 > 0.0) || !(cfg.beta_1 <= cfg.beta_T) || !(cfg.beta_T < 1.0))
    throw ContractError("make_schedule: need 0 < beta_1 <= beta_T < 1");
  NoiseSchedule s;
  s.T = cfg.T;
  s.betas.resize(cfg.T);
  s.alphas.resize(cfg.T);
  s.alpha_bars.resize(cfg.T);
  double abar = 1.0;
  for (int t = 1; t <= cfg.T; ++t) {
    const double beta =
        cfg.T == 1 ? cfg.beta_1
                   : cfg.beta_1 + (static_cast<double>(t - 1) / (cfg.T - 1)) * (cfg.beta_T - cfg.beta_1);
    s.betas[t - 1] = beta;
    s.alphas[t - 1] = 1.0 - beta;
    abar *= s.alphas[t - 1];
    s.alpha_bars[t - 1] = abar;
  }
  return s;
}

namespace {
void check_t(int t, const NoiseSchedule& sched, const char* op) {
  if (t < 1 || t > sched.T)
    throw ContractError(std::string(op) + ": t = " + std::to_string(t) + " outside [1, " +
                        std::to_string(sched.T) + "]");
}
}  // namespace

PointCloud q_sample(const PointCloud& x0, int t, const PointCloud& eps,
                    const NoiseSchedule& sched) {
  check_t(t, sched, "q_sample");
  if (eps.size() != x0.size())
    throw ContractError("q_sample: noise shape does not match cloud (" +
                        std::to_string(eps.size()) + " vs " + std::to_string(x0.size()) + ")");
  const double abar = sched.alpha_bars[t - 1];
  const double a = std::sqrt(abar);
  const double b = std::sqrt(1.0 - abar);
  PointCloud out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i)
    for (int c = 0; c < 3; ++c)
      out[i][c] = static_cast<float>(a * x0[i][c] + b * eps[i][c]);
  return out;
}

PosteriorCoeffs posterior_coeffs(const NoiseSchedule& sched, int t) {
  check_t(t, sched, "posterior_coeffs");
  const double abar_t = sched.alpha_bars[t - 1];
  const double abar_prev = t >= 2 ? sched.alpha_bars[t - 2] : 1.0;  // ᾱ_0 ≡ 1
  const double beta = sched.betas[t - 1];
  const double alpha = sched.alphas[t - 1];
  PosteriorCoeffs c;
  c.c0 = std::sqrt(abar_prev) * beta / (1.0 - abar_t);
  c.c1 = std::sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar_t);
  c.sigma2 = (1.0 - abar_prev) / (1.0 - abar_t) * beta;
  return c;
}

PointCloud p_sample_step(const PointCloud& xt, const PointCloud& x0_hat, int t,
                         const NoiseSchedule& sched, SeededRng& rng) {
  check_t(t, sched, "p_sample_step");
  if (xt.size() != x0_hat.size())
    throw ContractError("p_sample_step: xt and x0_hat sizes differ (" +
                        std::to_string(xt.size()) + " vs " + std::to_string(x0_hat.size()) + ")");
  // Final step: ᾱ_0 = 1 collapses the mean to x̂⁰ and no noise is added, so
  // return the prediction outright rather than round-tripping through the
  // coefficient arithmetic.
  if (t == 1) return x0_hat;
  const PosteriorCoeffs c = posterior_coeffs(sched, t);
  const double sigma = std::sqrt(c.sigma2);
  PointCloud out(xt.size());
  for (std::size_t i = 0; i < xt.size(); ++i)
    for (int k = 0; k < 3; ++k)
      out[i][k] =
          static_cast<float>(c.c0 * x0_hat[i][k] + c.c1 * xt[i][k] + sigma * rng.normal());
  return out;
}

PointCloud sample(const SampleModel& model, const ConditionEmbedding& cond, int n_points,
                  const NoiseSchedule& sched, SeededRng& rng) {
  if (n_points < 1) throw ContractError("sample: n_points must be positive");
  PointCloud x(n_points);
  for (int i = 0; i < n_points; ++i)
    for (int c = 0; c < 3; ++c) x[i][c] = static_cast<float>(rng.normal());
  for (int t = sched.T; t >= 1; --t) {
    const PointCloud x0_hat = model(x, t, cond);
    x = p_sample_step(x, x0_hat, t, sched, rng);
  }
  return x;
}

}  // namespace diffpoint
