// SPDX-License-Identifier: Apache-2.0
// Denoising diffusion over point clouds: linear beta schedule, forward
// noising, the x0-prediction Chamfer training objective, and the ancestral
// reverse sampler with fixed posterior variance.

#pragma once

#include <functional>
#include <vector>

#include "diffpoint/error.hpp"
#include "diffpoint/geometry.hpp"
#include "diffpoint/rng.hpp"
#include "diffpoint/tensor.hpp"

namespace diffpoint {

struct DiffusionConfig {
  int T = 200;
  double beta_1 = 1e-4;
  double beta_T = 0.05;
};

struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;       // β_t, 1-indexed as betas[t-1]
  std::vector<double> alphas;      // α_t = 1 − β_t
  std::vector<double> alpha_bars;  // ᾱ_t = Π_{i≤t} α_i
};

// The image-condition token handed to the denoiser, length = embed dim.
using ConditionEmbedding = std::vector<float>;

NoiseSchedule make_schedule(const DiffusionConfig& cfg);

// Xᵗ = √ᾱ_t·X⁰ + √(1−ᾱ_t)·ε
PointCloud q_sample(const PointCloud& x0, int t, const PointCloud& eps, const NoiseSchedule& sched);

// Posterior mean/variance coefficients at step t (ᾱ_0 ≡ 1):
//   μ = c0·x̂⁰ + c1·xᵗ, σ² = β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t
struct PosteriorCoeffs {
  double c0 = 0, c1 = 0, sigma2 = 0;
};
PosteriorCoeffs posterior_coeffs(const NoiseSchedule& sched, int t);

// One reverse transition. t=1 is the final step and returns the mean exactly
// (which collapses to x̂⁰), so a perfect predictor reproduces its target
// bit-for-bit and evaluation is reproducible.
PointCloud p_sample_step(const PointCloud& xt, const PointCloud& x0_hat, int t,
                         const NoiseSchedule& sched, SeededRng& rng);

// Cloud-level denoiser used at sampling time (no gradients).
using SampleModel =
    std::function<PointCloud(const PointCloud& xt, int t, const ConditionEmbedding& cond)>;

// Full ancestral chain: X^T ~ N(0, I), then t = T..1 posterior steps.
PointCloud sample(const SampleModel& model, const ConditionEmbedding& cond, int n_points,
                  const NoiseSchedule& sched, SeededRng& rng);

// Graph-building denoiser used at training time.
template <class Real>
using DenoiseModelT =
    std::function<TensorT<Real>(const PointCloud& xt, int t, const TensorT<Real>& cond)>;

// loss = chamfer_l1(model(q_sample(x0, t, eps), t, cond), x0), differentiable
// w.r.t. everything the model touches.
template <class Real>
TensorT<Real> training_loss(const PointCloud& x0, int t, const PointCloud& eps,
                            const TensorT<Real>& cond, const DenoiseModelT<Real>& model,
                            const NoiseSchedule& sched) {
  if (eps.size() != x0.size())
    throw ContractError("training_loss: noise has " + std::to_string(eps.size()) +
                        " points, cloud has " + std::to_string(x0.size()));
  const PointCloud xt = q_sample(x0, t, eps, sched);
  TensorT<Real> pred = model(xt, t, cond);
  if (pred.rows() != static_cast<int>(x0.size()) || pred.cols() != 3)
    throw ShapeError("training_loss: model returned " + shape_str(pred.shape()) + " for " +
                     std::to_string(x0.size()) + " points");
  return chamfer_loss(pred, x0);
}

}  // namespace diffpoint
