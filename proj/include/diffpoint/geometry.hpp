// SPDX-License-Identifier: Apache-2.0
// Point-cloud utilities: normalization, farthest point sampling, k-nearest
// neighbours, patch construction, Chamfer-L1 and F-score metrics.
//
// All pairwise distances are evaluated in double from the float coordinates,
// ties resolve to the lowest index, and set-valued sums use canonical order,
// so every routine is exactly reproducible and order-stable.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "diffpoint/error.hpp"
#include "diffpoint/tensor.hpp"

namespace diffpoint {

using Point = std::array<float, 3>;
using PointCloud = std::vector<Point>;

namespace detail {
inline double dist2(const Point& a, const Point& b) {
  const double dx = static_cast<double>(a[0]) - b[0];
  const double dy = static_cast<double>(a[1]) - b[1];
  const double dz = static_cast<double>(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}
}  // namespace detail

struct NormalizeResult {
  PointCloud cloud;
  Point center{0.f, 0.f, 0.f};
  float scale = 1.f;
};

// Center on the centroid, then divide by the max distance from it, so the
// result fits the unit ball. Degenerate clouds (all points equal) keep scale 1.
inline NormalizeResult normalize_cloud(const PointCloud& cloud) {
  if (cloud.empty()) throw ContractError("normalize_cloud: empty cloud");
  double cx = 0, cy = 0, cz = 0;
  for (const Point& p : cloud) {
    cx += p[0];
    cy += p[1];
    cz += p[2];
  }
  const double n = static_cast<double>(cloud.size());
  cx /= n;
  cy /= n;
  cz /= n;
  double max_norm = 0.0;
  for (const Point& p : cloud) {
    const double dx = p[0] - cx, dy = p[1] - cy, dz = p[2] - cz;
    max_norm = std::max(max_norm, std::sqrt(dx * dx + dy * dy + dz * dz));
  }
  const double scale = max_norm > 0.0 ? max_norm : 1.0;
  NormalizeResult out;
  out.center = {static_cast<float>(cx), static_cast<float>(cy), static_cast<float>(cz)};
  out.scale = static_cast<float>(scale);
  out.cloud.resize(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i)
    out.cloud[i] = {static_cast<float>((cloud[i][0] - cx) / scale),
                    static_cast<float>((cloud[i][1] - cy) / scale),
                    static_cast<float>((cloud[i][2] - cz) / scale)};
  return out;
}

// Greedy farthest point sampling. Each round picks the point with the largest
// distance to the selected set; ties go to the lowest index. When s == N the
// result is a permutation of all indices. `radii` (optional) receives each
// pick's distance-to-set at selection time, which is non-increasing.
inline std::vector<int> fps(const PointCloud& cloud, int s, int start,
                            std::vector<double>* radii = nullptr) {
  const int n = static_cast<int>(cloud.size());
  if (n == 0) throw ContractError("fps: empty cloud");
  if (s < 1 || s > n)
    throw ContractError("fps: sample count " + std::to_string(s) + " out of range [1, " +
                        std::to_string(n) + "]");
  if (start < 0 || start >= n)
    throw ContractError("fps: start index " + std::to_string(start) + " out of range");
  std::vector<int> picks;
  picks.reserve(s);
  std::vector<char> taken(n, 0);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  if (radii) radii->clear();
  int current = start;
  for (int round = 0; round < s; ++round) {
    picks.push_back(current);
    taken[current] = 1;
    if (radii) radii->push_back(dist[current]);
    if (round + 1 == s) break;
    int best = -1;
    double best_dist = -1.0;
    for (int i = 0; i < n; ++i) {
      if (taken[i]) continue;
      const double d = detail::dist2(cloud[i], cloud[current]);
      if (d < dist[i]) dist[i] = d;
      if (dist[i] > best_dist) {
        best_dist = dist[i];
        best = i;
      }
    }
    current = best;
  }
  if (radii)
    for (double& r : *radii) r = std::sqrt(r);
  return picks;
}

// Exact k nearest neighbours of `query` within `cloud`, ordered by ascending
// distance with index as the tie-break.
inline std::vector<int> knn(const PointCloud& cloud, const Point& query, int k) {
  const int n = static_cast<int>(cloud.size());
  if (k < 1 || k > n)
    throw ContractError("knn: k " + std::to_string(k) + " out of range [1, " + std::to_string(n) +
                        "]");
  std::vector<std::pair<double, int>> order(n);
  for (int i = 0; i < n; ++i) order[i] = {detail::dist2(cloud[i], query), i};
  std::partial_sort(order.begin(), order.begin() + k, order.end());
  std::vector<int> out(k);
  for (int i = 0; i < k; ++i) out[i] = order[i].second;
  return out;
}

struct PatchSet {
  int s = 0;  // number of patches
  int k = 0;  // points per patch
  std::vector<int> center_indices;       // s entries
  PointCloud centers;                    // s points (absolute coordinates)
  std::vector<float> offsets;            // s*k*3 floats, center-relative, row-major
};

// FPS centers + KNN groups, offsets stored relative to each patch center.
inline PatchSet build_patches(const PointCloud& cloud, int s, int k, int start) {
  if (k > static_cast<int>(cloud.size()))
    throw ContractError("build_patches: k exceeds cloud size");
  PatchSet out;
  out.s = s;
  out.k = k;
  out.center_indices = fps(cloud, s, start);
  out.centers.resize(s);
  out.offsets.resize(static_cast<std::size_t>(s) * k * 3);
  for (int i = 0; i < s; ++i) {
    const Point& c = cloud[out.center_indices[i]];
    out.centers[i] = c;
    const std::vector<int> nb = knn(cloud, c, k);
    for (int j = 0; j < k; ++j) {
      const Point& p = cloud[nb[j]];
      float* dst = out.offsets.data() + (static_cast<std::size_t>(i) * k + j) * 3;
      dst[0] = p[0] - c[0];
      dst[1] = p[1] - c[1];
      dst[2] = p[2] - c[2];
    }
  }
  return out;
}

namespace detail {
// One direction of Chamfer-L1: mean over `from` of the distance to the
// nearest point of `to`, halved. Nearest-point ties pick the lowest index.
inline double chamfer_half(const PointCloud& from, const PointCloud& to,
                           std::vector<int>* argmin = nullptr,
                           std::vector<double>* dists = nullptr) {
  std::vector<double> mins(from.size());
  if (argmin) argmin->resize(from.size());
  for (std::size_t i = 0; i < from.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = 0;
    for (std::size_t j = 0; j < to.size(); ++j) {
      const double d = dist2(from[i], to[j]);
      if (d < best) {
        best = d;
        best_j = static_cast<int>(j);
      }
    }
    mins[i] = std::sqrt(best);
    if (argmin) (*argmin)[i] = best_j;
  }
  if (dists) *dists = mins;
  return ordered_sum(mins) / (2.0 * static_cast<double>(from.size()));
}
}  // namespace detail

// Chamfer-L1: mean nearest-neighbour distance in both directions, each half
// weighted by its own set size. Exactly symmetric and permutation-invariant.
inline double chamfer_l1(const PointCloud& p, const PointCloud& q) {
  if (p.empty() || q.empty()) throw ContractError("chamfer_l1: empty cloud");
  return detail::chamfer_half(p, q) + detail::chamfer_half(q, p);
}

// F-score at threshold tau, applied to the *squared* nearest distance
// (strict <). Returns percent in [0, 100].
inline double fscore(const PointCloud& p, const PointCloud& q, double tau) {
  if (p.empty() || q.empty()) throw ContractError("fscore: empty cloud");
  if (tau <= 0) throw ContractError("fscore: tau must be positive");
  auto fraction_within = [tau](const PointCloud& from, const PointCloud& to) {
    std::size_t hits = 0;
    for (const Point& a : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const Point& b : to) best = std::min(best, detail::dist2(a, b));
      if (best < tau) ++hits;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(from.size());
  };
  const double precision = fraction_within(p, q);
  const double recall = fraction_within(q, p);
  if (precision + recall <= 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

// Chamfer-L1 as a differentiable loss of the predicted (N x 3) tensor against
// a fixed target cloud. Gradients follow the nearest-neighbour assignments
// (lowest index on ties); coincident pairs contribute zero gradient.
template <class Real>
TensorT<Real> chamfer_loss(const TensorT<Real>& pred, const PointCloud& target) {
  if (pred.cols() != 3 || pred.rows() < 1)
    throw ShapeError("chamfer_loss: prediction must be (N x 3), got " + shape_str(pred.shape()));
  if (target.empty()) throw ContractError("chamfer_loss: empty target");
  const int n = pred.rows();
  const int m = static_cast<int>(target.size());
  PointCloud pred_cloud(n);
  for (int i = 0; i < n; ++i)
    pred_cloud[i] = {static_cast<float>(pred.at(i, 0)), static_cast<float>(pred.at(i, 1)),
                     static_cast<float>(pred.at(i, 2))};

  // forward in double straight from the Real coordinates
  auto fwd_argmin = std::make_shared<std::vector<int>>(n);
  auto fwd_dist = std::make_shared<std::vector<double>>(n);
  std::vector<double> terms(n);
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_j = 0;
    for (int j = 0; j < m; ++j) {
      const double dx = static_cast<double>(pred.at(i, 0)) - target[j][0];
      const double dy = static_cast<double>(pred.at(i, 1)) - target[j][1];
      const double dz = static_cast<double>(pred.at(i, 2)) - target[j][2];
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best) {
        best = d;
        best_j = j;
      }
    }
    (*fwd_argmin)[i] = best_j;
    (*fwd_dist)[i] = std::sqrt(best);
    terms[i] = (*fwd_dist)[i];
  }
  const double half_fwd = ordered_sum(terms) / (2.0 * n);

  auto rev_argmin = std::make_shared<std::vector<int>>(m);
  auto rev_dist = std::make_shared<std::vector<double>>(m);
  terms.resize(m);
  for (int j = 0; j < m; ++j) {
    double best = std::numeric_limits<double>::infinity();
    int best_i = 0;
    for (int i = 0; i < n; ++i) {
      const double dx = static_cast<double>(pred.at(i, 0)) - target[j][0];
      const double dy = static_cast<double>(pred.at(i, 1)) - target[j][1];
      const double dz = static_cast<double>(pred.at(i, 2)) - target[j][2];
      const double d = dx * dx + dy * dy + dz * dz;
      if (d < best) {
        best = d;
        best_i = i;
      }
    }
    (*rev_argmin)[j] = best_i;
    (*rev_dist)[j] = std::sqrt(best);
    terms[j] = (*rev_dist)[j];
  }
  const double half_rev = ordered_sum(terms) / (2.0 * m);

  auto out = detail::make_out<Real>({1, 1}, {pred.ptr()});
  out->data[0] = static_cast<Real>(half_fwd + half_rev);
  if (out->requires_grad) {
    auto target_copy = std::make_shared<PointCloud>(target);
    out->backward_fn = [n, m, fwd_argmin, fwd_dist, rev_argmin, rev_dist,
                        target_copy](TensorNode<Real>& self) {
      auto& ppred = self.parents[0];
      ppred->ensure_grad();
      const double g = static_cast<double>(self.grad[0]);
      const PointCloud& tgt = *target_copy;
      for (int i = 0; i < n; ++i) {
        const double d = (*fwd_dist)[i];
        if (d <= 0.0) continue;
        const int j = (*fwd_argmin)[i];
        const double w = g / (2.0 * n * d);
        for (int c = 0; c < 3; ++c) {
          const double diff =
              static_cast<double>(ppred->data[static_cast<std::size_t>(i) * 3 + c]) - tgt[j][c];
          ppred->grad[static_cast<std::size_t>(i) * 3 + c] += static_cast<Real>(w * diff);
        }
      }
      for (int j = 0; j < m; ++j) {
        const double d = (*rev_dist)[j];
        if (d <= 0.0) continue;
        const int i = (*rev_argmin)[j];
        const double w = g / (2.0 * m * d);
        for (int c = 0; c < 3; ++c) {
          const double diff =
              static_cast<double>(ppred->data[static_cast<std::size_t>(i) * 3 + c]) - tgt[j][c];
          ppred->grad[static_cast<std::size_t>(i) * 3 + c] += static_cast<Real>(w * diff);
        }
      }
    };
  }
  return TensorT<Real>(out);
}

// ---------------------------------------------------------------------------
// xyz text I/O (one "x y z" per line, '#' starts a comment)

PointCloud read_xyz(const std::string& path);
void write_xyz(const std::string& path, const PointCloud& cloud);

// Conversions between clouds and (N x 3) tensors.
template <class Real>
TensorT<Real> cloud_to_tensor(const PointCloud& cloud, bool requires_grad = false) {
  TensorT<Real> t = TensorT<Real>::zeros({static_cast<int>(cloud.size()), 3}, requires_grad);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int c = 0; c < 3; ++c) t.data()[i * 3 + c] = static_cast<Real>(cloud[i][c]);
  return t;
}

template <class Real>
PointCloud tensor_to_cloud(const TensorT<Real>& t) {
  if (t.cols() != 3) throw ShapeError("tensor_to_cloud: expected (N x 3), got " + shape_str(t.shape()));
  PointCloud cloud(t.rows());
  for (int i = 0; i < t.rows(); ++i)
    cloud[i] = {static_cast<float>(t.at(i, 0)), static_cast<float>(t.at(i, 1)),
                static_cast<float>(t.at(i, 2))};
  return cloud;
}

}  // namespace diffpoint
