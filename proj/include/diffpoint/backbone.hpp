// SPDX-License-Identifier: Apache-2.0
// The denoiser: PointNet patch encoder, MLP positional embedding, sinusoidal
// time token, pre-norm transformer blocks with stochastic depth, and the
// per-patch linear output projection back to point coordinates.
//
// Token layout is [time, image, patch_1..patch_s] (length 2+s). All attention
// reductions over the token axis use canonical summation, so with positional
// embedding disabled the stack is exactly equivariant to patch-token order.

#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "diffpoint/error.hpp"
#include "diffpoint/geometry.hpp"
#include "diffpoint/params.hpp"
#include "diffpoint/rng.hpp"
#include "diffpoint/tensor.hpp"

namespace diffpoint {

struct BackboneConfig {
  int embed_dim = 384;
  int depth = 16;
  int num_heads = 16;
  int s = 64;  // patch count
  int k = 32;  // points per patch
  double drop_path_rate = 0.1;
  bool use_positional_embedding = true;
  int pointnet_h1 = 128;
  int pointnet_h2 = 256;
  bool center_relative_output = false;  // add patch centers to predicted offsets

  int n_points() const { return s * k; }

  void validate() const {
    if (embed_dim < 1 || depth < 1 || num_heads < 1 || s < 1 || k < 1 || pointnet_h1 < 1 ||
        pointnet_h2 < 1)
      throw ContractError("BackboneConfig: dimensions must be positive");
    if (embed_dim % num_heads != 0)
      throw ContractError("BackboneConfig: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0)
      throw ContractError("BackboneConfig: drop_path_rate must lie in [0, 1)");
  }
};

// Hidden width of the positional MLP (3 -> 128 -> embed_dim).
inline constexpr int kPositionalHidden = 128;

// ---------------------------------------------------------------------------
// parameter registration

template <class Real>
void init_block_params(ParamStoreT<Real>& ps, const std::string& prefix, int dim, SeededRng& rng) {
  const double w_std = 0.02;
  ps.add(prefix + ".ln1.g", TensorT<Real>::full({1, dim}, Real(1), true));
  ps.add(prefix + ".ln1.b", TensorT<Real>::zeros({1, dim}, true));
  ps.add(prefix + ".attn.wqkv", init_normal<Real>({dim, 3 * dim}, w_std, rng));
  ps.add(prefix + ".attn.bqkv", TensorT<Real>::zeros({1, 3 * dim}, true));
  ps.add(prefix + ".attn.wo", init_normal<Real>({dim, dim}, w_std, rng));
  ps.add(prefix + ".attn.bo", TensorT<Real>::zeros({1, dim}, true));
  ps.add(prefix + ".ln2.g", TensorT<Real>::full({1, dim}, Real(1), true));
  ps.add(prefix + ".ln2.b", TensorT<Real>::zeros({1, dim}, true));
  ps.add(prefix + ".mlp.w1", init_normal<Real>({dim, 4 * dim}, w_std, rng));
  ps.add(prefix + ".mlp.b1", TensorT<Real>::zeros({1, 4 * dim}, true));
  ps.add(prefix + ".mlp.w2", init_normal<Real>({4 * dim, dim}, w_std, rng));
  ps.add(prefix + ".mlp.b2", TensorT<Real>::zeros({1, dim}, true));
}

template <class Real>
void init_backbone_params(ParamStoreT<Real>& ps, const BackboneConfig& cfg, SeededRng& rng) {
  cfg.validate();
  const double w_std = 0.02;
  const int d = cfg.embed_dim;
  // patch encoder: (3 -> h1 -> h2), pool, concat, (2h2 -> 2h2 -> d)
  ps.add("patch.w1", init_normal<Real>({3, cfg.pointnet_h1}, w_std, rng));
  ps.add("patch.b1", TensorT<Real>::zeros({1, cfg.pointnet_h1}, true));
  ps.add("patch.w2", init_normal<Real>({cfg.pointnet_h1, cfg.pointnet_h2}, w_std, rng));
  ps.add("patch.b2", TensorT<Real>::zeros({1, cfg.pointnet_h2}, true));
  ps.add("patch.w3", init_normal<Real>({2 * cfg.pointnet_h2, 2 * cfg.pointnet_h2}, w_std, rng));
  ps.add("patch.b3", TensorT<Real>::zeros({1, 2 * cfg.pointnet_h2}, true));
  ps.add("patch.w4", init_normal<Real>({2 * cfg.pointnet_h2, d}, w_std, rng));
  ps.add("patch.b4", TensorT<Real>::zeros({1, d}, true));
  // positional MLP on patch centers + learned vectors for the two lead tokens
  ps.add("pos.w1", init_normal<Real>({3, kPositionalHidden}, w_std, rng));
  ps.add("pos.b1", TensorT<Real>::zeros({1, kPositionalHidden}, true));
  ps.add("pos.w2", init_normal<Real>({kPositionalHidden, d}, w_std, rng));
  ps.add("pos.b2", TensorT<Real>::zeros({1, d}, true));
  ps.add("pos.time", init_normal<Real>({1, d}, w_std, rng));
  ps.add("pos.image", init_normal<Real>({1, d}, w_std, rng));
  // time-token MLP over the sinusoid
  ps.add("time.w1", init_normal<Real>({d, d}, w_std, rng));
  ps.add("time.b1", TensorT<Real>::zeros({1, d}, true));
  ps.add("time.w2", init_normal<Real>({d, d}, w_std, rng));
  ps.add("time.b2", TensorT<Real>::zeros({1, d}, true));
  for (int i = 0; i < cfg.depth; ++i) init_block_params(ps, "blk" + std::to_string(i), d, rng);
  ps.add("final_ln.g", TensorT<Real>::full({1, d}, Real(1), true));
  ps.add("final_ln.b", TensorT<Real>::zeros({1, d}, true));
  ps.add("out.w", init_normal<Real>({d, 3 * cfg.k}, w_std, rng));
  ps.add("out.b", TensorT<Real>::zeros({1, 3 * cfg.k}, true));
}

// ---------------------------------------------------------------------------
// forward pieces

// PointNet over center-relative offsets: shared MLP (3->h1->h2) per point,
// per-patch max-pool, pooled vector concatenated back to every point feature,
// shared MLP (2h2->2h2->embed_dim), final per-patch max-pool. GELU after each
// hidden layer. Exactly invariant to point order inside a patch.
template <class Real>
TensorT<Real> encode_patches(const PatchSet& patches, ParamStoreT<Real>& ps,
                             const BackboneConfig& cfg) {
  if (patches.s != cfg.s || patches.k != cfg.k)
    throw ContractError("encode_patches: patch set is " + std::to_string(patches.s) + "x" +
                        std::to_string(patches.k) + ", config wants " + std::to_string(cfg.s) +
                        "x" + std::to_string(cfg.k));
  std::vector<Real> flat(patches.offsets.begin(), patches.offsets.end());
  TensorT<Real> pts = TensorT<Real>::from_vector(std::move(flat), {cfg.s * cfg.k, 3});
  auto h = gelu(add_rowvec(matmul(pts, ps.at("patch.w1")), ps.at("patch.b1")));
  auto f = add_rowvec(matmul(h, ps.at("patch.w2")), ps.at("patch.b2"));
  auto pooled = segment_max_rows(f, cfg.k);
  auto joined = concat_cols(f, repeat_rows(pooled, cfg.k));
  auto h2 = gelu(add_rowvec(matmul(joined, ps.at("patch.w3")), ps.at("patch.b3")));
  auto f2 = add_rowvec(matmul(h2, ps.at("patch.w4")), ps.at("patch.b4"));
  return segment_max_rows(f2, cfg.k);
}

// Two-layer MLP (3 -> 128 -> embed_dim, GELU) on absolute patch centers.
// Disabled embedding contributes exact zeros and touches no parameters.
template <class Real>
TensorT<Real> positional_embed(const PointCloud& centers, ParamStoreT<Real>& ps,
                               const BackboneConfig& cfg) {
  if (!cfg.use_positional_embedding)
    return TensorT<Real>::zeros({static_cast<int>(centers.size()), cfg.embed_dim});
  TensorT<Real> c = cloud_to_tensor<Real>(centers);
  auto h = gelu(add_rowvec(matmul(c, ps.at("pos.w1")), ps.at("pos.b1")));
  return add_rowvec(matmul(h, ps.at("pos.w2")), ps.at("pos.b2"));
}

// Sinusoid layout: first half sines, second half cosines, frequency
// 10000^(-2i/dim) for slot i, so entry 0 is sin(t) and entry dim/2 is cos(t).
inline std::vector<double> sinusoid_embedding(int t, int dim) {
  if (dim % 2 != 0) throw ContractError("sinusoid_embedding: dim must be even");
  std::vector<double> out(dim);
  for (int i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / dim);
    out[i] = std::sin(t * freq);
    out[dim / 2 + i] = std::cos(t * freq);
  }
  return out;
}

template <class Real>
TensorT<Real> time_token(int t, ParamStoreT<Real>& ps, const BackboneConfig& cfg) {
  if (t < 1) throw ContractError("time_token: t must be >= 1");
  const std::vector<double> sinu = sinusoid_embedding(t, cfg.embed_dim);
  std::vector<Real> vals(sinu.size());
  for (std::size_t i = 0; i < sinu.size(); ++i) vals[i] = static_cast<Real>(sinu[i]);
  TensorT<Real> base = TensorT<Real>::from_vector(std::move(vals), {1, cfg.embed_dim});
  auto h = gelu(add_rowvec(matmul(base, ps.at("time.w1")), ps.at("time.b1")));
  return add_rowvec(matmul(h, ps.at("time.w2")), ps.at("time.b2"));
}

// [time, image, patch_1..patch_s] plus positional terms (patch centers via the
// MLP, learned vectors for the two lead tokens). With the embedding disabled
// the result is exactly the raw concatenation.
template <class Real>
TensorT<Real> assemble_tokens(const TensorT<Real>& time_tok, const TensorT<Real>& image_emb,
                              const TensorT<Real>& patch_toks, const TensorT<Real>& patch_pos,
                              ParamStoreT<Real>& ps, const BackboneConfig& cfg) {
  const int d = cfg.embed_dim;
  if (time_tok.cols() != d || image_emb.cols() != d || patch_toks.cols() != d)
    throw ContractError("assemble_tokens: token dims disagree with embed_dim " +
                        std::to_string(d));
  if (time_tok.rows() != 1 || image_emb.rows() != 1)
    throw ContractError("assemble_tokens: time and image tokens must be single rows");
  TensorT<Real> seq = concat_rows<Real>({time_tok, image_emb, patch_toks});
  if (!cfg.use_positional_embedding) return seq;
  if (patch_pos.rows() != patch_toks.rows() || patch_pos.cols() != d)
    throw ContractError("assemble_tokens: positional rows do not match patch tokens");
  TensorT<Real> pos =
      concat_rows<Real>({ps.at("pos.time"), ps.at("pos.image"), patch_pos});
  return add(seq, pos);
}

// Multi-head self-attention over the full sequence (no mask). The per-head
// weighted value sum is the canonical-order reduction.
template <class Real>
TensorT<Real> attention(const TensorT<Real>& x, ParamStoreT<Real>& ps, const std::string& prefix,
                        int num_heads) {
  const int d = x.cols();
  const int dh = d / num_heads;
  auto qkv = add_rowvec(matmul(x, ps.at(prefix + ".attn.wqkv")), ps.at(prefix + ".attn.bqkv"));
  std::vector<TensorT<Real>> heads;
  heads.reserve(num_heads);
  const Real inv_sqrt_dh = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < num_heads; ++h) {
    auto qh = slice_cols(qkv, h * dh, dh);
    auto kh = slice_cols(qkv, d + h * dh, dh);
    auto vh = slice_cols(qkv, 2 * d + h * dh, dh);
    auto attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_dh));
    heads.push_back(weighted_sum_rows(attn, vh));
  }
  TensorT<Real> joined = heads[0];
  for (int h = 1; h < num_heads; ++h) joined = concat_cols(joined, heads[h]);
  return add_rowvec(matmul(joined, ps.at(prefix + ".attn.wo")), ps.at(prefix + ".attn.bo"));
}

template <class Real>
TensorT<Real> mlp_block(const TensorT<Real>& x, ParamStoreT<Real>& ps, const std::string& prefix) {
  auto h = gelu(add_rowvec(matmul(x, ps.at(prefix + ".mlp.w1")), ps.at(prefix + ".mlp.b1")));
  return add_rowvec(matmul(h, ps.at(prefix + ".mlp.w2")), ps.at(prefix + ".mlp.b2"));
}

namespace detail {
// Stochastic depth on a residual branch: in train mode the branch is dropped
// with probability `rate`, otherwise kept scaled by 1/(1-rate). Identity in
// eval mode or at rate 0.
template <class Real>
TensorT<Real> residual_add(const TensorT<Real>& x, const TensorT<Real>& branch, double rate,
                           bool train_mode, SeededRng* rng) {
  if (!train_mode || rate <= 0.0) return add(x, branch);
  if (!rng) throw ContractError("drop path needs an RNG in train mode");
  if (rng->uniform() < rate) return x;
  return add(x, scale(branch, static_cast<Real>(1.0 / (1.0 - rate))));
}
}  // namespace detail

template <class Real>
TensorT<Real> transformer_block(const TensorT<Real>& x, ParamStoreT<Real>& ps,
                                const std::string& prefix, int num_heads, double drop_path_prob,
                                bool train_mode, SeededRng* rng) {
  auto att = attention(layer_norm_rows(x, ps.at(prefix + ".ln1.g"), ps.at(prefix + ".ln1.b")), ps,
                       prefix, num_heads);
  TensorT<Real> mid = detail::residual_add(x, att, drop_path_prob, train_mode, rng);
  auto m = mlp_block(layer_norm_rows(mid, ps.at(prefix + ".ln2.g"), ps.at(prefix + ".ln2.b")), ps,
                     prefix);
  return detail::residual_add(mid, m, drop_path_prob, train_mode, rng);
}

// The residual stack alone (no final LayerNorm): zeroed output projections
// make this an exact identity.
template <class Real>
TensorT<Real> transformer_blocks(const TensorT<Real>& x, ParamStoreT<Real>& ps,
                                 const std::string& prefix, int depth, int num_heads,
                                 double drop_path_rate, bool train_mode, SeededRng* rng) {
  TensorT<Real> h = x;
  for (int i = 0; i < depth; ++i) {
    // per-block rate rises linearly from 0 to drop_path_rate
    const double rate = depth > 1 ? drop_path_rate * i / (depth - 1) : 0.0;
    h = transformer_block(h, ps, prefix + std::to_string(i), num_heads, rate, train_mode, rng);
  }
  return h;
}

template <class Real>
TensorT<Real> transformer_forward(const TensorT<Real>& seq, ParamStoreT<Real>& ps,
                                  const BackboneConfig& cfg, bool train_mode, SeededRng* rng) {
  auto h = transformer_blocks(seq, ps, "blk", cfg.depth, cfg.num_heads, cfg.drop_path_rate,
                              train_mode, rng);
  return layer_norm_rows(h, ps.at("final_ln.g"), ps.at("final_ln.b"));
}

// Per-patch linear head embed_dim -> k*3, reshaped to an (s*k) x 3 cloud. The
// time and image output tokens are discarded. When configured, patch centers
// are added to turn per-patch offsets into absolute coordinates.
template <class Real>
TensorT<Real> project_output(const TensorT<Real>& seq_out, ParamStoreT<Real>& ps,
                             const BackboneConfig& cfg, const PointCloud* centers = nullptr) {
  if (seq_out.rows() != 2 + cfg.s)
    throw ContractError("project_output: sequence has " + std::to_string(seq_out.rows()) +
                        " tokens, expected " + std::to_string(2 + cfg.s));
  auto patch_out = slice_rows(seq_out, 2, cfg.s);
  auto flat = add_rowvec(matmul(patch_out, ps.at("out.w")), ps.at("out.b"));
  auto pred = reshape(flat, {cfg.s * cfg.k, 3});
  if (!cfg.center_relative_output) return pred;
  if (!centers || static_cast<int>(centers->size()) != cfg.s)
    throw ContractError("project_output: center-relative output needs the s patch centers");
  TensorT<Real> rep = TensorT<Real>::zeros({cfg.s * cfg.k, 3});
  for (int i = 0; i < cfg.s; ++i)
    for (int j = 0; j < cfg.k; ++j)
      for (int c = 0; c < 3; ++c)
        rep.data()[(static_cast<std::size_t>(i) * cfg.k + j) * 3 + c] =
            static_cast<Real>((*centers)[i][c]);
  return add(pred, rep);
}

// Full denoiser: patches -> tokens -> transformer -> predicted clean cloud.
// `cond` is the aggregated image embedding (1 x embed_dim), kept in-graph so
// the condition path trains end to end. `fps_start` is the patch-seed index
// (training draws it, evaluation fixes 0).
template <class Real>
TensorT<Real> denoise(const PointCloud& xt, int t, const TensorT<Real>& cond,
                      ParamStoreT<Real>& ps, const BackboneConfig& cfg, bool train_mode,
                      SeededRng* rng, int fps_start = 0) {
  if (static_cast<int>(xt.size()) != cfg.n_points())
    throw ContractError("denoise: cloud has " + std::to_string(xt.size()) + " points, config " +
                        std::to_string(cfg.n_points()));
  const PatchSet patches = build_patches(xt, cfg.s, cfg.k, fps_start);
  auto patch_toks = encode_patches(patches, ps, cfg);
  auto pos = positional_embed(patches.centers, ps, cfg);
  auto tt = time_token(t, ps, cfg);
  auto seq = assemble_tokens(tt, cond, patch_toks, pos, ps, cfg);
  auto out = transformer_forward(seq, ps, cfg, train_mode, rng);
  return project_output(out, ps, cfg, &patches.centers);
}

}  // namespace diffpoint
