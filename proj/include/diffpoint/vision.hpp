// SPDX-License-Identifier: Apache-2.0
// Image conditioning: a small trainable ViT encodes each render to one
// embedding, and the multi-feature aggregator (MFA) pools a view set into a
// single condition vector via learned-query attention. AVG mode (the "no
// MFA" ablation) is a plain mean. Both are exactly view-order invariant.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "diffpoint/backbone.hpp"
#include "diffpoint/error.hpp"
#include "diffpoint/params.hpp"
#include "diffpoint/tensor.hpp"

namespace diffpoint {

struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> pixels;  // row-major, [0,1]
};

enum class Aggregation { MFA, AVG };

inline Aggregation parse_aggregation(const std::string& name) {
  if (name == "mfa" || name == "MFA") return Aggregation::MFA;
  if (name == "avg" || name == "AVG") return Aggregation::AVG;
  throw ContractError("unknown aggregation mode: " + name + " (expected mfa or avg)");
}

struct VisionConfig {
  int image_size = 32;
  int patch_size = 4;
  int depth = 4;
  int num_heads = 4;
  int embed_dim = 384;  // internal width and output dimension

  int tokens_per_side() const { return image_size / patch_size; }
  int token_count() const { return tokens_per_side() * tokens_per_side(); }
  int patch_dim() const { return patch_size * patch_size; }

  void validate() const {
    if (image_size < 1 || patch_size < 1 || depth < 1 || num_heads < 1 || embed_dim < 1)
      throw ContractError("VisionConfig: dimensions must be positive");
    if (image_size % patch_size != 0)
      throw ContractError("VisionConfig: image size " + std::to_string(image_size) +
                          " not divisible by patch size " + std::to_string(patch_size));
    if (embed_dim % num_heads != 0)
      throw ContractError("VisionConfig: embed_dim not divisible by num_heads");
  }
};

template <class Real>
void init_vision_params(ParamStoreT<Real>& ps, const VisionConfig& cfg, SeededRng& rng) {
  cfg.validate();
  const double w_std = 0.02;
  const int d = cfg.embed_dim;
  ps.add("img.embed.w", init_normal<Real>({cfg.patch_dim(), d}, w_std, rng));
  ps.add("img.embed.b", TensorT<Real>::zeros({1, d}, true));
  ps.add("img.pos", init_normal<Real>({cfg.token_count(), d}, w_std, rng));
  for (int i = 0; i < cfg.depth; ++i) init_block_params(ps, "img.blk" + std::to_string(i), d, rng);
  ps.add("img.out.w", init_normal<Real>({d, d}, w_std, rng));
  ps.add("img.out.b", TensorT<Real>::zeros({1, d}, true));
  // learned-query attention pooling over views
  ps.add("agg.q", init_normal<Real>({1, d}, w_std, rng));
  ps.add("agg.wk", init_normal<Real>({d, d}, w_std, rng));
  ps.add("agg.wv", init_normal<Real>({d, d}, w_std, rng));
  ps.add("agg.wo", init_normal<Real>({d, d}, w_std, rng));
}

// patchify -> linear embed -> learned 2-D positional table -> transformer
// blocks -> mean-pool -> linear. Pure function (no stochastic depth here).
template <class Real>
TensorT<Real> encode_image(const ImageTensor& img, ParamStoreT<Real>& ps, const VisionConfig& cfg) {
  if (img.channels != 1)
    throw ContractError("encode_image: expected 1 channel, got " + std::to_string(img.channels));
  if (img.height != cfg.image_size || img.width != cfg.image_size)
    throw ContractError("encode_image: image is " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + ", config wants " +
                        std::to_string(cfg.image_size));
  if (static_cast<int>(img.pixels.size()) != img.height * img.width)
    throw ContractError("encode_image: pixel buffer does not match dimensions");
  const int side = cfg.tokens_per_side();
  const int p = cfg.patch_size;
  TensorT<Real> patches = TensorT<Real>::zeros({cfg.token_count(), cfg.patch_dim()});
  for (int gy = 0; gy < side; ++gy)
    for (int gx = 0; gx < side; ++gx) {
      Real* dst = patches.data() + static_cast<std::size_t>(gy * side + gx) * cfg.patch_dim();
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          dst[py * p + px] = static_cast<Real>(
              img.pixels[static_cast<std::size_t>(gy * p + py) * img.width + gx * p + px]);
    }
  auto tokens = add(add_rowvec(matmul(patches, ps.at("img.embed.w")), ps.at("img.embed.b")),
                    ps.at("img.pos"));
  auto h = transformer_blocks(tokens, ps, "img.blk", cfg.depth, cfg.num_heads,
                              /*drop_path_rate=*/0.0, /*train_mode=*/false, nullptr);
  auto pooled = mean_over_rows(h);
  return add_rowvec(matmul(pooled, ps.at("img.out.w")), ps.at("img.out.b"));
}

// Pool V embeddings (V x d) into one condition vector (1 x d).
// MFA: scores = softmax_v(q . key(e_v) / sqrt(d)); out = W_out . sum_v
// scores_v * value(e_v). AVG: arithmetic mean. Canonical-order reductions make
// both modes bit-identical under any view permutation. `scores_out`, when
// given, receives the attention weights (MFA) or uniform 1/V (AVG).
template <class Real>
TensorT<Real> aggregate_features(const TensorT<Real>& embeddings, ParamStoreT<Real>& ps,
                                 Aggregation mode, std::vector<Real>* scores_out = nullptr) {
  const int v = embeddings.rows();
  if (v < 1) throw ContractError("aggregate_features: need at least one view");
  if (mode == Aggregation::AVG) {
    if (scores_out) scores_out->assign(v, Real(1) / static_cast<Real>(v));
    return mean_over_rows(embeddings);
  }
  const int d = embeddings.cols();
  auto keys = matmul(embeddings, ps.at("agg.wk"));                       // V x d
  auto logits = transpose(matmul(keys, transpose(ps.at("agg.q"))));      // 1 x V
  auto scores = softmax_rows(scale(logits, static_cast<Real>(1.0 / std::sqrt(double(d)))));
  if (scores_out) scores_out->assign(scores.data(), scores.data() + v);
  auto values = matmul(embeddings, ps.at("agg.wv"));                     // V x d
  auto pooled = weighted_sum_rows(scores, values);                       // 1 x d
  return matmul(pooled, ps.at("agg.wo"));
}

template <class Real>
TensorT<Real> encode_views(const std::vector<ImageTensor>& views, ParamStoreT<Real>& ps,
                           const VisionConfig& cfg, Aggregation mode) {
  if (views.empty()) throw ContractError("encode_views: empty view set");
  std::vector<TensorT<Real>> embs;
  embs.reserve(views.size());
  for (const ImageTensor& img : views) embs.push_back(encode_image(img, ps, cfg));
  TensorT<Real> stacked = embs.size() == 1 ? embs[0] : concat_rows(embs);
  return aggregate_features(stacked, ps, mode);
}

}  // namespace diffpoint
