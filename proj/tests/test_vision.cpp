// SPDX-License-Identifier: Apache-2.0
// Image conditioning: the patch-grid layout of the image encoder, linear
// oracles with the transformer stack neutralized, view aggregation in both
// attention (MFA) and mean (AVG) modes, exact view-order invariance, and
// gradient flow into the vision parameters.

#include <cmath>
#include <utility>
#include <vector>

#include "doctest.h"
#include "diffpoint/rng.hpp"
#include "diffpoint/vision.hpp"

using namespace diffpoint;

namespace {

VisionConfig tiny_config() {
  VisionConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 2;
  cfg.depth = 1;
  cfg.num_heads = 1;
  cfg.embed_dim = 4;
  return cfg;
}

ImageTensor ramp_image(int size) {
  ImageTensor img;
  img.height = img.width = size;
  img.pixels.resize(static_cast<std::size_t>(size) * size);
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<float>(i) / static_cast<float>(img.pixels.size() - 1);
  return img;
}

ImageTensor noise_image(int size, SeededRng& rng) {
  ImageTensor img;
  img.height = img.width = size;
  img.pixels.resize(static_cast<std::size_t>(size) * size);
  for (float& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

void zero_param(ParamStore& ps, const std::string& name) {
  Tensor& t = ps.at(name);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = 0.f;
}

void set_identity(ParamStore& ps, const std::string& name) {
  Tensor& t = ps.at(name);
  REQUIRE(t.rows() == t.cols());
  for (int i = 0; i < t.rows(); ++i)
    for (int j = 0; j < t.cols(); ++j) t.data()[static_cast<std::size_t>(i) * t.cols() + j] =
        i == j ? 1.f : 0.f;
}

// Neutralize the transformer stack so the encoder is patchify -> embed ->
// mean-pool -> output head.
void make_linear(ParamStore& ps, const VisionConfig& cfg) {
  for (int i = 0; i < cfg.depth; ++i) {
    zero_param(ps, "img.blk" + std::to_string(i) + ".attn.wo");
    zero_param(ps, "img.blk" + std::to_string(i) + ".mlp.w2");
  }
}

}  // namespace

TEST_CASE("encode_image is deterministic and input-sensitive") {
  VisionConfig cfg = tiny_config();
  SeededRng rng(3);
  ParamStore ps;
  init_vision_params(ps, cfg, rng);
  const ImageTensor img = noise_image(4, rng);

  const Tensor a = encode_image(img, ps, cfg);
  CHECK(a.rows() == 1);
  CHECK(a.cols() == cfg.embed_dim);
  CHECK(same_bits(a, encode_image(img, ps, cfg)));

  ImageTensor other = img;
  other.pixels[5] += 0.25f;
  CHECK_FALSE(same_bits(a, encode_image(other, ps, cfg)));

  SUBCASE("contract violations") {
    ImageTensor rgb = img;
    rgb.channels = 3;
    CHECK_THROWS_AS(encode_image(rgb, ps, cfg), ContractError);
    ImageTensor wrong = img;
    wrong.width = 8;
    CHECK_THROWS_AS(encode_image(wrong, ps, cfg), ContractError);
    ImageTensor short_buf = img;
    short_buf.pixels.pop_back();
    CHECK_THROWS_AS(encode_image(short_buf, ps, cfg), ContractError);
    VisionConfig bad = cfg;
    bad.patch_size = 3;
    CHECK_THROWS_AS(bad.validate(), ContractError);
  }
}

TEST_CASE("patchify groups pixels into row-major 2x2 tiles") {
  VisionConfig cfg = tiny_config();
  SeededRng rng(5);
  ParamStore ps;
  init_vision_params(ps, cfg, rng);
  // identity embed, no positional table, neutral blocks, identity head:
  // output j = mean over the four patches of patch entry j
  set_identity(ps, "img.embed.w");
  zero_param(ps, "img.pos");
  make_linear(ps, cfg);
  set_identity(ps, "img.out.w");

  const ImageTensor img = ramp_image(4);
  const Tensor out = encode_image(img, ps, cfg);
  for (int py = 0; py < 2; ++py)
    for (int px = 0; px < 2; ++px) {
      double want = 0.0;
      for (int gy = 0; gy < 2; ++gy)
        for (int gx = 0; gx < 2; ++gx)
          want += img.pixels[static_cast<std::size_t>(gy * 2 + py) * 4 + gx * 2 + px];
      CHECK(out.at(0, py * 2 + px) == doctest::Approx(want / 4.0).epsilon(1e-6));
    }
}

TEST_CASE("neutralized encoder matches a double-precision linear trace") {
  VisionConfig cfg = tiny_config();
  SeededRng rng(7);
  ParamStore ps;
  init_vision_params(ps, cfg, rng);
  make_linear(ps, cfg);
  const ImageTensor img = noise_image(4, rng);
  const Tensor out = encode_image(img, ps, cfg);

  const Tensor& w = ps.at("img.embed.w");
  const Tensor& b = ps.at("img.embed.b");
  const Tensor& pos = ps.at("img.pos");
  const Tensor& wo = ps.at("img.out.w");
  const Tensor& bo = ps.at("img.out.b");
  const int d = cfg.embed_dim;
  std::vector<double> pooled(d, 0.0);
  for (int gy = 0; gy < 2; ++gy)
    for (int gx = 0; gx < 2; ++gx) {
      const int tok = gy * 2 + gx;
      for (int j = 0; j < d; ++j) {
        double v = b.at(0, j) + pos.at(tok, j);
        for (int py = 0; py < 2; ++py)
          for (int px = 0; px < 2; ++px)
            v += static_cast<double>(
                     img.pixels[static_cast<std::size_t>(gy * 2 + py) * 4 + gx * 2 + px]) *
                 w.at(py * 2 + px, j);
        pooled[j] += v / 4.0;
      }
    }
  for (int j2 = 0; j2 < d; ++j2) {
    double want = bo.at(0, j2);
    for (int j = 0; j < d; ++j) want += pooled[j] * wo.at(j, j2);
    CHECK(out.at(0, j2) == doctest::Approx(want).epsilon(1e-5));
  }
}

TEST_CASE("aggregate_features") {
  VisionConfig cfg = tiny_config();
  SeededRng rng(11);
  ParamStore ps;
  init_vision_params(ps, cfg, rng);
  const int d = cfg.embed_dim;

  Tensor embs = Tensor::zeros({3, d});
  for (std::size_t i = 0; i < embs.size(); ++i) embs.data()[i] = static_cast<float>(rng.normal());

  SUBCASE("a single view gets weight exactly one") {
    Tensor one = Tensor::zeros({1, d});
    for (int j = 0; j < d; ++j) one.data()[j] = embs.at(0, j);
    std::vector<float> scores;
    const Tensor got = aggregate_features(one, ps, Aggregation::MFA, &scores);
    REQUIRE(scores.size() == 1);
    CHECK(scores[0] == 1.f);
    const Tensor want = matmul(matmul(one, ps.at("agg.wv")), ps.at("agg.wo"));
    CHECK(same_bits(got, want));
  }
  SUBCASE("two identical views collapse to the single-view result") {
    Tensor one = Tensor::zeros({1, d});
    for (int j = 0; j < d; ++j) one.data()[j] = embs.at(0, j);
    Tensor two = concat_rows<float>({one, one});
    for (Aggregation mode : {Aggregation::MFA, Aggregation::AVG})
      CHECK(same_bits(aggregate_features(two, ps, mode), aggregate_features(one, ps, mode)));
  }
  SUBCASE("view order never changes a bit") {
    std::vector<float> scores;
    const Tensor base = aggregate_features(embs, ps, Aggregation::MFA, &scores);
    // rotate rows 0<-1<-2<-0
    Tensor rot = Tensor::zeros({3, d});
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < d; ++j) rot.data()[static_cast<std::size_t>(i) * d + j] =
          embs.at((i + 1) % 3, j);
    std::vector<float> rot_scores;
    CHECK(same_bits(base, aggregate_features(rot, ps, Aggregation::MFA, &rot_scores)));
    for (int i = 0; i < 3; ++i) CHECK(rot_scores[i] == scores[(i + 1) % 3]);
    CHECK(same_bits(aggregate_features(embs, ps, Aggregation::AVG),
                    aggregate_features(rot, ps, Aggregation::AVG)));
  }
  SUBCASE("scores form a probability vector") {
    Tensor five = Tensor::zeros({5, d});
    for (std::size_t i = 0; i < five.size(); ++i)
      five.data()[i] = static_cast<float>(rng.normal());
    std::vector<float> scores;
    (void)aggregate_features(five, ps, Aggregation::MFA, &scores);
    REQUIRE(scores.size() == 5);
    double total = 0.0;
    for (float s : scores) {
      CHECK(s > 0.f);
      total += s;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("AVG is the arithmetic mean with uniform scores") {
    std::vector<float> scores;
    const Tensor got = aggregate_features(embs, ps, Aggregation::AVG, &scores);
    CHECK(same_bits(got, mean_over_rows(embs)));
    for (float s : scores) CHECK(s == 1.f / 3.f);
  }
  SUBCASE("a zero query spreads attention uniformly") {
    zero_param(ps, "agg.q");
    Tensor four = Tensor::zeros({4, d});
    for (std::size_t i = 0; i < four.size(); ++i)
      four.data()[i] = static_cast<float>(rng.normal());
    std::vector<float> scores;
    (void)aggregate_features(four, ps, Aggregation::MFA, &scores);
    for (float s : scores) CHECK(s == 0.25f);
  }
}

TEST_CASE("encode_views composes the encoder with the aggregator") {
  VisionConfig cfg = tiny_config();
  SeededRng rng(13);
  ParamStore ps;
  init_vision_params(ps, cfg, rng);
  const ImageTensor img = noise_image(4, rng);

  for (Aggregation mode : {Aggregation::MFA, Aggregation::AVG}) {
    const Tensor single = encode_views({img}, ps, cfg, mode);
    Tensor emb = encode_image(img, ps, cfg);
    CHECK(same_bits(single, aggregate_features(emb, ps, mode)));
    // a duplicated view adds no information
    CHECK(same_bits(single, encode_views({img, img}, ps, cfg, mode)));
  }
  CHECK_THROWS_AS(encode_views({}, ps, cfg, Aggregation::MFA), ContractError);
}

TEST_CASE("gradients reach the vision and aggregation parameters") {
  VisionConfig cfg = tiny_config();
  SeededRng rng(17);
  ParamStore ps;
  init_vision_params(ps, cfg, rng);
  const ImageTensor a = noise_image(4, rng);
  const ImageTensor b = noise_image(4, rng);

  auto grad_magnitude = [&ps](const std::string& name) {
    double total = 0.0;
    const Tensor& t = ps.at(name);
    for (float g : std::as_const(t).grad()) total += std::abs(g);
    return total;
  };

  SUBCASE("MFA trains both the encoder and the aggregator") {
    ps.zero_grads();
    Tensor loss = sum_all(encode_views({a, b}, ps, cfg, Aggregation::MFA));
    backward(loss);
    CHECK(grad_magnitude("img.embed.w") > 0.0);
    CHECK(grad_magnitude("img.pos") > 0.0);
    CHECK(grad_magnitude("agg.wk") > 0.0);
    CHECK(grad_magnitude("agg.wv") > 0.0);
    CHECK(grad_magnitude("agg.wo") > 0.0);
    CHECK(grad_magnitude("agg.q") > 0.0);
  }
  SUBCASE("AVG leaves the aggregator untouched") {
    ps.zero_grads();
    Tensor loss = sum_all(encode_views({a, b}, ps, cfg, Aggregation::AVG));
    backward(loss);
    CHECK(grad_magnitude("img.embed.w") > 0.0);
    CHECK(grad_magnitude("agg.wk") == 0.0);
    CHECK(grad_magnitude("agg.wv") == 0.0);
    CHECK(grad_magnitude("agg.wo") == 0.0);
  }
}
