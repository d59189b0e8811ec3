// SPDX-License-Identifier: Apache-2.0
// Run configuration: flat "key = value" text with '#' comments, three named
// presets, and a canonical serialization (fixed key order, shortest
// round-trip float text) that checkpoints embed verbatim.

#pragma once

#include <cstdint>
#include <string>

#include "diffpoint/backbone.hpp"
#include "diffpoint/diffusion.hpp"
#include "diffpoint/vision.hpp"

namespace diffpoint {

struct RunConfig {
  std::string preset = "toy";
  std::uint64_t seed = 1;
  std::string dataset;  // path to a dataset container

  // diffusion
  int diffusion_steps = 50;
  double beta_1 = 1e-4;
  double beta_T = 0.05;

  // backbone
  int embed_dim = 64;
  int depth = 4;
  int num_heads = 4;
  int groups = 16;      // s
  int group_size = 16;  // k
  double drop_path_rate = 0.0;
  bool positional_embedding = true;
  int pointnet_h1 = 32;
  int pointnet_h2 = 64;
  bool center_relative_output = false;

  // vision / conditioning
  int image_size = 16;
  int image_patch = 4;
  int image_encoder_depth = 4;
  int image_encoder_heads = 4;
  std::string aggregation = "mfa";
  int views = 1;

  // optimizer
  double lr = 1e-3;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // training loop
  int batch_size = 8;
  int train_steps = 2000;
  int log_interval = 10;
  int checkpoint_interval = 1000;

  int n_points() const { return groups * group_size; }

  DiffusionConfig diffusion() const { return {diffusion_steps, beta_1, beta_T}; }
  BackboneConfig backbone() const {
    BackboneConfig b;
    b.embed_dim = embed_dim;
    b.depth = depth;
    b.num_heads = num_heads;
    b.s = groups;
    b.k = group_size;
    b.drop_path_rate = drop_path_rate;
    b.use_positional_embedding = positional_embedding;
    b.pointnet_h1 = pointnet_h1;
    b.pointnet_h2 = pointnet_h2;
    b.center_relative_output = center_relative_output;
    return b;
  }
  VisionConfig vision() const {
    VisionConfig v;
    v.image_size = image_size;
    v.patch_size = image_patch;
    v.depth = image_encoder_depth;
    v.num_heads = image_encoder_heads;
    v.embed_dim = embed_dim;
    return v;
  }
  Aggregation aggregation_mode() const { return parse_aggregation(aggregation); }

  void validate() const;
};

// Named presets: "diffpoint-s" (single-view), "diffpoint-m" (multi-view),
// "toy" (desk-scale minutes-long runs).
RunConfig preset_config(const std::string& name);

// Canonical text form; parse(serialize(c)) == c and the byte stream is stable.
std::string serialize_config(const RunConfig& cfg);

// Parse "key = value" text. A "preset" key rebases onto that preset first;
// remaining keys override it. Unknown keys or bad values raise ContractError.
RunConfig parse_config_text(const std::string& text);

// `source` is a preset name or a path to a config file.
RunConfig load_config(const std::string& source);

// Apply one "key=value" override (CLI flags funnel through this).
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

}  // namespace diffpoint
