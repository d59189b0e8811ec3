// SPDX-License-Identifier: Apache-2.0

#include "diffpoint/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "diffpoint/error.hpp"

namespace diffpoint {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, end);
}
std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(int v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

int parse_int(const std::string& key, const std::string& v) {
  int out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ContractError("bad integer for config key '" + key + "': " + v);
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ContractError("bad unsigned integer for config key '" + key + "': " + v);
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ContractError("bad number for config key '" + key + "': " + v);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ContractError("bad boolean for config key '" + key + "': " + v);
}

}  // namespace

void RunConfig::validate() const {
  backbone().validate();
  vision().validate();
  (void)aggregation_mode();
  if (diffusion_steps < 1) throw ContractError("config: diffusion_steps must be >= 1");
  if (!(beta_1 > 0.0) || !(beta_1 <= beta_T) || !(beta_T < 1.0))
    throw ContractError("config: need 0 < beta_1 <= beta_T < 1");
  if (views < 1 || views > 24) throw ContractError("config: views must be in 1..24");
  if (batch_size < 1) throw ContractError("config: batch_size must be >= 1");
  if (train_steps < 0) throw ContractError("config: train_steps must be >= 0");
  if (log_interval < 1 || checkpoint_interval < 1)
    throw ContractError("config: intervals must be >= 1");
  if (!(lr > 0.0)) throw ContractError("config: lr must be positive");
  if (weight_decay < 0.0) throw ContractError("config: weight_decay must be >= 0");
}

RunConfig preset_config(const std::string& name) {
  if (name == "toy") {
    RunConfig c;  // defaults are the toy preset
    c.preset = "toy";
    return c;
  }
  if (name == "diffpoint-s" || name == "diffpoint-m") {
    RunConfig c;
    c.preset = name;
    c.diffusion_steps = 200;
    c.beta_1 = 1e-4;
    c.beta_T = 0.05;
    c.embed_dim = 384;
    c.depth = 16;
    c.num_heads = 16;
    c.groups = 64;
    c.group_size = 32;
    c.drop_path_rate = 0.1;
    c.pointnet_h1 = 128;
    c.pointnet_h2 = 256;
    c.image_size = 32;
    c.image_patch = 4;
    c.image_encoder_depth = 4;
    c.image_encoder_heads = 4;
    c.aggregation = "mfa";
    c.views = 1;
    c.lr = 2e-4;
    c.weight_decay = 0.03;
    c.batch_size = 128;
    c.train_steps = 100000;
    c.log_interval = 100;
    c.checkpoint_interval = 5000;
    if (name == "diffpoint-m") {
      c.diffusion_steps = 1000;
      c.beta_T = 0.02;
      c.embed_dim = 512;
      c.depth = 18;
      c.weight_decay = 0.05;
      c.views = 5;
    }
    return c;
  }
  throw ContractError("unknown preset: " + name + " (expected toy, diffpoint-s or diffpoint-m)");
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "preset") {
    cfg = preset_config(value);
  } else if (key == "seed") {
    cfg.seed = parse_u64(key, value);
  } else if (key == "dataset") {
    cfg.dataset = value;
  } else if (key == "diffusion_steps") {
    cfg.diffusion_steps = parse_int(key, value);
  } else if (key == "beta_1") {
    cfg.beta_1 = parse_double(key, value);
  } else if (key == "beta_T") {
    cfg.beta_T = parse_double(key, value);
  } else if (key == "embed_dim") {
    cfg.embed_dim = parse_int(key, value);
  } else if (key == "depth") {
    cfg.depth = parse_int(key, value);
  } else if (key == "num_heads") {
    cfg.num_heads = parse_int(key, value);
  } else if (key == "groups") {
    cfg.groups = parse_int(key, value);
  } else if (key == "group_size") {
    cfg.group_size = parse_int(key, value);
  } else if (key == "drop_path_rate") {
    cfg.drop_path_rate = parse_double(key, value);
  } else if (key == "positional_embedding") {
    cfg.positional_embedding = parse_bool(key, value);
  } else if (key == "pointnet_h1") {
    cfg.pointnet_h1 = parse_int(key, value);
  } else if (key == "pointnet_h2") {
    cfg.pointnet_h2 = parse_int(key, value);
  } else if (key == "center_relative_output") {
    cfg.center_relative_output = parse_bool(key, value);
  } else if (key == "image_size") {
    cfg.image_size = parse_int(key, value);
  } else if (key == "image_patch") {
    cfg.image_patch = parse_int(key, value);
  } else if (key == "image_encoder_depth") {
    cfg.image_encoder_depth = parse_int(key, value);
  } else if (key == "image_encoder_heads") {
    cfg.image_encoder_heads = parse_int(key, value);
  } else if (key == "aggregation") {
    (void)parse_aggregation(value);
    cfg.aggregation = value;
  } else if (key == "views") {
    cfg.views = parse_int(key, value);
  } else if (key == "lr") {
    cfg.lr = parse_double(key, value);
  } else if (key == "weight_decay") {
    cfg.weight_decay = parse_double(key, value);
  } else if (key == "adam_beta1") {
    cfg.adam_beta1 = parse_double(key, value);
  } else if (key == "adam_beta2") {
    cfg.adam_beta2 = parse_double(key, value);
  } else if (key == "adam_eps") {
    cfg.adam_eps = parse_double(key, value);
  } else if (key == "batch_size") {
    cfg.batch_size = parse_int(key, value);
  } else if (key == "train_steps") {
    cfg.train_steps = parse_int(key, value);
  } else if (key == "log_interval") {
    cfg.log_interval = parse_int(key, value);
  } else if (key == "checkpoint_interval") {
    cfg.checkpoint_interval = parse_int(key, value);
  } else {
    throw ContractError("unknown config key: " + key);
  }
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  auto line = [&out](const char* key, const std::string& value) {
    out += key;
    out += " = ";
    out += value;
    out += "\n";
  };
  line("preset", cfg.preset);
  line("seed", fmt(cfg.seed));
  line("dataset", cfg.dataset);
  line("diffusion_steps", fmt(cfg.diffusion_steps));
  line("beta_1", fmt(cfg.beta_1));
  line("beta_T", fmt(cfg.beta_T));
  line("embed_dim", fmt(cfg.embed_dim));
  line("depth", fmt(cfg.depth));
  line("num_heads", fmt(cfg.num_heads));
  line("groups", fmt(cfg.groups));
  line("group_size", fmt(cfg.group_size));
  line("drop_path_rate", fmt(cfg.drop_path_rate));
  line("positional_embedding", fmt(cfg.positional_embedding));
  line("pointnet_h1", fmt(cfg.pointnet_h1));
  line("pointnet_h2", fmt(cfg.pointnet_h2));
  line("center_relative_output", fmt(cfg.center_relative_output));
  line("image_size", fmt(cfg.image_size));
  line("image_patch", fmt(cfg.image_patch));
  line("image_encoder_depth", fmt(cfg.image_encoder_depth));
  line("image_encoder_heads", fmt(cfg.image_encoder_heads));
  line("aggregation", cfg.aggregation);
  line("views", fmt(cfg.views));
  line("lr", fmt(cfg.lr));
  line("weight_decay", fmt(cfg.weight_decay));
  line("adam_beta1", fmt(cfg.adam_beta1));
  line("adam_beta2", fmt(cfg.adam_beta2));
  line("adam_eps", fmt(cfg.adam_eps));
  line("batch_size", fmt(cfg.batch_size));
  line("train_steps", fmt(cfg.train_steps));
  line("log_interval", fmt(cfg.log_interval));
  line("checkpoint_interval", fmt(cfg.checkpoint_interval));
  return out;
}

RunConfig parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::istringstream stream(text);
  std::string line;
  std::size_t line_no = 0;
  std::string preset;
  while (std::getline(stream, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ContractError("config line " + std::to_string(line_no) + " has no '=': " + stripped);
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) throw ContractError("config line " + std::to_string(line_no) + ": empty key");
    if (key == "preset")
      preset = value;
    else
      pairs.emplace_back(key, value);
  }
  RunConfig cfg = preset.empty() ? RunConfig{} : preset_config(preset);
  for (const auto& [key, value] : pairs) apply_override(cfg, key, value);
  return cfg;
}

RunConfig load_config(const std::string& source) {
  if (source == "toy" || source == "diffpoint-s" || source == "diffpoint-m")
    return preset_config(source);
  std::ifstream in(source);
  if (!in) throw IoError("cannot open config: " + source);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace diffpoint
