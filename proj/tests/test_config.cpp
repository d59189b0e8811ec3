// SPDX-License-Identifier: Apache-2.0
// Run configuration and checkpointing: canonical serialization round-trips,
// preset rebasing, override parsing, checkpoint byte-stability, and the
// bit-exact equivalence of resumed and uninterrupted training.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "diffpoint/checkpoint.hpp"
#include "diffpoint/config.hpp"
#include "diffpoint/data.hpp"
#include "diffpoint/train.hpp"

using namespace diffpoint;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough to train in milliseconds, large enough to exercise every
// module (drop path on, attention heads > 1).
RunConfig small_config() {
  RunConfig cfg;
  cfg.embed_dim = 16;
  cfg.depth = 1;
  cfg.num_heads = 2;
  cfg.groups = 4;
  cfg.group_size = 4;
  cfg.drop_path_rate = 0.1;
  cfg.pointnet_h1 = 8;
  cfg.pointnet_h2 = 8;
  cfg.diffusion_steps = 5;
  cfg.image_size = 8;
  cfg.image_patch = 4;
  cfg.image_encoder_depth = 1;
  cfg.image_encoder_heads = 2;
  cfg.batch_size = 2;
  return cfg;
}

bool params_bits_equal(const ParamStore& a, const ParamStore& b) {
  if (a.map().size() != b.map().size()) return false;
  for (const auto& [name, pa] : a.map()) {
    if (!b.contains(name)) return false;
    const Tensor& pb = b.map().at(name);
    if (pa.shape() != pb.shape()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
      if (pa.data()[i] != pb.data()[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("presets serialize and parse back to the same bytes") {
  for (const std::string name : {"toy", "diffpoint-s", "diffpoint-m"}) {
    const RunConfig cfg = preset_config(name);
    const std::string text = serialize_config(cfg);
    const RunConfig back = parse_config_text(text);
    CHECK(serialize_config(back) == text);
  }
  CHECK_THROWS_AS(preset_config("diffpoint-xl"), ContractError);
}

TEST_CASE("serialization is stable for hand-edited values") {
  RunConfig cfg = preset_config("toy");
  cfg.lr = 0.000123456789;
  cfg.drop_path_rate = 0.1;
  cfg.seed = 18446744073709551615ull;  // largest u64
  cfg.dataset = "/tmp/some data.dfpt";
  cfg.aggregation = "avg";
  cfg.positional_embedding = false;
  const std::string text = serialize_config(cfg);
  CHECK(serialize_config(parse_config_text(text)) == text);
  CHECK(text.find("lr = 0.000123456789\n") != std::string::npos);
  CHECK(text.find("seed = 18446744073709551615\n") != std::string::npos);
  CHECK(text.find("positional_embedding = false\n") != std::string::npos);
}

TEST_CASE("parse_config_text") {
  SUBCASE("comments, blank lines, and whitespace are tolerated") {
    const RunConfig cfg = parse_config_text("# header\n\n  depth   =  3  # tail comment\n");
    CHECK(cfg.depth == 3);
    CHECK(cfg.preset == "toy");  // base stays the default
  }
  SUBCASE("the preset key rebases first no matter where it appears") {
    const RunConfig after = parse_config_text("preset = diffpoint-s\ndepth = 2\n");
    const RunConfig before = parse_config_text("depth = 2\npreset = diffpoint-s\n");
    CHECK(serialize_config(after) == serialize_config(before));
    CHECK(after.depth == 2);
    CHECK(after.embed_dim == 384);  // everything else from the preset
  }
  SUBCASE("malformed lines raise with the line number") {
    CHECK_THROWS_WITH_AS(parse_config_text("depth 3\n"), "config line 1 has no '=': depth 3",
                         ContractError);
    CHECK_THROWS_AS(parse_config_text("= 3\n"), ContractError);
    CHECK_THROWS_WITH_AS(parse_config_text("bogus = 1\n"), "unknown config key: bogus",
                         ContractError);
  }
  SUBCASE("values are type-checked") {
    CHECK_THROWS_AS(parse_config_text("depth = abc\n"), ContractError);
    CHECK_THROWS_AS(parse_config_text("lr = fast\n"), ContractError);
    CHECK_THROWS_AS(parse_config_text("positional_embedding = maybe\n"), ContractError);
    CHECK_THROWS_AS(parse_config_text("aggregation = blah\n"), ContractError);
  }
}

TEST_CASE("apply_override touches exactly the named field") {
  RunConfig cfg = preset_config("toy");
  apply_override(cfg, "views", "5");
  CHECK(cfg.views == 5);
  apply_override(cfg, "weight_decay", "0.05");
  CHECK(cfg.weight_decay == 0.05);
  apply_override(cfg, "aggregation", "avg");
  CHECK(cfg.aggregation == "avg");
  apply_override(cfg, "dataset", "a/b.dfpt");
  CHECK(cfg.dataset == "a/b.dfpt");
  apply_override(cfg, "positional_embedding", "false");
  CHECK_FALSE(cfg.positional_embedding);
  apply_override(cfg, "preset", "diffpoint-m");
  CHECK(cfg.views == 5);  // rebased: diffpoint-m itself uses 5 views
  CHECK(cfg.embed_dim == 512);
  CHECK_THROWS_AS(apply_override(cfg, "nope", "1"), ContractError);
}

TEST_CASE("load_config takes preset names or file paths") {
  CHECK(load_config("diffpoint-m").views == 5);
  const std::string path = temp_path("diffpoint_test_config.txt");
  {
    std::ofstream out(path);
    out << "preset = toy\nbatch_size = 4\n";
  }
  CHECK(load_config(path).batch_size == 4);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_config(temp_path("no_such_config.txt")), IoError);
}

TEST_CASE("config validation rejects inconsistent settings") {
  RunConfig cfg = small_config();
  CHECK_NOTHROW(cfg.validate());
  SUBCASE("head divisibility") {
    cfg.embed_dim = 15;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
  }
  SUBCASE("image patch grid") {
    cfg.image_size = 9;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
  }
  SUBCASE("beta range") {
    cfg.beta_T = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
  }
  SUBCASE("view count") {
    cfg.views = 0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
  }
  SUBCASE("aggregation name") {
    cfg.aggregation = "sum";
    CHECK_THROWS_AS(cfg.validate(), ContractError);
  }
}

TEST_CASE("checkpoints restore training state exactly") {
  const RunConfig cfg = small_config();
  const std::vector<DatasetRecord> records = make_dataset(3, 11, cfg.n_points(), 2, 8);
  Trainer trainer(cfg, records);
  trainer.train_step();
  trainer.train_step();
  const TrainState st = trainer.state();

  const std::string path = temp_path("diffpoint_test.dfck");
  save_checkpoint(path, st);
  TrainState back = load_checkpoint(path);

  CHECK(serialize_config(back.config) == serialize_config(st.config));
  CHECK(back.step == st.step);
  CHECK(params_bits_equal(back.params, st.params));
  CHECK(back.opt.step_count() == st.opt.step_count());
  REQUIRE(back.opt.slots().size() == st.opt.slots().size());
  for (const auto& [name, slot] : st.opt.slots()) {
    const auto& other = back.opt.slots().at(name);
    CHECK(other.m == slot.m);
    CHECK(other.v == slot.v);
  }
  // identical downstream randomness, including any cached Box-Muller half
  SeededRng a = st.rng;
  SeededRng b = back.rng;
  for (int i = 0; i < 8; ++i) {
    CHECK(a.normal() == b.normal());
    CHECK(a.next_u64() == b.next_u64());
  }

  SUBCASE("save -> load -> save is byte-identical") {
    const std::string again = temp_path("diffpoint_test2.dfck");
    save_checkpoint(again, back);
    CHECK(slurp(path) == slurp(again));
    std::filesystem::remove(again);
  }
  SUBCASE("corruption is reported by type") {
    std::string bytes = slurp(path);
    bytes[0] = 'X';
    std::ofstream(path, std::ios::binary) << bytes;
    try {
      (void)load_checkpoint(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset == 0);
    }
    std::ofstream(path, std::ios::binary) << bytes.substr(1, bytes.size() / 2);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    CHECK_THROWS_AS(load_checkpoint(temp_path("no_such.dfck")), IoError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("resumed training replays the uninterrupted loss trace bit for bit") {
  const RunConfig cfg = small_config();
  const std::vector<DatasetRecord> records = make_dataset(3, 13, cfg.n_points(), 2, 8);

  std::vector<float> straight;
  {
    Trainer t(cfg, records);
    for (int i = 0; i < 6; ++i) straight.push_back(t.train_step());
  }

  SUBCASE("two fresh runs agree") {
    Trainer t(cfg, records);
    for (int i = 0; i < 6; ++i) CHECK(t.train_step() == straight[i]);
  }
  SUBCASE("a checkpoint in the middle changes nothing") {
    const std::string path = temp_path("diffpoint_resume.dfck");
    {
      Trainer first_half(cfg, records);
      for (int i = 0; i < 3; ++i) CHECK(first_half.train_step() == straight[i]);
      save_checkpoint(path, first_half.state());
    }
    Trainer second_half(load_checkpoint(path), records);
    CHECK(second_half.step() == 3);
    for (int i = 3; i < 6; ++i) CHECK(second_half.train_step() == straight[i]);
    std::filesystem::remove(path);
  }
}
