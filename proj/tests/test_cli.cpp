// SPDX-License-Identifier: Apache-2.0
// Process-level tests for the command-line tool: exit codes, dataset
// generation, training logs and checkpoints, sampling, the JSON-lines
// evaluation report, and the gradient audit. Each test launches the real
// binary (path injected by the build as DIFFPOINT_CLI_PATH).

#include <sys/wait.h>

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "diffpoint/data.hpp"
#include "diffpoint/geometry.hpp"

using namespace diffpoint;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// A fresh directory per test case; removed on scope exit.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path = fs::temp_directory_path() / ("diffpoint_cli_" + tag + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

struct CliResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs the tool through the shell, capturing stdout/stderr and the exit code.
CliResult run_cli(const TempDir& dir, const std::string& args, const std::string& env = "") {
  const std::string out_path = dir.file("__stdout.txt");
  const std::string err_path = dir.file("__stderr.txt");
  const std::string cmd = env + (env.empty() ? "" : " ") + "\"" DIFFPOINT_CLI_PATH "\" " + args +
                          " > \"" + out_path + "\" 2> \"" + err_path + "\"";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_path);
  r.err = slurp(err_path);
  return r;
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

// Shrinks the toy preset so a full train step costs milliseconds. The
// matching dataset is 16 points per cloud at an 8x8 render resolution.
const std::string kTinyFlags =
    "--config toy --set embed_dim=16 --set depth=1 --set num_heads=2 --set groups=4 "
    "--set group_size=4 --set pointnet_h1=8 --set pointnet_h2=8 --set image_size=8 "
    "--set image_patch=4 --set image_encoder_depth=1 --set image_encoder_heads=2 "
    "--set batch_size=2 --set diffusion_steps=5 --set log_interval=1 "
    "--set checkpoint_interval=2";

std::string gen_tiny_dataset(const TempDir& dir, const std::string& name, int count,
                             std::uint64_t seed) {
  const std::string out = dir.file(name);
  const CliResult r = run_cli(dir, "gen-data --out \"" + out + "\" --count " +
                                       std::to_string(count) + " --seed " + std::to_string(seed) +
                                       " --points 16 --views 2 --resolution 8");
  REQUIRE(r.code == 0);
  return out;
}

std::vector<json> parse_jsonl(const std::string& text) {
  std::vector<json> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(json::parse(line));
  return lines;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    default: return "test";
  }
}

bool cloud_bits_equal(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int c = 0; c < 3; ++c)
      if (a[i][c] != b[i][c]) return false;
  return true;
}

}  // namespace

TEST_CASE("the tool reports usage errors with exit code 2 and prints help") {
  TempDir dir("usage");

  const CliResult help = run_cli(dir, "--help");
  CHECK(help.code == 0);
  CHECK(contains(help.out, "gen-data"));
  CHECK(contains(help.out, "train"));
  CHECK(contains(help.out, "gradcheck"));

  CHECK(run_cli(dir, "").code == 2);                         // a subcommand is required
  CHECK(run_cli(dir, "frobnicate").code == 2);               // unknown subcommand
  CHECK(run_cli(dir, "gen-data").code == 2);                 // missing required --out
  CHECK(run_cli(dir, "gen-data --out x --bogus 1").code == 2);  // unknown flag

  const CliResult bad_set = run_cli(dir, "gradcheck --set embed_dim");
  CHECK(bad_set.code == 2);
  CHECK(contains(bad_set.err, "--set expects key=value"));
}

TEST_CASE("gen-data is reproducible and honours the shape spec") {
  TempDir dir("gendata");

  const std::string base =
      " --count 3 --seed 7 --points 16 --views 2 --resolution 8 --spec box";
  const CliResult a = run_cli(dir, "gen-data --out \"" + dir.file("a.dfpt") + "\"" + base);
  CHECK(a.code == 0);
  CHECK(contains(a.out, "wrote 3 records to"));
  CHECK(contains(a.out, "(points=16, views=2, resolution=8)"));
  CHECK(contains(a.out, "categories: box=3"));

  const CliResult b = run_cli(dir, "gen-data --out \"" + dir.file("b.dfpt") + "\"" + base);
  CHECK(b.code == 0);
  CHECK(slurp(dir.file("a.dfpt")) == slurp(dir.file("b.dfpt")));

  const CliResult c = run_cli(dir, "gen-data --out \"" + dir.file("c.dfpt") +
                                       "\" --count 3 --seed 8 --points 16 --views 2 "
                                       "--resolution 8 --spec box");
  CHECK(c.code == 0);
  CHECK(slurp(dir.file("a.dfpt")) != slurp(dir.file("c.dfpt")));

  SUBCASE("a preview image is a valid 8x8 PGM") {
    const CliResult p = run_cli(dir, "gen-data --out \"" + dir.file("d.dfpt") + "\"" + base +
                                         " --preview-pgm \"" + dir.file("prev.pgm") + "\"");
    CHECK(p.code == 0);
    CHECK(contains(p.out, "preview of record 0 view 0"));
    const std::string pgm = slurp(dir.file("prev.pgm"));
    CHECK(pgm.size() == 11 + 64);  // "P5\n8 8\n255\n" + one byte per pixel
    CHECK(pgm.substr(0, 11) == "P5\n8 8\n255\n");
  }

  SUBCASE("invalid requests are rejected") {
    const CliResult zero = run_cli(dir, "gen-data --out x.dfpt --count 0");
    CHECK(zero.code == 2);
    CHECK(contains(zero.err, "error:"));

    const CliResult kind = run_cli(dir, "gen-data --out x.dfpt --spec pyramid");
    CHECK(kind.code == 2);
    CHECK(contains(kind.err, "unknown shape kind: 'pyramid'"));
  }
}

TEST_CASE("train runs to the step target and writes checkpoints plus a JSON-lines log") {
  TempDir dir("train");
  const std::string data = gen_tiny_dataset(dir, "d.dfpt", 2, 11);
  const std::string run = dir.file("run");

  const CliResult t = run_cli(dir, "train " + kTinyFlags + " --seed 5 --data \"" + data +
                                       "\" --out \"" + run + "\" --steps 3");
  CHECK(t.code == 0);
  CHECK(contains(t.out, "trained to step 3"));
  CHECK(fs::exists(run + "/ckpt_000002.dfck"));  // checkpoint_interval=2
  CHECK(fs::exists(run + "/ckpt_final.dfck"));

  const std::vector<json> log = parse_jsonl(slurp(run + "/train_log.jsonl"));
  REQUIRE(log.size() >= 6);  // config, 3 train steps, >=1 checkpoint, done
  CHECK(log.front().at("event") == "config");
  CHECK(log.front().at("preset") == "toy");
  CHECK(log.front().at("seed") == 5);
  CHECK(log.front().at("aggregation") == "mfa");
  CHECK(log.front().at("positional_embedding") == true);
  CHECK(log.front().at("steps_target") == 3);
  CHECK(log.front().at("start_step") == 0);
  CHECK(!log.front().contains("resumed_from"));

  int train_events = 0, checkpoint_events = 0;
  for (const json& j : log) {
    if (j.at("event") == "train") {
      ++train_events;
      CHECK(std::isfinite(j.at("loss").get<double>()));
      CHECK(j.at("loss").get<double>() > 0.0);
    }
    if (j.at("event") == "checkpoint") ++checkpoint_events;
  }
  CHECK(train_events == 3);  // log_interval=1
  CHECK(checkpoint_events == 2);  // step 2 plus the final save
  CHECK(log.back().at("event") == "done");
  CHECK(log.back().at("step") == 3);

  SUBCASE("resuming continues from the stored step and notes the source") {
    const std::string run2 = dir.file("run2");
    const CliResult r = run_cli(dir, "train --resume \"" + run + "/ckpt_final.dfck\" --data \"" +
                                         data + "\" --out \"" + run2 + "\" --steps 5");
    CHECK(r.code == 0);
    CHECK(contains(r.out, "trained to step 5"));
    const std::vector<json> log2 = parse_jsonl(slurp(run2 + "/train_log.jsonl"));
    REQUIRE(!log2.empty());
    CHECK(log2.front().at("event") == "config");
    CHECK(log2.front().at("start_step") == 3);
    CHECK(log2.front().at("steps_target") == 5);
    CHECK(contains(log2.front().at("resumed_from").get<std::string>(), "ckpt_final.dfck"));
    CHECK(log2.back().at("event") == "done");
    CHECK(log2.back().at("step") == 5);
  }

  SUBCASE("config flags conflict with --resume") {
    const CliResult r = run_cli(dir, "train --resume \"" + run + "/ckpt_final.dfck\" --seed 9 "
                                     "--out \"" + dir.file("run3") + "\"");
    CHECK(r.code == 2);
    CHECK(contains(r.err, "--resume restores the checkpoint config"));
  }

  SUBCASE("a missing dataset is an I/O failure") {
    const CliResult r = run_cli(dir, "train " + kTinyFlags + " --data \"" +
                                         dir.file("nope.dfpt") + "\" --out \"" +
                                         dir.file("run4") + "\"");
    CHECK(r.code == 3);
    CHECK(contains(r.err, "i/o error"));
  }

  SUBCASE("a negative step target is rejected") {
    const CliResult r = run_cli(dir, "train " + kTinyFlags + " --data \"" + data +
                                         "\" --out \"" + dir.file("run5") + "\" --steps -1");
    CHECK(r.code == 2);
    CHECK(contains(r.err, "--steps must be >= 0"));
  }

  SUBCASE("DIFFPOINT_LOG=quiet silences the summary line") {
    const CliResult r = run_cli(dir, "train " + kTinyFlags + " --data \"" + data +
                                         "\" --out \"" + dir.file("run6") + "\" --steps 0",
                                "DIFFPOINT_LOG=quiet");
    CHECK(r.code == 0);
    CHECK(r.out.empty());
    CHECK(fs::exists(dir.file("run6") + "/ckpt_final.dfck"));
  }

  SUBCASE("DIFFPOINT_LOG=debug traces every step to stderr") {
    const CliResult r = run_cli(dir, "train " + kTinyFlags + " --data \"" + data +
                                         "\" --out \"" + dir.file("run7") + "\" --steps 1",
                                "DIFFPOINT_LOG=debug");
    CHECK(r.code == 0);
    CHECK(contains(r.err, "step 1 loss"));
  }
}

TEST_CASE("train aborts with exit code 4 when the loss leaves the reals") {
  TempDir dir("trainblow");
  const std::string data = gen_tiny_dataset(dir, "d.dfpt", 2, 11);
  // An absurd learning rate overflows the weights after one update, so the
  // next forward pass produces a non-finite loss.
  const CliResult r = run_cli(dir, "train " + kTinyFlags + " --set lr=1e30 --data \"" + data +
                                       "\" --out \"" + dir.file("run") + "\" --steps 10");
  CHECK(r.code == 4);
  CHECK(contains(r.err, "loss is not finite"));
}

TEST_CASE("sample with the oracle stub reproduces the stored cloud exactly") {
  TempDir dir("sample");
  const std::string data = dir.file("d.dfpt");
  REQUIRE(run_cli(dir, "gen-data --out \"" + data +
                           "\" --count 3 --seed 7 --points 16 --views 2 --resolution 8 "
                           "--spec box")
              .code == 0);

  const std::string out = dir.file("got.xyz");
  const CliResult r = run_cli(dir, "sample --data \"" + data +
                                       "\" --record-id 1 --oracle-stub --out \"" + out + "\"");
  CHECK(r.code == 0);
  CHECK(contains(r.out, "record 1 (box): CD x100 = 0, F-score = 100 (tau=0.001); wrote"));

  const std::vector<DatasetRecord> records = read_dataset(data);
  REQUIRE(records.size() == 3);
  CHECK(cloud_bits_equal(read_xyz(out), records[1].cloud));

  SUBCASE("sampling from a freshly trained checkpoint works end to end") {
    const std::string run = dir.file("run");
    REQUIRE(run_cli(dir, "train " + kTinyFlags + " --data \"" + data + "\" --out \"" + run +
                             "\" --steps 1")
                .code == 0);
    const std::string out2 = dir.file("model.xyz");
    const CliResult m = run_cli(dir, "sample --data \"" + data + "\" --ckpt \"" + run +
                                         "/ckpt_final.dfck\" --record-id 1 --out \"" + out2 +
                                         "\"");
    CHECK(m.code == 0);
    CHECK(contains(m.out, "record 1 (box):"));
    CHECK(read_xyz(out2).size() == 16);
  }

  SUBCASE("an unknown record id is a contract violation") {
    const CliResult e = run_cli(dir, "sample --data \"" + data + "\" --record-id 99 "
                                     "--oracle-stub --out x.xyz");
    CHECK(e.code == 2);
    CHECK(contains(e.err, "unknown record id: 99"));
  }

  SUBCASE("a model source is required") {
    const CliResult e = run_cli(dir, "sample --data \"" + data + "\" --record-id 1 --out x.xyz");
    CHECK(e.code == 2);
    CHECK(contains(e.err, "sample needs --ckpt or --oracle-stub"));
  }

  SUBCASE("a corrupt checkpoint is a format failure") {
    const std::string bad = dir.file("bad.dfck");
    std::ofstream(bad, std::ios::binary) << "this is not a checkpoint";
    const CliResult e = run_cli(dir, "sample --data \"" + data + "\" --ckpt \"" + bad +
                                         "\" --record-id 1 --out x.xyz");
    CHECK(e.code == 3);
    CHECK(contains(e.err, "format error:"));
  }
}

TEST_CASE("eval emits a deterministic JSON-lines report over a hashed split") {
  TempDir dir("eval");
  const std::string data = gen_tiny_dataset(dir, "d.dfpt", 8, 3);

  // Pick the best-populated split of ids 0..7 so the filter is exercised
  // against a known subset.
  int counts[3] = {0, 0, 0};
  for (std::uint64_t id = 0; id < 8; ++id) ++counts[static_cast<int>(split_of(id))];
  Split chosen = Split::train;
  for (int s = 1; s < 3; ++s)
    if (counts[s] > counts[static_cast<int>(chosen)]) chosen = static_cast<Split>(s);
  const std::string split = split_name(chosen);
  const int expected = counts[static_cast<int>(chosen)];
  REQUIRE(expected >= 1);

  const std::string args = "eval --data \"" + data + "\" --oracle-stub --split " + split;
  const CliResult r = run_cli(dir, args);
  CHECK(r.code == 0);

  const std::vector<json> lines = parse_jsonl(r.out);
  REQUIRE(lines.size() >= 3);  // config, >=1 record, >=1 category, summary
  CHECK(lines.front().at("event") == "config");
  CHECK(lines.front().at("model") == "oracle-stub");
  CHECK(lines.front().at("split") == split);
  CHECK(lines.front().at("records") == expected);

  int record_events = 0;
  for (const json& j : lines) {
    if (j.at("event") != "record") continue;
    ++record_events;
    CHECK(split_of(j.at("id").get<std::uint64_t>()) == chosen);
    // the stub is a perfect predictor, so the chain lands on the ground truth
    CHECK(j.at("cd_x100").get<double>() == 0.0);
    CHECK(j.at("fscore").get<double>() == 100.0);  // the score is a percentage
  }
  CHECK(record_events == expected);
  CHECK(lines.back().at("event") == "summary");
  CHECK(lines.back().at("count") == expected);
  CHECK(lines.back().at("cd_x100_mean").get<double>() == 0.0);
  CHECK(lines.back().at("fscore_mean").get<double>() == 100.0);

  SUBCASE("--out writes the report to a file and prints a table") {
    const CliResult a = run_cli(dir, args + " --out \"" + dir.file("r1.jsonl") + "\"");
    const CliResult b = run_cli(dir, args + " --out \"" + dir.file("r2.jsonl") + "\"");
    CHECK(a.code == 0);
    CHECK(b.code == 0);
    CHECK(slurp(dir.file("r1.jsonl")) == slurp(dir.file("r2.jsonl")));
    CHECK(contains(a.out, "category"));
    CHECK(contains(a.out, "mean"));
    CHECK(contains(a.out, "report: " + dir.file("r1.jsonl")));
    // the file holds the same lines the bare command prints
    CHECK(parse_jsonl(slurp(dir.file("r1.jsonl"))).size() == lines.size());
  }

  SUBCASE("--limit caps the record count") {
    const CliResult l = run_cli(dir, args + " --limit 1");
    int n = 0;
    for (const json& j : parse_jsonl(l.out))
      if (j.at("event") == "record") ++n;
    CHECK(n == 1);
  }

  SUBCASE("ablation flags land in the report header") {
    const CliResult m =
        run_cli(dir, args + " --aggregation avg --no-positional-embedding --limit 1");
    CHECK(m.code == 0);
    const std::vector<json> mod = parse_jsonl(m.out);
    REQUIRE(!mod.empty());
    CHECK(mod.front().at("aggregation") == "avg");
    CHECK(mod.front().at("positional_embedding") == false);
    CHECK(lines.front().at("aggregation") == "mfa");  // the default run differs
  }

  SUBCASE("an unknown split name is rejected") {
    const CliResult e = run_cli(dir, "eval --data \"" + data + "\" --oracle-stub --split dev");
    CHECK(e.code == 2);
    CHECK(contains(e.err, "unknown split: 'dev'"));
  }

  SUBCASE("an empty split is reported as such") {
    const std::string one = gen_tiny_dataset(dir, "one.dfpt", 1, 3);
    const Split home = split_of(0);
    const Split other = home == Split::train ? Split::val : Split::train;
    const CliResult e = run_cli(dir, "eval --data \"" + one + "\" --oracle-stub --split " +
                                         split_name(other));
    CHECK(e.code == 2);
    CHECK(contains(e.err, std::string("empty split: ") + split_name(other)));
  }
}

TEST_CASE("gradcheck passes on a small config and fails the negative control") {
  TempDir dir("gradcheck");

  const CliResult pass = run_cli(dir, "gradcheck " + kTinyFlags + " --seed 3 --probes 1");
  CHECK(pass.code == 0);
  CHECK(contains(pass.out, "gradcheck PASS"));
  CHECK(contains(pass.out, "max rel err"));
  CHECK(!contains(pass.out, "skipped"));

  SUBCASE("parameter groups disabled by ablations are reported as skipped") {
    const CliResult skip = run_cli(dir, "gradcheck " + kTinyFlags +
                                            " --seed 3 --probes 1 --aggregation avg "
                                            "--no-positional-embedding");
    CHECK(skip.code == 0);
    CHECK(contains(skip.out, "gradcheck PASS"));
    CHECK(contains(skip.out, "skipped (disabled by the current config)"));
  }

  SUBCASE("a falsified analytic gradient is caught") {
    const CliResult fail = run_cli(dir, "gradcheck " + kTinyFlags +
                                            " --seed 3 --probes 1 --corrupt-backward");
    CHECK(fail.code == 5);
    CHECK(contains(fail.err, "gradcheck FAIL"));
  }
}
