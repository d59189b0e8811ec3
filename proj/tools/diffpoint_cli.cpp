// SPDX-License-Identifier: Apache-2.0
// Command-line front end: dataset generation, training, sampling, evaluation,
// and the finite-difference gradient audit.
//
// Exit codes: 0 success; 2 usage or contract violation; 3 I/O or file-format
// failure; 4 non-finite training loss; 5 gradient-check failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "diffpoint/checkpoint.hpp"
#include "diffpoint/config.hpp"
#include "diffpoint/data.hpp"
#include "diffpoint/train.hpp"

namespace dp = diffpoint;
namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

enum LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("DIFFPOINT_LOG");
  if (env == nullptr) return kInfo;
  const std::string v(env);
  if (v == "quiet") return kQuiet;
  if (v == "debug") return kDebug;
  return kInfo;
}

const char* category_name(std::uint16_t c) {
  switch (c) {
    case 0: return "sphere";
    case 1: return "box";
    case 2: return "cylinder";
    case 3: return "torus";
    case 4: return "composite";
    default: return "unknown";
  }
}

std::string trimmed(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

// Flags shared by every command that builds a config from scratch.
struct CommonOpts {
  std::string config_source = "toy";
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  int views = 1;
  std::string aggregation;
  bool no_pos = false;
  std::string data;
};

void add_config_flags(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_source,
                  "preset (toy, diffpoint-s, diffpoint-m) or path to a config file");
  cmd->add_option("--set", o.sets, "override one config key: --set key=value (repeatable)");
  cmd->add_option("--seed", o.seed, "RNG seed (overrides the config)");
  cmd->add_option("--views", o.views, "views per example (overrides the config)");
  cmd->add_option("--aggregation", o.aggregation, "view aggregation: mfa or avg");
  cmd->add_flag("--no-positional-embedding", o.no_pos, "disable the backbone positional embedding");
}

dp::RunConfig build_config(const CLI::App* cmd, const CommonOpts& o) {
  dp::RunConfig cfg = dp::load_config(o.config_source);
  for (const std::string& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw dp::ContractError("--set expects key=value, got '" + kv + "'");
    dp::apply_override(cfg, trimmed(kv.substr(0, eq)), trimmed(kv.substr(eq + 1)));
  }
  if (cmd->count("--seed") > 0) cfg.seed = o.seed;
  if (cmd->count("--views") > 0) cfg.views = o.views;
  if (!o.aggregation.empty()) dp::apply_override(cfg, "aggregation", o.aggregation);
  if (o.no_pos) cfg.positional_embedding = false;
  if (!o.data.empty()) cfg.dataset = o.data;
  cfg.validate();
  return cfg;
}

ordered_json config_header(const dp::RunConfig& cfg) {
  ordered_json j;
  j["event"] = "config";
  j["preset"] = cfg.preset;
  j["seed"] = cfg.seed;
  j["aggregation"] = cfg.aggregation;
  j["positional_embedding"] = cfg.positional_embedding;
  j["views"] = cfg.views;
  j["config"] = dp::serialize_config(cfg);
  return j;
}

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream f(path, mode);
  if (!f) throw dp::IoError("cannot open '" + path + "' for writing");
  return f;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out, int count, std::uint64_t seed, int points, int views,
                 int resolution, const std::string& spec_text, const std::string& preview) {
  const std::vector<int> kinds = dp::parse_shape_kinds(spec_text);
  const std::vector<dp::DatasetRecord> records =
      dp::make_dataset(count, seed, points, views, resolution, kinds);
  dp::write_dataset(records, out);
  std::map<std::string, int> histogram;
  for (const dp::DatasetRecord& r : records) ++histogram[category_name(r.category)];
  std::cout << "wrote " << records.size() << " records to " << out << " (points=" << points
            << ", views=" << views << ", resolution=" << resolution << "); categories:";
  for (const auto& [name, n] : histogram) std::cout << " " << name << "=" << n;
  std::cout << "\n";
  if (!preview.empty()) {
    dp::write_pgm(records.front().views.front(), preview);
    std::cout << "preview of record 0 view 0: " << preview << "\n";
  }
  return 0;
}

int cmd_train(const CLI::App* cmd, const CommonOpts& o, const std::string& out_dir,
              const std::string& resume, int steps_flag) {
  fs::create_directories(out_dir);
  std::unique_ptr<dp::Trainer> trainer;
  if (!resume.empty()) {
    if (cmd->count("--config") > 0 || !o.sets.empty() || cmd->count("--seed") > 0 ||
        cmd->count("--views") > 0 || !o.aggregation.empty() || o.no_pos)
      throw dp::ContractError(
          "--resume restores the checkpoint config; it conflicts with --config/--set/--seed/"
          "--views/--aggregation/--no-positional-embedding");
    dp::TrainState st = dp::load_checkpoint(resume);
    if (!o.data.empty()) st.config.dataset = o.data;
    if (st.config.dataset.empty())
      throw dp::ContractError("train needs --data or a dataset path in the config");
    std::vector<dp::DatasetRecord> records = dp::read_dataset(st.config.dataset);
    trainer = std::make_unique<dp::Trainer>(std::move(st), std::move(records));
  } else {
    const dp::RunConfig cfg = build_config(cmd, o);
    if (cfg.dataset.empty())
      throw dp::ContractError("train needs --data or a dataset path in the config");
    std::vector<dp::DatasetRecord> records = dp::read_dataset(cfg.dataset);
    trainer = std::make_unique<dp::Trainer>(cfg, std::move(records));
  }
  const dp::RunConfig& cfg = trainer->config();
  const std::uint64_t target =
      cmd->count("--steps") > 0 ? static_cast<std::uint64_t>(steps_flag)
                                : static_cast<std::uint64_t>(cfg.train_steps);
  if (cmd->count("--steps") > 0 && steps_flag < 0)
    throw dp::ContractError("--steps must be >= 0");

  std::ofstream log = open_out((fs::path(out_dir) / "train_log.jsonl").string(), std::ios::app);
  ordered_json header = config_header(cfg);
  header["steps_target"] = target;
  header["start_step"] = trainer->step();
  if (!resume.empty()) header["resumed_from"] = resume;
  log << header.dump() << "\n";

  const auto t0 = std::chrono::steady_clock::now();
  auto save = [&](const std::string& name) {
    const std::string path = (fs::path(out_dir) / name).string();
    dp::save_checkpoint(path, trainer->state());
    ordered_json j;
    j["event"] = "checkpoint";
    j["step"] = trainer->step();
    j["path"] = path;
    log << j.dump() << "\n";
    return path;
  };
  auto ckpt_name = [](std::uint64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%06llu.dfck", static_cast<unsigned long long>(step));
    return std::string(buf);
  };

  while (trainer->step() < target) {
    const float loss = trainer->train_step();
    const std::uint64_t step = trainer->step();
    if (!std::isfinite(loss)) {
      log.flush();
      std::cerr << "training aborted: loss is not finite at step " << step << "\n";
      return 4;
    }
    if (log_level() >= kDebug) std::cerr << "step " << step << " loss " << loss << "\n";
    if (cfg.log_interval > 0 && step % static_cast<std::uint64_t>(cfg.log_interval) == 0) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      ordered_json j;
      j["event"] = "train";
      j["step"] = step;
      j["loss"] = static_cast<double>(loss);
      j["wallclock"] = wall;
      log << j.dump() << "\n";
    }
    if (cfg.checkpoint_interval > 0 && step < target &&
        step % static_cast<std::uint64_t>(cfg.checkpoint_interval) == 0)
      save(ckpt_name(step));
  }
  const std::string final_path = save("ckpt_final.dfck");
  ordered_json done;
  done["event"] = "done";
  done["step"] = trainer->step();
  log << done.dump() << "\n";
  if (log_level() >= kInfo)
    std::cout << "trained to step " << trainer->step() << "; checkpoint: " << final_path << "\n";
  return 0;
}

const dp::DatasetRecord& find_record(const std::vector<dp::DatasetRecord>& records,
                                     std::uint64_t id) {
  for (const dp::DatasetRecord& r : records)
    if (r.id == id) return r;
  throw dp::ContractError("unknown record id: " + std::to_string(id));
}

dp::PointCloud sample_stub(const dp::DatasetRecord& rec, const dp::NoiseSchedule& sched,
                           dp::SeededRng& rng) {
  // test hook: a perfect predictor; the final reverse step returns its output
  // exactly, so the chain must land on the ground truth bit-for-bit
  dp::SampleModel model = [&rec](const dp::PointCloud&, int, const dp::ConditionEmbedding&) {
    return rec.cloud;
  };
  return dp::sample(model, {}, static_cast<int>(rec.cloud.size()), sched, rng);
}

int cmd_sample(const CLI::App* cmd, const CommonOpts& o, const std::string& ckpt,
               std::uint64_t record_id, const std::string& out, double tau, bool oracle_stub) {
  if (o.data.empty()) throw dp::ContractError("sample needs --data");
  const std::vector<dp::DatasetRecord> records = dp::read_dataset(o.data);
  const dp::DatasetRecord& rec = find_record(records, record_id);
  dp::PointCloud cloud;
  if (oracle_stub) {
    const dp::RunConfig cfg = build_config(cmd, o);
    const dp::NoiseSchedule sched = dp::make_schedule(cfg.diffusion());
    dp::SeededRng rng(cmd->count("--seed") > 0 ? o.seed : cfg.seed);
    cloud = sample_stub(rec, sched, rng);
  } else {
    if (ckpt.empty()) throw dp::ContractError("sample needs --ckpt or --oracle-stub");
    dp::TrainState st = dp::load_checkpoint(ckpt);
    if (cmd->count("--views") > 0) st.config.views = o.views;
    const std::uint64_t seed = cmd->count("--seed") > 0 ? o.seed : st.config.seed;
    dp::Trainer tr(std::move(st), {rec});
    dp::SeededRng rng(seed);
    cloud = tr.sample_record(rec, rng);
  }
  dp::write_xyz(out, cloud);
  const double cd = dp::chamfer_l1(cloud, rec.cloud);
  const double f = dp::fscore(cloud, rec.cloud, tau);
  std::cout << "record " << record_id << " (" << category_name(rec.category)
            << "): CD x100 = " << cd * 100.0 << ", F-score = " << f << " (tau=" << tau
            << "); wrote " << out << "\n";
  return 0;
}

int cmd_eval(const CLI::App* cmd, const CommonOpts& o, const std::string& ckpt,
             const std::string& split_name, double tau, int limit, const std::string& out,
             bool oracle_stub) {
  if (o.data.empty()) throw dp::ContractError("eval needs --data");
  dp::Split split;
  if (split_name == "train") split = dp::Split::train;
  else if (split_name == "val") split = dp::Split::val;
  else if (split_name == "test") split = dp::Split::test;
  else throw dp::ContractError("unknown split: '" + split_name + "' (train, val, test)");

  std::vector<dp::DatasetRecord> records = dp::read_dataset(o.data);
  std::vector<dp::DatasetRecord> chosen;
  for (dp::DatasetRecord& r : records)
    if (dp::split_of(r.id) == split) chosen.push_back(std::move(r));
  if (limit > 0 && static_cast<int>(chosen.size()) > limit) chosen.resize(limit);
  if (chosen.empty()) throw dp::ContractError("empty split: " + split_name);

  dp::RunConfig cfg;
  std::unique_ptr<dp::Trainer> tr;
  std::uint64_t ckpt_step = 0;
  if (oracle_stub) {
    cfg = build_config(cmd, o);
  } else {
    if (ckpt.empty()) throw dp::ContractError("eval needs --ckpt or --oracle-stub");
    dp::TrainState st = dp::load_checkpoint(ckpt);
    if (cmd->count("--views") > 0) st.config.views = o.views;
    cfg = st.config;
    ckpt_step = st.step;
    tr = std::make_unique<dp::Trainer>(std::move(st), chosen);
  }
  const std::uint64_t seed = cmd->count("--seed") > 0 ? o.seed : cfg.seed;
  const dp::NoiseSchedule sched = dp::make_schedule(cfg.diffusion());
  const dp::SeededRng base(seed);

  ordered_json header = config_header(cfg);
  header["split"] = split_name;
  header["tau"] = tau;
  header["records"] = chosen.size();
  if (oracle_stub) header["model"] = "oracle-stub";
  else header["checkpoint_step"] = ckpt_step;

  struct Row {
    std::uint64_t id;
    std::uint16_t category;
    double cd_x100, f;
  };
  std::vector<Row> rows;
  rows.reserve(chosen.size());
  for (const dp::DatasetRecord& rec : chosen) {
    dp::SeededRng rng = base.derive(rec.id);
    const dp::PointCloud cloud =
        oracle_stub ? sample_stub(rec, sched, rng) : tr->sample_record(rec, rng);
    rows.push_back({rec.id, rec.category, dp::chamfer_l1(cloud, rec.cloud) * 100.0,
                    dp::fscore(cloud, rec.cloud, tau)});
    if (log_level() >= kDebug)
      std::cerr << "record " << rec.id << " cd_x100 " << rows.back().cd_x100 << "\n";
  }

  struct Agg {
    int n = 0;
    double cd = 0, f = 0;
  };
  std::map<std::string, Agg> by_category;
  Agg total;
  for (const Row& r : rows) {
    Agg& a = by_category[category_name(r.category)];
    ++a.n, a.cd += r.cd_x100, a.f += r.f;
    ++total.n, total.cd += r.cd_x100, total.f += r.f;
  }

  std::vector<std::string> lines;
  lines.push_back(header.dump());
  for (const Row& r : rows) {
    ordered_json j;
    j["event"] = "record";
    j["id"] = r.id;
    j["category"] = category_name(r.category);
    j["cd_x100"] = r.cd_x100;
    j["fscore"] = r.f;
    lines.push_back(j.dump());
  }
  for (const auto& [name, a] : by_category) {
    ordered_json j;
    j["event"] = "category";
    j["category"] = name;
    j["count"] = a.n;
    j["cd_x100_mean"] = a.cd / a.n;
    j["fscore_mean"] = a.f / a.n;
    lines.push_back(j.dump());
  }
  ordered_json summary;
  summary["event"] = "summary";
  summary["count"] = total.n;
  summary["cd_x100_mean"] = total.cd / total.n;
  summary["fscore_mean"] = total.f / total.n;
  lines.push_back(summary.dump());

  if (!out.empty()) {
    std::ofstream f = open_out(out);
    for (const std::string& line : lines) f << line << "\n";
    // human-readable table on stdout
    std::printf("%-12s %6s %12s %10s\n", "category", "count", "CD x100", "F-score");
    for (const auto& [name, a] : by_category)
      std::printf("%-12s %6d %12.6f %10.4f\n", name.c_str(), a.n, a.cd / a.n, a.f / a.n);
    std::printf("%-12s %6d %12.6f %10.4f\n", "mean", total.n, total.cd / total.n,
                total.f / total.n);
    std::cout << "report: " << out << "\n";
  } else {
    for (const std::string& line : lines) std::cout << line << "\n";
  }
  return 0;
}

int cmd_gradcheck(const CLI::App* cmd, const CommonOpts& o, bool f64, double eps, double tol,
                  int probes, bool corrupt) {
  const dp::RunConfig cfg = build_config(cmd, o);
  dp::GradCheckOptions gopt;
  if (cmd->count("--eps") > 0) gopt.eps = eps;
  gopt.tolerance = cmd->count("--tolerance") > 0 ? tol : (f64 ? 1e-6 : 1e-3);
  gopt.probes_per_tensor = probes;
  gopt.corrupt_backward = corrupt;
  const dp::GradCheckReport report =
      f64 ? dp::run_gradcheck<double>(cfg, gopt) : dp::run_gradcheck<float>(cfg, gopt);
  for (const dp::GradCheckGroup& g : report.groups) {
    if (g.skipped) {
      std::printf("group %-10s skipped (disabled by the current config)\n", g.name.c_str());
    } else {
      std::printf("group %-10s max rel err %.3e  (%s, %d probes", g.name.c_str(), g.max_rel_err,
                  g.worst_param.c_str(), g.probes);
      if (g.unstable > 0) std::printf(", %d redrawn at kinks", g.unstable);
      std::printf(")\n");
    }
  }
  if (!report.pass) {
    std::cerr << "gradcheck FAIL: max relative error " << report.worst << " exceeds tolerance "
              << gopt.tolerance << " at parameter " << report.worst_param << "\n";
    return 5;
  }
  std::cout << "gradcheck PASS: worst relative error " << report.worst << " at "
            << (report.worst_param.empty() ? "-" : report.worst_param) << " (tolerance "
            << gopt.tolerance << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffpoint: denoising-diffusion point-cloud reconstruction from depth renders"};
  app.require_subcommand(1);

  // gen-data
  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic shape dataset");
  std::string gen_out, gen_spec = "random", gen_preview;
  int gen_count = 8, gen_points = 256, gen_views = 24, gen_resolution = 16;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_option("--count", gen_count, "number of records");
  gen->add_option("--seed", gen_seed, "RNG seed");
  gen->add_option("--points", gen_points, "points per cloud");
  gen->add_option("--views", gen_views, "depth renders per record (1..24)");
  gen->add_option("--resolution", gen_resolution, "render resolution in pixels");
  gen->add_option("--spec", gen_spec,
                  "comma-separated shape kinds (sphere,box,cylinder,torus,composite) or 'random'");
  gen->add_option("--preview-pgm", gen_preview, "also write record 0 view 0 as a PGM image");

  // train
  CLI::App* train = app.add_subcommand("train", "train a model");
  CommonOpts train_opts;
  std::string train_out = "runs/default", train_resume;
  int train_steps = -1;
  add_config_flags(train, train_opts);
  train->add_option("--data", train_opts.data, "dataset path (overrides the config)");
  train->add_option("--out", train_out, "output directory for checkpoints and logs");
  train->add_option("--steps", train_steps, "absolute step target (overrides the config)");
  train->add_option("--resume", train_resume, "checkpoint to continue from");

  // sample
  CLI::App* sample = app.add_subcommand("sample", "reconstruct one record's cloud");
  CommonOpts sample_opts;
  std::string sample_ckpt, sample_out = "sample.xyz";
  std::uint64_t sample_record_id = 0;
  double sample_tau = 1e-3;
  bool sample_stub_flag = false;
  add_config_flags(sample, sample_opts);
  sample->add_option("--data", sample_opts.data, "dataset path")->required();
  sample->add_option("--ckpt", sample_ckpt, "checkpoint to sample from");
  sample->add_option("--record-id", sample_record_id, "record to reconstruct")->required();
  sample->add_option("--out", sample_out, "output cloud (x y z text)");
  sample->add_option("--tau", sample_tau, "F-score threshold on squared distance");
  sample->add_flag("--oracle-stub", sample_stub_flag,
                   "test hook: bypass the model with a perfect predictor");

  // eval
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint over a split");
  CommonOpts eval_opts;
  std::string eval_ckpt, eval_split = "test", eval_out;
  double eval_tau = 1e-3;
  int eval_limit = 0;
  bool eval_stub_flag = false;
  add_config_flags(eval, eval_opts);
  eval->add_option("--data", eval_opts.data, "dataset path")->required();
  eval->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate");
  eval->add_option("--split", eval_split, "train, val, or test");
  eval->add_option("--tau", eval_tau, "F-score threshold on squared distance");
  eval->add_option("--limit", eval_limit, "evaluate at most this many records (0 = all)");
  eval->add_option("--out", eval_out, "JSON-lines report path (default: print to stdout)");
  eval->add_flag("--oracle-stub", eval_stub_flag,
                 "test hook: bypass the model with a perfect predictor");

  // gradcheck
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference audit of the gradients");
  CommonOpts gc_opts;
  double gc_eps = 0, gc_tol = 0;
  int gc_probes = 3;
  bool gc_f64 = false, gc_corrupt = false;
  add_config_flags(gc, gc_opts);
  gc->add_option("--eps", gc_eps,
                 "central-difference step (default 1e-7; the reference always runs in double)");
  gc->add_option("--tolerance", gc_tol,
                 "max relative error per group (default 1e-3, or 1e-6 with --f64)");
  gc->add_option("--probes", gc_probes, "entries probed per parameter tensor");
  gc->add_flag("--f64", gc_f64, "run the audit in double precision");
  gc->add_flag("--corrupt-backward", gc_corrupt,
               "negative control: falsify one analytic gradient entry");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_count, gen_seed, gen_points, gen_views, gen_resolution,
                          gen_spec, gen_preview);
    if (train->parsed()) return cmd_train(train, train_opts, train_out, train_resume, train_steps);
    if (sample->parsed())
      return cmd_sample(sample, sample_opts, sample_ckpt, sample_record_id, sample_out,
                        sample_tau, sample_stub_flag);
    if (eval->parsed())
      return cmd_eval(eval, eval_opts, eval_ckpt, eval_split, eval_tau, eval_limit, eval_out,
                      eval_stub_flag);
    if (gc->parsed())
      return cmd_gradcheck(gc, gc_opts, gc_f64, gc_eps, gc_tol, gc_probes, gc_corrupt);
  } catch (const dp::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const dp::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {  // ContractError, ShapeError
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
