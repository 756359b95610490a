#include "cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <system_error>

#include "pixeldino/checkpoint.hpp"
#include "pixeldino/config.hpp"
#include "pixeldino/errors.hpp"
#include "pixeldino/metrics.hpp"
#include "pixeldino/synthetic.hpp"
#include "pixeldino/tile.hpp"
#include "pixeldino/trainer.hpp"

namespace pixeldino::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// An output directory must exist (or be creatable) and accept a file.
void require_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create " + dir.string() + ": " + ec.message());
  const fs::path probe = dir / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw ConfigError("directory is not writable: " + dir.string());
  }
  fs::remove(probe, ec);
}

void require_writable_file(const fs::path& file) {
  const fs::path parent = file.has_parent_path() ? file.parent_path() : fs::path(".");
  require_writable_dir(parent);
}

std::string bits(const std::vector<uint8_t>& v) {
  std::string s(v.size(), '0');
  for (size_t i = 0; i < v.size(); ++i) {
    if (v[i]) s[i] = '1';
  }
  return s;
}

}  // namespace

int cmd_generate(const fs::path& config_path, const fs::path& out_dir, std::ostream& out) {
  const SyntheticConfig cfg = load_synthetic_config(config_path);
  require_writable_dir(out_dir);
  const GeneratedStores stores = generate_synthetic(cfg, out_dir);
  out << "labelled   " << stores.labelled.string() << "\n"
      << "unlabelled " << stores.unlabelled.string() << "\n"
      << "eval       " << stores.eval.string() << "\n"
      << "eval_in    " << stores.eval_in.string() << "\n";
  return kExitOk;
}

int cmd_train(const fs::path& config_path, const fs::path& out_dir, bool resume, std::ostream& out) {
  const RunConfig cfg = load_run_config(config_path);
  require_writable_dir(out_dir);
  TrainOptions opt;
  opt.out_dir = out_dir;
  opt.resume = resume;
  opt.progress = true;
  const TrainResult r = train(cfg, opt);
  out << method_name(cfg.method) << ": " << r.state.step << " steps";
  if (r.timed_steps > 0) out << ", " << r.mean_step_seconds * 1e3 << " ms/step";
  out << "\n";
  for (const auto& [split, m] : r.final_eval) {
    out << "  " << split << ": iou " << m.iou << " f1 " << m.f1 << " precision " << m.precision << " recall "
        << m.recall << (m.any_undefined() ? " (undefined metric)" : "") << "\n";
  }
  return kExitOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& store_dir, const fs::path& out_path,
             const fs::path& dump_path, std::ostream& out) {
  const Checkpoint ck = read_checkpoint(checkpoint);
  const TileStore store = TileStore::open(store_dir);
  if (store.channels() != ck.model.in_channels) {
    throw ConfigError("store " + store_dir.string() + " has " + std::to_string(store.channels()) +
                      " channels but the checkpoint model expects " + std::to_string(ck.model.in_channels));
  }
  if (!out_path.empty()) require_writable_file(out_path);
  if (!dump_path.empty()) require_writable_file(dump_path);

  const json meta = json::parse(ck.meta_json);
  const int64_t patch = meta.value("patch_size", int64_t{192});
  const int64_t batch = meta.value("eval_batch_size", int64_t{16});
  const int64_t fg = meta.value("rts_channel", int64_t{0});
  const std::string method = meta.value("method", std::string("unknown"));
  Normalization norm;
  if (meta.contains("normalization")) {
    norm.source = meta["normalization"].at("source").get<std::string>();
    norm.mean = meta["normalization"].at("mean").get<std::vector<double>>();
    norm.stddev = meta["normalization"].at("std").get<std::vector<double>>();
  } else {
    norm = store.manifest().normalization;
  }
  if (norm.empty()) throw ConfigError("no normalization in checkpoint or store manifest");

  const ModelParams params = student_from_checkpoint(ck);
  std::vector<PatchPrediction> dump;
  const MetricsAccumulator acc = evaluate(ck.model, params, store, norm, patch, batch, fg, dump_path.empty() ? nullptr : &dump);
  const std::vector<ResultRow> rows{{method, store_dir.filename().string(), {finalize(acc)}}};
  if (!out_path.empty()) write_file_atomic(out_path, results_csv(rows));
  if (!dump_path.empty()) {
    std::string text = "tile,x0,y0,size,pred,truth\n";
    for (const auto& p : dump) {
      text += std::to_string(p.origin.tile_index) + "," + std::to_string(p.origin.x0) + "," +
              std::to_string(p.origin.y0) + "," + std::to_string(p.size) + "," + bits(p.pred) + "," + bits(p.truth) + "\n";
    }
    write_file_atomic(dump_path, text);
  }
  out << "tp " << acc.tp() << " fp " << acc.fp() << " fn " << acc.fn() << " tn " << acc.tn() << "\n";
  out << results_table(rows);
  return kExitOk;
}

int cmd_gradcheck(uint64_t seed, std::ostream& out, const std::vector<GradcheckProblem>& extra) {
  std::vector<GradcheckProblem> problems = standard_gradcheck_problems(seed);
  problems.insert(problems.end(), extra.begin(), extra.end());
  const GradcheckReport report = run_gradcheck_suite(problems, seed);
  out << report.format();
  return report.all_passed() ? kExitOk : kExitFailure;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Semi-supervised segmentation engine"};
  app.require_subcommand(1);

  std::string config, out_dir, checkpoint, store, eval_out, dump;
  bool resume = false;
  uint64_t seed = 0;

  auto* gen = app.add_subcommand("generate", "Write synthetic labelled, unlabelled and eval stores");
  gen->add_option("--config", config, "Synthetic generator config (JSON)")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train one method from a run config");
  tr->add_option("--config", config, "Run config (JSON)")->required();
  tr->add_option("--out", out_dir, "Run directory")->required();
  tr->add_flag("--resume", resume, "Continue from last.ckpt in the run directory");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a tile store");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--store", store, "Tile store directory")->required();
  ev->add_option("--out", eval_out, "Results CSV path");
  ev->add_option("--dump", dump, "Per-patch prediction dump path");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gc->add_option("--seed", seed, "Seed for inputs and sampling");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_generate(config, out_dir, out);
    if (*tr) return cmd_train(config, out_dir, resume, out);
    if (*ev) return cmd_eval(checkpoint, store, eval_out, dump, out);
    if (*gc) return cmd_gradcheck(seed, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace pixeldino::cli
