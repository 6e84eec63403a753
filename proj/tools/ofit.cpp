// ofit: measure overfitting of image classifiers via label-noise retraining
// (PMV/PTV) and input-perturbation sweeps, reduced to scalar metrics.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "ofit/common.hpp"
#include "ofit/harness.hpp"
#include "ofit/report.hpp"

namespace fs = std::filesystem;
using namespace ofit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitPartial = 3;

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::optional<int64_t> seed;
  std::optional<int> workers;
};

void add_common(CLI::App* cmd, CommonFlags& flags, bool config_required = true) {
  auto* opt = cmd->add_option("--config", flags.config_path,
                              "experiment config file (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--out", flags.out_dir, "output directory (overrides config)");
  cmd->add_option("--seed", flags.seed, "single run seed (overrides config seeds)");
  cmd->add_option("--workers", flags.workers, "worker thread count");
}

ExperimentConfig make_config(const CommonFlags& flags) {
  ExperimentConfig cfg = load_config(flags.config_path);
  if (!flags.out_dir.empty()) cfg.output_dir = flags.out_dir;
  if (flags.seed) cfg.seeds = {static_cast<uint64_t>(*flags.seed)};
  if (flags.workers) cfg.workers = *flags.workers;
  cfg.validate();
  return cfg;
}

int finish_run(const ExperimentConfig& cfg,
               const std::vector<CellFailure>& failures) {
  if (failures.empty()) return kExitOk;
  fs::create_directories(cfg.output_dir + "/runs");
  write_failures_csv(cfg.output_dir + "/runs/failures.csv", failures);
  std::fprintf(stderr, "%zu grid cell(s) failed:\n", failures.size());
  for (const CellFailure& f : failures) {
    std::fprintf(stderr, "  %s\n", f.message.c_str());
  }
  return kExitPartial;
}

int cmd_train_pool(const CommonFlags& flags) {
  ExperimentConfig cfg = make_config(flags);
  PreparedData data = prepare_data(cfg);
  fs::create_directories(cfg.output_dir + "/runs");
  TrainPoolResult result =
      train_pool(cfg, data, cfg.output_dir + "/checkpoints");
  write_baseline_csv(cfg.output_dir + "/runs/baseline.csv", result.baselines);
  std::printf("trained %zu model(s); checkpoints in %s/checkpoints\n",
              result.baselines.size(), cfg.output_dir.c_str());
  return finish_run(cfg, result.failures);
}

int cmd_pmv_ptv(const CommonFlags& flags, const char* who) {
  ExperimentConfig cfg = make_config(flags);
  PreparedData data = prepare_data(cfg);
  fs::create_directories(cfg.output_dir + "/runs");
  // PMV and PTV share retraining; either command emits both row files.
  RunResult result = run_pmv_ptv(cfg, data);
  std::vector<CurveRow> pmv_rows, ptv_rows;
  for (CurveRow& row : result.rows) {
    (row.method == "pmv" ? pmv_rows : ptv_rows).push_back(std::move(row));
  }
  write_rows_csv(cfg.output_dir + "/runs/pmv.csv", std::move(pmv_rows));
  write_rows_csv(cfg.output_dir + "/runs/ptv.csv", std::move(ptv_rows));
  std::printf("%s: wrote runs/pmv.csv and runs/ptv.csv (shared retraining)\n",
              who);
  return finish_run(cfg, result.failures);
}

int cmd_sweep(const CommonFlags& flags, const std::string& method) {
  ExperimentConfig cfg = make_config(flags);
  PreparedData data = prepare_data(cfg);
  fs::create_directories(cfg.output_dir + "/runs");
  RunResult result =
      run_sweeps(cfg, data, cfg.output_dir + "/checkpoints", method);
  write_rows_csv(cfg.output_dir + "/runs/sweep_" + method + ".csv",
                 std::move(result.rows));
  std::printf("sweep %s: wrote runs/sweep_%s.csv\n", method.c_str(),
              method.c_str());
  return finish_run(cfg, result.failures);
}

int cmd_report(const CommonFlags& flags) {
  ExperimentConfig cfg = make_config(flags);
  const std::string runs = cfg.output_dir + "/runs";
  std::vector<CurveRow> rows;
  for (const char* name :
       {"pmv.csv", "ptv.csv", "sweep_fgsm.csv", "sweep_spatial.csv",
        "sweep_gaussian.csv", "sweep_corruption.csv"}) {
    const std::string path = runs + "/" + name;
    if (fs::exists(path)) {
      std::vector<CurveRow> part = read_rows_csv(path);
      rows.insert(rows.end(), part.begin(), part.end());
    }
  }
  std::vector<BaselineRow> baselines;
  if (fs::exists(runs + "/baseline.csv")) {
    baselines = read_baseline_csv(runs + "/baseline.csv");
  }
  if (rows.empty() && baselines.empty()) {
    throw DataError("no run data under " + runs +
                    "; run train-pool/pmv/ptv/sweep first");
  }
  std::vector<OverfitReport> reports = assemble_reports(rows, baselines);
  EmittedReport emitted =
      emit_report(reports, rows, cfg.output_dir, config_to_json(cfg));
  std::printf("%s", render_metrics_table(reports).c_str());
  std::printf("wrote %zu file(s) under %s\n", emitted.files.size(),
              cfg.output_dir.c_str());
  return kExitOk;
}

int cmd_rank(const CommonFlags& flags, const std::string& metric,
             const std::string& method) {
  ExperimentConfig cfg = make_config(flags);
  const std::string path = cfg.output_dir + "/metrics.csv";
  std::vector<OverfitReport> reports = read_metrics_csv(path);
  RankMetric rm;
  if (metric == "pmv-slope") {
    rm = RankMetric::pmv_slope;
  } else if (metric == "ptv-slope") {
    rm = RankMetric::ptv_slope;
  } else if (metric == "max-decrease") {
    rm = RankMetric::max_decrease;
  } else if (metric == "sse") {
    rm = RankMetric::sse;
  } else {
    throw ConfigError("unknown rank metric '" + metric + "'");
  }
  std::vector<std::string> order = rank_models(reports, rm, method);
  std::printf("rank by %s%s (best fit first):\n", metric.c_str(),
              rm == RankMetric::max_decrease || rm == RankMetric::sse
                  ? (" / " + method).c_str()
                  : "");
  for (size_t i = 0; i < order.size(); ++i) {
    std::printf("%2zu. %s\n", i + 1, order[i].c_str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"overfitting measurement via perturbation curves"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string sweep_method;
  std::string rank_metric;
  std::string rank_method = "spatial";

  CLI::App* train_cmd =
      app.add_subcommand("train-pool", "train the model pool and save checkpoints");
  add_common(train_cmd, flags);

  CLI::App* pmv_cmd = app.add_subcommand(
      "pmv", "retrain under label noise, evaluate on the perturbed data");
  add_common(pmv_cmd, flags);

  CLI::App* ptv_cmd = app.add_subcommand(
      "ptv", "retrain under label noise, evaluate on the clean data");
  add_common(ptv_cmd, flags);

  CLI::App* sweep_cmd = app.add_subcommand(
      "sweep", "evaluate pretrained models on perturbed training data");
  add_common(sweep_cmd, flags);
  sweep_cmd->add_option("--method", sweep_method, "perturbation method")
      ->required()
      ->check(CLI::IsMember({"fgsm", "spatial", "gaussian", "corruption"}));

  CLI::App* report_cmd =
      app.add_subcommand("report", "aggregate runs into CSVs, plots, manifest");
  add_common(report_cmd, flags);

  CLI::App* rank_cmd = app.add_subcommand("rank", "order models by a metric");
  add_common(rank_cmd, flags);
  rank_cmd->add_option("--metric", rank_metric, "ranking metric")
      ->required()
      ->check(CLI::IsMember({"pmv-slope", "ptv-slope", "max-decrease", "sse"}));
  rank_cmd->add_option("--method", rank_method,
                       "curve family for max-decrease/sse (default spatial)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train_pool(flags);
    if (pmv_cmd->parsed()) return cmd_pmv_ptv(flags, "pmv");
    if (ptv_cmd->parsed()) return cmd_pmv_ptv(flags, "ptv");
    if (sweep_cmd->parsed()) return cmd_sweep(flags, sweep_method);
    if (report_cmd->parsed()) return cmd_report(flags);
    if (rank_cmd->parsed()) return cmd_rank(flags, rank_metric, rank_method);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  }
  return kExitOk;
}
