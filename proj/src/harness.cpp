#include "ofit/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <thread>

#include "ofit/common.hpp"

namespace ofit {

namespace {

/// Runs tasks over a fixed-size index space on up to `workers` threads.
/// Each task writes only to its own result slot, so aggregation order is
/// independent of scheduling.
void parallel_for(size_t count, int workers,
                  const std::function<void(size_t)>& task) {
  if (count == 0) return;
  const int n = std::max(1, std::min<int>(workers, static_cast<int>(count)));
  if (n == 1) {
    for (size_t i = 0; i < count; ++i) task(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) {
    threads.emplace_back([&]() {
      for (size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
        task(i);
      }
    });
  }
  for (std::thread& t : threads) t.join();
}

}  // namespace

Dataset load_source(const DatasetSourceConfig& source) {
  Dataset ds;
  switch (source.kind) {
    case DatasetSourceConfig::Kind::synthetic:
      ds = synth_blobs(source.classes, source.per_class, source.image_side,
                       source.seed, source.jitter);
      break;
    case DatasetSourceConfig::Kind::mnist:
      ds = load_idx(source.images_path, source.labels_path);
      break;
    case DatasetSourceConfig::Kind::cifar10:
      ds = load_cifar_binary(source.files);
      break;
  }
  if (source.limit > 0 && source.limit < ds.size()) {
    ds = subsample(ds, source.limit, derive_seed(source.seed, 0x6c696d69));
  }
  return ds;
}

PreparedData prepare_data(const ExperimentConfig& config) {
  Dataset all = load_source(config.dataset);
  auto [train_full, val] = split(all, config.split_fraction, config.split_seed);
  const int64_t reduced_count = std::max<int64_t>(
      1, static_cast<int64_t>(std::llround(config.reduced_fraction *
                                           static_cast<double>(train_full.size()))));
  // One shared reduced sample keeps reduced-data models comparable.
  Dataset reduced = subsample(train_full, reduced_count, config.split_seed);
  return {std::move(train_full), std::move(val), std::move(reduced)};
}

const Dataset& train_set_for(const PreparedData& data, TrainSize size) {
  return size == TrainSize::full ? data.train_full : data.train_reduced;
}

// ---------------------------------------------------------------------------
// PMV / PTV

namespace {

struct PmvCell {
  size_t entry = 0;
  size_t seed_idx = 0;
  size_t level_idx = 0;
};

struct PmvCellResult {
  bool ok = false;
  double acc_pmv = 0.0;
  double acc_ptv = 0.0;
  std::string error;
};

}  // namespace

RunResult run_pmv_ptv(const ExperimentConfig& config, const PreparedData& data) {
  config.validate();
  const auto& levels = config.schedules.noise_levels;
  std::vector<PmvCell> cells;
  for (size_t e = 0; e < config.pool.size(); ++e) {
    for (size_t s = 0; s < config.seeds.size(); ++s) {
      for (size_t l = 0; l < levels.size(); ++l) cells.push_back({e, s, l});
    }
  }
  std::vector<PmvCellResult> results(cells.size());

  parallel_for(cells.size(), config.workers, [&](size_t i) {
    const PmvCell& cell = cells[i];
    const PoolEntry& entry = config.pool[cell.entry];
    const uint64_t seed = config.seeds[cell.seed_idx];
    const double r = levels[cell.level_idx];
    PmvCellResult& out = results[i];
    try {
      const Dataset& clean = train_set_for(data, entry.spec.train_size);
      // Mask depends on the run seed and the level, not on the model.
      Dataset noised = clean;
      if (r > 0.0) {
        auto [nds, mask] = inject_label_noise(
            clean, r, derive_seed(seed, 0x706d76 /* "pmv" */, cell.level_idx));
        noised = std::move(nds);
      }
      // A fresh, untrained model per (entry, seed, level).
      TrainingConfig cfg = entry.config;
      cfg.seed = derive_seed(seed, hash_string(entry.id), cell.level_idx);
      const auto& shape = data.train_full.images.shape();
      Model model = build_model(entry.spec, {shape[1], shape[2], shape[3]},
                                data.train_full.num_classes, cfg);
      TrainedModel tm =
          train(std::move(model), noised, data.val, cfg, entry.id);
      out.acc_pmv = evaluate(tm.model, noised);
      out.acc_ptv = evaluate(tm.model, clean);
      out.ok = true;
    } catch (const std::exception& ex) {
      out.error = ex.what();
    }
  });

  RunResult result;
  for (size_t i = 0; i < cells.size(); ++i) {
    const PmvCell& cell = cells[i];
    const PoolEntry& entry = config.pool[cell.entry];
    const uint64_t seed = config.seeds[cell.seed_idx];
    const double r = levels[cell.level_idx];
    if (results[i].ok) {
      result.rows.push_back({entry.id, "pmv", r, results[i].acc_pmv, seed});
      result.rows.push_back({entry.id, "ptv", r, results[i].acc_ptv, seed});
    } else {
      result.failures.push_back(
          {entry.id, "pmv+ptv", r, seed,
           "model " + entry.id + " at level " + std::to_string(r) + ": " +
               results[i].error});
    }
  }
  return result;
}

namespace {

RunResult filter_method(RunResult result, const std::string& method) {
  RunResult out;
  out.failures = std::move(result.failures);
  for (CurveRow& row : result.rows) {
    if (row.method == method) out.rows.push_back(std::move(row));
  }
  return out;
}

}  // namespace

RunResult run_pmv(const ExperimentConfig& config, const PreparedData& data) {
  return filter_method(run_pmv_ptv(config, data), "pmv");
}

RunResult run_ptv(const ExperimentConfig& config, const PreparedData& data) {
  return filter_method(run_pmv_ptv(config, data), "ptv");
}

// ---------------------------------------------------------------------------
// Baseline pool training

std::string checkpoint_path(const std::string& dir, const std::string& model_id,
                            uint64_t seed) {
  return dir + "/" + model_id + "_s" + std::to_string(seed) + ".ofm";
}

TrainPoolResult train_pool(const ExperimentConfig& config,
                           const PreparedData& data,
                           const std::string& checkpoint_dir) {
  config.validate();
  std::filesystem::create_directories(checkpoint_dir);
  struct Cell {
    size_t entry;
    size_t seed_idx;
  };
  std::vector<Cell> cells;
  for (size_t e = 0; e < config.pool.size(); ++e) {
    for (size_t s = 0; s < config.seeds.size(); ++s) cells.push_back({e, s});
  }
  struct CellOut {
    bool ok = false;
    double acc_train = 0.0;
    double acc_val = 0.0;
    std::string error;
  };
  std::vector<CellOut> outs(cells.size());

  parallel_for(cells.size(), config.workers, [&](size_t i) {
    const PoolEntry& entry = config.pool[cells[i].entry];
    const uint64_t seed = config.seeds[cells[i].seed_idx];
    CellOut& out = outs[i];
    try {
      const Dataset& S = train_set_for(data, entry.spec.train_size);
      TrainingConfig cfg = entry.config;
      cfg.seed = derive_seed(seed, hash_string(entry.id), 0x62617365);
      const auto& shape = data.train_full.images.shape();
      Model model = build_model(entry.spec, {shape[1], shape[2], shape[3]},
                                data.train_full.num_classes, cfg);
      TrainedModel tm = train(std::move(model), S, data.val, cfg, entry.id);
      out.acc_train = evaluate(tm.model, S);
      out.acc_val = evaluate(tm.model, data.val);
      save_model(tm.model, checkpoint_path(checkpoint_dir, entry.id, seed));
      out.ok = true;
    } catch (const std::exception& ex) {
      out.error = ex.what();
    }
  });

  TrainPoolResult result;
  for (size_t i = 0; i < cells.size(); ++i) {
    const PoolEntry& entry = config.pool[cells[i].entry];
    const uint64_t seed = config.seeds[cells[i].seed_idx];
    if (outs[i].ok) {
      result.baselines.push_back({entry.id, seed, outs[i].acc_train,
                                  outs[i].acc_val});
    } else {
      result.failures.push_back({entry.id, "baseline", 0.0, seed,
                                 "model " + entry.id + ": " + outs[i].error});
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Input sweeps

AccuracyCurve run_input_sweep(Model& model, const SweepSpec& spec,
                              const Dataset& eval_set, uint64_t seed) {
  if (spec.levels.empty()) {
    throw std::invalid_argument("run_input_sweep: empty schedule");
  }
  if (spec.method == CurveKind::fgsm && model.black_box()) {
    throw CapabilityError("run_input_sweep: fgsm needs gradient access");
  }
  const double range_width = range_max(eval_set.value_range);
  std::vector<double> levels;
  std::vector<double> accuracies;

  auto eval_level = [&](double level, size_t idx) -> double {
    switch (spec.method) {
      case CurveKind::fgsm: {
        if (level == 0.0) return evaluate(model, eval_set);
        Dataset adv = fgsm_dataset(model, eval_set, level * range_width);
        return evaluate(model, adv);
      }
      case CurveKind::spatial: {
        if (level == 0.0) return evaluate(model, eval_set);
        SpatialParams params;
        params.alpha = level;
        params.shift_step = spec.shift_step;
        params.angle_step = level / spec.angle_step_divisor;
        params.mode = spec.spatial_mode;
        Dataset transformed =
            spatial_dataset(model, eval_set, params, derive_seed(seed, idx));
        return evaluate(model, transformed);
      }
      case CurveKind::gaussian: {
        if (level == 0.0) return evaluate(model, eval_set);
        Dataset noised = gaussian_dataset(eval_set, level * range_width,
                                          derive_seed(seed, idx));
        return evaluate(model, noised);
      }
      case CurveKind::corruption: {
        if (level == 0.0) return evaluate(model, eval_set);
        CorruptionSpec cs{spec.corruption_kind, static_cast<int>(level)};
        Dataset corrupted = corrupt_dataset(eval_set, cs);
        return evaluate(model, corrupted);
      }
      default:
        throw std::invalid_argument("run_input_sweep: method must be an input "
                                    "perturbation, got " +
                                    curve_kind_name(spec.method));
    }
  };

  // Severity schedules do not include the clean point; prepend it.
  if (spec.levels.front() != 0.0) {
    levels.push_back(0.0);
    accuracies.push_back(eval_level(0.0, 0));
  }
  for (size_t i = 0; i < spec.levels.size(); ++i) {
    levels.push_back(spec.levels[i]);
    accuracies.push_back(eval_level(spec.levels[i], i + 1));
  }
  return AccuracyCurve(std::move(levels), std::move(accuracies), spec.method);
}

RunResult run_sweeps(const ExperimentConfig& config, const PreparedData& data,
                     const std::string& checkpoint_dir,
                     const std::string& method) {
  config.validate();
  struct Job {
    size_t entry;
    size_t seed_idx;
    CorruptionKind kind;  // corruption only
    bool is_corruption;
  };
  std::vector<Job> jobs;
  const CorruptionKind kinds[] = {CorruptionKind::gaussian_noise_c,
                                  CorruptionKind::defocus_blur,
                                  CorruptionKind::fog, CorruptionKind::contrast};
  for (size_t e = 0; e < config.pool.size(); ++e) {
    for (size_t s = 0; s < config.seeds.size(); ++s) {
      if (method == "corruption") {
        for (CorruptionKind kind : kinds) jobs.push_back({e, s, kind, true});
      } else {
        jobs.push_back({e, s, kinds[0], false});
      }
    }
  }
  struct JobOut {
    bool ok = false;
    std::vector<double> levels;
    std::vector<double> accuracies;
    std::string error;
  };
  std::vector<JobOut> outs(jobs.size());

  parallel_for(jobs.size(), config.workers, [&](size_t i) {
    const Job& job = jobs[i];
    const PoolEntry& entry = config.pool[job.entry];
    const uint64_t seed = config.seeds[job.seed_idx];
    JobOut& out = outs[i];
    try {
      Model model =
          load_model(checkpoint_path(checkpoint_dir, entry.id, seed));
      const Dataset& S = train_set_for(data, entry.spec.train_size);
      Dataset eval_set =
          (config.schedules.sweep_eval_count > 0 &&
           config.schedules.sweep_eval_count < S.size())
              ? subsample(S, config.schedules.sweep_eval_count,
                          derive_seed(seed, 0x73776565 /* "swee" */))
              : S;

      SweepSpec spec;
      spec.spatial_mode = config.schedules.spatial_mode;
      spec.shift_step = config.schedules.shift_step;
      spec.angle_step_divisor = config.schedules.angle_step_divisor;
      if (method == "fgsm") {
        spec.method = CurveKind::fgsm;
        spec.levels = config.schedules.fgsm_eps;
      } else if (method == "spatial") {
        spec.method = CurveKind::spatial;
        spec.levels = config.schedules.alphas;
      } else if (method == "gaussian") {
        spec.method = CurveKind::gaussian;
        spec.levels = config.schedules.gaussian_eps;
      } else if (method == "corruption") {
        spec.method = CurveKind::corruption;
        spec.corruption_kind = job.kind;
        spec.levels.assign(config.schedules.severities.begin(),
                           config.schedules.severities.end());
      } else {
        throw std::invalid_argument("unknown sweep method '" + method + "'");
      }
      AccuracyCurve curve = run_input_sweep(
          model, spec, eval_set, derive_seed(seed, hash_string(method)));
      out.levels = curve.levels;
      out.accuracies = curve.accuracies;
      out.ok = true;
    } catch (const std::exception& ex) {
      out.error = ex.what();
    }
  });

  RunResult result;
  for (size_t i = 0; i < jobs.size(); ++i) {
    const Job& job = jobs[i];
    const PoolEntry& entry = config.pool[job.entry];
    const uint64_t seed = config.seeds[job.seed_idx];
    const std::string method_name =
        job.is_corruption
            ? std::string("corruption_") + corruption_kind_name(job.kind)
            : method;
    if (outs[i].ok) {
      for (size_t p = 0; p < outs[i].levels.size(); ++p) {
        result.rows.push_back({entry.id, method_name, outs[i].levels[p],
                               outs[i].accuracies[p], seed});
      }
    } else {
      result.failures.push_back({entry.id, method_name, 0.0, seed,
                                 "model " + entry.id + ": " + outs[i].error});
    }
  }
  return result;
}

}  // namespace ofit
