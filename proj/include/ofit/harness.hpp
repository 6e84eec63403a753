#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ofit/data.hpp"
#include "ofit/metrics.hpp"
#include "ofit/nn.hpp"
#include "ofit/perturb.hpp"

namespace ofit {

struct DatasetSourceConfig {
  enum class Kind { synthetic, mnist, cifar10 };
  Kind kind = Kind::synthetic;
  // synthetic
  int classes = 2;
  int per_class = 300;
  int image_side = 8;
  double jitter = 0.05;
  uint64_t seed = 0;
  // mnist
  std::string images_path;
  std::string labels_path;
  // cifar10
  std::vector<std::string> files;
  /// Optional stratified cap applied after loading (0 = keep everything).
  int64_t limit = 0;
};

/// Perturbation schedules. FGSM and Gaussian strengths are fractions of
/// the value range so one schedule is comparable across unit- and
/// byte-range models; they are scaled to raw units per dataset.
struct Schedules {
  std::vector<double> noise_levels{0, 0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<double> fgsm_eps{0, 0.01, 0.02, 0.05};
  std::vector<double> alphas{0, 1, 2, 3};
  std::vector<double> gaussian_eps{0, 0.02, 0.05, 0.1};
  std::vector<int> severities{1, 2, 3, 4, 5};
  SpatialMode spatial_mode = SpatialMode::worst_case;
  int shift_step = 1;
  double angle_step_divisor = 4.0;  // angle_step = alpha / divisor
  /// Sweeps evaluate on a stratified subsample of this size (0 = full set).
  int64_t sweep_eval_count = 256;

  void validate() const;
};

struct ExperimentConfig {
  DatasetSourceConfig dataset;
  double split_fraction = 0.9;
  double reduced_fraction = 0.1;
  uint64_t split_seed = 1;
  std::vector<PoolEntry> pool;
  Schedules schedules;
  std::vector<uint64_t> seeds{0};
  int workers = 1;
  std::string output_dir = "out";

  void validate() const;
};

/// Strict JSON loader; unknown keys are rejected.
ExperimentConfig load_config(const std::string& path);
std::string config_to_json(const ExperimentConfig& config);

Dataset load_source(const DatasetSourceConfig& source);

/// The shared data layout every command reconstructs deterministically:
/// one split, one reduced subsample, identical across models.
struct PreparedData {
  Dataset train_full;
  Dataset val;
  Dataset train_reduced;
};
PreparedData prepare_data(const ExperimentConfig& config);
const Dataset& train_set_for(const PreparedData& data, TrainSize size);

struct CurveRow {
  std::string model_id;
  std::string method;
  double level = 0.0;
  double accuracy = 0.0;
  uint64_t seed = 0;
};

struct BaselineRow {
  std::string model_id;
  uint64_t seed = 0;
  double acc_train = 0.0;
  double acc_val = 0.0;
};

struct CellFailure {
  std::string model_id;
  std::string method;
  double level = 0.0;
  uint64_t seed = 0;
  std::string message;
};

struct RunResult {
  std::vector<CurveRow> rows;
  std::vector<CellFailure> failures;
};

/// Retrains every pool model at every noise level with a fresh
/// initialization and measures both on the perturbed training set (pmv
/// rows) and the clean training set (ptv rows). One retraining feeds both
/// methods.
RunResult run_pmv_ptv(const ExperimentConfig& config, const PreparedData& data);
RunResult run_pmv(const ExperimentConfig& config, const PreparedData& data);
RunResult run_ptv(const ExperimentConfig& config, const PreparedData& data);

struct TrainPoolResult {
  std::vector<BaselineRow> baselines;
  std::vector<CellFailure> failures;
};

/// Trains every (pool entry, seed) cell on its clean training set and
/// saves a checkpoint per cell into checkpoint_dir.
TrainPoolResult train_pool(const ExperimentConfig& config,
                           const PreparedData& data,
                           const std::string& checkpoint_dir);

std::string checkpoint_path(const std::string& dir, const std::string& model_id,
                            uint64_t seed);

struct SweepSpec {
  CurveKind method = CurveKind::fgsm;
  std::vector<double> levels;  // fractions / alphas / severities
  SpatialMode spatial_mode = SpatialMode::worst_case;
  int shift_step = 1;
  double angle_step_divisor = 4.0;
  CorruptionKind corruption_kind = CorruptionKind::gaussian_noise_c;
};

/// Evaluates a pretrained model on its perturbed training set at each
/// strength; the first point is the clean accuracy.
AccuracyCurve run_input_sweep(Model& model, const SweepSpec& spec,
                              const Dataset& eval_set, uint64_t seed);

/// Runs one method's sweeps over every checkpointed (model, seed) cell.
/// `method` is one of fgsm/spatial/gaussian/corruption; corruption emits
/// one curve per corruption kind under method name "corruption_<kind>".
RunResult run_sweeps(const ExperimentConfig& config, const PreparedData& data,
                     const std::string& checkpoint_dir,
                     const std::string& method);

}  // namespace ofit
