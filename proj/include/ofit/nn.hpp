#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "ofit/common.hpp"
#include "ofit/data.hpp"
#include "ofit/tensor.hpp"

namespace ofit {

enum class OptimizerKind { sgd, sgd_momentum, adam };
enum class Capacity { small, large };
enum class TrainSize { full, reduced };
enum class ArchFamily { conv_plain, conv_residual };

struct TrainingConfig {
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double momentum = 0.9;         // sgd_momentum
  double beta1 = 0.9;            // adam
  double beta2 = 0.999;          // adam
  double adam_eps = 1e-8;        // adam
  double learning_rate = 0.1;
  double lr_decay = 0.0;         // per-update multiplicative decay
  double l2_lambda = 0.0;
  int64_t batch_size = 32;
  int64_t epochs = 1;
  double dropout_rate = 0.0;
  bool use_batchnorm = false;
  bool use_augmentation = false;
  bool normalize_inputs = false;
  AugmentParams augment;
  uint64_t seed = 0;

  void validate() const;
};

/// One cell of the Table-style 2x2x2 design grid.
struct ModelPoolSpec {
  bool regularized = false;
  Capacity capacity = Capacity::small;
  TrainSize train_size = TrainSize::full;
  ArchFamily family = ArchFamily::conv_plain;
};

struct ConvLayer {
  Tensor weight;  // (kh, kw, c_in, c_out)
  Tensor bias;    // (c_out)
  Padding padding = Padding::same;
};

struct DenseLayer {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  BatchNormState state;
};

struct ReluLayer {};
struct MaxPoolLayer {};
struct DropoutLayer {
  double rate = 0.0;
};
struct FlattenLayer {};

struct Layer;

/// Two stride-1 convs with an identity shortcut; a 1x1 projection bridges
/// width changes. The closing relu is applied after the join.
struct ResidualBlock {
  std::vector<Layer> body;
  std::optional<ConvLayer> projection;
};

struct Layer {
  std::variant<ConvLayer, DenseLayer, BatchNormLayer, ReluLayer, MaxPoolLayer,
               DropoutLayer, FlattenLayer, ResidualBlock>
      v;
};

/// Context for one forward pass; dropout masks are drawn from `rng` in
/// layer order when training.
struct ForwardCtx {
  bool training = false;
  Rng* rng = nullptr;
};

class Model {
 public:
  Model() = default;
  Model(std::vector<Layer> layers, std::vector<int64_t> input_hwc,
        int num_classes, double input_scale = 1.0);

  /// batch: (n,h,w,c) matching the model input shape.
  Tensor forward(const Tensor& batch, ForwardCtx& ctx);
  Tensor forward_eval(const Tensor& batch);

  std::vector<Tensor> parameters();
  void set_requires_grad(bool value);
  void zero_grads();

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const std::vector<int64_t>& input_shape() const { return input_shape_; }
  int num_classes() const { return num_classes_; }
  double input_scale() const { return input_scale_; }

  /// Models served without gradient access refuse input_gradient/FGSM.
  bool black_box() const { return black_box_; }
  void set_black_box(bool value) { black_box_ = value; }

  int64_t parameter_count();
  double parameter_checksum();

 private:
  std::vector<Layer> layers_;
  std::vector<int64_t> input_shape_;  // (h, w, c)
  int num_classes_ = 0;
  double input_scale_ = 1.0;
  bool black_box_ = false;
};

/// Per-epoch accuracies recorded during training.
struct EpochStats {
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct TrainedModel {
  Model model;
  std::vector<EpochStats> history;
  TrainingConfig config;
  std::string pool_id;
};

/// Builds the desk-scale architecture for a pool cell. Regularized specs
/// attach batchnorm after each conv; dropout only on the plain family.
Model build_model(const ModelPoolSpec& spec, const std::vector<int64_t>& input_hwc,
                  int num_classes, const TrainingConfig& config);

TrainedModel train(Model model, const Dataset& train_set, const Dataset& val_set,
                   const TrainingConfig& config, const std::string& pool_id = "");

double evaluate(Model& model, const Dataset& dataset);

/// Argmax class per image; exact ties resolve to the lowest class index.
std::vector<int> predict(Model& model, const Tensor& images);

/// d(loss)/d(input) for frozen parameters, eval-mode forward.
Tensor input_gradient(Model& model, const Tensor& batch,
                      std::span<const int> labels);

// Versioned binary checkpoint ("OFM1", little-endian doubles). Reload
// reproduces evaluate() bit-exactly.
void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

/// Paper-shaped default recipe for a pool cell (desk scale).
TrainingConfig default_training_config(const ModelPoolSpec& spec);

struct PoolEntry {
  std::string id;
  ModelPoolSpec spec;
  TrainingConfig config;
};

/// The eight-cell grid C1..C8 over (regularized, capacity, train size).
std::vector<PoolEntry> standard_pool(ArchFamily family);

}  // namespace ofit
