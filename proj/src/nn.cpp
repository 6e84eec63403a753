#include "ofit/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace ofit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

void TrainingConfig::validate() const {
  if (momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("TrainingConfig: momentum must be in [0,1)");
  }
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) {
    throw std::invalid_argument("TrainingConfig: adam betas must be in (0,1)");
  }
  if (learning_rate <= 0.0) {
    throw std::invalid_argument("TrainingConfig: learning_rate must be positive");
  }
  if (lr_decay < 0.0) {
    throw std::invalid_argument("TrainingConfig: lr_decay must be nonnegative");
  }
  if (l2_lambda < 0.0) {
    throw std::invalid_argument("TrainingConfig: l2_lambda must be nonnegative");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("TrainingConfig: batch_size must be positive");
  }
  if (epochs < 1) {
    throw std::invalid_argument("TrainingConfig: epochs must be positive");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw std::invalid_argument("TrainingConfig: dropout_rate must be in [0,1)");
  }
}

// ---------------------------------------------------------------------------
// Model

Model::Model(std::vector<Layer> layers, std::vector<int64_t> input_hwc,
             int num_classes, double input_scale)
    : layers_(std::move(layers)),
      input_shape_(std::move(input_hwc)),
      num_classes_(num_classes),
      input_scale_(input_scale) {
  if (input_shape_.size() != 3) {
    throw std::invalid_argument("Model: input shape must be (h,w,c)");
  }
}

namespace {

Tensor run_layers(std::vector<Layer>& layers, Tensor x, ForwardCtx& ctx);

Tensor run_layer(Layer& layer, Tensor x, ForwardCtx& ctx) {
  return std::visit(
      [&](auto& l) -> Tensor {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, ConvLayer>) {
          return add(conv2d(x, l.weight, l.padding), l.bias);
        } else if constexpr (std::is_same_v<T, DenseLayer>) {
          return add(matmul(x, l.weight), l.bias);
        } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
          return batchnorm(x, l.gamma, l.beta, l.state, ctx.training);
        } else if constexpr (std::is_same_v<T, ReluLayer>) {
          return relu(x);
        } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
          return maxpool2d(x);
        } else if constexpr (std::is_same_v<T, DropoutLayer>) {
          const uint64_t seed = (ctx.training && ctx.rng) ? ctx.rng->next_u64() : 0;
          return dropout(x, l.rate, ctx.training, seed);
        } else if constexpr (std::is_same_v<T, FlattenLayer>) {
          return flatten(x);
        } else {  // ResidualBlock
          Tensor branch = run_layers(l.body, x, ctx);
          Tensor shortcut =
              l.projection ? add(conv2d(x, l.projection->weight,
                                        l.projection->padding),
                                 l.projection->bias)
                           : x;
          return relu(add(branch, shortcut));
        }
      },
      layer.v);
}

Tensor run_layers(std::vector<Layer>& layers, Tensor x, ForwardCtx& ctx) {
  for (Layer& l : layers) x = run_layer(l, std::move(x), ctx);
  return x;
}

void collect_parameters(std::vector<Layer>& layers, std::vector<Tensor>& out) {
  for (Layer& layer : layers) {
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, ConvLayer> ||
                        std::is_same_v<T, DenseLayer>) {
            out.push_back(l.weight);
            out.push_back(l.bias);
          } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
            out.push_back(l.gamma);
            out.push_back(l.beta);
          } else if constexpr (std::is_same_v<T, ResidualBlock>) {
            collect_parameters(l.body, out);
            if (l.projection) {
              out.push_back(l.projection->weight);
              out.push_back(l.projection->bias);
            }
          }
        },
        layer.v);
  }
}

}  // namespace

Tensor Model::forward(const Tensor& batch, ForwardCtx& ctx) {
  if (batch.rank() != 4 || batch.dim(1) != input_shape_[0] ||
      batch.dim(2) != input_shape_[1] || batch.dim(3) != input_shape_[2]) {
    throw std::invalid_argument("Model::forward: batch shape " +
                                shape_to_string(batch.shape()) +
                                " incompatible with input (h,w,c)=" +
                                shape_to_string(input_shape_));
  }
  Tensor x = input_scale_ != 1.0 ? scale(batch, input_scale_) : batch;
  return run_layers(layers_, std::move(x), ctx);
}

Tensor Model::forward_eval(const Tensor& batch) {
  ForwardCtx ctx;
  return forward(batch, ctx);
}

std::vector<Tensor> Model::parameters() {
  std::vector<Tensor> out;
  collect_parameters(layers_, out);
  return out;
}

void Model::set_requires_grad(bool value) {
  for (Tensor& t : parameters()) t.set_requires_grad(value);
}

void Model::zero_grads() {
  for (Tensor& t : parameters()) t.zero_grad();
}

int64_t Model::parameter_count() {
  int64_t n = 0;
  for (const Tensor& t : parameters()) n += t.size();
  return n;
}

double Model::parameter_checksum() {
  double acc = 0.0;
  int64_t i = 1;
  for (const Tensor& t : parameters()) {
    for (double v : t.data()) {
      acc += v * static_cast<double>(i);
      ++i;
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Architecture builder

namespace {

Tensor he_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  std::vector<double> v(static_cast<size_t>(n));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v), /*requires_grad=*/true);
}

ConvLayer make_conv(int64_t c_in, int64_t c_out, int64_t k, Rng& rng,
                    Padding pad = Padding::same) {
  ConvLayer l;
  l.weight = he_uniform({k, k, c_in, c_out}, k * k * c_in, rng);
  l.bias = Tensor::zeros({c_out}, true);
  l.padding = pad;
  return l;
}

DenseLayer make_dense(int64_t in, int64_t out, Rng& rng) {
  DenseLayer l;
  l.weight = he_uniform({in, out}, in, rng);
  l.bias = Tensor::zeros({out}, true);
  return l;
}

BatchNormLayer make_bn(int64_t channels) {
  BatchNormLayer l;
  l.gamma = Tensor::constant({channels}, 1.0);
  l.gamma.set_requires_grad(true);
  l.beta = Tensor::zeros({channels}, true);
  l.state.init(channels);
  return l;
}

void push_conv_block(std::vector<Layer>& layers, int64_t& c, int64_t c_out,
                     bool bn, Rng& rng) {
  layers.push_back({make_conv(c, c_out, 3, rng)});
  if (bn) layers.push_back({make_bn(c_out)});
  layers.push_back({ReluLayer{}});
  c = c_out;
}

ResidualBlock make_res_block(int64_t c_in, int64_t c_out, bool bn, Rng& rng) {
  ResidualBlock block;
  block.body.push_back({make_conv(c_in, c_out, 3, rng)});
  if (bn) block.body.push_back({make_bn(c_out)});
  block.body.push_back({ReluLayer{}});
  block.body.push_back({make_conv(c_out, c_out, 3, rng)});
  if (bn) block.body.push_back({make_bn(c_out)});
  if (c_in != c_out) block.projection = make_conv(c_in, c_out, 1, rng);
  return block;
}

}  // namespace

Model build_model(const ModelPoolSpec& spec, const std::vector<int64_t>& input_hwc,
                  int num_classes, const TrainingConfig& config) {
  if (input_hwc.size() != 3) {
    throw std::invalid_argument("build_model: input shape must be (h,w,c)");
  }
  const int64_t h = input_hwc[0], w = input_hwc[1], c_in = input_hwc[2];
  if (h < 8 || w < 8) {
    throw std::invalid_argument("build_model: input " + shape_to_string(input_hwc) +
                                " too small for the pooling chain (needs >= 8x8)");
  }
  Rng rng(derive_seed(config.seed, 0x696e6974 /* "init" */));
  const bool bn = config.use_batchnorm;
  const bool drop = spec.family == ArchFamily::conv_plain &&
                    config.dropout_rate > 0.0;
  std::vector<Layer> layers;
  int64_t c = c_in;

  if (spec.family == ArchFamily::conv_plain) {
    push_conv_block(layers, c, 16, bn, rng);
    push_conv_block(layers, c, 16, bn, rng);
    layers.push_back({MaxPoolLayer{}});
    if (drop) layers.push_back({DropoutLayer{config.dropout_rate}});
    push_conv_block(layers, c, 32, bn, rng);
    push_conv_block(layers, c, 32, bn, rng);
    layers.push_back({MaxPoolLayer{}});
    if (drop) layers.push_back({DropoutLayer{config.dropout_rate}});
    layers.push_back({FlattenLayer{}});
    const int64_t flat = (h / 2 / 2) * (w / 2 / 2) * c;
    int64_t width = flat;
    layers.push_back({make_dense(width, 64, rng)});
    layers.push_back({ReluLayer{}});
    if (drop) layers.push_back({DropoutLayer{config.dropout_rate}});
    width = 64;
    if (spec.capacity == Capacity::large) {
      for (int rep = 0; rep < 2; ++rep) {
        layers.push_back({make_dense(width, 256, rng)});
        layers.push_back({ReluLayer{}});
        if (drop) layers.push_back({DropoutLayer{config.dropout_rate}});
        width = 256;
      }
    }
    layers.push_back({make_dense(width, num_classes, rng)});
  } else {
    const int blocks = spec.capacity == Capacity::small ? 3 : 5;
    push_conv_block(layers, c, 8, bn, rng);  // stem
    const int64_t widths[3] = {8, 16, 32};
    for (int stage = 0; stage < 3; ++stage) {
      if (stage > 0) layers.push_back({MaxPoolLayer{}});
      for (int b = 0; b < blocks; ++b) {
        layers.push_back({make_res_block(c, widths[stage], bn, rng)});
        c = widths[stage];
      }
    }
    layers.push_back({FlattenLayer{}});
    const int64_t flat = (h / 2 / 2) * (w / 2 / 2) * c;
    layers.push_back({make_dense(flat, num_classes, rng)});
  }

  const double input_scale = config.normalize_inputs ? 1.0 / 255.0 : 1.0;
  return Model(std::move(layers), input_hwc, num_classes, input_scale);
}

// ---------------------------------------------------------------------------
// Optimizer

namespace {

class Optimizer {
 public:
  Optimizer(const TrainingConfig& cfg, const std::vector<Tensor>& params)
      : kind_(cfg.optimizer),
        lr0_(cfg.learning_rate),
        decay_(cfg.lr_decay),
        mu_(cfg.momentum),
        b1_(cfg.beta1),
        b2_(cfg.beta2),
        eps_(cfg.adam_eps) {
    if (kind_ == OptimizerKind::sgd_momentum) {
      vel_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        vel_[i].assign(static_cast<size_t>(params[i].size()), 0.0);
      }
    } else if (kind_ == OptimizerKind::adam) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(static_cast<size_t>(params[i].size()), 0.0);
        v_[i].assign(static_cast<size_t>(params[i].size()), 0.0);
      }
    }
  }

  void step(std::vector<Tensor>& params) {
    const double lr = lr0_ / (1.0 + decay_ * static_cast<double>(t_));
    ++t_;
    for (size_t p = 0; p < params.size(); ++p) {
      if (!params[p].has_grad()) continue;
      auto w = params[p].data();
      auto g = params[p].grad();
      switch (kind_) {
        case OptimizerKind::sgd:
          for (size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
          break;
        case OptimizerKind::sgd_momentum:
          for (size_t i = 0; i < w.size(); ++i) {
            vel_[p][i] = mu_ * vel_[p][i] - lr * g[i];
            w[i] += vel_[p][i];
          }
          break;
        case OptimizerKind::adam: {
          const double t = static_cast<double>(t_);
          const double bc1 = 1.0 - std::pow(b1_, t);
          const double bc2 = 1.0 - std::pow(b2_, t);
          for (size_t i = 0; i < w.size(); ++i) {
            m_[p][i] = b1_ * m_[p][i] + (1.0 - b1_) * g[i];
            v_[p][i] = b2_ * v_[p][i] + (1.0 - b2_) * g[i] * g[i];
            const double mhat = m_[p][i] / bc1;
            const double vhat = v_[p][i] / bc2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
          }
          break;
        }
      }
    }
  }

 private:
  OptimizerKind kind_;
  double lr0_, decay_, mu_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> vel_, m_, v_;
};

Tensor gather_batch(const Dataset& ds, std::span<const int64_t> indices,
                    bool augment_on, const AugmentParams& params, Rng* aug_rng) {
  const int64_t h = ds.height(), w = ds.width(), c = ds.channels();
  const int64_t px = h * w * c;
  std::vector<double> data;
  data.reserve(indices.size() * static_cast<size_t>(px));
  auto src = ds.images.data();
  for (int64_t i : indices) {
    auto row = src.subspan(static_cast<size_t>(i * px), static_cast<size_t>(px));
    if (augment_on) {
      Tensor img({h, w, c}, {row.begin(), row.end()});
      Tensor out = augment(img, params, aug_rng->next_u64(), ds.value_range);
      auto od = out.data();
      data.insert(data.end(), od.begin(), od.end());
    } else {
      data.insert(data.end(), row.begin(), row.end());
    }
  }
  return Tensor({static_cast<int64_t>(indices.size()), h, w, c}, std::move(data));
}

}  // namespace

TrainedModel train(Model model, const Dataset& train_set, const Dataset& val_set,
                   const TrainingConfig& config, const std::string& pool_id) {
  config.validate();
  if (train_set.role != SplitRole::train) {
    throw std::invalid_argument("train: dataset role is not 'train'");
  }
  for (const Dataset* ds : {&train_set, &val_set}) {
    for (int l : ds->labels) {
      if (l < 0 || l >= model.num_classes()) {
        throw std::invalid_argument("train: label " + std::to_string(l) +
                                    " out of range for " +
                                    std::to_string(model.num_classes()) +
                                    " classes");
      }
    }
  }

  Rng shuffle_rng(derive_seed(config.seed, 0x73687566 /* "shuf" */));
  Rng dropout_rng(derive_seed(config.seed, 0x64726f70 /* "drop" */));
  Rng augment_rng(derive_seed(config.seed, 0x6175676d /* "augm" */));

  std::vector<Tensor> params = model.parameters();
  model.set_requires_grad(true);
  Optimizer opt(config, params);

  const int64_t m = train_set.size();
  std::vector<int64_t> order(static_cast<size_t>(m));
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochStats> history;
  for (int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (int64_t start = 0; start < m; start += config.batch_size) {
      const int64_t stop = std::min(m, start + config.batch_size);
      std::span<const int64_t> idx(order.data() + start,
                                   static_cast<size_t>(stop - start));
      Tensor batch = gather_batch(train_set, idx, config.use_augmentation,
                                  config.augment, &augment_rng);
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (int64_t i : idx) labels.push_back(train_set.labels[static_cast<size_t>(i)]);

      Tape tape;
      {
        TapeScope scope(tape);
        ForwardCtx ctx{/*training=*/true, &dropout_rng};
        Tensor loss = softmax_cross_entropy(model.forward(batch, ctx), labels);
        backward(loss, tape);
      }
      if (config.l2_lambda > 0.0) {
        // d/dw of lambda*||w||^2, added directly to the data gradient.
        for (Tensor& p : params) {
          auto g = p.grad_mut();
          auto w = p.data();
          for (size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * config.l2_lambda * w[i];
        }
      }
      opt.step(params);
      model.zero_grads();
    }
    history.push_back({evaluate(model, train_set), evaluate(model, val_set)});
  }

  model.set_requires_grad(false);
  TrainedModel out;
  out.model = std::move(model);
  out.history = std::move(history);
  out.config = config;
  out.pool_id = pool_id;
  return out;
}

std::vector<int> predict(Model& model, const Tensor& images) {
  const int64_t n = images.dim(0);
  std::vector<int> out;
  out.reserve(static_cast<size_t>(n));
  constexpr int64_t kChunk = 256;
  for (int64_t start = 0; start < n; start += kChunk) {
    const int64_t stop = std::min(n, start + kChunk);
    const int64_t px = images.dim(1) * images.dim(2) * images.dim(3);
    auto src = images.data().subspan(static_cast<size_t>(start * px),
                                     static_cast<size_t>((stop - start) * px));
    Tensor chunk({stop - start, images.dim(1), images.dim(2), images.dim(3)},
                 {src.begin(), src.end()});
    Tensor logits = model.forward_eval(chunk);
    const int64_t k = logits.dim(1);
    auto d = logits.data();
    for (int64_t i = 0; i < stop - start; ++i) {
      const double* row = d.data() + i * k;
      int best = 0;
      for (int64_t j = 1; j < k; ++j) {
        if (row[j] > row[best]) best = static_cast<int>(j);
      }
      out.push_back(best);
    }
  }
  return out;
}

double evaluate(Model& model, const Dataset& dataset) {
  if (dataset.size() < 1) throw std::invalid_argument("evaluate: empty dataset");
  const std::vector<int> preds = predict(model, dataset.images);
  int64_t correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == dataset.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

Tensor input_gradient(Model& model, const Tensor& batch,
                      std::span<const int> labels) {
  if (model.black_box()) {
    throw CapabilityError("input_gradient: model is black-box, gradients unavailable");
  }
  // Freeze parameters for the duration of the pass.
  std::vector<Tensor> params = model.parameters();
  std::vector<bool> saved;
  saved.reserve(params.size());
  for (Tensor& p : params) {
    saved.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }
  std::vector<int> lab(labels.begin(), labels.end());
  Tensor grad = input_gradient(
      [&](const Tensor& x) {
        ForwardCtx ctx;  // eval mode
        return softmax_cross_entropy(model.forward(x, ctx), lab);
      },
      batch);
  for (size_t i = 0; i < params.size(); ++i) {
    params[i].set_requires_grad(saved[i]);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'O', 'F', 'M', '1'};
constexpr uint32_t kCheckpointVersion = 1;

enum class LayerTag : uint8_t {
  conv = 1,
  dense = 2,
  batchnorm = 3,
  relu = 4,
  maxpool = 5,
  dropout = 6,
  flatten = 7,
  residual = 8,
};

void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u8(std::ostream& out, uint8_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64(std::ostream& out, double v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_doubles(std::ostream& out, std::span<const double> v) {
  write_u32(out, static_cast<uint32_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void write_tensor(std::ostream& out, const Tensor& t) {
  write_u32(out, static_cast<uint32_t>(t.rank()));
  for (int64_t d : t.shape()) write_u32(out, static_cast<uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.data().size() * sizeof(double)));
}

uint32_t read_u32(std::istream& in, const std::string& path) {
  uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw DataError("truncated checkpoint: " + path);
  }
  return v;
}

uint8_t read_u8(std::istream& in, const std::string& path) {
  uint8_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw DataError("truncated checkpoint: " + path);
  }
  return v;
}

double read_f64(std::istream& in, const std::string& path) {
  double v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw DataError("truncated checkpoint: " + path);
  }
  return v;
}

std::vector<double> read_doubles(std::istream& in, const std::string& path) {
  const uint32_t n = read_u32(in, path);
  std::vector<double> v(n);
  if (!in.read(reinterpret_cast<char*>(v.data()),
               static_cast<std::streamsize>(n * sizeof(double)))) {
    throw DataError("truncated checkpoint: " + path);
  }
  return v;
}

Tensor read_tensor(std::istream& in, const std::string& path,
                   bool requires_grad = false) {
  const uint32_t rank = read_u32(in, path);
  std::vector<int64_t> shape(rank);
  size_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<int64_t>(read_u32(in, path));
    n *= static_cast<size_t>(shape[i]);
  }
  std::vector<double> data(n);
  if (!in.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(n * sizeof(double)))) {
    throw DataError("truncated checkpoint: " + path);
  }
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

void write_layers(std::ostream& out, const std::vector<Layer>& layers) {
  write_u32(out, static_cast<uint32_t>(layers.size()));
  for (const Layer& layer : layers) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, ConvLayer>) {
            write_u8(out, static_cast<uint8_t>(LayerTag::conv));
            write_u8(out, l.padding == Padding::same ? 1 : 0);
            write_tensor(out, l.weight);
            write_tensor(out, l.bias);
          } else if constexpr (std::is_same_v<T, DenseLayer>) {
            write_u8(out, static_cast<uint8_t>(LayerTag::dense));
            write_tensor(out, l.weight);
            write_tensor(out, l.bias);
          } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
            write_u8(out, static_cast<uint8_t>(LayerTag::batchnorm));
            write_f64(out, l.state.momentum);
            write_f64(out, l.state.eps);
            write_tensor(out, l.gamma);
            write_tensor(out, l.beta);
            write_doubles(out, l.state.running_mean);
            write_doubles(out, l.state.running_var);
          } else if constexpr (std::is_same_v<T, ReluLayer>) {
            write_u8(out, static_cast<uint8_t>(LayerTag::relu));
          } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
            write_u8(out, static_cast<uint8_t>(LayerTag::maxpool));
          } else if constexpr (std::is_same_v<T, DropoutLayer>) {
            write_u8(out, static_cast<uint8_t>(LayerTag::dropout));
            write_f64(out, l.rate);
          } else if constexpr (std::is_same_v<T, FlattenLayer>) {
            write_u8(out, static_cast<uint8_t>(LayerTag::flatten));
          } else {  // ResidualBlock
            write_u8(out, static_cast<uint8_t>(LayerTag::residual));
            write_u8(out, l.projection ? 1 : 0);
            if (l.projection) {
              write_u8(out, l.projection->padding == Padding::same ? 1 : 0);
              write_tensor(out, l.projection->weight);
              write_tensor(out, l.projection->bias);
            }
            write_layers(out, l.body);
          }
        },
        layer.v);
  }
}

std::vector<Layer> read_layers(std::istream& in, const std::string& path) {
  const uint32_t count = read_u32(in, path);
  std::vector<Layer> layers;
  layers.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const LayerTag tag = static_cast<LayerTag>(read_u8(in, path));
    switch (tag) {
      case LayerTag::conv: {
        ConvLayer l;
        l.padding = read_u8(in, path) ? Padding::same : Padding::valid;
        l.weight = read_tensor(in, path);
        l.bias = read_tensor(in, path);
        layers.push_back({std::move(l)});
        break;
      }
      case LayerTag::dense: {
        DenseLayer l;
        l.weight = read_tensor(in, path);
        l.bias = read_tensor(in, path);
        layers.push_back({std::move(l)});
        break;
      }
      case LayerTag::batchnorm: {
        BatchNormLayer l;
        l.state.momentum = read_f64(in, path);
        l.state.eps = read_f64(in, path);
        l.gamma = read_tensor(in, path);
        l.beta = read_tensor(in, path);
        l.state.running_mean = read_doubles(in, path);
        l.state.running_var = read_doubles(in, path);
        layers.push_back({std::move(l)});
        break;
      }
      case LayerTag::relu:
        layers.push_back({ReluLayer{}});
        break;
      case LayerTag::maxpool:
        layers.push_back({MaxPoolLayer{}});
        break;
      case LayerTag::dropout: {
        DropoutLayer l;
        l.rate = read_f64(in, path);
        layers.push_back({std::move(l)});
        break;
      }
      case LayerTag::flatten:
        layers.push_back({FlattenLayer{}});
        break;
      case LayerTag::residual: {
        ResidualBlock block;
        const bool has_proj = read_u8(in, path) != 0;
        if (has_proj) {
          ConvLayer proj;
          proj.padding = read_u8(in, path) ? Padding::same : Padding::valid;
          proj.weight = read_tensor(in, path);
          proj.bias = read_tensor(in, path);
          block.projection = std::move(proj);
        }
        block.body = read_layers(in, path);
        layers.push_back({std::move(block)});
        break;
      }
      default:
        throw DataError("unknown layer tag in checkpoint: " + path);
    }
  }
  return layers;
}

}  // namespace

void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kMagic, 4);
  write_u32(out, kCheckpointVersion);
  write_u32(out, static_cast<uint32_t>(model.num_classes()));
  for (int64_t d : model.input_shape()) write_u32(out, static_cast<uint32_t>(d));
  write_f64(out, model.input_scale());
  write_layers(out, model.layers());
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("bad checkpoint magic: " + path);
  }
  const uint32_t version = read_u32(in, path);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version) +
                    ": " + path);
  }
  const int num_classes = static_cast<int>(read_u32(in, path));
  std::vector<int64_t> hwc(3);
  for (auto& d : hwc) d = static_cast<int64_t>(read_u32(in, path));
  const double input_scale = read_f64(in, path);
  std::vector<Layer> layers = read_layers(in, path);
  return Model(std::move(layers), std::move(hwc), num_classes, input_scale);
}

// ---------------------------------------------------------------------------
// Pool recipes

TrainingConfig default_training_config(const ModelPoolSpec& spec) {
  TrainingConfig cfg;
  if (spec.regularized) {
    cfg.l2_lambda = 0.005;
    cfg.use_batchnorm = true;
    cfg.normalize_inputs = true;
    cfg.use_augmentation = true;
    cfg.augment = {2, 10.0, 0.5};
    cfg.batch_size = 32;  // desk-scale stand-in for the recipe's 128
    if (spec.family == ArchFamily::conv_plain) {
      cfg.optimizer = OptimizerKind::sgd_momentum;
      cfg.momentum = 0.9;
      cfg.learning_rate = 0.1;
      cfg.lr_decay = 1e-6;
      cfg.dropout_rate = 0.3;
    } else {
      cfg.optimizer = OptimizerKind::adam;
      cfg.learning_rate = 1e-3;
      cfg.dropout_rate = 0.0;  // residual recipe omits dropout
    }
  } else {
    cfg.l2_lambda = 0.0;
    cfg.use_batchnorm = false;
    cfg.normalize_inputs = false;
    cfg.use_augmentation = false;
    cfg.batch_size = 16;
    cfg.dropout_rate = 0.0;
    if (spec.family == ArchFamily::conv_plain) {
      cfg.optimizer = OptimizerKind::sgd;
      cfg.learning_rate = 1e-4;
    } else {
      cfg.optimizer = OptimizerKind::adam;
      cfg.learning_rate = 1e-4;
    }
  }
  cfg.epochs = 10;
  return cfg;
}

std::vector<PoolEntry> standard_pool(ArchFamily family) {
  // C1..C8 over (regularized, capacity, train size), Table-I order.
  const struct {
    const char* id;
    bool reg;
    Capacity cap;
    TrainSize size;
  } grid[] = {
      {"C1", true, Capacity::small, TrainSize::full},
      {"C2", false, Capacity::small, TrainSize::full},
      {"C3", true, Capacity::large, TrainSize::full},
      {"C4", false, Capacity::large, TrainSize::full},
      {"C5", true, Capacity::small, TrainSize::reduced},
      {"C6", false, Capacity::small, TrainSize::reduced},
      {"C7", true, Capacity::large, TrainSize::reduced},
      {"C8", false, Capacity::large, TrainSize::reduced},
  };
  std::vector<PoolEntry> pool;
  for (const auto& g : grid) {
    ModelPoolSpec spec{g.reg, g.cap, g.size, family};
    pool.push_back({g.id, spec, default_training_config(spec)});
  }
  return pool;
}

}  // namespace ofit
