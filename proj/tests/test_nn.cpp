#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "ofit/common.hpp"
#include "ofit/data.hpp"
#include "ofit/nn.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace ofit;

namespace {

TrainingConfig fast_config(uint64_t seed, int64_t epochs = 10) {
  TrainingConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 16;
  cfg.epochs = epochs;
  cfg.seed = seed;
  return cfg;
}

ModelPoolSpec plain_spec(bool regularized = false,
                         Capacity cap = Capacity::small,
                         TrainSize size = TrainSize::full) {
  return {regularized, cap, size, ArchFamily::conv_plain};
}

/// Constant-logit model: zero dense weights, bias = logits.
Model constant_model(const std::vector<double>& logits) {
  std::vector<Layer> layers;
  layers.push_back({FlattenLayer{}});
  DenseLayer dense;
  const int64_t k = static_cast<int64_t>(logits.size());
  dense.weight = Tensor::zeros({64, k});
  dense.bias = Tensor({k}, logits);
  layers.push_back({std::move(dense)});
  return Model(std::move(layers), {8, 8, 1}, static_cast<int>(k));
}

bool params_equal(Model& a, Model& b) {
  auto pa = a.parameters();
  auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].shape() != pb[i].shape()) return false;
    auto da = pa[i].data();
    auto db = pb[i].data();
    if (!std::equal(da.begin(), da.end(), db.begin())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("build_model is deterministic given spec and seed") {
  TrainingConfig cfg = fast_config(42);
  Model a = build_model(plain_spec(), {8, 8, 1}, 4, cfg);
  Model b = build_model(plain_spec(), {8, 8, 1}, 4, cfg);
  CHECK(params_equal(a, b));
  cfg.seed = 43;
  Model c = build_model(plain_spec(), {8, 8, 1}, 4, cfg);
  CHECK_FALSE(params_equal(a, c));
}

TEST_CASE("large capacity has strictly more parameters") {
  TrainingConfig cfg = fast_config(1);
  Model small = build_model(plain_spec(false, Capacity::small), {12, 12, 1}, 10, cfg);
  Model large = build_model(plain_spec(false, Capacity::large), {12, 12, 1}, 10, cfg);
  CHECK(large.parameter_count() > small.parameter_count());

  Model rs = build_model({false, Capacity::small, TrainSize::full,
                          ArchFamily::conv_residual},
                         {12, 12, 1}, 10, cfg);
  Model rl = build_model({false, Capacity::large, TrainSize::full,
                          ArchFamily::conv_residual},
                         {12, 12, 1}, 10, cfg);
  CHECK(rl.parameter_count() > rs.parameter_count());
}

TEST_CASE("conv_plain small parameter count matches shape arithmetic") {
  TrainingConfig cfg = fast_config(1);  // no batchnorm, no dropout
  Model m = build_model(plain_spec(), {28, 28, 1}, 10, cfg);
  // Independent sum of per-layer shape products.
  int64_t expect = 0;
  expect += 3 * 3 * 1 * 16 + 16;    // conv1
  expect += 3 * 3 * 16 * 16 + 16;   // conv2
  expect += 3 * 3 * 16 * 32 + 32;   // conv3
  expect += 3 * 3 * 32 * 32 + 32;   // conv4
  expect += (7 * 7 * 32) * 64 + 64; // fc1 after two pools
  expect += 64 * 10 + 10;           // output
  CHECK(m.parameter_count() == expect);
  CHECK(m.parameter_count() == 117434);  // frozen regression value
}

TEST_CASE("input too small for the pooling chain is rejected") {
  TrainingConfig cfg = fast_config(1);
  CHECK_THROWS_AS(build_model(plain_spec(), {6, 6, 1}, 4, cfg),
                  std::invalid_argument);
}

TEST_CASE("training fits separable blobs to high accuracy") {
  Dataset blobs = synth_blobs(2, 50, 8, 99, 0.05);
  auto [train_set, val_set] = split(blobs, 0.9, 5);
  TrainingConfig cfg = fast_config(7, 10);
  Model model = build_model(plain_spec(), {8, 8, 1}, 2, cfg);
  TrainedModel tm = train(std::move(model), train_set, val_set, cfg, "t");
  CHECK(tm.history.size() == 10);
  CHECK(tm.history.back().train_accuracy >= 0.99);
}

TEST_CASE("a linear model reaches 0.99 on separable blobs") {
  Dataset blobs = synth_blobs(2, 100, 8, 123, 0.05);
  std::vector<Layer> layers;
  layers.push_back({FlattenLayer{}});
  Rng rng(3);
  DenseLayer dense;
  dense.weight = Tensor::zeros({64, 2}, true);
  dense.bias = Tensor::zeros({2}, true);
  layers.push_back({std::move(dense)});
  Model linear(std::move(layers), {8, 8, 1}, 2);
  TrainingConfig cfg = fast_config(11, 20);
  cfg.learning_rate = 0.05;
  Dataset train_set = blobs;
  train_set.role = SplitRole::train;
  TrainedModel tm = train(std::move(linear), train_set, train_set, cfg, "lin");
  CHECK(tm.history.back().train_accuracy >= 0.99);
}

TEST_CASE("strong L2 shrinks the final weight norm") {
  Dataset blobs = synth_blobs(2, 20, 8, 31, 0.05);
  Dataset train_set = blobs;
  auto norm_of = [&](double lambda) {
    TrainingConfig cfg = fast_config(13, 4);
    cfg.l2_lambda = lambda;
    Model model = build_model(plain_spec(), {8, 8, 1}, 2, cfg);
    TrainedModel tm = train(std::move(model), train_set, train_set, cfg, "l2");
    double norm = 0.0;
    for (Tensor& p : tm.model.parameters()) {
      for (double v : p.data()) norm += v * v;
    }
    return norm;
  };
  CHECK(norm_of(1e3) < norm_of(0.0));
}

TEST_CASE("epoch contract: zero forbidden, one gives history length one") {
  Dataset blobs = synth_blobs(2, 10, 8, 17, 0.05);
  TrainingConfig cfg = fast_config(3, 1);
  Model model = build_model(plain_spec(), {8, 8, 1}, 2, cfg);
  TrainedModel tm = train(std::move(model), blobs, blobs, cfg, "e1");
  CHECK(tm.history.size() == 1);

  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("train rejects out-of-range labels before starting") {
  Dataset blobs = synth_blobs(4, 5, 8, 17, 0.05);
  TrainingConfig cfg = fast_config(3, 1);
  Model model = build_model(plain_spec(), {8, 8, 1}, 2, cfg);  // 2-way output
  CHECK_THROWS_AS(train(std::move(model), blobs, blobs, cfg, "bad"),
                  std::invalid_argument);
}

TEST_CASE("evaluate on constant predictors") {
  Model favor0 = constant_model({1.0, 0.0, 0.0});
  Dataset all_zero = synth_blobs(3, 4, 8, 7, 0.0);
  for (int& l : all_zero.labels) l = 0;
  CHECK(evaluate(favor0, all_zero) == 1.0);

  Model favor0_k10 = constant_model(std::vector<double>(10, 0.0));
  Dataset balanced = synth_blobs(10, 6, 8, 7, 0.0);
  // Constant logits, ties to class 0; balanced labels give 1/10.
  CHECK(evaluate(favor0_k10, balanced) == doctest::Approx(0.1));
}

TEST_CASE("evaluate equals one minus brute-force mismatch fraction") {
  Dataset blobs = synth_blobs(3, 20, 8, 55, 0.1);
  TrainingConfig cfg = fast_config(5, 2);
  Model model = build_model(plain_spec(), {8, 8, 1}, 3, cfg);
  TrainedModel tm = train(std::move(model), blobs, blobs, cfg, "ev");

  // Brute force straight from the logits.
  int64_t mismatches = 0;
  for (int64_t i = 0; i < blobs.size(); ++i) {
    Tensor img = blobs.image(i).reshaped({1, 8, 8, 1});
    Tensor logits = tm.model.forward_eval(img);
    int best = 0;
    for (int64_t j = 1; j < logits.dim(1); ++j) {
      if (logits.data()[static_cast<size_t>(j)] >
          logits.data()[static_cast<size_t>(best)]) {
        best = static_cast<int>(j);
      }
    }
    if (best != blobs.labels[static_cast<size_t>(i)]) ++mismatches;
  }
  const double expect =
      1.0 - static_cast<double>(mismatches) / static_cast<double>(blobs.size());
  CHECK(evaluate(tm.model, blobs) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("predict argmax and tie-breaking") {
  Model m = constant_model({0.2, 0.7, 0.1});
  Tensor imgs = Tensor::zeros({2, 8, 8, 1});
  CHECK(predict(m, imgs) == std::vector<int>{1, 1});

  Model tie = constant_model({0.5, 0.5});
  CHECK(predict(tie, imgs) == std::vector<int>{0, 0});
}

TEST_CASE("training is bit-deterministic given identical seeds") {
  Dataset blobs = synth_blobs(2, 16, 8, 77, 0.05);
  TrainingConfig cfg = fast_config(21, 3);
  cfg.dropout_rate = 0.2;
  cfg.use_batchnorm = true;
  cfg.use_augmentation = true;
  cfg.augment = {1, 5.0, 0.5};
  ModelPoolSpec spec = plain_spec(true);
  TrainedModel a = train(build_model(spec, {8, 8, 1}, 2, cfg), blobs, blobs, cfg, "d");
  TrainedModel b = train(build_model(spec, {8, 8, 1}, 2, cfg), blobs, blobs, cfg, "d");
  CHECK(params_equal(a.model, b.model));
  for (size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].train_accuracy == b.history[e].train_accuracy);
    CHECK(a.history[e].val_accuracy == b.history[e].val_accuracy);
  }
}

TEST_CASE("L2 penalty enters the gradient as 2*lambda*theta") {
  const double lambda = 0.01;
  Rng rng(9);
  std::vector<Layer> layers;
  layers.push_back({FlattenLayer{}});
  DenseLayer dense;
  dense.weight = testing::random_tensor({16, 3}, rng, -0.5, 0.5);
  dense.weight.set_requires_grad(true);
  dense.bias = testing::random_tensor({3}, rng, -0.1, 0.1);
  dense.bias.set_requires_grad(true);
  layers.push_back({std::move(dense)});
  Model model(std::move(layers), {4, 4, 1}, 3);

  Tensor x = testing::random_tensor({5, 4, 4, 1}, rng, 0.0, 1.0);
  std::vector<int> labels{0, 1, 2, 1, 0};

  auto params = model.parameters();
  Tape tape;
  {
    TapeScope scope(tape);
    ForwardCtx ctx{true, nullptr};
    backward(softmax_cross_entropy(model.forward(x, ctx), labels), tape);
  }
  // Penalized gradient: data gradient + 2*lambda*theta.
  std::vector<std::vector<double>> got;
  for (Tensor& p : params) {
    auto g = p.grad_mut();
    auto w = p.data();
    std::vector<double> total(g.size());
    for (size_t i = 0; i < g.size(); ++i) total[i] = g[i] + 2.0 * lambda * w[i];
    got.push_back(std::move(total));
  }
  // Finite differences of the penalized loss.
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto eval = [&]() {
      ForwardCtx ctx{true, nullptr};
      double loss = softmax_cross_entropy(model.forward(x, ctx), labels).item();
      for (Tensor& p : params) {
        for (double v : p.data()) loss += lambda * v * v;
      }
      return loss;
    };
    auto fd = testing::finite_difference(eval, params[pi]);
    CHECK(testing::grad_close(got[pi], fd));
  }
}

TEST_CASE("model input_gradient freezes parameters and matches FD") {
  Dataset blobs = synth_blobs(2, 10, 8, 41, 0.05);
  TrainingConfig cfg = fast_config(15, 2);
  Model model = build_model(plain_spec(), {8, 8, 1}, 2, cfg);
  TrainedModel tm = train(std::move(model), blobs, blobs, cfg, "ig");

  const double checksum_before = tm.model.parameter_checksum();
  Tensor x = blobs.image(0).reshaped({1, 8, 8, 1});
  std::vector<int> labels{blobs.labels[0]};
  Tensor g = input_gradient(tm.model, x, labels);
  CHECK(tm.model.parameter_checksum() == checksum_before);
  CHECK(g.shape() == x.shape());

  Tensor probe = x.clone();
  auto eval = [&]() {
    ForwardCtx ctx;
    return softmax_cross_entropy(tm.model.forward(probe, ctx), labels).item();
  };
  auto fd = testing::finite_difference(eval, probe);
  CHECK(testing::grad_close(g.data(), fd));

  SUBCASE("incompatible input shape is rejected") {
    Tensor bad = Tensor::zeros({1, 9, 8, 1});
    CHECK_THROWS_AS(input_gradient(tm.model, bad, labels),
                    std::invalid_argument);
  }
  SUBCASE("black-box models refuse gradients") {
    tm.model.set_black_box(true);
    CHECK_THROWS_AS(input_gradient(tm.model, x, labels), CapabilityError);
  }
}

TEST_CASE("checkpoints reload and evaluate bit-exactly") {
  Dataset blobs = synth_blobs(3, 12, 8, 61, 0.08);
  const std::string dir = testing::temp_dir("ckpt");

  SUBCASE("plain with batchnorm and dropout") {
    TrainingConfig cfg = fast_config(19, 2);
    cfg.use_batchnorm = true;
    cfg.dropout_rate = 0.3;
    Model model = build_model(plain_spec(true), {8, 8, 1}, 3, cfg);
    TrainedModel tm = train(std::move(model), blobs, blobs, cfg, "ck1");
    save_model(tm.model, dir + "/plain.ofm");
    Model re = load_model(dir + "/plain.ofm");
    CHECK(evaluate(re, blobs) == evaluate(tm.model, blobs));
    CHECK(re.parameter_checksum() == tm.model.parameter_checksum());
    Tensor logits_a = tm.model.forward_eval(blobs.images);
    Tensor logits_b = re.forward_eval(blobs.images);
    auto da = logits_a.data();
    auto db = logits_b.data();
    CHECK(std::equal(da.begin(), da.end(), db.begin()));
  }
  SUBCASE("residual with projections") {
    TrainingConfig cfg = fast_config(23, 1);
    cfg.use_batchnorm = true;
    Model model = build_model({true, Capacity::small, TrainSize::full,
                               ArchFamily::conv_residual},
                              {8, 8, 1}, 3, cfg);
    TrainedModel tm = train(std::move(model), blobs, blobs, cfg, "ck2");
    save_model(tm.model, dir + "/res.ofm");
    Model re = load_model(dir + "/res.ofm");
    CHECK(evaluate(re, blobs) == evaluate(tm.model, blobs));
    CHECK(re.parameter_checksum() == tm.model.parameter_checksum());
  }
  SUBCASE("corrupt files are rejected") {
    testing::write_bytes(dir + "/bad.ofm", {'X', 'X', 'X', 'X', 0, 0});
    CHECK_THROWS_AS(load_model(dir + "/bad.ofm"), DataError);
  }
}

TEST_CASE("standard pool enumerates the 2x2x2 grid as C1..C8") {
  auto pool = standard_pool(ArchFamily::conv_plain);
  REQUIRE(pool.size() == 8);
  CHECK(pool[0].id == "C1");
  CHECK(pool[7].id == "C8");
  // Every (regularized, capacity, train_size) combination exactly once.
  std::vector<int> seen(8, 0);
  for (const auto& e : pool) {
    const int key = (e.spec.regularized ? 1 : 0) +
                    (e.spec.capacity == Capacity::large ? 2 : 0) +
                    (e.spec.train_size == TrainSize::reduced ? 4 : 0);
    seen[static_cast<size_t>(key)]++;
  }
  for (int c : seen) CHECK(c == 1);
  // Recipe structure mirrors the regularized/unregularized split.
  CHECK(pool[0].config.use_batchnorm);
  CHECK(pool[0].config.l2_lambda > 0.0);
  CHECK_FALSE(pool[1].config.use_batchnorm);
  CHECK(pool[1].config.l2_lambda == 0.0);
}

TEST_CASE("pool ordering: unregularized low-data gap exceeds regularized") {
  // Desk-scale restatement of the rising-overfitting trend, medians over
  // three seeds. Jitter is large enough that 16 samples generalize poorly.
  Dataset blobs = synth_blobs(2, 150, 8, 2024, 0.35);
  auto [full, val] = split(blobs, 0.8, 3);
  Dataset reduced = subsample(full, 16, 5);

  std::vector<double> gap_good, gap_bad;
  for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    TrainingConfig good_cfg = fast_config(seed, 6);
    good_cfg.l2_lambda = 0.005;
    good_cfg.use_batchnorm = true;
    Model good = build_model(plain_spec(true), {8, 8, 1}, 2, good_cfg);
    TrainedModel tg = train(std::move(good), full, val, good_cfg, "good");
    gap_good.push_back(tg.history.back().train_accuracy -
                       tg.history.back().val_accuracy);

    TrainingConfig bad_cfg = fast_config(seed, 40);
    Model bad = build_model(plain_spec(false, Capacity::large), {8, 8, 1}, 2,
                            bad_cfg);
    TrainedModel tb = train(std::move(bad), reduced, val, bad_cfg, "bad");
    gap_bad.push_back(tb.history.back().train_accuracy -
                      tb.history.back().val_accuracy);
  }
  std::sort(gap_good.begin(), gap_good.end());
  std::sort(gap_bad.begin(), gap_bad.end());
  CHECK(gap_bad[1] > gap_good[1]);
}
