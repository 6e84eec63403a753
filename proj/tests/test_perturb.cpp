#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ofit/common.hpp"
#include "ofit/data.hpp"
#include "ofit/metrics.hpp"
#include "ofit/nn.hpp"
#include "ofit/perturb.hpp"
#include "oracles.hpp"

using namespace ofit;

namespace {

/// Logistic model over flattened (4,4,1) inputs: logits [0, w.x].
Model logistic_model(const std::vector<double>& w) {
  std::vector<Layer> layers;
  layers.push_back({FlattenLayer{}});
  DenseLayer dense;
  std::vector<double> weights(w.size() * 2, 0.0);
  for (size_t i = 0; i < w.size(); ++i) weights[i * 2 + 1] = w[i];
  dense.weight = Tensor({static_cast<int64_t>(w.size()), 2}, weights);
  dense.bias = Tensor::zeros({2});
  layers.push_back({std::move(dense)});
  return Model(std::move(layers), {4, 4, 1}, 2);
}

Model small_trained_model(uint64_t seed) {
  Dataset blobs = synth_blobs(2, 20, 8, seed, 0.1);
  TrainingConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 16;
  cfg.epochs = 3;
  cfg.seed = seed;
  Model m = build_model({false, Capacity::small, TrainSize::full,
                         ArchFamily::conv_plain},
                        {8, 8, 1}, 2, cfg);
  return train(std::move(m), blobs, blobs, cfg, "p").model;
}

double image_loss(Model& model, const Tensor& img, int label) {
  Tensor batch = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
  std::vector<int> labels{label};
  return softmax_cross_entropy(model.forward_eval(batch), labels).item();
}

}  // namespace

TEST_CASE("fgsm with zero epsilon is the identity") {
  Model m = small_trained_model(1);
  Rng rng(2);
  Tensor x = testing::random_tensor({8, 8, 1}, rng, 0.0, 1.0);
  Tensor adv = fgsm(m, x, 0, 0.0, ValueRange::unit);
  auto a = adv.data();
  auto b = x.data();
  CHECK(std::equal(a.begin(), a.end(), b.begin()));
}

TEST_CASE("fgsm flips a logistic prediction once eps crosses the margin") {
  // Weights with mixed signs; margin z = w.x, flip needs eps > z/|w|_1.
  std::vector<double> w(16);
  Rng rng(5);
  double l1 = 0.0;
  for (double& v : w) {
    v = rng.uniform(0.2, 1.0) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    l1 += std::fabs(v);
  }
  Model m = logistic_model(w);

  // Build an interior x with small positive margin.
  Tensor x = Tensor::constant({4, 4, 1}, 0.5);
  double z = 0.0;
  for (size_t i = 0; i < w.size(); ++i) z += 0.5 * w[i];
  // Nudge one coordinate to set the margin to 0.04 exactly.
  x.data()[0] += (0.04 - z) / w[0];
  z = 0.0;
  for (size_t i = 0; i < w.size(); ++i) z += x.data()[i] * w[i];
  REQUIRE(z == doctest::Approx(0.04).epsilon(1e-9));

  const double margin_eps = z / l1;
  // Prediction before: class 1 (z > 0).
  CHECK(predict(m, x.reshaped({1, 4, 4, 1}))[0] == 1);

  Tensor adv_weak = fgsm(m, x, 1, margin_eps * 0.5, ValueRange::unit);
  CHECK(predict(m, adv_weak.reshaped({1, 4, 4, 1}))[0] == 1);

  Tensor adv_strong = fgsm(m, x, 1, margin_eps * 1.5, ValueRange::unit);
  CHECK(predict(m, adv_strong.reshaped({1, 4, 4, 1}))[0] == 0);
}

TEST_CASE("fgsm respects the box and range constraints") {
  Model m = small_trained_model(3);
  Rng rng(7);
  for (int it = 0; it < 30; ++it) {
    Tensor x = testing::random_tensor({8, 8, 1}, rng, 0.0, 1.0);
    const double eps = rng.uniform(0.0, 0.3);
    const int label = static_cast<int>(rng.uniform_int(0, 1));
    Tensor adv = fgsm(m, x, label, eps, ValueRange::unit);
    for (size_t i = 0; i < adv.data().size(); ++i) {
      CHECK(std::fabs(adv.data()[i] - x.data()[i]) <= eps + 1e-12);
      CHECK(adv.data()[i] >= 0.0);
      CHECK(adv.data()[i] <= 1.0);
    }
  }
}

TEST_CASE("attacks leave model parameters untouched") {
  Model m = small_trained_model(9);
  const double checksum = m.parameter_checksum();
  Rng rng(11);
  Tensor x = testing::random_tensor({8, 8, 1}, rng, 0.0, 1.0);
  (void)fgsm(m, x, 0, 0.1, ValueRange::unit);
  SpatialParams sp{2.0, 1, 0.5, SpatialMode::worst_case};
  (void)spatial_attack(m, x, 0, sp, 4, ValueRange::unit);
  CHECK(m.parameter_checksum() == checksum);
}

TEST_CASE("spatial attack with zero budget is the identity in both modes") {
  Model m = small_trained_model(13);
  Rng rng(17);
  Tensor x = testing::random_tensor({8, 8, 1}, rng, 0.0, 1.0);
  for (SpatialMode mode : {SpatialMode::worst_case, SpatialMode::random}) {
    SpatialParams p{0.0, 1, 1.0, mode};
    Tensor out = spatial_attack(m, x, 0, p, 21, ValueRange::unit);
    auto a = out.data();
    auto b = x.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("worst-case spatial loss dominates random-mode loss") {
  Model m = small_trained_model(19);
  Dataset blobs = synth_blobs(2, 10, 8, 23, 0.1);
  for (int64_t i = 0; i < blobs.size(); ++i) {
    Tensor x = blobs.image(i);
    const int y = blobs.labels[static_cast<size_t>(i)];
    SpatialParams worst{2.0, 1, 0.5, SpatialMode::worst_case};
    SpatialParams rand_mode{2.0, 1, 0.5, SpatialMode::random};
    Tensor xw = spatial_attack(m, x, y, worst, 5, ValueRange::unit);
    Tensor xr = spatial_attack(m, x, y, rand_mode, 5, ValueRange::unit);
    const double lw = image_loss(m, xw, y);
    const double lr = image_loss(m, xr, y);
    CHECK(lw >= lr - 1e-12);
    CHECK(lr >= 0.0);
  }
}

TEST_CASE("spatial grid enumerates exactly the documented candidates") {
  SpatialParams p{1.0, 1, 1.0, SpatialMode::worst_case};
  auto grid = spatial_grid(p);
  CHECK(grid.size() == 27);  // 9 shifts x 3 angles

  // Brute-force candidate list in the same scan order.
  std::vector<std::tuple<int, int, double>> expect;
  for (int dy = -1; dy <= 1; ++dy) {
    for (int dx = -1; dx <= 1; ++dx) {
      for (double a : {-1.0, 0.0, 1.0}) expect.push_back({dy, dx, a});
    }
  }
  REQUIRE(grid.size() == expect.size());
  for (size_t i = 0; i < grid.size(); ++i) {
    CHECK(grid[i].dy == std::get<0>(expect[i]));
    CHECK(grid[i].dx == std::get<1>(expect[i]));
    CHECK(grid[i].angle == doctest::Approx(std::get<2>(expect[i])).epsilon(1e-9));
  }
}

TEST_CASE("gaussian noise identity, determinism, and moments") {
  Rng rng(29);
  Tensor x = testing::random_tensor({8, 8, 1}, rng, 0.0, 1.0);
  Tensor same = gaussian_noise(x, 0.0, 1, ValueRange::unit);
  CHECK(std::equal(same.data().begin(), same.data().end(), x.data().begin()));

  Tensor a = gaussian_noise(x, 0.1, 42, ValueRange::unit);
  Tensor b = gaussian_noise(x, 0.1, 42, ValueRange::unit);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));

  // Moments of the underlying normal over one million draws: keep values
  // interior on the byte range so clipping never binds.
  Tensor big = Tensor::constant({1000, 1000, 1}, 128.0);
  Tensor noised = gaussian_noise(big, 1.0, 7, ValueRange::byte);
  double mean = 0.0;
  for (size_t i = 0; i < noised.data().size(); ++i) {
    mean += noised.data()[i] - 128.0;
  }
  mean /= 1e6;
  double var = 0.0;
  for (size_t i = 0; i < noised.data().size(); ++i) {
    const double d = noised.data()[i] - 128.0 - mean;
    var += d * d;
  }
  var /= 1e6;
  CHECK(std::fabs(mean) < 0.01);
  CHECK(std::fabs(var - 1.0) < 0.01);
}

TEST_CASE("contrast contracts deviations from the image mean exactly") {
  Rng rng(31);
  Tensor x = testing::random_tensor({6, 6, 1}, rng, 0.1, 0.9);
  double mean = 0.0;
  for (double v : x.data()) mean += v;
  mean /= static_cast<double>(x.size());
  Tensor out = corrupt(x, {CorruptionKind::contrast, 1}, ValueRange::unit);
  for (size_t i = 0; i < x.data().size(); ++i) {
    CHECK(out.data()[i] - mean ==
          doctest::Approx(0.75 * (x.data()[i] - mean)).epsilon(1e-12));
  }
}

TEST_CASE("fog blends toward white with the severity intensity") {
  Rng rng(33);
  Tensor x = testing::random_tensor({6, 6, 1}, rng, 0.0, 1.0);
  for (int severity = 1; severity <= 5; ++severity) {
    const double i = 0.1 * severity;
    Tensor out = corrupt(x, {CorruptionKind::fog, severity}, ValueRange::unit);
    for (size_t p = 0; p < x.data().size(); ++p) {
      CHECK(out.data()[p] ==
            doctest::Approx((1.0 - i) * x.data()[p] + i * 1.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("defocus blur spreads a delta over the disk and conserves mass") {
  Tensor x = Tensor::zeros({9, 9, 1});
  x.data()[4 * 9 + 4] = 1.0;  // interior delta
  Tensor out = corrupt(x, {CorruptionKind::defocus_blur, 1}, ValueRange::unit);
  double total = 0.0;
  int nonzero = 0;
  for (double v : out.data()) {
    total += v;
    if (v > 0.0) ++nonzero;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(nonzero == 5);  // radius-1 disk: center + 4 neighbors
}

TEST_CASE("corruption severity is validated and outputs stay in range") {
  Rng rng(37);
  Tensor x = testing::random_tensor({8, 8, 3}, rng, 0.0, 1.0);
  CHECK_THROWS_AS(corrupt(x, {CorruptionKind::fog, 0}, ValueRange::unit),
                  std::invalid_argument);
  CHECK_THROWS_AS(corrupt(x, {CorruptionKind::fog, 6}, ValueRange::unit),
                  std::invalid_argument);
  CHECK_THROWS_AS(corrupt(x, {static_cast<CorruptionKind>(99), 3},
                          ValueRange::unit),
                  std::invalid_argument);
  for (CorruptionKind kind :
       {CorruptionKind::gaussian_noise_c, CorruptionKind::defocus_blur,
        CorruptionKind::fog, CorruptionKind::contrast}) {
    for (int severity = 1; severity <= 5; ++severity) {
      Tensor out = corrupt(x, {kind, severity}, ValueRange::unit);
      for (double v : out.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
  }
}

TEST_CASE("corrupt is deterministic including the noise corruption") {
  Rng rng(41);
  Tensor x = testing::random_tensor({8, 8, 1}, rng, 0.0, 1.0);
  Tensor a = corrupt(x, {CorruptionKind::gaussian_noise_c, 3}, ValueRange::unit);
  Tensor b = corrupt(x, {CorruptionKind::gaussian_noise_c, 3}, ValueRange::unit);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("dataset wrappers keep original labels and the value range") {
  Model m = small_trained_model(43);
  Dataset blobs = synth_blobs(2, 8, 8, 47, 0.1);
  Dataset adv = fgsm_dataset(m, blobs, 0.05);
  CHECK(adv.labels == blobs.labels);
  adv.validate();
  Dataset noisy = gaussian_dataset(blobs, 0.2, 3);
  noisy.validate();
  Dataset foggy = corrupt_dataset(blobs, {CorruptionKind::fog, 5});
  foggy.validate();
}

TEST_CASE("adversarial error rate") {
  Model m = small_trained_model(53);
  Dataset blobs = synth_blobs(2, 10, 8, 59, 0.1);

  SUBCASE("unperturbed set gives the evaluate complement") {
    CHECK(adversarial_error_rate(m, blobs) ==
          doctest::Approx(1.0 - evaluate(m, blobs)).epsilon(1e-12));
  }
  SUBCASE("constant-wrong model scores one") {
    // All labels forced to class 1, model biased to class 0.
    std::vector<Layer> layers;
    layers.push_back({FlattenLayer{}});
    DenseLayer dense;
    dense.weight = Tensor::zeros({64, 2});
    dense.bias = Tensor({2}, {1.0, 0.0});
    layers.push_back({std::move(dense)});
    Model wrong(std::move(layers), {8, 8, 1}, 2);
    Dataset ones = blobs;
    for (int& l : ones.labels) l = 1;
    CHECK(adversarial_error_rate(wrong, ones) == 1.0);
  }
  SUBCASE("matches a brute-force mismatch count") {
    Dataset adv = fgsm_dataset(m, blobs, 0.1);
    auto preds = predict(m, adv.images);
    int64_t mism = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] != blobs.labels[i]) ++mism;
    }
    CHECK(adversarial_error_rate(m, adv) ==
          doctest::Approx(static_cast<double>(mism) /
                          static_cast<double>(blobs.size()))
              .epsilon(1e-12));
  }
}
