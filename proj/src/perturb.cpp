#include "ofit/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ofit/common.hpp"

namespace ofit {

const char* corruption_kind_name(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::gaussian_noise_c: return "gaussian_noise";
    case CorruptionKind::defocus_blur: return "defocus_blur";
    case CorruptionKind::fog: return "fog";
    case CorruptionKind::contrast: return "contrast";
  }
  return "unknown";
}

namespace {

double clip(double v, double hi) { return std::clamp(v, 0.0, hi); }

Tensor clip_tensor(Tensor t, ValueRange range) {
  const double hi = range_max(range);
  for (double& v : t.data()) v = clip(v, hi);
  return t;
}

double sample_loss(Model& model, const Tensor& image_hwc, int label) {
  Tensor batch = image_hwc.reshaped({1, image_hwc.dim(0), image_hwc.dim(1),
                                     image_hwc.dim(2)});
  std::vector<int> labels{label};
  return softmax_cross_entropy(model.forward_eval(batch), labels).item();
}

}  // namespace

Tensor fgsm(Model& model, const Tensor& x, int label, double eps,
            ValueRange range) {
  if (eps < 0.0) throw std::invalid_argument("fgsm: eps must be nonnegative");
  if (x.rank() != 3) {
    throw std::invalid_argument("fgsm: expected (h,w,c) image, got " +
                                shape_to_string(x.shape()));
  }
  if (eps == 0.0) return x.clone();
  Tensor batch = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
  std::vector<int> labels{label};
  Tensor grad = input_gradient(model, batch, labels);
  Tensor out = x.clone();
  auto g = grad.data();
  auto o = out.data();
  const double hi = range_max(range);
  for (size_t i = 0; i < o.size(); ++i) {
    const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    o[i] = clip(o[i] + eps * s, hi);
  }
  return out;
}

std::vector<SpatialCandidate> spatial_grid(const SpatialParams& params) {
  if (params.alpha < 0.0) {
    throw std::invalid_argument("spatial_grid: alpha must be nonnegative");
  }
  if (params.shift_step < 1 || params.angle_step <= 0.0) {
    throw std::invalid_argument("spatial_grid: steps must be positive");
  }
  const int max_shift = static_cast<int>(std::floor(params.alpha));
  std::vector<int> shifts;
  for (int s = -max_shift; s <= max_shift; s += params.shift_step) {
    shifts.push_back(s);
  }
  std::vector<double> angles;
  for (double a = -params.alpha; a <= params.alpha + 1e-9;
       a += params.angle_step) {
    angles.push_back(std::fabs(a) < 1e-12 ? 0.0 : a);
  }
  if (params.alpha == 0.0) {
    shifts = {0};
    angles = {0.0};
  }
  std::vector<SpatialCandidate> grid;
  grid.reserve(shifts.size() * shifts.size() * angles.size());
  for (int dy : shifts) {
    for (int dx : shifts) {
      for (double a : angles) grid.push_back({dy, dx, a});
    }
  }
  return grid;
}

Tensor spatial_attack(Model& model, const Tensor& x, int label,
                      const SpatialParams& params, uint64_t seed,
                      ValueRange range) {
  if (x.rank() != 3) {
    throw std::invalid_argument("spatial_attack: expected (h,w,c) image");
  }
  if (params.alpha > static_cast<double>(std::min(x.dim(0), x.dim(1)))) {
    throw std::invalid_argument("spatial_attack: alpha exceeds image bounds");
  }
  const std::vector<SpatialCandidate> grid = spatial_grid(params);

  if (params.mode == SpatialMode::random) {
    Rng rng(derive_seed(seed, 0x73706174 /* "spat" */));
    const auto& c = grid[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(grid.size()) - 1))];
    return shift_rotate(x, c.dy, c.dx, c.angle, range);
  }

  // Worst case: batch all candidates through one forward pass and pick the
  // loss maximizer; ties resolve to the first candidate in scan order.
  const int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const int64_t px = h * w * c;
  std::vector<double> batch_data;
  batch_data.reserve(grid.size() * static_cast<size_t>(px));
  std::vector<Tensor> candidates;
  candidates.reserve(grid.size());
  for (const auto& cand : grid) {
    Tensor t = shift_rotate(x, cand.dy, cand.dx, cand.angle, range);
    auto d = t.data();
    batch_data.insert(batch_data.end(), d.begin(), d.end());
    candidates.push_back(std::move(t));
  }
  Tensor batch({static_cast<int64_t>(grid.size()), h, w, c},
               std::move(batch_data));
  Tensor logits = model.forward_eval(batch);
  // Per-row cross entropy from the logits.
  const int64_t k = logits.dim(1);
  auto ld = logits.data();
  size_t best = 0;
  double best_loss = -1.0;
  for (size_t i = 0; i < grid.size(); ++i) {
    const double* row = ld.data() + static_cast<int64_t>(i) * k;
    double mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - mx);
    const double loss = mx + std::log(sum) - row[label];
    if (loss > best_loss) {
      best_loss = loss;
      best = i;
    }
  }
  return candidates[best];
}

Tensor gaussian_noise(const Tensor& x, double eps, uint64_t seed,
                      ValueRange range) {
  if (eps < 0.0) {
    throw std::invalid_argument("gaussian_noise: eps must be nonnegative");
  }
  if (eps == 0.0) return x.clone();
  Tensor out = x.clone();
  Rng rng(derive_seed(seed, 0x67617573 /* "gaus" */));
  const double hi = range_max(range);
  for (double& v : out.data()) v = clip(v + eps * rng.normal(), hi);
  return out;
}

namespace {

// Severity tables, monotone in severity.
constexpr double kNoiseSigma[5] = {0.04, 0.06, 0.08, 0.09, 0.10};
constexpr int kBlurRadius[5] = {1, 2, 3, 4, 6};
constexpr double kFogIntensity[5] = {0.1, 0.2, 0.3, 0.4, 0.5};
constexpr double kContrastFactor[5] = {0.75, 0.6, 0.45, 0.3, 0.2};

/// Normalized disk kernel of the given radius.
std::vector<double> disk_kernel(int radius, int& side) {
  side = 2 * radius + 1;
  std::vector<double> k(static_cast<size_t>(side) * side, 0.0);
  double total = 0.0;
  for (int y = -radius; y <= radius; ++y) {
    for (int x = -radius; x <= radius; ++x) {
      if (y * y + x * x <= radius * radius) {
        k[static_cast<size_t>((y + radius) * side + (x + radius))] = 1.0;
        total += 1.0;
      }
    }
  }
  for (double& v : k) v /= total;
  return k;
}

uint64_t content_hash(const Tensor& x) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : x.data()) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h ^= bits;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Tensor corrupt(const Tensor& x, const CorruptionSpec& spec, ValueRange range) {
  if (spec.severity < 1 || spec.severity > 5) {
    throw std::invalid_argument("corrupt: severity must be in 1..5, got " +
                                std::to_string(spec.severity));
  }
  if (x.rank() != 3) {
    throw std::invalid_argument("corrupt: expected (h,w,c) image");
  }
  const size_t s = static_cast<size_t>(spec.severity - 1);
  const double hi = range_max(range);

  switch (spec.kind) {
    case CorruptionKind::gaussian_noise_c: {
      // Noise pattern is a deterministic function of the image content and
      // severity, so corrupt() stays a pure function.
      const uint64_t seed = derive_seed(content_hash(x), 0xc0 + s);
      return gaussian_noise(x, kNoiseSigma[s] * hi, seed, range);
    }
    case CorruptionKind::defocus_blur: {
      int side = 0;
      const std::vector<double> kernel = disk_kernel(kBlurRadius[s], side);
      const int radius = kBlurRadius[s];
      const int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
      Tensor out = Tensor::zeros(x.shape());
      auto src = x.data();
      auto dst = out.data();
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t xx = 0; xx < w; ++xx) {
          for (int64_t ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (int ky = -radius; ky <= radius; ++ky) {
              const int64_t sy = y + ky;
              if (sy < 0 || sy >= h) continue;
              for (int kx = -radius; kx <= radius; ++kx) {
                const int64_t sx = xx + kx;
                if (sx < 0 || sx >= w) continue;
                const double kv = kernel[static_cast<size_t>(
                    (ky + radius) * side + (kx + radius))];
                if (kv == 0.0) continue;
                acc += kv * src[static_cast<size_t>((sy * w + sx) * c + ch)];
              }
            }
            dst[static_cast<size_t>((y * w + xx) * c + ch)] = clip(acc, hi);
          }
        }
      }
      return out;
    }
    case CorruptionKind::fog: {
      const double i = kFogIntensity[s];
      Tensor out = x.clone();
      for (double& v : out.data()) v = clip((1.0 - i) * v + i * hi, hi);
      return out;
    }
    case CorruptionKind::contrast: {
      const double f = kContrastFactor[s];
      double mean = 0.0;
      for (double v : x.data()) mean += v;
      mean /= static_cast<double>(x.size());
      Tensor out = x.clone();
      for (double& v : out.data()) v = clip(mean + f * (v - mean), hi);
      return out;
    }
  }
  throw std::invalid_argument("corrupt: unknown corruption kind");
}

// ---------------------------------------------------------------------------
// Dataset-level wrappers

namespace {

template <typename Fn>
Dataset map_images(const Dataset& ds, Fn&& fn) {
  const int64_t px = ds.height() * ds.width() * ds.channels();
  std::vector<double> data;
  data.reserve(static_cast<size_t>(ds.size() * px));
  for (int64_t i = 0; i < ds.size(); ++i) {
    Tensor out = fn(ds.image(i), i);
    auto d = out.data();
    data.insert(data.end(), d.begin(), d.end());
  }
  Dataset result = ds;
  result.images = Tensor(ds.images.shape(), std::move(data));
  return result;
}

}  // namespace

Dataset fgsm_dataset(Model& model, const Dataset& ds, double eps) {
  return map_images(ds, [&](Tensor img, int64_t i) {
    return fgsm(model, img, ds.labels[static_cast<size_t>(i)], eps,
                ds.value_range);
  });
}

Dataset spatial_dataset(Model& model, const Dataset& ds,
                        const SpatialParams& params, uint64_t seed) {
  return map_images(ds, [&](Tensor img, int64_t i) {
    return spatial_attack(model, img, ds.labels[static_cast<size_t>(i)], params,
                          derive_seed(seed, static_cast<uint64_t>(i)),
                          ds.value_range);
  });
}

Dataset gaussian_dataset(const Dataset& ds, double eps, uint64_t seed) {
  return map_images(ds, [&](Tensor img, int64_t i) {
    return gaussian_noise(img, eps, derive_seed(seed, static_cast<uint64_t>(i)),
                          ds.value_range);
  });
}

Dataset corrupt_dataset(const Dataset& ds, const CorruptionSpec& spec) {
  return map_images(ds, [&](Tensor img, int64_t) {
    return corrupt(img, spec, ds.value_range);
  });
}

}  // namespace ofit
