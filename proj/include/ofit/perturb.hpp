#pragma once

#include <cstdint>
#include <vector>

#include "ofit/data.hpp"
#include "ofit/nn.hpp"
#include "ofit/tensor.hpp"

namespace ofit {

/// Strength of a single-step input attack, in the dataset's value-range
/// units (an eps of 2.55 on byte data matches 0.01 on unit data).
struct AttackParams {
  double epsilon = 0.0;
};

enum class SpatialMode { worst_case, random };

/// Budget for the shift-and-rotate attack: up to `alpha` pixels of shift in
/// each direction and `alpha` degrees of rotation, searched on a grid.
struct SpatialParams {
  double alpha = 0.0;
  int shift_step = 1;
  double angle_step = 1.0;
  SpatialMode mode = SpatialMode::worst_case;
};

enum class CorruptionKind { gaussian_noise_c, defocus_blur, fog, contrast };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise_c;
  int severity = 1;  // 1..5
};

const char* corruption_kind_name(CorruptionKind kind);

/// x_adv = clip(x + eps * sign(dL/dx)); sign(0) = 0. x: (h,w,c).
Tensor fgsm(Model& model, const Tensor& x, int label, double eps,
            ValueRange range);

/// One transformed image from the shift/rotation grid: the loss maximizer
/// in worst_case mode (ties to the first candidate in scan order), or a
/// uniform draw in random mode. Needs only forward access to the model.
Tensor spatial_attack(Model& model, const Tensor& x, int label,
                      const SpatialParams& params, uint64_t seed,
                      ValueRange range);

/// The (dy, dx, angle) grid scanned by spatial_attack, in scan order.
struct SpatialCandidate {
  int dy = 0;
  int dx = 0;
  double angle = 0.0;
};
std::vector<SpatialCandidate> spatial_grid(const SpatialParams& params);

/// x' = clip(x + eps * n), n ~ N(0, I) per pixel, seeded.
Tensor gaussian_noise(const Tensor& x, double eps, uint64_t seed,
                      ValueRange range);

/// Deterministic severity-parameterized corruption, clipped to the range.
Tensor corrupt(const Tensor& x, const CorruptionSpec& spec, ValueRange range);

// Dataset-level wrappers. Labels stay the originals, so evaluating the
// result measures the adversarial error complement directly.
Dataset fgsm_dataset(Model& model, const Dataset& ds, double eps);
Dataset spatial_dataset(Model& model, const Dataset& ds,
                        const SpatialParams& params, uint64_t seed);
Dataset gaussian_dataset(const Dataset& ds, double eps, uint64_t seed);
Dataset corrupt_dataset(const Dataset& ds, const CorruptionSpec& spec);

}  // namespace ofit
