#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ofit/tensor.hpp"

namespace ofit {

enum class ValueRange { unit, byte };

inline double range_max(ValueRange r) { return r == ValueRange::unit ? 1.0 : 255.0; }

enum class SplitRole { train, validation, test };

/// Images plus integer labels. Images are one (m,h,w,c) tensor; operations
/// in this module never mutate their inputs.
struct Dataset {
  Tensor images;            // (m, h, w, c)
  std::vector<int> labels;  // size m, values in [0, num_classes)
  int num_classes = 0;
  ValueRange value_range = ValueRange::unit;
  SplitRole role = SplitRole::train;
  std::string name;

  int64_t size() const { return images.defined() ? images.dim(0) : 0; }
  int64_t height() const { return images.dim(1); }
  int64_t width() const { return images.dim(2); }
  int64_t channels() const { return images.dim(3); }

  /// Copy of sample i as an (h,w,c) tensor.
  Tensor image(int64_t i) const;

  void validate() const;
};

/// Record of which labels a noise injection flipped.
struct NoiseMask {
  std::vector<bool> flipped;
  std::vector<int> original_labels;

  int64_t flip_count() const;
};

/// IDX (MNIST) reader; big-endian headers, byte pixels.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// CIFAR-10 binary batches: 3073-byte records, planar RGB converted to
/// interleaved.
Dataset load_cifar_binary(const std::vector<std::string>& paths);

/// Deterministic synthetic classification set: one seeded mean image per
/// class plus per-sample Gaussian pixel jitter, clipped to [0,1].
Dataset synth_blobs(int classes, int per_class, int image_side, uint64_t seed,
                    double jitter = 0.05);

/// Disjoint, exhaustive seeded split into (train, validation).
std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction,
                                  uint64_t seed);

/// Stratified sample without replacement; class proportions preserved
/// within one sample per class.
Dataset subsample(const Dataset& ds, int64_t count, uint64_t seed);

struct AugmentParams {
  int max_shift = 0;         // pixels, per axis
  double max_rotate = 0.0;   // degrees
  double flip_prob = 0.0;    // horizontal flip
};

/// Random shift, rotation, and horizontal flip of one (h,w,c) image,
/// clipped to `range`.
Tensor augment(const Tensor& image, const AugmentParams& params, uint64_t seed,
               ValueRange range);

/// Label-noise injector: exactly round(r*m) labels replaced by a uniformly
/// chosen different label. Images are shared, not copied.
std::pair<Dataset, NoiseMask> inject_label_noise(const Dataset& ds, double rate,
                                                 uint64_t seed);

// Deterministic image transforms shared by augmentation and the spatial
// attack. All operate on (h,w,c) tensors with zero fill.
Tensor shift_image(const Tensor& image, int dy, int dx);
Tensor rotate_image(const Tensor& image, double degrees);
Tensor hflip_image(const Tensor& image);
/// Shift then rotate, clipped to the value range; the spatial-attack
/// transform.
Tensor shift_rotate(const Tensor& image, int dy, int dx, double degrees,
                    ValueRange range);

/// Gathers the given sample indices into a new dataset (copies pixels).
Dataset take(const Dataset& ds, const std::vector<int64_t>& indices);

}  // namespace ofit
