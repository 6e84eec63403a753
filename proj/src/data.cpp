#include "ofit/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "ofit/common.hpp"

namespace ofit {

Tensor Dataset::image(int64_t i) const {
  if (i < 0 || i >= size()) {
    throw std::out_of_range("Dataset::image: index " + std::to_string(i) +
                            " out of range for m=" + std::to_string(size()));
  }
  const int64_t px = height() * width() * channels();
  auto src = images.data().subspan(static_cast<size_t>(i * px),
                                   static_cast<size_t>(px));
  return Tensor({height(), width(), channels()}, {src.begin(), src.end()});
}

void Dataset::validate() const {
  if (!images.defined() || images.rank() != 4 || size() < 1) {
    throw DataError("Dataset: images must be a nonempty (m,h,w,c) tensor");
  }
  if (static_cast<int64_t>(labels.size()) != size()) {
    throw DataError("Dataset: " + std::to_string(labels.size()) +
                    " labels for m=" + std::to_string(size()));
  }
  if (num_classes < 1) throw DataError("Dataset: num_classes must be >= 1");
  for (int l : labels) {
    if (l < 0 || l >= num_classes) {
      throw DataError("Dataset: label " + std::to_string(l) +
                      " outside [0," + std::to_string(num_classes) + ")");
    }
  }
  const double hi = range_max(value_range);
  for (double v : images.data()) {
    if (!(v >= 0.0 && v <= hi)) {
      throw DataError("Dataset: pixel value " + std::to_string(v) +
                      " outside declared range [0," + std::to_string(hi) + "]");
    }
  }
}

int64_t NoiseMask::flip_count() const {
  return std::count(flipped.begin(), flipped.end(), true);
}

// ---------------------------------------------------------------------------
// Loaders

namespace {

constexpr uint32_t kIdxImagesMagic = 0x00000803;
constexpr uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

uint32_t read_u32_be(const std::vector<unsigned char>& buf, size_t off,
                     const std::string& path) {
  if (off + 4 > buf.size()) throw DataError("truncated file: " + path);
  return (static_cast<uint32_t>(buf[off]) << 24) |
         (static_cast<uint32_t>(buf[off + 1]) << 16) |
         (static_cast<uint32_t>(buf[off + 2]) << 8) |
         static_cast<uint32_t>(buf[off + 3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  if (read_u32_be(img, 0, images_path) != kIdxImagesMagic) {
    throw DataError("bad IDX image magic in " + images_path);
  }
  if (read_u32_be(lab, 0, labels_path) != kIdxLabelsMagic) {
    throw DataError("bad IDX label magic in " + labels_path);
  }
  const uint32_t m_img = read_u32_be(img, 4, images_path);
  const uint32_t rows = read_u32_be(img, 8, images_path);
  const uint32_t cols = read_u32_be(img, 12, images_path);
  const uint32_t m_lab = read_u32_be(lab, 4, labels_path);
  if (m_img != m_lab) {
    throw DataError("IDX count mismatch: " + std::to_string(m_img) +
                    " images vs " + std::to_string(m_lab) + " labels");
  }
  const size_t px = static_cast<size_t>(m_img) * rows * cols;
  if (img.size() != 16 + px) throw DataError("truncated file: " + images_path);
  if (lab.size() != 8 + m_lab) throw DataError("truncated file: " + labels_path);

  std::vector<double> data(px);
  for (size_t i = 0; i < px; ++i) data[i] = static_cast<double>(img[16 + i]);
  std::vector<int> labels(m_lab);
  for (size_t i = 0; i < m_lab; ++i) {
    labels[i] = static_cast<int>(lab[8 + i]);
    if (labels[i] >= 10) {
      throw DataError("IDX label " + std::to_string(labels[i]) +
                      " outside [0,10) in " + labels_path);
    }
  }
  Dataset ds;
  ds.images = Tensor({static_cast<int64_t>(m_img), static_cast<int64_t>(rows),
                      static_cast<int64_t>(cols), 1},
                     std::move(data));
  ds.labels = std::move(labels);
  ds.num_classes = 10;
  ds.value_range = ValueRange::byte;
  ds.role = SplitRole::train;
  ds.name = images_path;
  return ds;
}

Dataset load_cifar_binary(const std::vector<std::string>& paths) {
  constexpr size_t kRecord = 3073;  // 1 label byte + 3*1024 planar pixels
  constexpr int64_t kSide = 32;
  std::vector<double> data;
  std::vector<int> labels;
  for (const std::string& path : paths) {
    const auto buf = read_file(path);
    if (buf.empty() || buf.size() % kRecord != 0) {
      throw DataError("CIFAR file length " + std::to_string(buf.size()) +
                      " is not a multiple of 3073: " + path);
    }
    const size_t count = buf.size() / kRecord;
    for (size_t r = 0; r < count; ++r) {
      const unsigned char* rec = buf.data() + r * kRecord;
      const int label = static_cast<int>(rec[0]);
      if (label >= 10) {
        throw DataError("CIFAR label " + std::to_string(label) +
                        " outside [0,10) in " + path);
      }
      labels.push_back(label);
      // Planar RGB -> interleaved (h,w,c).
      const unsigned char* planes = rec + 1;
      for (int64_t p = 0; p < kSide * kSide; ++p) {
        data.push_back(static_cast<double>(planes[p]));
        data.push_back(static_cast<double>(planes[1024 + p]));
        data.push_back(static_cast<double>(planes[2048 + p]));
      }
    }
  }
  if (labels.empty()) throw DataError("load_cifar_binary: no input records");
  Dataset ds;
  ds.images = Tensor({static_cast<int64_t>(labels.size()), kSide, kSide, 3},
                     std::move(data));
  ds.labels = std::move(labels);
  ds.num_classes = 10;
  ds.value_range = ValueRange::byte;
  ds.role = SplitRole::train;
  ds.name = paths.front();
  return ds;
}

Dataset synth_blobs(int classes, int per_class, int image_side, uint64_t seed,
                    double jitter) {
  if (classes < 2) throw std::invalid_argument("synth_blobs: classes must be >= 2");
  if (per_class < 1) throw std::invalid_argument("synth_blobs: per_class must be >= 1");
  if (image_side < 4) throw std::invalid_argument("synth_blobs: image_side must be >= 4");
  if (jitter < 0.0) throw std::invalid_argument("synth_blobs: jitter must be >= 0");

  const int64_t px = static_cast<int64_t>(image_side) * image_side;
  std::vector<std::vector<double>> means(static_cast<size_t>(classes));
  for (int k = 0; k < classes; ++k) {
    Rng rng(derive_seed(seed, 0x6d65616e /* "mean" */, static_cast<uint64_t>(k)));
    auto& m = means[static_cast<size_t>(k)];
    m.resize(static_cast<size_t>(px));
    for (double& v : m) v = rng.uniform(0.2, 0.8);
  }

  std::vector<double> data;
  data.reserve(static_cast<size_t>(classes) * per_class * px);
  std::vector<int> labels;
  labels.reserve(static_cast<size_t>(classes) * per_class);
  for (int k = 0; k < classes; ++k) {
    Rng rng(derive_seed(seed, 0x6a697474 /* "jitt" */, static_cast<uint64_t>(k)));
    for (int s = 0; s < per_class; ++s) {
      for (int64_t p = 0; p < px; ++p) {
        double v = means[static_cast<size_t>(k)][static_cast<size_t>(p)] +
                   jitter * rng.normal();
        data.push_back(std::clamp(v, 0.0, 1.0));
      }
      labels.push_back(k);
    }
  }
  Dataset ds;
  ds.images = Tensor({static_cast<int64_t>(labels.size()), image_side,
                      image_side, 1},
                     std::move(data));
  ds.labels = std::move(labels);
  ds.num_classes = classes;
  ds.value_range = ValueRange::unit;
  ds.role = SplitRole::train;
  ds.name = "synth_blobs";
  return ds;
}

Dataset take(const Dataset& ds, const std::vector<int64_t>& indices) {
  if (indices.empty()) throw DataError("take: empty selection");
  const int64_t px = ds.height() * ds.width() * ds.channels();
  std::vector<double> data;
  data.reserve(indices.size() * static_cast<size_t>(px));
  std::vector<int> labels;
  labels.reserve(indices.size());
  auto src = ds.images.data();
  for (int64_t i : indices) {
    if (i < 0 || i >= ds.size()) {
      throw std::out_of_range("take: index " + std::to_string(i));
    }
    auto row = src.subspan(static_cast<size_t>(i * px), static_cast<size_t>(px));
    data.insert(data.end(), row.begin(), row.end());
    labels.push_back(ds.labels[static_cast<size_t>(i)]);
  }
  Dataset out = ds;
  out.images = Tensor({static_cast<int64_t>(indices.size()), ds.height(),
                       ds.width(), ds.channels()},
                      std::move(data));
  out.labels = std::move(labels);
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction,
                                  uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("split: train_fraction must be in (0,1), got " +
                                std::to_string(train_fraction));
  }
  const int64_t m = ds.size();
  const int64_t n_train = std::llround(train_fraction * static_cast<double>(m));
  if (n_train < 1 || n_train >= m) {
    throw std::invalid_argument("split: fraction " + std::to_string(train_fraction) +
                                " would leave an empty subset for m=" +
                                std::to_string(m));
  }
  std::vector<int64_t> idx(static_cast<size_t>(m));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 0x73706c69 /* "spli" */));
  rng.shuffle(idx);

  std::vector<int64_t> train_idx(idx.begin(), idx.begin() + n_train);
  std::vector<int64_t> val_idx(idx.begin() + n_train, idx.end());
  Dataset train = take(ds, train_idx);
  train.role = SplitRole::train;
  Dataset val = take(ds, val_idx);
  val.role = SplitRole::validation;
  return {std::move(train), std::move(val)};
}

Dataset subsample(const Dataset& ds, int64_t count, uint64_t seed) {
  const int64_t m = ds.size();
  if (count < 1 || count > m) {
    throw std::invalid_argument("subsample: count " + std::to_string(count) +
                                " out of range for m=" + std::to_string(m));
  }
  if (count == m) {
    std::vector<int64_t> all(static_cast<size_t>(m));
    std::iota(all.begin(), all.end(), 0);
    return take(ds, all);
  }
  // Stratified: proportional per-class allocation, largest remainder.
  std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(ds.num_classes));
  for (int64_t i = 0; i < m; ++i) {
    by_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);
  }
  std::vector<int64_t> alloc(by_class.size(), 0);
  std::vector<std::pair<double, size_t>> remainders;
  int64_t assigned = 0;
  for (size_t k = 0; k < by_class.size(); ++k) {
    const double exact = static_cast<double>(count) *
                         static_cast<double>(by_class[k].size()) /
                         static_cast<double>(m);
    alloc[k] = static_cast<int64_t>(std::floor(exact));
    assigned += alloc[k];
    remainders.push_back({exact - std::floor(exact), k});
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (size_t i = 0; assigned < count; ++i) {
    const size_t k = remainders[i % remainders.size()].second;
    if (alloc[k] < static_cast<int64_t>(by_class[k].size())) {
      ++alloc[k];
      ++assigned;
    }
  }
  Rng rng(derive_seed(seed, 0x73756273 /* "subs" */));
  std::vector<int64_t> chosen;
  for (size_t k = 0; k < by_class.size(); ++k) {
    if (alloc[k] == 0) continue;
    auto pick = rng.sample_without_replacement(
        static_cast<int64_t>(by_class[k].size()), alloc[k]);
    for (int64_t p : pick) chosen.push_back(by_class[k][static_cast<size_t>(p)]);
  }
  std::sort(chosen.begin(), chosen.end());
  return take(ds, chosen);
}

// ---------------------------------------------------------------------------
// Image transforms

Tensor shift_image(const Tensor& image, int dy, int dx) {
  const int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out = Tensor::zeros(image.shape());
  auto src = image.data();
  auto dst = out.data();
  for (int64_t y = 0; y < h; ++y) {
    const int64_t sy = y - dy;
    if (sy < 0 || sy >= h) continue;
    for (int64_t x = 0; x < w; ++x) {
      const int64_t sx = x - dx;
      if (sx < 0 || sx >= w) continue;
      for (int64_t ch = 0; ch < c; ++ch) {
        dst[static_cast<size_t>((y * w + x) * c + ch)] =
            src[static_cast<size_t>((sy * w + sx) * c + ch)];
      }
    }
  }
  return out;
}

Tensor rotate_image(const Tensor& image, double degrees) {
  if (degrees == 0.0) return image.clone();
  const int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const double rad = degrees * M_PI / 180.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cosr = std::cos(rad), sinr = std::sin(rad);
  Tensor out = Tensor::zeros(image.shape());
  auto src = image.data();
  auto dst = out.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      // Inverse mapping with bilinear interpolation, zero outside.
      const double ry = static_cast<double>(y) - cy;
      const double rx = static_cast<double>(x) - cx;
      const double sy = cy + (-sinr * rx + cosr * ry);
      const double sx = cx + (cosr * rx + sinr * ry);
      const int64_t y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t x0 = static_cast<int64_t>(std::floor(sx));
      const double fy = sy - static_cast<double>(y0);
      const double fx = sx - static_cast<double>(x0);
      for (int64_t ch = 0; ch < c; ++ch) {
        auto at = [&](int64_t yy, int64_t xx) -> double {
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
          return src[static_cast<size_t>((yy * w + xx) * c + ch)];
        };
        const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        dst[static_cast<size_t>((y * w + x) * c + ch)] = v;
      }
    }
  }
  return out;
}

Tensor hflip_image(const Tensor& image) {
  const int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out = Tensor::zeros(image.shape());
  auto src = image.data();
  auto dst = out.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t ch = 0; ch < c; ++ch) {
        dst[static_cast<size_t>((y * w + x) * c + ch)] =
            src[static_cast<size_t>((y * w + (w - 1 - x)) * c + ch)];
      }
    }
  }
  return out;
}

namespace {

Tensor clip_to_range(Tensor t, ValueRange range) {
  const double hi = range_max(range);
  for (double& v : t.data()) v = std::clamp(v, 0.0, hi);
  return t;
}

}  // namespace

Tensor shift_rotate(const Tensor& image, int dy, int dx, double degrees,
                    ValueRange range) {
  Tensor out = (dy == 0 && dx == 0) ? image.clone() : shift_image(image, dy, dx);
  if (degrees != 0.0) out = rotate_image(out, degrees);
  return clip_to_range(std::move(out), range);
}

Tensor augment(const Tensor& image, const AugmentParams& params, uint64_t seed,
               ValueRange range) {
  if (image.rank() != 3) {
    throw std::invalid_argument("augment: expected (h,w,c) image, got " +
                                shape_to_string(image.shape()));
  }
  Rng rng(seed);
  // Fixed draw order: dy, dx, angle, flip.
  const int dy = params.max_shift > 0
                     ? static_cast<int>(rng.uniform_int(-params.max_shift,
                                                        params.max_shift))
                     : 0;
  const int dx = params.max_shift > 0
                     ? static_cast<int>(rng.uniform_int(-params.max_shift,
                                                        params.max_shift))
                     : 0;
  const double angle = params.max_rotate > 0.0
                           ? rng.uniform(-params.max_rotate, params.max_rotate)
                           : 0.0;
  const bool flip = params.flip_prob > 0.0 && rng.bernoulli(params.flip_prob);

  Tensor out = shift_rotate(image, dy, dx, angle, range);
  if (flip) out = hflip_image(out);
  return clip_to_range(std::move(out), range);
}

std::pair<Dataset, NoiseMask> inject_label_noise(const Dataset& ds, double rate,
                                                 uint64_t seed) {
  if (ds.num_classes < 2) {
    throw std::invalid_argument(
        "inject_label_noise: no false label exists for num_classes=" +
        std::to_string(ds.num_classes));
  }
  if (rate < 0.0 || rate > 1.0) {
    throw std::invalid_argument("inject_label_noise: rate must be in [0,1]");
  }
  const int64_t m = ds.size();
  // Round-half-up of rate*m.
  const int64_t flips = static_cast<int64_t>(
      std::floor(rate * static_cast<double>(m) + 0.5));

  NoiseMask mask;
  mask.flipped.assign(static_cast<size_t>(m), false);
  mask.original_labels = ds.labels;

  Dataset noised = ds;  // shares image storage; labels copied below
  noised.labels = ds.labels;

  Rng rng(derive_seed(seed, 0x6e6f6973 /* "nois" */));
  const auto chosen = rng.sample_without_replacement(m, flips);
  for (int64_t i : chosen) {
    const int original = ds.labels[static_cast<size_t>(i)];
    // Uniform over the K-1 labels different from the original.
    int64_t draw = rng.uniform_int(0, ds.num_classes - 2);
    int replacement = static_cast<int>(draw);
    if (replacement >= original) ++replacement;
    noised.labels[static_cast<size_t>(i)] = replacement;
    mask.flipped[static_cast<size_t>(i)] = true;
  }
  return {std::move(noised), std::move(mask)};
}

}  // namespace ofit
