#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lrdb/ops.hpp"
#include "lrdb/tensor.hpp"

namespace lrdb {

constexpr Index kImageSide = 32;
constexpr Index kImagePlane = kImageSide * kImageSide;
constexpr Index kImageValues = 3 * kImagePlane;
constexpr Index kRecordBytes = 1 + kImageValues;
constexpr int kNumClasses = 10;

/// 3x32x32 channel-major pixels in [0,1].
using Image = std::vector<float>;

/// CIFAR-10 records held as raw bytes.
struct Dataset {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // kImageValues bytes per record

  Index size() const { return static_cast<Index>(labels.size()); }
  int label(Index i) const { return labels[static_cast<std::size_t>(i)]; }
  std::span<const std::uint8_t> image_bytes(Index i) const {
    return std::span(pixels).subspan(static_cast<std::size_t>(i * kImageValues), kImageValues);
  }
  Image image(Index i) const;
  void push_back(int label, const Image& image);  // quantizes to bytes
  Dataset subset(Index count) const;              // first `count` records
};

/// FormatError with the byte offset of a torn record or the index of a bad label.
Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
Dataset load_cifar_binary(const std::vector<std::filesystem::path>& paths);
std::vector<std::uint8_t> to_cifar_binary(const Dataset& data);
void write_cifar_binary(const Dataset& data, const std::filesystem::path& path);

/// FNV-1a over the binary record stream.
std::string dataset_fingerprint(const Dataset& data);

enum class Interp { bicubic };

struct DegradeConfig {
  int target_res = 32;
  double noise_sigma = 0.02;
  Interp interp = Interp::bicubic;
  std::uint64_t seed = 0;

  void validate() const;
  bool identity() const { return target_res == kImageSide && noise_sigma == 0.0; }
  bool operator==(const DegradeConfig&) const = default;
};

/// Catmull-Rom kernel (a = -0.5).
double cubic_weight(double t);

/// Box average over factor x factor blocks; 3 x res x res result.
Image box_downsample(const Image& image, int res);
/// Separable bicubic resampling of a 3 x res x res image to 32x32, half-pixel centers, clamped edges.
Image bicubic_upsample(const Image& small, int res);

/// Downsample, bicubic upsample, Gaussian noise, clamp to [0,1].
Image degrade(const Image& image, const DegradeConfig& cfg, std::mt19937_64& rng);
Image degrade(const Image& image, const DegradeConfig& cfg);
/// Noise for record i is drawn from its own stream of cfg.seed (and `stream`).
Dataset degrade_dataset(const Dataset& data, const DegradeConfig& cfg, std::uint64_t stream = 0);

struct AugmentDraw {
  int dy = 4, dx = 4;  // crop origin in the padded 40x40 frame
  bool flip = false;
};

AugmentDraw draw_augment(std::mt19937_64& rng);
/// Zero-pad 4, crop at (dy, dx), optional horizontal flip.
Image apply_augment(const Image& image, const AugmentDraw& draw);
Image augment(const Image& image, std::mt19937_64& rng);

constexpr double kMinStd = 1e-6;

struct NormStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};
  std::string fingerprint;

  bool operator==(const NormStats&) const = default;
};

NormStats compute_norm_stats(const Dataset& train);
void normalize(Image& image, const NormStats& stats);

/// Indices and augmentation of one batch slot.
struct Sample {
  Index index = 0;
  AugmentDraw draw;
};

struct BatchOptions {
  Index batch_size = 128;
  std::uint64_t seed = 0;
  Mode mode = Mode::train;
  bool augment = true;  // train mode only
};

/// Seeded epoch-wise order. Train mode reshuffles each epoch, drops the last
/// partial batch and never runs dry; eval mode walks the data once in order.
class BatchSampler {
 public:
  BatchSampler(Index dataset_size, const BatchOptions& options);

  bool next(std::vector<Sample>& batch);
  Index batches_per_epoch() const;
  Index epoch() const { return epoch_; }

 private:
  void begin_epoch();

  Index size_;
  BatchOptions options_;
  Index epoch_ = -1;
  Index cursor_ = 0;
  std::vector<Index> order_;
  std::mt19937_64 augment_rng_;
};

template <typename Scalar>
struct Batch {
  TensorPtr<Scalar> images;  // [B,3,32,32], normalized
  TensorPtr<Scalar> labels;  // [B,10] one-hot
  std::vector<Index> indices;
};

template <typename Scalar>
Batch<Scalar> gather_batch(const Dataset& data, const NormStats& stats, std::span<const Sample> samples);

template <typename Scalar>
class BatchIterator {
 public:
  BatchIterator(const Dataset& data, NormStats stats, const BatchOptions& options);
  bool next(Batch<Scalar>& batch);
  Index batches_per_epoch() const { return sampler_.batches_per_epoch(); }
  Index epoch() const { return sampler_.epoch(); }

 private:
  const Dataset& data_;
  NormStats stats_;
  BatchSampler sampler_;
  std::vector<Sample> samples_;
};

/// HR and LR views of the same records, sharing order and augmentation.
template <typename Scalar>
class PairedBatchIterator {
 public:
  PairedBatchIterator(const Dataset& hr, NormStats hr_stats, const Dataset& lr, NormStats lr_stats,
                      const BatchOptions& options);
  bool next(Batch<Scalar>& hr, Batch<Scalar>& lr);
  Index batches_per_epoch() const { return sampler_.batches_per_epoch(); }
  Index epoch() const { return sampler_.epoch(); }

 private:
  const Dataset& hr_;
  const Dataset& lr_;
  NormStats hr_stats_, lr_stats_;
  BatchSampler sampler_;
  std::vector<Sample> samples_;
};

/// images.bin plus stats.json for one split.
struct PreparedSplit {
  Dataset data;
  NormStats stats;
  DegradeConfig degrade;
};

void write_prepared_split(const std::filesystem::path& dir, const PreparedSplit& split);
PreparedSplit load_prepared_split(const std::filesystem::path& dir);

struct PrepareOptions {
  DegradeConfig degrade;
  Index train_limit = -1;  // keep only the first N records; -1 keeps all
  Index test_limit = -1;
};

/// Reads data_batch_{1..5}.bin and test_batch.bin and writes `<out>/train` and
/// `<out>/test`. Both splits are normalized with the (degraded) train statistics.
void prepare_dataset(const std::filesystem::path& cifar_dir, const std::filesystem::path& out,
                     const PrepareOptions& options);
void prepare_dataset(const Dataset& train, const Dataset& test, const std::filesystem::path& out,
                     const PrepareOptions& options);

/// Class-conditional pattern images in CIFAR layout, for runs without the real data.
Dataset make_synthetic_dataset(Index count, std::uint64_t seed);
/// Writes a synthetic data_batch_1..5.bin / test_batch.bin set.
void write_synthetic_cifar(const std::filesystem::path& dir, Index train_count, Index test_count, std::uint64_t seed);

}  // namespace lrdb
