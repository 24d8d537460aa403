#include "lrdb/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "json.hpp"

#include "lrdb/errors.hpp"
#include "lrdb/io.hpp"

namespace lrdb {

namespace {

std::uint8_t quantize(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

bool is_identity(const AugmentDraw& d) { return d.dy == 4 && d.dx == 4 && !d.flip; }

}  // namespace

Image Dataset::image(Index i) const {
  Image out(kImageValues);
  auto bytes = image_bytes(i);
  for (Index k = 0; k < kImageValues; ++k) out[static_cast<std::size_t>(k)] = static_cast<float>(bytes[k]) / 255.0f;
  return out;
}

void Dataset::push_back(int label, const Image& image) {
  if (label < 0 || label >= kNumClasses) throw ContractError("label " + std::to_string(label) + " out of range");
  if (static_cast<Index>(image.size()) != kImageValues) throw ShapeError("image must hold 3x32x32 values");
  labels.push_back(static_cast<std::uint8_t>(label));
  for (float v : image) pixels.push_back(quantize(v));
}

Dataset Dataset::subset(Index count) const {
  if (count < 0 || count >= size()) return *this;
  Dataset out;
  out.labels.assign(labels.begin(), labels.begin() + count);
  out.pixels.assign(pixels.begin(), pixels.begin() + count * kImageValues);
  return out;
}

Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() % kRecordBytes != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kRecordBytes;
    throw FormatError(source + ": truncated record at byte offset " + std::to_string(offset) + " (length " +
                      std::to_string(bytes.size()) + " is not a multiple of 3073)");
  }
  Dataset out;
  const std::size_t records = bytes.size() / kRecordBytes;
  out.labels.reserve(records);
  out.pixels.reserve(records * kImageValues);
  for (std::size_t r = 0; r < records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kRecordBytes;
    if (rec[0] >= kNumClasses) {
      throw FormatError(source + ": record " + std::to_string(r) + " has label byte " + std::to_string(rec[0]));
    }
    out.labels.push_back(rec[0]);
    out.pixels.insert(out.pixels.end(), rec + 1, rec + kRecordBytes);
  }
  return out;
}

Dataset load_cifar_binary(const std::vector<std::filesystem::path>& paths) {
  Dataset out;
  for (const auto& path : paths) {
    Dataset part = parse_cifar_binary(read_file(path), path.string());
    out.labels.insert(out.labels.end(), part.labels.begin(), part.labels.end());
    out.pixels.insert(out.pixels.end(), part.pixels.begin(), part.pixels.end());
  }
  return out;
}

std::vector<std::uint8_t> to_cifar_binary(const Dataset& data) {
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(data.size() * kRecordBytes));
  for (Index i = 0; i < data.size(); ++i) {
    out.push_back(data.labels[static_cast<std::size_t>(i)]);
    auto img = data.image_bytes(i);
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

void write_cifar_binary(const Dataset& data, const std::filesystem::path& path) {
  write_file_atomic(path, to_cifar_binary(data));
}

std::string dataset_fingerprint(const Dataset& data) { return hex64(fnv1a(to_cifar_binary(data))); }

void DegradeConfig::validate() const {
  if (target_res != 32 && target_res != 16 && target_res != 8) {
    throw ValidationError("resolution must be 32, 16 or 8, got " + std::to_string(target_res));
  }
  if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) {
    throw ValidationError("noise sigma must be a nonnegative number");
  }
}

double cubic_weight(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

Image box_downsample(const Image& image, int res) {
  const int factor = static_cast<int>(kImageSide) / res;
  Image out(static_cast<std::size_t>(3 * res * res));
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < res; ++x) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy) {
          for (int dx = 0; dx < factor; ++dx) {
            acc += image[static_cast<std::size_t>(c * kImagePlane + (y * factor + dy) * kImageSide + x * factor + dx)];
          }
        }
        out[static_cast<std::size_t>((c * res + y) * res + x)] = static_cast<float>(acc / (factor * factor));
      }
    }
  }
  return out;
}

Image bicubic_upsample(const Image& small, int res) {
  const int side = static_cast<int>(kImageSide);
  // taps and weights along one axis, shared by rows and columns
  std::vector<std::array<int, 4>> taps(static_cast<std::size_t>(side));
  std::vector<std::array<double, 4>> weights(static_cast<std::size_t>(side));
  for (int o = 0; o < side; ++o) {
    const double src = (o + 0.5) * res / side - 0.5;
    const int base = static_cast<int>(std::floor(src));
    for (int k = 0; k < 4; ++k) {
      const int pos = base - 1 + k;
      taps[static_cast<std::size_t>(o)][static_cast<std::size_t>(k)] = std::clamp(pos, 0, res - 1);
      weights[static_cast<std::size_t>(o)][static_cast<std::size_t>(k)] = cubic_weight(src - pos);
    }
  }
  Image out(static_cast<std::size_t>(kImageValues));
  std::vector<double> rows(static_cast<std::size_t>(res * side));
  for (int c = 0; c < 3; ++c) {
    const float* plane = small.data() + c * res * res;
    for (int y = 0; y < res; ++y) {
      for (int x = 0; x < side; ++x) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += weights[x][k] * plane[y * res + taps[x][k]];
        rows[static_cast<std::size_t>(y * side + x)] = acc;
      }
    }
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        double acc = 0.0;
        for (int k = 0; k < 4; ++k) acc += weights[y][k] * rows[static_cast<std::size_t>(taps[y][k] * side + x)];
        out[static_cast<std::size_t>(c * kImagePlane + y * side + x)] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Image degrade(const Image& image, const DegradeConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  if (cfg.identity()) return image;
  Image out = cfg.target_res == kImageSide ? image : bicubic_upsample(box_downsample(image, cfg.target_res), cfg.target_res);
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (auto& v : out) v = static_cast<float>(v + noise(rng));
  }
  for (auto& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

Image degrade(const Image& image, const DegradeConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  return degrade(image, cfg, rng);
}

Dataset degrade_dataset(const Dataset& data, const DegradeConfig& cfg, std::uint64_t stream) {
  cfg.validate();
  if (cfg.identity()) return data;
  Dataset out;
  const std::uint64_t base = mix_seed(cfg.seed, stream);
  for (Index i = 0; i < data.size(); ++i) {
    std::mt19937_64 rng(mix_seed(base, static_cast<std::uint64_t>(i)));
    out.push_back(data.label(i), degrade(data.image(i), cfg, rng));
  }
  return out;
}

AugmentDraw draw_augment(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> offset(0, 8);
  std::bernoulli_distribution coin(0.5);
  AugmentDraw d;
  d.dy = offset(rng);
  d.dx = offset(rng);
  d.flip = coin(rng);
  return d;
}

Image apply_augment(const Image& image, const AugmentDraw& draw) {
  const int side = static_cast<int>(kImageSide);
  Image out(static_cast<std::size_t>(kImageValues), 0.0f);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < side; ++y) {
      const int sy = y + draw.dy - 4;
      if (sy < 0 || sy >= side) continue;
      for (int x = 0; x < side; ++x) {
        const int sx = (draw.flip ? side - 1 - x : x) + draw.dx - 4;
        if (sx < 0 || sx >= side) continue;
        out[static_cast<std::size_t>(c * kImagePlane + y * side + x)] =
            image[static_cast<std::size_t>(c * kImagePlane + sy * side + sx)];
      }
    }
  }
  return out;
}

Image augment(const Image& image, std::mt19937_64& rng) { return apply_augment(image, draw_augment(rng)); }

NormStats compute_norm_stats(const Dataset& train) {
  if (train.size() == 0) throw ContractError("normalization statistics need a nonempty split");
  NormStats stats;
  // the float levels Dataset::image produces
  std::array<double, 256> level{};
  for (int b = 0; b < 256; ++b) level[static_cast<std::size_t>(b)] = static_cast<float>(b) / 255.0f;
  const double count = static_cast<double>(train.size() * kImagePlane);
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (Index i = 0; i < train.size(); ++i) {
      auto img = train.image_bytes(i);
      for (Index k = 0; k < kImagePlane; ++k) sum += level[img[c * kImagePlane + k]];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (Index i = 0; i < train.size(); ++i) {
      auto img = train.image_bytes(i);
      for (Index k = 0; k < kImagePlane; ++k) {
        const double d = level[img[c * kImagePlane + k]] - mean;
        sq += d * d;
      }
    }
    stats.mean[c] = mean;
    stats.std[c] = std::max(std::sqrt(sq / count), kMinStd);
  }
  stats.fingerprint = dataset_fingerprint(train);
  return stats;
}

void normalize(Image& image, const NormStats& stats) {
  for (int c = 0; c < 3; ++c) {
    for (Index k = 0; k < kImagePlane; ++k) {
      float& v = image[static_cast<std::size_t>(c * kImagePlane + k)];
      v = static_cast<float>((v - stats.mean[c]) / stats.std[c]);
    }
  }
}

BatchSampler::BatchSampler(Index dataset_size, const BatchOptions& options) : size_(dataset_size), options_(options) {
  if (options.batch_size < 1) throw ContractError("batch size must be at least 1");
  if (options.batch_size > dataset_size) {
    throw ContractError("batch size " + std::to_string(options.batch_size) + " exceeds dataset size " +
                        std::to_string(dataset_size));
  }
  order_.resize(static_cast<std::size_t>(size_));
  begin_epoch();
}

void BatchSampler::begin_epoch() {
  ++epoch_;
  cursor_ = 0;
  std::iota(order_.begin(), order_.end(), Index{0});
  if (options_.mode == Mode::train) {
    std::mt19937_64 rng(mix_seed(options_.seed, static_cast<std::uint64_t>(2 * epoch_)));
    std::shuffle(order_.begin(), order_.end(), rng);
    augment_rng_.seed(mix_seed(options_.seed, static_cast<std::uint64_t>(2 * epoch_ + 1)));
  }
}

Index BatchSampler::batches_per_epoch() const {
  const Index b = options_.batch_size;
  return options_.mode == Mode::train ? size_ / b : (size_ + b - 1) / b;
}

bool BatchSampler::next(std::vector<Sample>& batch) {
  batch.clear();
  Index take = options_.batch_size;
  if (options_.mode == Mode::train) {
    if (cursor_ + take > size_) begin_epoch();
  } else {
    if (cursor_ >= size_) return false;
    take = std::min(take, size_ - cursor_);
  }
  const bool augment = options_.mode == Mode::train && options_.augment;
  for (Index k = 0; k < take; ++k) {
    Sample s;
    s.index = order_[static_cast<std::size_t>(cursor_ + k)];
    if (augment) s.draw = draw_augment(augment_rng_);
    batch.push_back(s);
  }
  cursor_ += take;
  return true;
}

template <typename Scalar>
Batch<Scalar> gather_batch(const Dataset& data, const NormStats& stats, std::span<const Sample> samples) {
  const Index b = static_cast<Index>(samples.size());
  Batch<Scalar> out;
  out.images = make_tensor<Scalar>(Shape{b, 3, kImageSide, kImageSide});
  out.labels = make_tensor<Scalar>(Shape{b, kNumClasses});
  for (Index k = 0; k < b; ++k) {
    const Sample& s = samples[static_cast<std::size_t>(k)];
    Image img = data.image(s.index);
    if (!is_identity(s.draw)) img = apply_augment(img, s.draw);
    normalize(img, stats);
    std::copy(img.begin(), img.end(), out.images->data() + k * kImageValues);
    (*out.labels)[k * kNumClasses + data.label(s.index)] = Scalar(1);
    out.indices.push_back(s.index);
  }
  return out;
}

template <typename Scalar>
BatchIterator<Scalar>::BatchIterator(const Dataset& data, NormStats stats, const BatchOptions& options)
    : data_(data), stats_(std::move(stats)), sampler_(data.size(), options) {}

template <typename Scalar>
bool BatchIterator<Scalar>::next(Batch<Scalar>& batch) {
  if (!sampler_.next(samples_)) return false;
  batch = gather_batch<Scalar>(data_, stats_, samples_);
  return true;
}

template <typename Scalar>
PairedBatchIterator<Scalar>::PairedBatchIterator(const Dataset& hr, NormStats hr_stats, const Dataset& lr,
                                                 NormStats lr_stats, const BatchOptions& options)
    : hr_(hr), lr_(lr), hr_stats_(std::move(hr_stats)), lr_stats_(std::move(lr_stats)), sampler_(hr.size(), options) {
  if (hr.size() != lr.size() || hr.labels != lr.labels) {
    throw ContractError("paired HR/LR datasets differ in size or labels (" + std::to_string(hr.size()) + " vs " +
                        std::to_string(lr.size()) + " records)");
  }
}

template <typename Scalar>
bool PairedBatchIterator<Scalar>::next(Batch<Scalar>& hr, Batch<Scalar>& lr) {
  if (!sampler_.next(samples_)) return false;
  hr = gather_batch<Scalar>(hr_, hr_stats_, samples_);
  lr = gather_batch<Scalar>(lr_, lr_stats_, samples_);
  return true;
}

template Batch<float> gather_batch<float>(const Dataset&, const NormStats&, std::span<const Sample>);
template Batch<double> gather_batch<double>(const Dataset&, const NormStats&, std::span<const Sample>);
template class BatchIterator<float>;
template class BatchIterator<double>;
template class PairedBatchIterator<float>;
template class PairedBatchIterator<double>;

void write_prepared_split(const std::filesystem::path& dir, const PreparedSplit& split) {
  std::filesystem::create_directories(dir);
  write_cifar_binary(split.data, dir / "images.bin");
  nlohmann::ordered_json j;
  j["count"] = split.data.size();
  j["mean"] = split.stats.mean;
  j["std"] = split.stats.std;
  j["fingerprint"] = split.stats.fingerprint;
  j["degrade"] = {{"resolution", split.degrade.target_res},
                  {"noise_sigma", split.degrade.noise_sigma},
                  {"interp", "bicubic"},
                  {"seed", split.degrade.seed}};
  write_file_atomic(dir / "stats.json", j.dump(2) + "\n");
}

PreparedSplit load_prepared_split(const std::filesystem::path& dir) {
  PreparedSplit out;
  const auto stats_path = dir / "stats.json";
  const auto bytes = read_file(stats_path);
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    out.stats.mean = j.at("mean").get<std::array<double, 3>>();
    out.stats.std = j.at("std").get<std::array<double, 3>>();
    out.stats.fingerprint = j.at("fingerprint").get<std::string>();
    const auto& d = j.at("degrade");
    out.degrade.target_res = d.at("resolution").get<int>();
    out.degrade.noise_sigma = d.at("noise_sigma").get<double>();
    out.degrade.seed = d.at("seed").get<std::uint64_t>();
    if (d.at("interp").get<std::string>() != "bicubic") throw FormatError("unknown interpolation");
    out.data = load_cifar_binary({dir / "images.bin"});
    if (j.at("count").get<Index>() != out.data.size()) {
      throw FormatError(stats_path.string() + ": count does not match images.bin");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(stats_path.string() + ": " + e.what());
  }
  for (double s : out.stats.std) {
    if (!(s > 0.0)) throw FormatError(stats_path.string() + ": std must be positive");
  }
  return out;
}

void prepare_dataset(const Dataset& train, const Dataset& test, const std::filesystem::path& out,
                     const PrepareOptions& options) {
  options.degrade.validate();
  PreparedSplit tr{degrade_dataset(train.subset(options.train_limit), options.degrade, 0), {}, options.degrade};
  PreparedSplit te{degrade_dataset(test.subset(options.test_limit), options.degrade, 1), {}, options.degrade};
  tr.stats = compute_norm_stats(tr.data);
  te.stats = tr.stats;
  write_prepared_split(out / "train", tr);
  write_prepared_split(out / "test", te);
}

void prepare_dataset(const std::filesystem::path& cifar_dir, const std::filesystem::path& out,
                     const PrepareOptions& options) {
  options.degrade.validate();
  std::vector<std::filesystem::path> train_files;
  for (int k = 1; k <= 5; ++k) train_files.push_back(cifar_dir / ("data_batch_" + std::to_string(k) + ".bin"));
  const auto test_file = cifar_dir / "test_batch.bin";
  for (const auto& f : train_files) {
    if (!std::filesystem::exists(f)) throw FormatError("missing CIFAR file " + f.string());
  }
  if (!std::filesystem::exists(test_file)) throw FormatError("missing CIFAR file " + test_file.string());
  prepare_dataset(load_cifar_binary(train_files), load_cifar_binary({test_file}), out, options);
}

Dataset make_synthetic_dataset(Index count, std::uint64_t seed) {
  // per class: stripe orientation, frequency and tint
  static constexpr std::array<std::array<double, 3>, kNumClasses> kTint{{{1.0, 0.3, 0.3},
                                                                         {0.3, 1.0, 0.3},
                                                                         {0.3, 0.3, 1.0},
                                                                         {1.0, 1.0, 0.3},
                                                                         {1.0, 0.3, 1.0},
                                                                         {0.3, 1.0, 1.0},
                                                                         {0.8, 0.6, 0.4},
                                                                         {0.4, 0.6, 0.8},
                                                                         {0.6, 0.8, 0.4},
                                                                         {0.7, 0.7, 0.7}}};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi), jitter(0.8, 1.2);
  std::normal_distribution<double> noise(0.0, 0.08);
  Dataset out;
  Image img(static_cast<std::size_t>(kImageValues));
  for (Index i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % kNumClasses);
    const double angle = label * std::numbers::pi / kNumClasses;
    const double freq = (2.0 + label % 3) * 2.0 * std::numbers::pi / kImageSide;
    const double ph = phase(rng), amp = 0.3 * jitter(rng);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int c = 0; c < 3; ++c) {
      for (Index y = 0; y < kImageSide; ++y) {
        for (Index x = 0; x < kImageSide; ++x) {
          const double wave = std::sin(freq * (ca * x + sa * y) + ph);
          const double v = 0.5 + amp * kTint[label][c] * wave + noise(rng);
          img[static_cast<std::size_t>(c * kImagePlane + y * kImageSide + x)] = static_cast<float>(v);
        }
      }
    }
    out.push_back(label, img);
  }
  return out;
}

void write_synthetic_cifar(const std::filesystem::path& dir, Index train_count, Index test_count, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  const Dataset train = make_synthetic_dataset(train_count, seed);
  Index begin = 0;
  for (int k = 1; k <= 5; ++k) {
    const Index end = train_count * k / 5;
    Dataset part;
    part.labels.assign(train.labels.begin() + begin, train.labels.begin() + end);
    part.pixels.assign(train.pixels.begin() + begin * kImageValues, train.pixels.begin() + end * kImageValues);
    write_cifar_binary(part, dir / ("data_batch_" + std::to_string(k) + ".bin"));
    begin = end;
  }
  write_cifar_binary(make_synthetic_dataset(test_count, mix_seed(seed, 1)), dir / "test_batch.bin");
}

}  // namespace lrdb
