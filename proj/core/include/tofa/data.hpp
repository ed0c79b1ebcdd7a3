// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tofa/random.hpp"
#include "tofa/tensor.hpp"

namespace tofa {

/// Images stored HWC as unsigned bytes; label -1 marks an unlabeled sample.
struct Dataset {
  std::string name;
  int height = 0;
  int width = 0;
  int channels = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::int16_t> labels;

  int size() const { return static_cast<int>(labels.size()); }
  std::size_t image_bytes() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  const std::uint8_t* image(int i) const { return pixels.data() + image_bytes() * static_cast<std::size_t>(i); }
  Dataset subset(std::span<const int> indices) const;
  std::vector<int> class_counts() const;
};

/// Throws ValidationError on an empty set, inconsistent sizes or labels
/// outside {-1} and [0, num_classes).
void validate_dataset(const Dataset& ds);

/// TDS1 (little-endian): "TDS1", u32 N, u16 H, u16 W, u8 C, u8 pad,
/// u16 num_classes, then N records of [i16 label][H*W*C bytes].
std::string encode_tds(const Dataset& ds);
Dataset decode_tds(std::string_view bytes, std::string name = {});
void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// Reads CIFAR-10 ([label][3072]) or CIFAR-100 ([coarse][fine][3072]) binary
/// batches; fine labels are used for CIFAR-100. Images are resampled when
/// `size` differs from 32.
Dataset import_cifar(const std::vector<std::filesystem::path>& files, int num_classes, int size = 32);

/// What separates the classes of a synthetic set: blob scale, or blob
/// elongation at a random scale.
enum class SynthTask { kScale, kShape };

struct SynthOptions {
  int num_classes = 4;
  int size = 16;
  int n = 2400;
  std::uint64_t seed = 0;
  SynthTask task = SynthTask::kScale;
};

std::string_view to_string(SynthTask t);
/// scale | shape
SynthTask parse_synth_task(std::string_view text);

/// Gaussian-blob textures. Under kScale every class draws blobs at its own
/// characteristic scale and density; under kShape at its own elongation.
/// Colors, orientation, background and noise are random.
/// Class counts are balanced (n / num_classes each, remainder to the first).
Dataset make_synthetic(const SynthOptions& opt);

/// Exactly per_class labeled samples per class drawn without replacement; the
/// remainder becomes unlabeled (labels erased to -1).
std::pair<Dataset, Dataset> split_labeled(const Dataset& ds, int per_class, std::uint64_t seed);

/// Per-channel mean/std of pixel values scaled to [0, 1].
struct Normalization {
  std::vector<float> mean;
  std::vector<float> stddev;
};
Normalization compute_normalization(const Dataset& ds);
std::string encode_normalization(const Normalization& norm);
Normalization decode_normalization(std::string_view text);

struct WeakParams {
  bool flip = false;
  float crop_x = 0.0f, crop_y = 0.0f;  // top-left of the crop, source pixels
  float crop_w = 0.0f, crop_h = 0.0f;  // zero means the full image
  float brightness = 1.0f;
  float contrast = 1.0f;
};

enum class StrongOp {
  kPosterize,
  kSolarize,
  kRotate,
  kShear,
  kTranslate,
  kContrast,
  kBrightness,
  kSharpness,
  kCutout,
};
inline constexpr int kNumStrongOps = 9;

struct StrongStep {
  StrongOp op;
  float magnitude;  // op-specific, see sample_strong_params
  float aux0 = 0.0f, aux1 = 0.0f;
};

/// Horizontal flip p = 0.5, random crop of 70-100% area resized back,
/// brightness and contrast factors in [0.8, 1.2].
WeakParams sample_weak_params(int height, int width, Rng& rng);
/// Two ops drawn from the fixed policy list with random magnitudes.
std::array<StrongStep, 2> sample_strong_params(Rng& rng);

/// Writes the CHW float view of `img` at target x target into `out`.
void apply_weak(const std::uint8_t* img, int height, int width, int channels, const WeakParams& p,
                int target, const Normalization& norm, float* out);
void apply_strong(const std::uint8_t* img, int height, int width, int channels,
                  const WeakParams& weak, const std::array<StrongStep, 2>& steps, int target,
                  const Normalization& norm, float* out);

/// Tensor [C, target, target] wrappers.
Tensor weak_augment(const Dataset& ds, int index, Rng& rng, int target, const Normalization& norm);
Tensor strong_augment(const Dataset& ds, int index, Rng& rng, int target, const Normalization& norm);
/// Plain resize plus standardization.
Tensor plain_view(const Dataset& ds, int index, int target, const Normalization& norm);

/// Bilinear resize of an NCHW batch (identity when the size already matches).
Tensor resize_batch(const Tensor& batch, int target);

/// Cycles over a fixed index set forever, reshuffling at every pass.
class BatchStream {
 public:
  BatchStream(std::vector<int> indices, int batch_size, std::uint64_t seed);
  std::vector<int> next_indices();
  long cycles() const { return cycles_; }
  int batch_size() const { return batch_size_; }

 private:
  void reshuffle();
  std::vector<int> order_;
  std::size_t cursor_ = 0;
  int batch_size_;
  long cycles_ = 0;
  Rng rng_;
};

struct LabeledBatch {
  Tensor images;  // weak views, NCHW
  std::vector<int> labels;
};

struct UnlabeledBatch {
  Tensor weak;
  Tensor strong;  // same underlying images, same order
};

LabeledBatch make_labeled_batch(const Dataset& ds, std::span<const int> indices, Rng& aug_rng,
                                int target, const Normalization& norm);
UnlabeledBatch make_unlabeled_batch(const Dataset& ds, std::span<const int> indices, Rng& aug_rng,
                                    int target, const Normalization& norm);
/// Plain views of ds[begin, end).
Tensor make_eval_batch(const Dataset& ds, int begin, int end, int target, const Normalization& norm);
/// Plain views of the listed samples.
Tensor make_plain_batch(const Dataset& ds, std::span<const int> indices, int target,
                        const Normalization& norm);

}  // namespace tofa
