// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <boost/multiprecision/cpp_int.hpp>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tofa/random.hpp"

namespace tofa {

enum class Activation { kRelu, kHardSwish };

std::string_view to_string(Activation act);

struct StemSpec {
  std::vector<int> width_choices;
  int kernel = 3;
  int stride = 2;
  Activation act = Activation::kHardSwish;
};

/// One searched stage of inverted-residual layers. Kernel and expansion are
/// chosen once per stage and shared by all of its layers; only the first
/// layer carries the stage stride.
struct StageSpec {
  std::string name;
  std::vector<int> width_choices;
  std::vector<int> depth_choices;
  std::vector<int> kernel_choices;
  std::vector<int> expansion_choices;
  bool use_se = false;
  int stride = 1;
  Activation act = Activation::kRelu;
};

/// Final 1x1 expansion (skipped when expansion is 1), global average pool,
/// fully-connected projection to the head width, then the classifier.
struct HeadSpec {
  std::vector<int> width_choices;
  int expansion = 1;
  Activation act = Activation::kHardSwish;
};

struct SearchSpace {
  std::string name;
  std::vector<int> resolution_choices;
  int input_channels = 3;
  int default_classes = 10;
  StemSpec stem;
  std::vector<StageSpec> stages;
  HeadSpec head;
  std::optional<std::uint64_t> flops_min;
  std::optional<std::uint64_t> flops_max;
  /// Profile text this space was parsed from (embedded into checkpoints).
  std::string source_text;
};

struct StageChoice {
  int width = 0;
  int depth = 0;
  int kernel = 0;
  int expansion = 0;
  auto operator<=>(const StageChoice&) const = default;
};

/// One point of the architecture space.
struct SubnetConfig {
  int resolution = 0;
  int stem_width = 0;
  std::vector<StageChoice> stages;
  int head_width = 0;
  auto operator<=>(const SubnetConfig&) const = default;
};

/// Parses profile text. Throws ParseError (with line number) on malformed
/// text and ValidationError naming the offending stage on invariant violations.
SearchSpace load_profile(std::string_view text);
SearchSpace load_profile_file(const std::filesystem::path& path);

/// "mbv3-large7" or "desk-small"; also accepts a path to a profile file.
SearchSpace bundled_profile(std::string_view name_or_path);
std::vector<std::string> bundled_profile_names();

void validate_space(const SearchSpace& space);

/// Throws ValidationError when any field is outside the space's choice sets.
void validate_config(const SearchSpace& space, const SubnetConfig& config);

/// Each dimension drawn independently and uniformly from its choice set.
SubnetConfig sample_uniform(const SearchSpace& space, Rng& rng);

enum class Anchor { kMin, kMax };
SubnetConfig anchor(const SearchSpace& space, Anchor which);

/// Stable, human-readable key, e.g. "res=32,stem=8,s1.width=12,...,head=64".
std::string encode(const SubnetConfig& config);
SubnetConfig decode(const SearchSpace& space, std::string_view key);

/// True when every dimension of `big` is >= the matching one of `small`.
bool dominates(const SubnetConfig& big, const SubnetConfig& small);

using BigInt = boost::multiprecision::cpp_int;

/// Exact product of the sizes of all independent choice dimensions.
BigInt count_configs(const SearchSpace& space);

/// Multiply-accumulate count of one single-image forward pass.
std::uint64_t flops(const SearchSpace& space, const SubnetConfig& config, int num_classes);
inline std::uint64_t flops(const SearchSpace& space, const SubnetConfig& config) {
  return flops(space, config, space.default_classes);
}

/// Trainable parameter count (conv/fc weights and biases, BN scale and shift).
std::uint64_t param_count(const SearchSpace& space, const SubnetConfig& config, int num_classes);
inline std::uint64_t param_count(const SearchSpace& space, const SubnetConfig& config) {
  return param_count(space, config, space.default_classes);
}

/// Hidden width of a squeeze-and-excitation branch over `channels` inputs.
inline int se_hidden(int channels) { return channels / 4 > 0 ? channels / 4 : 1; }

inline int conv_out_size(int in, int kernel, int stride) {
  return (in + 2 * (kernel / 2) - kernel) / stride + 1;
}

}  // namespace tofa
