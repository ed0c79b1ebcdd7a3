// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tofa/supernet.hpp"

namespace tofa {

/// Single-file checkpoint: magic "TOFACKP1", u64 manifest length, manifest
/// text, then the little-endian f32 payload. The manifest lists
///   meta <key> <value...>
///   tensor <name> <d0>x<d1>... <offset> <count>
/// and embeds the search-space profile between profile-begin/profile-end.
struct CheckpointMeta {
  std::string kind = "supernet";  // supernet | standalone
  std::string profile;
  std::string profile_text;
  int num_classes = 0;
  long iteration = 0;
  std::string rng_state;   // optional
  std::string config_key;  // standalone only
  std::map<std::string, std::string> extra;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<NamedParam> tensors;  // manifest order

  const Tensor* find(const std::string& name) const;
};

std::string encode_checkpoint(const CheckpointMeta& meta, const std::vector<NamedParam>& tensors);
/// Throws FormatError on bad magic, malformed manifest or a payload that does
/// not tile exactly.
Checkpoint decode_checkpoint(std::string_view bytes);

/// Writes through a temporary file and renames it into place.
void write_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                      const std::vector<NamedParam>& tensors);
Checkpoint read_checkpoint(const std::filesystem::path& path);

CheckpointMeta supernet_meta(const Supernet& net, long iteration);
void save_checkpoint(const Supernet& net, const std::filesystem::path& path, long iteration = 0,
                     const std::map<std::string, std::string>& extra = {});

/// Copies checkpoint tensors into `net`. Every tensor must match by name and
/// shape; with `reinit_head` the classifier may differ and is re-initialized
/// for net.num_classes() instead. Throws IncompatibleCheckpoint otherwise.
void load_into(Supernet& net, const Checkpoint& ckpt, bool reinit_head, Rng& rng);

/// Rebuilds the supernet described by the checkpoint (space from the embedded
/// profile). `num_classes` < 0 keeps the stored class count; a different
/// count requires reinit_head.
Supernet load_checkpoint(const std::filesystem::path& path, bool reinit_head = false,
                         int num_classes = -1, std::uint64_t head_seed = 0);

void save_standalone(const StandaloneNet& net, const SearchSpace& space,
                     const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra = {});

struct LoadedStandalone {
  SearchSpace space;
  StandaloneNet net;
  CheckpointMeta meta;
};
LoadedStandalone load_standalone(const std::filesystem::path& path);

}  // namespace tofa
