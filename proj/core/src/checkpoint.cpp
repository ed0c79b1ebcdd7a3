// SPDX-License-Identifier: Apache-2.0
#include "tofa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "tofa/error.hpp"

namespace tofa {

namespace {

constexpr char kMagic[] = "TOFACKP1";
constexpr std::size_t kMagicLen = 8;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(std::string_view s) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[static_cast<std::size_t>(i)]);
  return v;
}

void put_f32(std::string& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 4);
  char* dst = out.data() + start;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, values.data(), values.size() * 4);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b) dst[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
  }
}

void get_f32(const char* src, std::span<float> out) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), src, out.size() * 4);
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 3; b >= 0; --b) bits = (bits << 8) | static_cast<unsigned char>(src[i * 4 + b]);
      out[i] = std::bit_cast<float>(bits);
    }
  }
}

bool valid_token(const std::string& s) {
  if (s.empty()) return false;
  for (char ch : s) {
    if (ch == ' ' || ch == '\n' || ch == '\r' || ch == '\t') return false;
  }
  return true;
}

Shape parse_dims(const std::string& text) {
  Shape shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(part, &used);
      if (used != part.size() || v < 1) throw FormatError("");
      shape.push_back(v);
    } catch (const std::exception&) {
      throw FormatError("checkpoint: bad tensor shape '" + text + "'");
    }
  }
  if (shape.empty()) throw FormatError("checkpoint: empty tensor shape");
  return shape;
}

std::string dims_str(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t.tensor;
  }
  return nullptr;
}

std::string encode_checkpoint(const CheckpointMeta& meta, const std::vector<NamedParam>& tensors) {
  std::ostringstream m;
  m << "tofa-checkpoint 1\n";
  m << "meta kind " << meta.kind << "\n";
  m << "meta profile " << meta.profile << "\n";
  m << "meta num_classes " << meta.num_classes << "\n";
  m << "meta iteration " << meta.iteration << "\n";
  if (!meta.rng_state.empty()) m << "meta rng " << meta.rng_state << "\n";
  if (!meta.config_key.empty()) m << "meta config " << meta.config_key << "\n";
  for (const auto& [k, v] : meta.extra) {
    if (!valid_token(k) || v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint: metadata '" + k + "' is not a single-line key/value");
    }
    m << "meta x." << k << " " << v << "\n";
  }
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    if (!valid_token(t.name)) throw ContractError("checkpoint: bad tensor name '" + t.name + "'");
    m << "tensor " << t.name << " " << dims_str(t.tensor.shape()) << " " << offset << " "
      << t.tensor.numel() << "\n";
    offset += t.tensor.numel();
  }
  m << "profile-begin\n" << meta.profile_text;
  if (!meta.profile_text.empty() && meta.profile_text.back() != '\n') m << "\n";
  m << "profile-end\n";
  const std::string manifest = m.str();

  std::string out(kMagic, kMagicLen);
  put_u64(out, manifest.size());
  out += manifest;
  out.reserve(out.size() + offset * 4);
  for (const auto& t : tensors) put_f32(out, t.tensor.data());
  return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagicLen + 8 || bytes.substr(0, kMagicLen) != std::string_view(kMagic, kMagicLen)) {
    throw FormatError("checkpoint: bad magic");
  }
  const std::uint64_t mlen = get_u64(bytes.substr(kMagicLen, 8));
  if (mlen > bytes.size() - kMagicLen - 8) throw FormatError("checkpoint: truncated manifest");
  const std::string manifest(bytes.substr(kMagicLen + 8, mlen));
  const std::string_view blob = bytes.substr(kMagicLen + 8 + mlen);

  Checkpoint ck;
  std::istringstream in(manifest);
  std::string line;
  if (!std::getline(in, line) || line != "tofa-checkpoint 1") {
    throw FormatError("checkpoint: unsupported manifest header");
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset, count;
  };
  std::vector<Entry> entries;
  bool profile_closed = false;
  while (std::getline(in, line)) {
    if (line == "profile-begin") {
      std::string text;
      while (std::getline(in, line)) {
        if (line == "profile-end") {
          profile_closed = true;
          break;
        }
        text += line + "\n";
      }
      ck.meta.profile_text = text;
      break;
    }
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      try {
        if (key == "kind") ck.meta.kind = value;
        else if (key == "profile") ck.meta.profile = value;
        else if (key == "num_classes") ck.meta.num_classes = std::stoi(value);
        else if (key == "iteration") ck.meta.iteration = std::stol(value);
        else if (key == "rng") ck.meta.rng_state = value;
        else if (key == "config") ck.meta.config_key = value;
        else if (key.rfind("x.", 0) == 0) ck.meta.extra[key.substr(2)] = value;
        else throw FormatError("checkpoint: unknown metadata key '" + key + "'");
      } catch (const std::invalid_argument&) {
        throw FormatError("checkpoint: bad value for metadata '" + key + "'");
      } catch (const std::out_of_range&) {
        throw FormatError("checkpoint: bad value for metadata '" + key + "'");
      }
    } else if (tag == "tensor") {
      Entry e;
      std::string dims;
      if (!(ls >> e.name >> dims >> e.offset >> e.count)) {
        throw FormatError("checkpoint: malformed tensor line '" + line + "'");
      }
      e.shape = parse_dims(dims);
      if (shape_numel(e.shape) != e.count) {
        throw FormatError("checkpoint: tensor " + e.name + " count disagrees with its shape");
      }
      entries.push_back(std::move(e));
    } else {
      throw FormatError("checkpoint: unexpected manifest line '" + line + "'");
    }
  }
  if (!profile_closed) throw FormatError("checkpoint: manifest lacks an embedded profile");

  std::uint64_t expect = 0;
  for (const auto& e : entries) {
    if (e.offset != expect) throw FormatError("checkpoint: offsets of " + e.name + " do not tile");
    expect += e.count;
  }
  if (blob.size() != expect * 4) {
    throw FormatError("checkpoint: payload has " + std::to_string(blob.size()) + " bytes, manifest needs " +
                      std::to_string(expect * 4));
  }
  for (const auto& e : entries) {
    Tensor t(e.shape);
    get_f32(blob.data() + e.offset * 4, t.data());
    ck.tensors.push_back({e.name, t});
  }
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointMeta& meta,
                      const std::vector<NamedParam>& tensors) {
  const std::string bytes = encode_checkpoint(meta, tensors);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

CheckpointMeta supernet_meta(const Supernet& net, long iteration) {
  CheckpointMeta meta;
  meta.kind = "supernet";
  meta.profile = net.space().name;
  meta.profile_text = net.space().source_text;
  meta.num_classes = net.num_classes();
  meta.iteration = iteration;
  return meta;
}

void save_checkpoint(const Supernet& net, const std::filesystem::path& path, long iteration,
                     const std::map<std::string, std::string>& extra) {
  auto meta = supernet_meta(net, iteration);
  meta.extra = extra;
  write_checkpoint(path, meta, net.state());
}

namespace {

bool is_head_tensor(const std::string& name) { return name.rfind("head.classifier.", 0) == 0; }

}  // namespace

void load_into(Supernet& net, const Checkpoint& ckpt, bool reinit_head, Rng& rng) {
  auto state = net.state();
  bool head_mismatch = false;
  // Validate everything before touching the network.
  for (const auto& p : state) {
    const Tensor* src = ckpt.find(p.name);
    if (src && src->shape() == p.tensor.shape()) continue;
    if (reinit_head && is_head_tensor(p.name)) {
      head_mismatch = true;
      continue;
    }
    if (!src) throw IncompatibleCheckpoint("checkpoint lacks tensor " + p.name);
    throw IncompatibleCheckpoint("tensor " + p.name + " has shape " + shape_str(src->shape()) +
                                 " in the checkpoint but " + shape_str(p.tensor.shape()) +
                                 " in the network");
  }
  for (const auto& t : ckpt.tensors) {
    const bool known = std::any_of(state.begin(), state.end(),
                                   [&](const NamedParam& p) { return p.name == t.name; });
    if (!known && !(reinit_head && is_head_tensor(t.name))) {
      throw IncompatibleCheckpoint("checkpoint tensor " + t.name + " has no counterpart");
    }
  }
  for (auto& p : state) {
    if (reinit_head && is_head_tensor(p.name)) continue;
    const Tensor* src = ckpt.find(p.name);
    std::copy(src->data().begin(), src->data().end(), p.tensor.data().begin());
  }
  if (reinit_head || head_mismatch) net.reinit_classifier(net.num_classes(), rng);
}

Supernet load_checkpoint(const std::filesystem::path& path, bool reinit_head, int num_classes,
                         std::uint64_t head_seed) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.meta.kind != "supernet") {
    throw IncompatibleCheckpoint(path.string() + " holds a " + ck.meta.kind + ", not a supernet");
  }
  SearchSpace space = load_profile(ck.meta.profile_text);
  const int classes = num_classes < 0 ? ck.meta.num_classes : num_classes;
  if (classes != ck.meta.num_classes && !reinit_head) {
    throw IncompatibleCheckpoint("checkpoint has " + std::to_string(ck.meta.num_classes) +
                                 " classes; loading with " + std::to_string(classes) +
                                 " needs head re-initialization");
  }
  Rng rng = make_stream(head_seed, 0x4ead);
  Supernet net(std::move(space), classes, rng);
  load_into(net, ck, reinit_head, rng);
  return net;
}

void save_standalone(const StandaloneNet& net, const SearchSpace& space,
                     const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra) {
  CheckpointMeta meta;
  meta.kind = "standalone";
  meta.profile = space.name;
  meta.profile_text = space.source_text;
  meta.num_classes = net.num_classes();
  meta.config_key = encode(net.config());
  meta.extra = extra;
  write_checkpoint(path, meta, net.state());
}

LoadedStandalone load_standalone(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.meta.kind != "standalone") {
    throw IncompatibleCheckpoint(path.string() + " holds a " + ck.meta.kind + ", not a standalone net");
  }
  SearchSpace space = load_profile(ck.meta.profile_text);
  const SubnetConfig cfg = decode(space, ck.meta.config_key);
  std::map<std::string, Tensor> tensors;
  for (const auto& t : ck.tensors) tensors.emplace(t.name, t.tensor);
  StandaloneNet net = standalone_from_state(space, cfg, ck.meta.num_classes, tensors);
  return {std::move(space), std::move(net), ck.meta};
}

}  // namespace tofa
