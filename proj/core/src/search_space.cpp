// SPDX-License-Identifier: Apache-2.0
#include "tofa/search_space.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "tofa/error.hpp"

namespace tofa {

// Generated from profiles/ at configure time.
std::string_view bundled_profile_text(std::string_view name);
std::vector<std::string> bundled_profile_list();

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_values(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ' ' || ch == '\t' || ch == ',') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

long long parse_int(std::string_view s, int line) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ParseError("expected integer, got '" + std::string(s) + "'", line);
  }
  return v;
}

std::vector<int> parse_int_list(std::string_view s, int line) {
  std::vector<int> out;
  for (const auto& tok : split_values(s)) out.push_back(static_cast<int>(parse_int(tok, line)));
  if (out.empty()) throw ParseError("empty value list", line);
  return out;
}

int parse_single(std::string_view s, int line) {
  const auto v = parse_int_list(s, line);
  if (v.size() != 1) throw ParseError("expected a single integer", line);
  return v[0];
}

bool parse_bool(std::string_view s, int line) {
  const std::string v = trim(s);
  if (v == "yes" || v == "true" || v == "1") return true;
  if (v == "no" || v == "false" || v == "0") return false;
  throw ParseError("expected yes/no, got '" + v + "'", line);
}

Activation parse_act(std::string_view s, int line) {
  const std::string v = trim(s);
  if (v == "relu") return Activation::kRelu;
  if (v == "hswish" || v == "hardswish") return Activation::kHardSwish;
  throw ParseError("unknown activation '" + v + "'", line);
}

void check_choices(const std::vector<int>& v, const std::string& where, const char* what) {
  if (v.empty()) throw ValidationError(where + ": empty " + what + " choices");
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 1) throw ValidationError(where + ": non-positive " + what + " choice");
    if (i > 0 && v[i] <= v[i - 1]) {
      throw ValidationError(where + ": " + what + " choices not strictly increasing");
    }
  }
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

std::string_view to_string(Activation act) {
  return act == Activation::kRelu ? "relu" : "hswish";
}

SearchSpace load_profile(std::string_view text) {
  SearchSpace space;
  space.source_text = std::string(text);
  enum class Section { kTop, kStem, kStage, kHead } section = Section::kTop;
  std::map<std::string, int> seen;  // duplicate-key detection per section
  bool has_stem = false, has_head = false;

  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", line_no);
      const auto words = split_values(line.substr(1, line.size() - 2));
      if (words.empty()) throw ParseError("empty section header", line_no);
      seen.clear();
      if (words[0] == "stem" && words.size() == 1) {
        if (has_stem) throw ParseError("duplicate [stem]", line_no);
        section = Section::kStem;
        has_stem = true;
      } else if (words[0] == "head" && words.size() == 1) {
        if (has_head) throw ParseError("duplicate [head]", line_no);
        section = Section::kHead;
        has_head = true;
      } else if (words[0] == "stage" && words.size() <= 2) {
        section = Section::kStage;
        space.stages.emplace_back();
        space.stages.back().name =
            words.size() == 2 ? words[1] : "stage" + std::to_string(space.stages.size());
      } else {
        throw ParseError("unknown section '" + line + "'", line_no);
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key.empty()) throw ParseError("empty key", line_no);
    if (seen[key]++) throw ParseError("duplicate key '" + key + "'", line_no);

    switch (section) {
      case Section::kTop:
        if (key == "name") {
          space.name = value;
        } else if (key == "resolutions") {
          space.resolution_choices = parse_int_list(value, line_no);
        } else if (key == "input_channels") {
          space.input_channels = parse_single(value, line_no);
        } else if (key == "classes") {
          space.default_classes = parse_single(value, line_no);
        } else if (key == "flops_min") {
          space.flops_min = static_cast<std::uint64_t>(parse_int(value, line_no));
        } else if (key == "flops_max") {
          space.flops_max = static_cast<std::uint64_t>(parse_int(value, line_no));
        } else {
          throw ParseError("unknown top-level key '" + key + "'", line_no);
        }
        break;
      case Section::kStem:
        if (key == "width") {
          space.stem.width_choices = parse_int_list(value, line_no);
        } else if (key == "kernel") {
          space.stem.kernel = parse_single(value, line_no);
        } else if (key == "stride") {
          space.stem.stride = parse_single(value, line_no);
        } else if (key == "act") {
          space.stem.act = parse_act(value, line_no);
        } else {
          throw ParseError("unknown stem key '" + key + "'", line_no);
        }
        break;
      case Section::kStage: {
        auto& st = space.stages.back();
        if (key == "width") {
          st.width_choices = parse_int_list(value, line_no);
        } else if (key == "depth") {
          st.depth_choices = parse_int_list(value, line_no);
        } else if (key == "kernel") {
          st.kernel_choices = parse_int_list(value, line_no);
        } else if (key == "expansion") {
          st.expansion_choices = parse_int_list(value, line_no);
        } else if (key == "se") {
          st.use_se = parse_bool(value, line_no);
        } else if (key == "stride") {
          st.stride = parse_single(value, line_no);
        } else if (key == "act") {
          st.act = parse_act(value, line_no);
        } else {
          throw ParseError("unknown stage key '" + key + "'", line_no);
        }
        break;
      }
      case Section::kHead:
        if (key == "width") {
          space.head.width_choices = parse_int_list(value, line_no);
        } else if (key == "expansion") {
          space.head.expansion = parse_single(value, line_no);
        } else if (key == "act") {
          space.head.act = parse_act(value, line_no);
        } else {
          throw ParseError("unknown head key '" + key + "'", line_no);
        }
        break;
    }
  }
  if (!has_stem) throw ValidationError("profile has no [stem] section");
  if (!has_head) throw ValidationError("profile has no [head] section");
  validate_space(space);
  return space;
}

SearchSpace load_profile_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open profile " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return load_profile(ss.str());
}

SearchSpace bundled_profile(std::string_view name_or_path) {
  const auto text = bundled_profile_text(name_or_path);
  if (!text.empty()) return load_profile(text);
  if (std::filesystem::exists(name_or_path)) return load_profile_file(name_or_path);
  throw Error("unknown profile '" + std::string(name_or_path) + "'");
}

std::vector<std::string> bundled_profile_names() { return bundled_profile_list(); }

void validate_space(const SearchSpace& space) {
  if (space.name.empty()) throw ValidationError("profile has no name");
  check_choices(space.resolution_choices, "resolutions", "resolution");
  if (space.input_channels < 1) throw ValidationError("input_channels must be positive");
  if (space.default_classes < 2) throw ValidationError("classes must be at least 2");
  check_choices(space.stem.width_choices, "stem", "width");
  if (space.stem.kernel < 1 || space.stem.kernel % 2 == 0) {
    throw ValidationError("stem: kernel must be odd");
  }
  if (space.stem.stride != 1 && space.stem.stride != 2) throw ValidationError("stem: stride must be 1 or 2");
  if (space.stages.empty()) throw ValidationError("profile has an empty stages list");
  for (const auto& st : space.stages) {
    const std::string where = "stage " + st.name;
    check_choices(st.width_choices, where, "width");
    check_choices(st.depth_choices, where, "depth");
    check_choices(st.kernel_choices, where, "kernel");
    check_choices(st.expansion_choices, where, "expansion");
    for (int k : st.kernel_choices) {
      if (k % 2 == 0) throw ValidationError(where + ": kernel choices must be odd");
    }
    if (st.stride != 1 && st.stride != 2) throw ValidationError(where + ": stride must be 1 or 2");
  }
  check_choices(space.head.width_choices, "head", "width");
  if (space.head.expansion < 1) throw ValidationError("head: expansion must be positive");
  if (space.flops_min || space.flops_max) {
    const auto lo = flops(space, anchor(space, Anchor::kMin));
    const auto hi = flops(space, anchor(space, Anchor::kMax));
    if (space.flops_min && lo < *space.flops_min) {
      throw ValidationError("minimal configuration has " + std::to_string(lo) +
                            " MACs, below flops_min " + std::to_string(*space.flops_min));
    }
    if (space.flops_max && hi > *space.flops_max) {
      throw ValidationError("maximal configuration has " + std::to_string(hi) +
                            " MACs, above flops_max " + std::to_string(*space.flops_max));
    }
  }
}

void validate_config(const SearchSpace& space, const SubnetConfig& c) {
  if (!contains(space.resolution_choices, c.resolution)) {
    throw ValidationError("resolution " + std::to_string(c.resolution) + " not in space");
  }
  if (!contains(space.stem.width_choices, c.stem_width)) {
    throw ValidationError("stem width " + std::to_string(c.stem_width) + " not in space");
  }
  if (!contains(space.head.width_choices, c.head_width)) {
    throw ValidationError("head width " + std::to_string(c.head_width) + " not in space");
  }
  if (c.stages.size() != space.stages.size()) {
    throw ValidationError("config has " + std::to_string(c.stages.size()) + " stages, space has " +
                          std::to_string(space.stages.size()));
  }
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const auto& st = space.stages[i];
    const auto& ch = c.stages[i];
    const std::string where = "stage " + st.name + ": ";
    if (!contains(st.width_choices, ch.width)) throw ValidationError(where + "width not in space");
    if (!contains(st.depth_choices, ch.depth)) throw ValidationError(where + "depth not in space");
    if (!contains(st.kernel_choices, ch.kernel)) throw ValidationError(where + "kernel not in space");
    if (!contains(st.expansion_choices, ch.expansion)) {
      throw ValidationError(where + "expansion not in space");
    }
  }
}

namespace {

int pick(const std::vector<int>& choices, Rng& rng) {
  return choices[static_cast<std::size_t>(uniform_index(rng, choices.size()))];
}

}  // namespace

SubnetConfig sample_uniform(const SearchSpace& space, Rng& rng) {
  SubnetConfig c;
  c.resolution = pick(space.resolution_choices, rng);
  c.stem_width = pick(space.stem.width_choices, rng);
  for (const auto& st : space.stages) {
    StageChoice ch;
    ch.width = pick(st.width_choices, rng);
    ch.depth = pick(st.depth_choices, rng);
    ch.kernel = pick(st.kernel_choices, rng);
    ch.expansion = pick(st.expansion_choices, rng);
    c.stages.push_back(ch);
  }
  c.head_width = pick(space.head.width_choices, rng);
  return c;
}

SubnetConfig anchor(const SearchSpace& space, Anchor which) {
  const auto sel = [which](const std::vector<int>& v) {
    return which == Anchor::kMin ? v.front() : v.back();
  };
  SubnetConfig c;
  c.resolution = sel(space.resolution_choices);
  c.stem_width = sel(space.stem.width_choices);
  for (const auto& st : space.stages) {
    c.stages.push_back({sel(st.width_choices), sel(st.depth_choices), sel(st.kernel_choices),
                        sel(st.expansion_choices)});
  }
  c.head_width = sel(space.head.width_choices);
  return c;
}

std::string encode(const SubnetConfig& c) {
  std::string s = "res=" + std::to_string(c.resolution) + ",stem=" + std::to_string(c.stem_width);
  for (std::size_t i = 0; i < c.stages.size(); ++i) {
    const std::string p = ",s" + std::to_string(i + 1) + ".";
    const auto& st = c.stages[i];
    s += p + "width=" + std::to_string(st.width);
    s += p + "depth=" + std::to_string(st.depth);
    s += p + "kernel=" + std::to_string(st.kernel);
    s += p + "expansion=" + std::to_string(st.expansion);
  }
  s += ",head=" + std::to_string(c.head_width);
  return s;
}

SubnetConfig decode(const SearchSpace& space, std::string_view key) {
  SubnetConfig c;
  c.stages.resize(space.stages.size());
  std::map<std::string, bool> seen;
  std::size_t pos = 0;
  while (pos <= key.size()) {
    auto end = key.find(',', pos);
    if (end == std::string_view::npos) end = key.size();
    const std::string_view tok = key.substr(pos, end - pos);
    pos = end + 1;
    if (tok.empty()) throw ValidationError("empty field in config key");
    const auto eq = tok.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError("config field '" + std::string(tok) + "' has no value");
    }
    const std::string name(tok.substr(0, eq));
    const std::string_view vs = tok.substr(eq + 1);
    int value = 0;
    auto [p, ec] = std::from_chars(vs.data(), vs.data() + vs.size(), value);
    if (ec != std::errc() || p != vs.data() + vs.size()) {
      throw ValidationError("config field '" + name + "' has non-integer value");
    }
    if (seen[name]) throw ValidationError("config field '" + name + "' repeated");
    seen[name] = true;
    if (name == "res") {
      c.resolution = value;
    } else if (name == "stem") {
      c.stem_width = value;
    } else if (name == "head") {
      c.head_width = value;
    } else if (name.size() > 1 && name[0] == 's' && name.find('.') != std::string::npos) {
      const auto dot = name.find('.');
      int idx = 0;
      auto [q, ec2] = std::from_chars(name.data() + 1, name.data() + dot, idx);
      if (ec2 != std::errc() || q != name.data() + dot || idx < 1 ||
          idx > static_cast<int>(space.stages.size())) {
        throw ValidationError("unknown config field '" + name + "'");
      }
      const std::string field = name.substr(dot + 1);
      auto& st = c.stages[static_cast<std::size_t>(idx - 1)];
      if (field == "width") {
        st.width = value;
      } else if (field == "depth") {
        st.depth = value;
      } else if (field == "kernel") {
        st.kernel = value;
      } else if (field == "expansion") {
        st.expansion = value;
      } else {
        throw ValidationError("unknown config field '" + name + "'");
      }
    } else {
      throw ValidationError("unknown config field '" + name + "'");
    }
    if (end == key.size()) break;
  }
  const std::size_t expected = 3 + 4 * space.stages.size();
  if (seen.size() != expected) {
    throw ValidationError("config key has " + std::to_string(seen.size()) + " fields, expected " +
                          std::to_string(expected));
  }
  validate_config(space, c);
  return c;
}

bool dominates(const SubnetConfig& big, const SubnetConfig& small) {
  if (big.stages.size() != small.stages.size()) return false;
  if (big.resolution < small.resolution || big.stem_width < small.stem_width ||
      big.head_width < small.head_width) {
    return false;
  }
  for (std::size_t i = 0; i < big.stages.size(); ++i) {
    const auto& b = big.stages[i];
    const auto& s = small.stages[i];
    if (b.width < s.width || b.depth < s.depth || b.kernel < s.kernel || b.expansion < s.expansion) {
      return false;
    }
  }
  return true;
}

BigInt count_configs(const SearchSpace& space) {
  BigInt n = space.resolution_choices.size();
  n *= space.stem.width_choices.size();
  n *= space.head.width_choices.size();
  for (const auto& st : space.stages) {
    n *= st.width_choices.size();
    n *= st.depth_choices.size();
    n *= st.kernel_choices.size();
    n *= st.expansion_choices.size();
  }
  return n;
}

namespace {

struct Cost {
  std::uint64_t macs = 0;
  std::uint64_t params = 0;
};

// Walks the network once, accumulating MACs and parameters layer by layer.
Cost network_cost(const SearchSpace& space, const SubnetConfig& c, int num_classes) {
  validate_config(space, c);
  if (num_classes < 1) throw ValidationError("num_classes must be positive");
  Cost cost;
  auto conv = [&cost](int hw_out, int k, int cin_per_group, int cout) {
    cost.macs += static_cast<std::uint64_t>(hw_out) * hw_out * k * k * cin_per_group * cout;
    cost.params += static_cast<std::uint64_t>(k) * k * cin_per_group * cout;
  };
  auto bn = [&cost](int ch) { cost.params += 2ull * ch; };
  auto fc = [&cost](int in, int out) {
    cost.macs += static_cast<std::uint64_t>(in) * out;
    cost.params += static_cast<std::uint64_t>(in) * out + out;
  };

  int hw = conv_out_size(c.resolution, space.stem.kernel, space.stem.stride);
  int cin = c.stem_width;
  conv(hw, space.stem.kernel, space.input_channels, cin);
  bn(cin);
  for (std::size_t s = 0; s < space.stages.size(); ++s) {
    const auto& def = space.stages[s];
    const auto& ch = c.stages[s];
    for (int layer = 0; layer < ch.depth; ++layer) {
      const int stride = layer == 0 ? def.stride : 1;
      const int mid = cin * ch.expansion;
      if (ch.expansion > 1) {
        conv(hw, 1, cin, mid);
        bn(mid);
      }
      const int hw_out = conv_out_size(hw, ch.kernel, stride);
      conv(hw_out, ch.kernel, 1, mid);
      bn(mid);
      if (def.use_se) {
        fc(mid, se_hidden(mid));
        fc(se_hidden(mid), mid);
      }
      conv(hw_out, 1, mid, ch.width);
      bn(ch.width);
      hw = hw_out;
      cin = ch.width;
    }
  }
  int feat = cin;
  if (space.head.expansion > 1) {
    feat = cin * space.head.expansion;
    conv(hw, 1, cin, feat);
    bn(feat);
  }
  fc(feat, c.head_width);
  fc(c.head_width, num_classes);
  return cost;
}

}  // namespace

std::uint64_t flops(const SearchSpace& space, const SubnetConfig& config, int num_classes) {
  return network_cost(space, config, num_classes).macs;
}

std::uint64_t param_count(const SearchSpace& space, const SubnetConfig& config, int num_classes) {
  return network_cost(space, config, num_classes).params;
}

}  // namespace tofa
