// SPDX-License-Identifier: Apache-2.0
#include "tofa/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "tofa/error.hpp"

namespace tofa {

Dataset Dataset::subset(std::span<const int> indices) const {
  Dataset out;
  out.name = name;
  out.height = height;
  out.width = width;
  out.channels = channels;
  out.num_classes = num_classes;
  const std::size_t ib = image_bytes();
  out.pixels.resize(ib * indices.size());
  out.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int i = indices[k];
    if (i < 0 || i >= size()) throw ContractError("subset index " + std::to_string(i) + " out of range");
    std::copy_n(image(i), ib, out.pixels.data() + ib * k);
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<int> Dataset::class_counts() const {
  std::vector<int> counts(static_cast<std::size_t>(std::max(num_classes, 0)), 0);
  for (auto y : labels) {
    if (y >= 0 && y < num_classes) ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

void validate_dataset(const Dataset& ds) {
  if (ds.size() < 1) throw ValidationError("dataset is empty");
  if (ds.height < 1 || ds.width < 1 || ds.channels < 1) {
    throw ValidationError("dataset images must have positive height, width and channels");
  }
  if (ds.num_classes < 1) throw ValidationError("dataset needs at least one class");
  if (ds.pixels.size() != ds.image_bytes() * ds.labels.size()) {
    throw ValidationError("dataset pixel buffer does not match its image count");
  }
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const int y = ds.labels[i];
    if (y != -1 && (y < 0 || y >= ds.num_classes)) {
      throw ValidationError("sample " + std::to_string(i) + " has label " + std::to_string(y) +
                            " but the dataset has " + std::to_string(ds.num_classes) + " classes");
    }
  }
}

// ---------------------------------------------------------------------------
// TDS files

namespace {

template <class T>
void put_le(std::string& out, T v) {
  auto u = static_cast<std::make_unsigned_t<T>>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const char* p) {
  std::make_unsigned_t<T> u = 0;
  for (int i = static_cast<int>(sizeof(T)) - 1; i >= 0; --i) {
    u = static_cast<std::make_unsigned_t<T>>((u << 8) | static_cast<unsigned char>(p[i]));
  }
  return static_cast<T>(u);
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string encode_tds(const Dataset& ds) {
  validate_dataset(ds);
  if (ds.height > 0xffff || ds.width > 0xffff || ds.channels > 0xff || ds.num_classes > 0xffff) {
    throw ValidationError("dataset dimensions exceed the TDS header fields");
  }
  std::string out = "TDS1";
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.size()));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(ds.height));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(ds.width));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(ds.channels));
  put_le<std::uint8_t>(out, 0);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(ds.num_classes));
  const std::size_t ib = ds.image_bytes();
  out.reserve(out.size() + ds.labels.size() * (2 + ib));
  for (int i = 0; i < ds.size(); ++i) {
    put_le<std::int16_t>(out, ds.labels[static_cast<std::size_t>(i)]);
    out.append(reinterpret_cast<const char*>(ds.image(i)), ib);
  }
  return out;
}

Dataset decode_tds(std::string_view bytes, std::string name) {
  constexpr std::size_t kHeader = 4 + 4 + 2 + 2 + 1 + 1 + 2;
  if (bytes.size() < kHeader || bytes.substr(0, 4) != "TDS1") throw FormatError("TDS: bad magic");
  const char* p = bytes.data();
  Dataset ds;
  ds.name = std::move(name);
  const auto n = get_le<std::uint32_t>(p + 4);
  ds.height = get_le<std::uint16_t>(p + 8);
  ds.width = get_le<std::uint16_t>(p + 10);
  ds.channels = get_le<std::uint8_t>(p + 12);
  ds.num_classes = get_le<std::uint16_t>(p + 14);
  const std::size_t ib = ds.image_bytes();
  const std::size_t need = kHeader + static_cast<std::size_t>(n) * (2 + ib);
  if (bytes.size() < need) {
    throw FormatError("TDS: truncated (" + std::to_string(bytes.size()) + " of " +
                      std::to_string(need) + " bytes)");
  }
  if (bytes.size() > need) throw FormatError("TDS: trailing bytes after the last record");
  ds.labels.resize(n);
  ds.pixels.resize(static_cast<std::size_t>(n) * ib);
  const char* rec = p + kHeader;
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.labels[i] = get_le<std::int16_t>(rec);
    std::copy_n(reinterpret_cast<const std::uint8_t*>(rec + 2), ib, ds.pixels.data() + ib * i);
    rec += 2 + ib;
  }
  validate_dataset(ds);
  return ds;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
  const std::string bytes = encode_tds(ds);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  return decode_tds(slurp(path), path.stem().string());
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

// Bilinear sample of channel plane `src` (HWC bytes or CHW floats through the
// accessor) with edge clamping.
template <class Get>
float bilinear(Get&& get, int h, int w, float y, float x) {
  y = std::clamp(y, 0.0f, static_cast<float>(h - 1));
  x = std::clamp(x, 0.0f, static_cast<float>(w - 1));
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const float fy = y - static_cast<float>(y0), fx = x - static_cast<float>(x0);
  const float top = get(y0, x0) * (1.0f - fx) + get(y0, x1) * fx;
  const float bot = get(y1, x0) * (1.0f - fx) + get(y1, x1) * fx;
  return top * (1.0f - fy) + bot * fy;
}

// Bilinear with a constant fill outside the plane.
template <class Get>
float bilinear_fill(Get&& get, int h, int w, float y, float x, float fill) {
  if (y < -1.0f || y > static_cast<float>(h) || x < -1.0f || x > static_cast<float>(w)) return fill;
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const float fy = y - static_cast<float>(y0), fx = x - static_cast<float>(x0);
  auto at = [&](int yy, int xx) {
    return (yy < 0 || yy >= h || xx < 0 || xx >= w) ? fill : get(yy, xx);
  };
  const float top = at(y0, x0) * (1.0f - fx) + at(y0, x0 + 1) * fx;
  const float bot = at(y0 + 1, x0) * (1.0f - fx) + at(y0 + 1, x0 + 1) * fx;
  return top * (1.0f - fy) + bot * fy;
}

}  // namespace

Dataset import_cifar(const std::vector<std::filesystem::path>& files, int num_classes, int size) {
  if (num_classes != 10 && num_classes != 100) {
    throw ConfigError("import_cifar: num_classes must be 10 or 100");
  }
  if (size < 1) throw ConfigError("import_cifar: size must be positive");
  const std::size_t label_bytes = num_classes == 10 ? 1 : 2;
  constexpr int kSrc = 32;
  constexpr std::size_t kImg = 3 * kSrc * kSrc;
  const std::size_t rec = label_bytes + kImg;
  Dataset ds;
  ds.name = num_classes == 10 ? "cifar10" : "cifar100";
  ds.height = ds.width = size;
  ds.channels = 3;
  ds.num_classes = num_classes;
  for (const auto& f : files) {
    const std::string bytes = slurp(f);
    if (bytes.empty() || bytes.size() % rec != 0) {
      throw FormatError(f.string() + ": size " + std::to_string(bytes.size()) +
                        " is not a multiple of the " + std::to_string(rec) + "-byte record");
    }
    for (std::size_t off = 0; off < bytes.size(); off += rec) {
      const auto label = static_cast<unsigned char>(bytes[off + label_bytes - 1]);
      if (label >= num_classes) throw FormatError(f.string() + ": label out of range");
      ds.labels.push_back(static_cast<std::int16_t>(label));
      const auto* planes = reinterpret_cast<const std::uint8_t*>(bytes.data() + off + label_bytes);
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          for (int c = 0; c < 3; ++c) {
            const std::uint8_t* plane = planes + static_cast<std::size_t>(c) * kSrc * kSrc;
            float v;
            if (size == kSrc) {
              v = plane[y * kSrc + x];
            } else {
              const float s = static_cast<float>(kSrc) / static_cast<float>(size);
              v = bilinear([&](int yy, int xx) { return static_cast<float>(plane[yy * kSrc + xx]); },
                           kSrc, kSrc, (static_cast<float>(y) + 0.5f) * s - 0.5f,
                           (static_cast<float>(x) + 0.5f) * s - 0.5f);
            }
            ds.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 255.0f))));
          }
    }
  }
  validate_dataset(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic task

std::string_view to_string(SynthTask t) { return t == SynthTask::kScale ? "scale" : "shape"; }

SynthTask parse_synth_task(std::string_view text) {
  if (text == "scale") return SynthTask::kScale;
  if (text == "shape") return SynthTask::kShape;
  throw ConfigError("unknown synthetic task '" + std::string(text) + "' (scale, shape)");
}

Dataset make_synthetic(const SynthOptions& opt) {
  if (opt.num_classes < 2) throw ConfigError("synth: at least 2 classes");
  if (opt.size < 4) throw ConfigError("synth: image size must be at least 4");
  if (opt.n < opt.num_classes) throw ConfigError("synth: need at least one sample per class");
  Rng rng = make_stream(opt.seed, 0x5eed);
  Dataset ds;
  ds.name = "synth";
  ds.height = ds.width = opt.size;
  ds.channels = 3;
  ds.num_classes = opt.num_classes;
  const int s = opt.size;
  const float scale = static_cast<float>(s) / 16.0f;
  std::vector<float> field(static_cast<std::size_t>(s) * s);
  for (int i = 0; i < opt.n; ++i) {
    const int y = i % opt.num_classes;
    const double t = static_cast<double>(y) / (opt.num_classes - 1);
    double sigma_rel = 0.0, elong_lo = 1.0, elong_hi = 1.3;
    if (opt.task == SynthTask::kScale) {
      // Characteristic blob radius grows geometrically with the class index.
      sigma_rel = 0.7 * std::pow(2.6 / 0.7, t);
    } else {
      sigma_rel = 0.9 * std::exp(uniform(rng, 0.0, std::log(2.0 / 0.9)));
      elong_lo = std::pow(5.0, t);
      elong_hi = elong_lo * 1.15;
    }
    const double sigma_c = sigma_rel * scale;
    // Roughly constant covered area across classes.
    const double mean_count = 9.0 / (sigma_rel * sigma_rel);
    const int count = std::max(1, static_cast<int>(std::lround(mean_count * uniform(rng, 0.7, 1.3))));

    std::fill(field.begin(), field.end(), 0.0f);
    for (int b = 0; b < count; ++b) {
      const double sig = sigma_c * std::exp(0.15 * normal(rng));
      const double elong = uniform(rng, elong_lo, elong_hi);
      const double theta = uniform(rng, 0.0, M_PI);
      const double sa = sig * std::sqrt(elong), sb = sig / std::sqrt(elong);
      const double cx = uniform(rng, -1.0, s), cy = uniform(rng, -1.0, s);
      const double amp = uniform(rng, 0.5, 1.0);
      const double ct = std::cos(theta), st = std::sin(theta);
      for (int py = 0; py < s; ++py)
        for (int px = 0; px < s; ++px) {
          const double dx = px + 0.5 - cx, dy = py + 0.5 - cy;
          const double u = (ct * dx + st * dy) / sa, v = (-st * dx + ct * dy) / sb;
          field[static_cast<std::size_t>(py) * s + px] += static_cast<float>(amp * std::exp(-0.5 * (u * u + v * v)));
        }
    }
    // Luminance contrast between blobs and background is always at least 0.4;
    // polarity and tint are random.
    const bool light_blobs = bernoulli(rng, 0.5);
    const double lum_bg = light_blobs ? uniform(rng, 0.1, 0.35) : uniform(rng, 0.65, 0.9);
    const double lum_fg = light_blobs ? uniform(rng, lum_bg + 0.4, 1.0) : uniform(rng, 0.0, lum_bg - 0.4);
    std::array<float, 3> bg{}, fg{}, grad{};
    for (int c = 0; c < 3; ++c) {
      bg[static_cast<std::size_t>(c)] = static_cast<float>(lum_bg + uniform(rng, -0.1, 0.1));
      fg[static_cast<std::size_t>(c)] = static_cast<float>(lum_fg + uniform(rng, -0.1, 0.1));
      grad[static_cast<std::size_t>(c)] = static_cast<float>(uniform(rng, -0.1, 0.1));
    }
    const double gdir = uniform(rng, 0.0, 2.0 * M_PI);
    for (int py = 0; py < s; ++py)
      for (int px = 0; px < s; ++px) {
        const float f = std::min(1.0f, field[static_cast<std::size_t>(py) * s + px]);
        const float g = static_cast<float>((std::cos(gdir) * (px - s / 2.0) + std::sin(gdir) * (py - s / 2.0)) / s);
        for (int c = 0; c < 3; ++c) {
          const auto cc = static_cast<std::size_t>(c);
          float v = (bg[cc] + grad[cc] * g) * (1.0f - f) + fg[cc] * f;
          v += static_cast<float>(0.03 * normal(rng));
          ds.pixels.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
        }
      }
    ds.labels.push_back(static_cast<std::int16_t>(y));
  }
  validate_dataset(ds);
  return ds;
}

std::pair<Dataset, Dataset> split_labeled(const Dataset& ds, int per_class, std::uint64_t seed) {
  validate_dataset(ds);
  if (per_class < 1) throw ContractError("split_labeled: per_class must be at least 1");
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (int i = 0; i < ds.size(); ++i) {
    const int y = ds.labels[static_cast<std::size_t>(i)];
    if (y >= 0) by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  Rng rng = make_stream(seed, 0x5b1);
  std::vector<int> lab, unl;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (static_cast<int>(idx.size()) < per_class) {
      throw ContractError("split_labeled: class " + std::to_string(c) + " has " +
                          std::to_string(idx.size()) + " samples, fewer than " +
                          std::to_string(per_class));
    }
    shuffle(idx, rng);
    lab.insert(lab.end(), idx.begin(), idx.begin() + per_class);
    unl.insert(unl.end(), idx.begin() + per_class, idx.end());
  }
  for (int i = 0; i < ds.size(); ++i) {
    if (ds.labels[static_cast<std::size_t>(i)] < 0) unl.push_back(i);
  }
  std::sort(lab.begin(), lab.end());
  std::sort(unl.begin(), unl.end());
  Dataset l = ds.subset(lab);
  Dataset u = ds.subset(unl);
  l.name = ds.name + ".labeled";
  u.name = ds.name + ".unlabeled";
  std::fill(u.labels.begin(), u.labels.end(), static_cast<std::int16_t>(-1));
  return {std::move(l), std::move(u)};
}

// ---------------------------------------------------------------------------
// Normalization

Normalization compute_normalization(const Dataset& ds) {
  validate_dataset(ds);
  const int c = ds.channels;
  std::vector<double> sum(static_cast<std::size_t>(c), 0.0), sq(static_cast<std::size_t>(c), 0.0);
  for (std::size_t i = 0; i < ds.pixels.size(); ++i) {
    const double v = ds.pixels[i] / 255.0;
    sum[i % static_cast<std::size_t>(c)] += v;
    sq[i % static_cast<std::size_t>(c)] += v * v;
  }
  const double n = static_cast<double>(ds.pixels.size() / static_cast<std::size_t>(c));
  Normalization norm;
  for (int k = 0; k < c; ++k) {
    const double m = sum[static_cast<std::size_t>(k)] / n;
    const double var = std::max(0.0, sq[static_cast<std::size_t>(k)] / n - m * m);
    norm.mean.push_back(static_cast<float>(m));
    norm.stddev.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-3)));
  }
  return norm;
}

std::string encode_normalization(const Normalization& norm) {
  std::ostringstream os;
  os.precision(9);
  for (std::size_t i = 0; i < norm.mean.size(); ++i) {
    if (i) os << ',';
    os << norm.mean[i] << ':' << norm.stddev[i];
  }
  return os.str();
}

Normalization decode_normalization(std::string_view text) {
  Normalization norm;
  std::stringstream ss{std::string(text)};
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw FormatError("bad normalization entry '" + item + "'");
    try {
      norm.mean.push_back(std::stof(item.substr(0, colon)));
      norm.stddev.push_back(std::stof(item.substr(colon + 1)));
    } catch (const std::exception&) {
      throw FormatError("bad normalization entry '" + item + "'");
    }
  }
  if (norm.mean.empty()) throw FormatError("empty normalization");
  return norm;
}

// ---------------------------------------------------------------------------
// Augmentation

WeakParams sample_weak_params(int height, int width, Rng& rng) {
  WeakParams p;
  p.flip = bernoulli(rng, 0.5);
  const double area = uniform(rng, 0.7, 1.0);
  const double side = std::sqrt(area);
  p.crop_w = static_cast<float>(side * width);
  p.crop_h = static_cast<float>(side * height);
  p.crop_x = static_cast<float>(uniform(rng, 0.0, width - p.crop_w));
  p.crop_y = static_cast<float>(uniform(rng, 0.0, height - p.crop_h));
  p.brightness = static_cast<float>(uniform(rng, 0.8, 1.2));
  p.contrast = static_cast<float>(uniform(rng, 0.8, 1.2));
  return p;
}

std::array<StrongStep, 2> sample_strong_params(Rng& rng) {
  std::array<StrongStep, 2> steps{};
  for (auto& st : steps) {
    st.op = static_cast<StrongOp>(uniform_index(rng, kNumStrongOps));
    switch (st.op) {
      case StrongOp::kPosterize: st.magnitude = static_cast<float>(4 + uniform_index(rng, 5)); break;
      case StrongOp::kSolarize: st.magnitude = static_cast<float>(uniform(rng, 0.5, 1.0)); break;
      case StrongOp::kRotate: st.magnitude = static_cast<float>(uniform(rng, -30.0, 30.0)); break;
      case StrongOp::kShear:
        st.magnitude = static_cast<float>(uniform(rng, -0.3, 0.3));
        st.aux0 = bernoulli(rng, 0.5) ? 1.0f : 0.0f;
        break;
      case StrongOp::kTranslate:
        st.magnitude = static_cast<float>(uniform(rng, -0.3, 0.3));
        st.aux0 = static_cast<float>(uniform(rng, -0.3, 0.3));
        break;
      case StrongOp::kContrast:
      case StrongOp::kBrightness:
      case StrongOp::kSharpness: st.magnitude = static_cast<float>(uniform(rng, 0.3, 1.7)); break;
      case StrongOp::kCutout:
        st.magnitude = static_cast<float>(uniform(rng, 0.1, 0.5));
        st.aux0 = static_cast<float>(uniform01(rng));
        st.aux1 = static_cast<float>(uniform01(rng));
        break;
    }
  }
  return steps;
}

namespace {

// CHW float image in [0, 1] at t x t.
void weak_to_unit(const std::uint8_t* img, int h, int w, int c, const WeakParams& p, int t,
                  float* out) {
  const float cw = p.crop_w > 0.0f ? p.crop_w : static_cast<float>(w);
  const float ch = p.crop_h > 0.0f ? p.crop_h : static_cast<float>(h);
  const float sx = cw / static_cast<float>(t), sy = ch / static_cast<float>(t);
  const std::size_t plane = static_cast<std::size_t>(t) * t;
  for (int k = 0; k < c; ++k) {
    auto get = [&](int yy, int xx) {
      return static_cast<float>(img[(static_cast<std::size_t>(yy) * w + xx) * c + k]) / 255.0f;
    };
    for (int oy = 0; oy < t; ++oy)
      for (int ox = 0; ox < t; ++ox) {
        const int dx = p.flip ? t - 1 - ox : ox;
        const float y = p.crop_y + (static_cast<float>(oy) + 0.5f) * sy - 0.5f;
        const float x = p.crop_x + (static_cast<float>(dx) + 0.5f) * sx - 0.5f;
        out[k * plane + static_cast<std::size_t>(oy) * t + ox] = bilinear(get, h, w, y, x);
      }
  }
  if (p.brightness != 1.0f || p.contrast != 1.0f) {
    const std::size_t n = plane * static_cast<std::size_t>(c);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += out[i];
    const float m = static_cast<float>(mean / static_cast<double>(n)) * p.brightness;
    for (std::size_t i = 0; i < n; ++i) {
      const float v = out[i] * p.brightness;
      out[i] = std::clamp((v - m) * p.contrast + m, 0.0f, 1.0f);
    }
  }
}

void affine(float* img, int c, int t, float a, float b, float cc, float d, float tx, float ty) {
  // Output pixel q maps back to source M * (q - center) + center + shift.
  std::vector<float> src(img, img + static_cast<std::size_t>(c) * t * t);
  const float ctr = (static_cast<float>(t) - 1.0f) / 2.0f;
  const std::size_t plane = static_cast<std::size_t>(t) * t;
  for (int k = 0; k < c; ++k) {
    const float* s = src.data() + k * plane;
    auto get = [&](int yy, int xx) { return s[static_cast<std::size_t>(yy) * t + xx]; };
    for (int oy = 0; oy < t; ++oy)
      for (int ox = 0; ox < t; ++ox) {
        const float qx = static_cast<float>(ox) - ctr, qy = static_cast<float>(oy) - ctr;
        const float x = a * qx + b * qy + ctr + tx;
        const float y = cc * qx + d * qy + ctr + ty;
        img[k * plane + static_cast<std::size_t>(oy) * t + ox] = bilinear_fill(get, t, t, y, x, 0.5f);
      }
  }
}

void apply_step(float* img, int c, int t, const StrongStep& st) {
  const std::size_t n = static_cast<std::size_t>(c) * t * t;
  switch (st.op) {
    case StrongOp::kPosterize: {
      const float levels = std::exp2(st.magnitude);
      for (std::size_t i = 0; i < n; ++i) {
        img[i] = std::min(std::floor(img[i] * levels), levels - 1.0f) / (levels - 1.0f);
      }
      break;
    }
    case StrongOp::kSolarize:
      for (std::size_t i = 0; i < n; ++i) {
        if (img[i] >= st.magnitude) img[i] = 1.0f - img[i];
      }
      break;
    case StrongOp::kRotate: {
      const float r = st.magnitude * static_cast<float>(M_PI) / 180.0f;
      affine(img, c, t, std::cos(r), std::sin(r), -std::sin(r), std::cos(r), 0.0f, 0.0f);
      break;
    }
    case StrongOp::kShear:
      if (st.aux0 > 0.5f) {
        affine(img, c, t, 1.0f, 0.0f, st.magnitude, 1.0f, 0.0f, 0.0f);
      } else {
        affine(img, c, t, 1.0f, st.magnitude, 0.0f, 1.0f, 0.0f, 0.0f);
      }
      break;
    case StrongOp::kTranslate:
      affine(img, c, t, 1.0f, 0.0f, 0.0f, 1.0f, st.magnitude * static_cast<float>(t),
             st.aux0 * static_cast<float>(t));
      break;
    case StrongOp::kContrast: {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += img[i];
      const float m = static_cast<float>(mean / static_cast<double>(n));
      for (std::size_t i = 0; i < n; ++i) img[i] = std::clamp((img[i] - m) * st.magnitude + m, 0.0f, 1.0f);
      break;
    }
    case StrongOp::kBrightness:
      for (std::size_t i = 0; i < n; ++i) img[i] = std::clamp(img[i] * st.magnitude, 0.0f, 1.0f);
      break;
    case StrongOp::kSharpness: {
      // Blend against a 3x3 smoothed copy; the border is left unchanged.
      std::vector<float> src(img, img + n);
      const std::size_t plane = static_cast<std::size_t>(t) * t;
      for (int k = 0; k < c; ++k)
        for (int y = 1; y + 1 < t; ++y)
          for (int x = 1; x + 1 < t; ++x) {
            const float* s = src.data() + k * plane;
            float blur = 0.0f;
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const float wgt = (dy == 0 && dx == 0) ? 5.0f : 1.0f;
                blur += wgt * s[static_cast<std::size_t>(y + dy) * t + x + dx];
              }
            blur /= 13.0f;
            const std::size_t at = k * plane + static_cast<std::size_t>(y) * t + x;
            img[at] = std::clamp(blur + (src[at] - blur) * st.magnitude, 0.0f, 1.0f);
          }
      break;
    }
    case StrongOp::kCutout: {
      const int side = std::max(1, static_cast<int>(st.magnitude * static_cast<float>(t)));
      const int cx = static_cast<int>(st.aux0 * static_cast<float>(t));
      const int cy = static_cast<int>(st.aux1 * static_cast<float>(t));
      const std::size_t plane = static_cast<std::size_t>(t) * t;
      for (int k = 0; k < c; ++k)
        for (int y = std::max(0, cy - side / 2); y < std::min(t, cy - side / 2 + side); ++y)
          for (int x = std::max(0, cx - side / 2); x < std::min(t, cx - side / 2 + side); ++x) {
            img[k * plane + static_cast<std::size_t>(y) * t + x] = 0.5f;
          }
      break;
    }
  }
}

void standardize(float* img, int c, int t, const Normalization& norm) {
  if (norm.mean.size() != static_cast<std::size_t>(c) || norm.stddev.size() != static_cast<std::size_t>(c)) {
    throw DimensionError("normalization has " + std::to_string(norm.mean.size()) +
                         " channels, image has " + std::to_string(c));
  }
  const std::size_t plane = static_cast<std::size_t>(t) * t;
  for (int k = 0; k < c; ++k) {
    const float m = norm.mean[static_cast<std::size_t>(k)];
    const float inv = 1.0f / norm.stddev[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < plane; ++i) img[k * plane + i] = (img[k * plane + i] - m) * inv;
  }
}

}  // namespace

void apply_weak(const std::uint8_t* img, int height, int width, int channels, const WeakParams& p,
                int target, const Normalization& norm, float* out) {
  weak_to_unit(img, height, width, channels, p, target, out);
  standardize(out, channels, target, norm);
}

void apply_strong(const std::uint8_t* img, int height, int width, int channels,
                  const WeakParams& weak, const std::array<StrongStep, 2>& steps, int target,
                  const Normalization& norm, float* out) {
  weak_to_unit(img, height, width, channels, weak, target, out);
  for (const auto& st : steps) apply_step(out, channels, target, st);
  standardize(out, channels, target, norm);
}

Tensor weak_augment(const Dataset& ds, int index, Rng& rng, int target, const Normalization& norm) {
  Tensor out({ds.channels, target, target});
  const auto p = sample_weak_params(ds.height, ds.width, rng);
  apply_weak(ds.image(index), ds.height, ds.width, ds.channels, p, target, norm, out.data().data());
  return out;
}

Tensor strong_augment(const Dataset& ds, int index, Rng& rng, int target, const Normalization& norm) {
  Tensor out({ds.channels, target, target});
  const auto p = sample_weak_params(ds.height, ds.width, rng);
  const auto steps = sample_strong_params(rng);
  apply_strong(ds.image(index), ds.height, ds.width, ds.channels, p, steps, target, norm,
               out.data().data());
  return out;
}

Tensor plain_view(const Dataset& ds, int index, int target, const Normalization& norm) {
  Tensor out({ds.channels, target, target});
  apply_weak(ds.image(index), ds.height, ds.width, ds.channels, WeakParams{}, target, norm,
             out.data().data());
  return out;
}

Tensor resize_batch(const Tensor& batch, int target) {
  if (batch.ndim() != 4) throw DimensionError("resize_batch expects NCHW, got " + shape_str(batch.shape()));
  const int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (h == target && w == target) return batch;
  Tensor out({n, c, target, target});
  const float sy = static_cast<float>(h) / static_cast<float>(target);
  const float sx = static_cast<float>(w) / static_cast<float>(target);
  auto src = batch.data();
  auto dst = out.data();
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(target) * target;
  for (int p = 0; p < n * c; ++p) {
    const float* s = src.data() + static_cast<std::size_t>(p) * in_plane;
    auto get = [&](int yy, int xx) { return s[static_cast<std::size_t>(yy) * w + xx]; };
    for (int oy = 0; oy < target; ++oy)
      for (int ox = 0; ox < target; ++ox) {
        dst[static_cast<std::size_t>(p) * out_plane + static_cast<std::size_t>(oy) * target + ox] =
            bilinear(get, h, w, (static_cast<float>(oy) + 0.5f) * sy - 0.5f,
                     (static_cast<float>(ox) + 0.5f) * sx - 0.5f);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

BatchStream::BatchStream(std::vector<int> indices, int batch_size, std::uint64_t seed)
    : order_(std::move(indices)), batch_size_(batch_size), rng_(make_stream(seed, 0xba7c)) {
  if (order_.empty()) throw ContractError("BatchStream over an empty index set");
  if (batch_size < 1) throw ContractError("BatchStream batch size must be positive");
  reshuffle();
}

void BatchStream::reshuffle() {
  shuffle(order_, rng_);
  cursor_ = 0;
}

std::vector<int> BatchStream::next_indices() {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(batch_size_));
  while (static_cast<int>(out.size()) < batch_size_) {
    out.push_back(order_[cursor_++]);
    if (cursor_ == order_.size()) {
      ++cycles_;
      reshuffle();
    }
  }
  return out;
}

LabeledBatch make_labeled_batch(const Dataset& ds, std::span<const int> indices, Rng& aug_rng,
                                int target, const Normalization& norm) {
  LabeledBatch b;
  b.images = Tensor({static_cast<int>(indices.size()), ds.channels, target, target});
  const std::size_t per = static_cast<std::size_t>(ds.channels) * target * target;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int i = indices[k];
    const int y = ds.labels[static_cast<std::size_t>(i)];
    if (y < 0) throw ContractError("labeled batch drew unlabeled sample " + std::to_string(i));
    const auto p = sample_weak_params(ds.height, ds.width, aug_rng);
    apply_weak(ds.image(i), ds.height, ds.width, ds.channels, p, target, norm,
               b.images.data().data() + per * k);
    b.labels.push_back(y);
  }
  return b;
}

UnlabeledBatch make_unlabeled_batch(const Dataset& ds, std::span<const int> indices, Rng& aug_rng,
                                    int target, const Normalization& norm) {
  UnlabeledBatch b;
  const Shape shape{static_cast<int>(indices.size()), ds.channels, target, target};
  b.weak = Tensor(shape);
  b.strong = Tensor(shape);
  const std::size_t per = static_cast<std::size_t>(ds.channels) * target * target;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int i = indices[k];
    const auto wp = sample_weak_params(ds.height, ds.width, aug_rng);
    apply_weak(ds.image(i), ds.height, ds.width, ds.channels, wp, target, norm,
               b.weak.data().data() + per * k);
    const auto sp = sample_weak_params(ds.height, ds.width, aug_rng);
    const auto steps = sample_strong_params(aug_rng);
    apply_strong(ds.image(i), ds.height, ds.width, ds.channels, sp, steps, target, norm,
                 b.strong.data().data() + per * k);
  }
  return b;
}

Tensor make_eval_batch(const Dataset& ds, int begin, int end, int target, const Normalization& norm) {
  if (begin < 0 || end > ds.size() || begin >= end) throw ContractError("make_eval_batch: bad range");
  Tensor out({end - begin, ds.channels, target, target});
  const std::size_t per = static_cast<std::size_t>(ds.channels) * target * target;
  for (int i = begin; i < end; ++i) {
    apply_weak(ds.image(i), ds.height, ds.width, ds.channels, WeakParams{}, target, norm,
               out.data().data() + per * static_cast<std::size_t>(i - begin));
  }
  return out;
}

Tensor make_plain_batch(const Dataset& ds, std::span<const int> indices, int target,
                        const Normalization& norm) {
  Tensor out({static_cast<int>(indices.size()), ds.channels, target, target});
  const std::size_t per = static_cast<std::size_t>(ds.channels) * target * target;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const int i = indices[k];
    if (i < 0 || i >= ds.size()) throw ContractError("make_plain_batch: index out of range");
    apply_weak(ds.image(i), ds.height, ds.width, ds.channels, WeakParams{}, target, norm,
               out.data().data() + per * k);
  }
  return out;
}

}  // namespace tofa
