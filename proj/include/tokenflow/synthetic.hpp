#pragma once

// Deterministic synthetic image sets. Image i of a spec is drawn from
// Rng(derive_seed(spec.seed, seed_tag::kData, i)) alone, so any subset can be
// regenerated independently. Pixel values are 8-bit levels (v / 255) so a
// PPM round trip is exact.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "tokenflow/tensor.hpp"
#include "tokenflow/tokenizer.hpp"

namespace tokenflow {

enum class GeneratorKind { ColoredRectangles, GaussianTextures, StripedGradients, Mixed };

inline const char* generator_name(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::ColoredRectangles: return "colored-rectangles";
    case GeneratorKind::GaussianTextures: return "gaussian-textures";
    case GeneratorKind::StripedGradients: return "striped-gradients";
    case GeneratorKind::Mixed: return "mixed";
  }
  return "?";
}

inline GeneratorKind parse_generator(const std::string& s) {
  for (auto k : {GeneratorKind::ColoredRectangles, GeneratorKind::GaussianTextures,
                 GeneratorKind::StripedGradients, GeneratorKind::Mixed}) {
    if (s == generator_name(k)) return k;
  }
  throw ConfigError("data.kind: unknown generator '" + s + "'");
}

struct SyntheticSpec {
  std::size_t image_side = 16;
  std::size_t channels = 3;
  std::size_t count = 256;
  GeneratorKind kind = GeneratorKind::Mixed;
  std::size_t rectangles = 3;  // per image, colored-rectangles only
  std::uint64_t seed = 0;

  void validate(std::size_t patch = 1) const {
    if (image_side == 0) throw ConfigError("data.image_side: must be positive");
    if (patch == 0 || image_side % patch != 0) {
      throw ConfigError("data.image_side: " + std::to_string(image_side) + " is not divisible by patch " +
                        std::to_string(patch));
    }
    if (channels == 0) throw ConfigError("data.channels: must be positive");
    if (count == 0) throw ConfigError("data.count: must be >= 1");
    if (rectangles == 0 || rectangles > 250) throw ConfigError("data.rectangles: must be in [1, 250]");
  }
};

struct Dataset {
  Tensor images;  // [N x S x S x C]
  std::vector<std::string> ids;
  std::vector<std::uint32_t> labels;  // generator kind index; the class for conditioning
};

inline constexpr std::uint32_t kNumGeneratorClasses = 3;

namespace detail {

inline double level(std::uint32_t v) { return static_cast<double>(v) / 255.0; }

inline double to_level(double x) {
  return std::round(std::clamp(x, 0.0, 1.0) * 255.0) / 255.0;
}

inline std::uint32_t pack_color(const std::vector<std::uint32_t>& c) {
  std::uint32_t key = 0;
  for (auto v : c) key = key * 256 + v;
  return key;
}

// Background plus `n` axis-aligned rectangles in distinct colors, drawn in
// order. Every rectangle keeps at least one visible pixel; layouts that
// violate this are redrawn.
inline void draw_rectangles(Rng& rng, std::size_t s, std::size_t c, std::size_t n, double* out) {
  std::vector<std::vector<std::uint32_t>> colors;
  std::set<std::uint32_t> used;
  while (colors.size() < n + 1) {
    std::vector<std::uint32_t> col(c);
    for (auto& v : col) v = static_cast<std::uint32_t>(rng.below(256));
    if (used.insert(pack_color(col)).second) colors.push_back(col);
  }
  std::vector<std::size_t> owner(s * s);
  for (int attempt = 0;; ++attempt) {
    std::fill(owner.begin(), owner.end(), 0);
    for (std::size_t r = 1; r <= n; ++r) {
      const std::size_t w = 1 + rng.below(std::max<std::size_t>(s / 2, 1));
      const std::size_t h = 1 + rng.below(std::max<std::size_t>(s / 2, 1));
      const std::size_t x0 = rng.below(s - w + 1), y0 = rng.below(s - h + 1);
      for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x) owner[y * s + x] = r;
    }
    std::vector<bool> seen(n + 1, false);
    for (auto o : owner) seen[o] = true;
    if (std::all_of(seen.begin() + 1, seen.end(), [](bool b) { return b; })) break;
    if (attempt > 10000) throw ConfigError("data.rectangles: cannot place that many rectangles visibly");
  }
  for (std::size_t i = 0; i < s * s; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] = level(colors[owner[i]][ch]);
}

// White noise blurred by a separable binomial kernel (radius 2), per
// channel, then stretched to [0, 1].
inline void draw_texture(Rng& rng, std::size_t s, std::size_t c, double* out) {
  static constexpr std::array<double, 5> kKernel{1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
  std::vector<double> a(s * s), b(s * s);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (double& v : a) v = rng.normal();
    auto wrap = [s](std::size_t i, int d) {
      return (i + s + static_cast<std::size_t>(d + 2 * static_cast<int>(s))) % s;
    };
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        double acc = 0;
        for (int t = -2; t <= 2; ++t) acc += kKernel[t + 2] * a[y * s + wrap(x, t)];
        b[y * s + x] = acc;
      }
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        double acc = 0;
        for (int t = -2; t <= 2; ++t) acc += kKernel[t + 2] * b[wrap(y, t) * s + x];
        a[y * s + x] = acc;
      }
    const auto [mn, mx] = std::minmax_element(a.begin(), a.end());
    const double lo = *mn, span = std::max(*mx - lo, 1e-12);
    for (std::size_t i = 0; i < s * s; ++i) out[i * c + ch] = to_level((a[i] - lo) / span);
  }
}

// Sinusoidal stripes of random orientation, frequency and phase over a
// linear ramp, mixed into each channel with random weights.
inline void draw_stripes(Rng& rng, std::size_t s, std::size_t c, double* out) {
  const double theta = rng.uniform(0.0, M_PI);
  const double freq = rng.uniform(1.0, 4.0);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double ramp_theta = rng.uniform(0.0, 2.0 * M_PI);
  std::vector<double> stripe_w(c), ramp_w(c), base(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    stripe_w[ch] = rng.uniform(0.15, 0.35);
    ramp_w[ch] = rng.uniform(-0.25, 0.25);
    base[ch] = rng.uniform(0.35, 0.65);
  }
  const double n = static_cast<double>(s);
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / n, v = (static_cast<double>(y) + 0.5) / n;
      const double st = std::sin(2.0 * M_PI * freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
      const double ramp = (u - 0.5) * std::cos(ramp_theta) + (v - 0.5) * std::sin(ramp_theta);
      for (std::size_t ch = 0; ch < c; ++ch) {
        out[(y * s + x) * c + ch] = to_level(base[ch] + stripe_w[ch] * st + ramp_w[ch] * ramp);
      }
    }
}

}  // namespace detail

inline Dataset generate_dataset(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t s = spec.image_side, c = spec.channels, per = s * s * c;
  Dataset d;
  d.images = Tensor({spec.count, s, s, c});
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rng rng(derive_seed(spec.seed, seed_tag::kData, i));
    GeneratorKind kind = spec.kind;
    if (kind == GeneratorKind::Mixed) kind = static_cast<GeneratorKind>(i % kNumGeneratorClasses);
    double* out = d.images.storage().data() + i * per;
    switch (kind) {
      case GeneratorKind::ColoredRectangles: detail::draw_rectangles(rng, s, c, spec.rectangles, out); break;
      case GeneratorKind::GaussianTextures: detail::draw_texture(rng, s, c, out); break;
      case GeneratorKind::StripedGradients: detail::draw_stripes(rng, s, c, out); break;
      case GeneratorKind::Mixed: break;
    }
    char id[32];
    std::snprintf(id, sizeof id, "img%06zu", i);
    d.ids.emplace_back(id);
    d.labels.push_back(static_cast<std::uint32_t>(kind));
  }
  return d;
}

// Number of distinct colors in one [S x S x C] image; used to check the
// rectangle generator (rectangles + background).
inline std::size_t distinct_colors(const Tensor& image) {
  const std::size_t c = image.dim(2);
  std::set<std::vector<double>> seen;
  for (std::size_t i = 0; i < image.size(); i += c) {
    seen.insert(std::vector<double>(image.storage().begin() + static_cast<std::ptrdiff_t>(i),
                                    image.storage().begin() + static_cast<std::ptrdiff_t>(i + c)));
  }
  return seen.size();
}

}  // namespace tokenflow
