#pragma once

// Dual-flow image tokenizer.
//
// Images are [B x S x S x C] tensors in [0, 1]. Each is cut into p x p
// patches (rows of p*p*C values, row-major, channel fastest); two patch
// encoders map every patch to a semantic and a pixel feature, the grid of
// features is quantized by msvq_encode, and two decoders read the
// straight-through features back: one towards a frozen teacher, one to
// pixels.
//
// Seeds: every component draws from Rng(derive_seed(config.seed, tag)) with
// the tags below, so changing one component's size never perturbs another's
// initialization.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tokenflow/autodiff.hpp"
#include "tokenflow/codebook.hpp"
#include "tokenflow/metrics.hpp"
#include "tokenflow/quantizer.hpp"
#include "tokenflow/tensor.hpp"

namespace tokenflow {

namespace seed_tag {
inline constexpr std::uint64_t kSemanticEncoder = 1;
inline constexpr std::uint64_t kPixelEncoder = 2;
inline constexpr std::uint64_t kSemanticDecoder = 3;
inline constexpr std::uint64_t kPixelDecoder = 4;
inline constexpr std::uint64_t kCodebook = 5;
inline constexpr std::uint64_t kTeacher = 6;
inline constexpr std::uint64_t kBatchOrder = 7;
inline constexpr std::uint64_t kPrior = 8;
inline constexpr std::uint64_t kSampling = 9;
inline constexpr std::uint64_t kData = 10;
}  // namespace seed_tag

// Which tables exist. SemanticOnly and PixelOnly are the single-codebook
// baselines: the missing table has width 0, and in SemanticOnly the pixel
// decoder has to work from the semantic features.
enum class CodebookMode { Dual, SemanticOnly, PixelOnly };

inline const char* mode_name(CodebookMode m) {
  switch (m) {
    case CodebookMode::Dual: return "dual";
    case CodebookMode::SemanticOnly: return "semantic-only";
    case CodebookMode::PixelOnly: return "pixel-only";
  }
  return "?";
}

inline CodebookMode parse_mode(const std::string& s) {
  if (s == "dual") return CodebookMode::Dual;
  if (s == "semantic-only") return CodebookMode::SemanticOnly;
  if (s == "pixel-only") return CodebookMode::PixelOnly;
  throw ConfigError("unknown codebook mode '" + s + "' (expected dual, semantic-only, pixel-only)");
}

enum class OptimizerKind { SgdMomentum, Adam };

inline const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd-momentum"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd-momentum") return OptimizerKind::SgdMomentum;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd-momentum, adam)");
}

struct TokenizerConfig {
  std::size_t image_side = 16;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t d_sem = 8;
  std::size_t d_pix = 4;
  std::size_t hidden = 32;
  std::size_t teacher_width = 8;
  std::size_t teacher_pool = 2;  // the teacher sees patches average-pooled by this factor
  bool teacher_remove_mean = true;  // and, by default, with each channel's patch mean removed
  std::size_t codebook_size = 32;
  double w_dis = kDefaultDistanceWeight;
  double beta = kDefaultCommitment;
  double lambda_sem = 1.0;
  double lambda_pix = 1.0;
  double lambda_g = 0.0;
  bool normalize = false;
  bool feature_norm = true;  // encoder outputs are l2-normalized per row in each space
  double codebook_init_scale = 0.5;
  std::vector<std::size_t> schedule{1, 2, 4};
  CodebookMode mode = CodebookMode::Dual;
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  double lr = 1e-2;
  double momentum = 0.9;  // beta1 under adam
  double max_grad_norm = 1.0;  // 0 disables clipping
  std::size_t reseed_interval = 0;  // steps between dead-entry reseeding; 0 disables
  double codebook_lr_scale = 1.0;   // learning-rate multiplier for the codebook tables
  std::size_t steps = 200;
  std::size_t batch = 4;
  std::size_t teacher_init_steps = 0;
  std::uint64_t seed = 0;

  std::size_t grid() const { return patch ? image_side / patch : 0; }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t sem_width() const { return mode == CodebookMode::PixelOnly ? 0 : d_sem; }
  std::size_t pix_width() const { return mode == CodebookMode::SemanticOnly ? 0 : d_pix; }
  std::size_t decoder_input_width() const {
    return mode == CodebookMode::SemanticOnly ? sem_width() : pix_width();
  }
  bool has_teacher() const { return sem_width() > 0; }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("tokenizer." + field + ": " + why);
    };
    if (patch == 0) fail("patch", "must be positive");
    if (image_side == 0 || image_side % patch != 0) fail("image_side", "must be a positive multiple of patch");
    if (channels == 0) fail("channels", "must be positive");
    if (hidden == 0) fail("hidden", "must be positive");
    if (codebook_size == 0) fail("codebook_size", "must be positive");
    if (sem_width() == 0 && pix_width() == 0) fail("d_sem", "both feature widths are zero");
    if (mode == CodebookMode::Dual && (d_sem == 0 || d_pix == 0)) fail("mode", "dual needs d_sem > 0 and d_pix > 0");
    if (decoder_input_width() == 0) fail("mode", "pixel decoder would have no input");
    if (has_teacher()) {
      if (teacher_width == 0) fail("teacher_width", "must be positive");
      if (teacher_pool == 0 || patch % teacher_pool != 0) fail("teacher_pool", "must divide patch");
    }
    if (!(w_dis > 0.0)) fail("w_dis", "must be positive");
    if (!(beta >= 0.0)) fail("beta", "must be >= 0");
    if (!(lambda_sem >= 0.0)) fail("lambda_sem", "must be >= 0");
    if (!(lambda_pix >= 0.0)) fail("lambda_pix", "must be >= 0");
    if (!std::isfinite(lambda_g)) fail("lambda_g", "must be finite");
    if (!(codebook_init_scale > 0.0)) fail("codebook_init_scale", "must be positive");
    if (!(lr >= 0.0)) fail("lr", "must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must be in [0, 1)");
    if (!(max_grad_norm >= 0.0)) fail("max_grad_norm", "must be >= 0");
    if (batch == 0) fail("batch", "must be positive");
    try {
      ScaleSchedule{schedule}.validate();
    } catch (const Error& e) {
      fail("schedule", e.what());
    }
    if (schedule.back() != grid()) {
      fail("schedule", "last side " + std::to_string(schedule.back()) + " must equal the patch grid " +
                           std::to_string(grid()));
    }
  }
};

// ---------------------------------------------------------------------------
// Layout helpers

namespace detail {

inline ImageGeometry batch_images(const Tensor& images, std::size_t patch, const char* what) {
  auto g = image_geometry(images, what);
  if (g.height != g.width) throw DimensionError(std::string(what) + ": images must be square");
  if (patch == 0 || g.height % patch != 0) {
    throw DimensionError(std::string(what) + ": side " + std::to_string(g.height) +
                         " is not divisible by patch " + std::to_string(patch));
  }
  return g;
}

}  // namespace detail

// [B x S x S x C] -> [B*G*G x p*p*C], patches in raster order.
inline Tensor image_to_patches(const Tensor& images, std::size_t p) {
  const auto g = detail::batch_images(images, p, "image_to_patches");
  const std::size_t s = g.height, c = g.channels, grid = s / p;
  Tensor out({g.batch * grid * grid, p * p * c});
  std::size_t o = 0;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t ch = 0; ch < c; ++ch)
              out[o++] = images[((b * s + gy * p + py) * s + gx * p + px) * c + ch];
  return out;
}

// Per-image permutation from patch rows back to image layout.
inline std::shared_ptr<const SparseMap> patches_to_image_map(std::size_t side, std::size_t p,
                                                             std::size_t c) {
  const std::size_t grid = side / p, n = side * side * c;
  auto map = std::make_shared<SparseMap>();
  map->in_size = n;
  map->out_size = n;
  map->entries.reserve(n);
  std::size_t in = 0;
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx)
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t ch = 0; ch < c; ++ch)
            map->entries.push_back({static_cast<std::uint32_t>(((gy * p + py) * side + gx * p + px) * c + ch),
                                    static_cast<std::uint32_t>(in++), 1.0});
  return map;
}

// 3x3 Sobel derivative (divided by 8) at every interior pixel and channel of
// one [S x S x C] image; axis 0 differentiates along x, axis 1 along y.
inline std::shared_ptr<const SparseMap> sobel_map(std::size_t side, std::size_t c, int axis) {
  auto map = std::make_shared<SparseMap>();
  map->in_size = side * side * c;
  const std::size_t inner = side >= 3 ? side - 2 : 0;
  map->out_size = inner * inner * c;
  static constexpr double kSmooth[3] = {1.0, 2.0, 1.0};
  std::size_t o = 0;
  for (std::size_t y = 1; y + 1 < side; ++y)
    for (std::size_t x = 1; x + 1 < side; ++x)
      for (std::size_t ch = 0; ch < c; ++ch, ++o)
        for (int t = 0; t < 3; ++t) {
          const double w = kSmooth[t] / 8.0;
          const std::size_t along = (axis == 0 ? y : x) + static_cast<std::size_t>(t) - 1;
          auto at = [&](std::size_t yy, std::size_t xx) {
            return static_cast<std::uint32_t>((yy * side + xx) * c + ch);
          };
          const auto oo = static_cast<std::uint32_t>(o);
          if (axis == 0) {
            map->entries.push_back({oo, at(along, x + 1), w});
            map->entries.push_back({oo, at(along, x - 1), -w});
          } else {
            map->entries.push_back({oo, at(y + 1, along), w});
            map->entries.push_back({oo, at(y - 1, along), -w});
          }
        }
  return map;
}

// ---------------------------------------------------------------------------
// Losses

struct LossReport {
  double l_sem = 0.0;
  double l_vq = 0.0;
  double l_pix_l2 = 0.0;
  double l_percep = 0.0;
  double l_gan = 0.0;
  double l_total = 0.0;

  bool finite() const {
    return std::isfinite(l_sem) && std::isfinite(l_vq) && std::isfinite(l_pix_l2) &&
           std::isfinite(l_percep) && std::isfinite(l_gan) && std::isfinite(l_total);
  }
  std::string str() const {
    std::ostringstream os;
    os.precision(6);
    os << "l_total=" << l_total << " l_sem=" << l_sem << " l_vq=" << l_vq << " l_pix_l2=" << l_pix_l2
       << " l_percep=" << l_percep << " l_gan=" << l_gan;
    return os.str();
  }
  friend bool operator==(const LossReport&, const LossReport&) = default;
};

// Mean over positions of the squared l2 distance between rows.
inline Var semantic_loss(const Var& decoded, const Tensor& teacher_feats) {
  require_same_shape(decoded.value(), teacher_feats, "semantic_loss");
  const double n = static_cast<double>(std::max<std::size_t>(decoded.value().rows(), 1));
  return scale(squared_difference_sum(decoded, constant(teacher_feats)), 1.0 / n);
}

// Adversarial term hook: returns a scalar given the reconstruction. No
// discriminator ships with the toolkit; the term is 0 unless one is set.
using GanHook = std::function<Var(const Var& x_hat)>;

inline constexpr double kGradientMagnitudeEps = 1e-6;

struct PixelLoss {
  Var l2, percep, gan, total;
};

namespace detail {

inline void check_unit_range(const Tensor& t, const char* what) {
  for (double v : t.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw RangeError(std::string("pixel_loss: ") + what + " value " + std::to_string(v) +
                       " is outside [0, 1]");
    }
  }
}

inline Var gradient_magnitude(const Var& img, std::size_t side, std::size_t c) {
  const std::size_t blocks = img.value().size() / (side * side * c);
  const std::size_t inner = side - 2;
  const Shape out{blocks * inner * inner * c};
  Var gx = linear_map(img, sobel_map(side, c, 0), out);
  Var gy = linear_map(img, sobel_map(side, c, 1), out);
  return sqrt_eps(add(mul(gx, gx), mul(gy, gy)), kGradientMagnitudeEps);
}

}  // namespace detail

// x_hat and x are images in [0, 1] of equal shape ([S x S x C] or batched).
// l2 is the mean squared error; percep is the mean squared error between the
// Sobel gradient magnitudes of the two images over interior pixels (0 for
// images narrower than 3).
inline PixelLoss pixel_loss(const Var& x_hat, const Tensor& x, double lambda_g,
                            const GanHook& gan = {}) {
  require_same_shape(x_hat.value(), x, "pixel_loss");
  const auto g = detail::image_geometry(x, "pixel_loss");
  if (g.height != g.width) throw DimensionError("pixel_loss: images must be square");
  detail::check_unit_range(x, "target");
  detail::check_unit_range(x_hat.value(), "reconstruction");
  PixelLoss out;
  out.l2 = scale(squared_difference_sum(x_hat, constant(x)), 1.0 / static_cast<double>(x.size()));
  if (g.height >= 3) {
    Var mh = detail::gradient_magnitude(x_hat, g.height, g.channels);
    Tensor mx = detail::gradient_magnitude(constant(x), g.height, g.channels).value();
    out.percep = scale(squared_difference_sum(mh, constant(mx)), 1.0 / static_cast<double>(mx.size()));
  } else {
    out.percep = constant(Tensor::scalar(0.0));
  }
  out.gan = gan ? gan(x_hat) : constant(Tensor::scalar(0.0));
  out.total = add(add(out.l2, out.percep), scale(out.gan, lambda_g));
  return out;
}

inline PixelLoss pixel_loss(const Tensor& x_hat, const Tensor& x, double lambda_g) {
  return pixel_loss(constant(x_hat), x, lambda_g);
}

// ---------------------------------------------------------------------------
// Networks

// Affine layers with tanh between them; the last layer is linear.
class Mlp {
 public:
  Mlp() = default;

  Mlp(const std::vector<std::size_t>& widths, Rng rng) {
    if (widths.size() < 2) throw ConfigError("Mlp: need at least input and output widths");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(widths[l], 1)));
      weights_.push_back(parameter(rng.normal_tensor({widths[l], widths[l + 1]}, sd)));
      biases_.push_back(parameter(Tensor({widths[l + 1]})));
    }
  }

  Mlp deep_copy() const {
    Mlp m;
    for (const auto& w : weights_) m.weights_.push_back(parameter(w.value()));
    for (const auto& b : biases_) m.biases_.push_back(parameter(b.value()));
    return m;
  }

  bool empty() const { return weights_.empty(); }
  std::size_t layers() const { return weights_.size(); }
  std::size_t in_width() const { return weights_.front().value().dim(0); }
  std::size_t out_width() const { return weights_.back().value().dim(1); }

  Var forward(const Var& x) const {
    Var h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = affine(h, weights_[l], biases_[l]);
      if (l + 1 < weights_.size()) h = tanh(h);
    }
    return h;
  }

  void append_parameters(const std::string& prefix, std::vector<std::pair<std::string, Var>>& out) const {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.emplace_back(prefix + "." + std::to_string(l) + ".weight", weights_[l]);
      out.emplace_back(prefix + "." + std::to_string(l) + ".bias", biases_[l]);
    }
  }

 private:
  std::vector<Var> weights_, biases_;
};

// Frozen feature oracle. Either a seeded random affine projection of the
// average-pooled patch (centred at 0.5), or a table of precomputed feature
// maps keyed by image id. Never exposes parameters.
class Teacher {
 public:
  Teacher() = default;

  static Teacher random_projection(std::size_t patch, std::size_t channels, std::size_t pool,
                                   std::size_t width, Rng rng, bool remove_mean = true) {
    Teacher t;
    t.remove_mean_ = remove_mean;
    t.patch_ = patch;
    t.channels_ = channels;
    t.pool_ = pool;
    const std::size_t cells = (patch / pool) * (patch / pool) * channels;
    t.proj_ = rng.normal_tensor({cells, width}, 1.0 / std::sqrt(static_cast<double>(cells)));
    t.bias_ = rng.normal_tensor({width}, 0.1);
    return t;
  }

  // Each map is [G x G x width].
  static Teacher from_features(std::map<std::string, Tensor> feats) {
    if (feats.empty()) throw DataError("teacher: feature table is empty");
    Teacher t;
    const Shape& s0 = feats.begin()->second.shape();
    for (const auto& [id, f] : feats) {
      if (f.rank() != 3 || f.shape() != s0) {
        throw DataError("teacher: feature map for '" + id + "' has shape " + shape_str(f.shape()));
      }
    }
    t.table_ = std::move(feats);
    return t;
  }

  bool from_table() const { return !table_.empty(); }
  std::size_t width() const {
    return from_table() ? table_.begin()->second.dim(2) : (proj_.rank() == 2 ? proj_.dim(1) : 0);
  }
  const Tensor& projection() const { return proj_; }
  const Tensor& bias() const { return bias_; }

  // patches: [B*G*G x p*p*C] rows; ids are needed only for table teachers.
  Tensor features(const Tensor& patches, std::span<const std::string> ids = {}) const {
    if (from_table()) return lookup(patches.rows(), ids);
    const std::size_t p = patch_, c = channels_, q = pool_, cp = p / q;
    if (patches.rank() != 2 || patches.dim(1) != p * p * c) {
      throw DimensionError("teacher: patches " + shape_str(patches.shape()) + " do not match patch " +
                           std::to_string(p) + " x channels " + std::to_string(c));
    }
    const std::size_t n = patches.dim(0), cells = cp * cp * c, w = proj_.dim(1);
    const double inv = 1.0 / static_cast<double>(q * q);
    Tensor out({n, w});
    std::vector<double> pooled(cells);
    for (std::size_t r = 0; r < n; ++r) {
      std::fill(pooled.begin(), pooled.end(), 0.0);
      for (std::size_t py = 0; py < p; ++py)
        for (std::size_t px = 0; px < p; ++px)
          for (std::size_t ch = 0; ch < c; ++ch)
            pooled[((py / q) * cp + px / q) * c + ch] += patches.at(r, (py * p + px) * c + ch) * inv;
      std::vector<double> centre(c, 0.5);
      if (remove_mean_) {
        std::fill(centre.begin(), centre.end(), 0.0);
        for (std::size_t i = 0; i < cells; ++i) centre[i % c] += pooled[i] / static_cast<double>(cp * cp);
      }
      for (std::size_t j = 0; j < w; ++j) out.at(r, j) = bias_[j];
      for (std::size_t i = 0; i < cells; ++i) {
        const double v = pooled[i] - centre[i % c];
        for (std::size_t j = 0; j < w; ++j) out.at(r, j) += v * proj_.at(i, j);
      }
    }
    return out;
  }

 private:
  Tensor lookup(std::size_t rows, std::span<const std::string> ids) const {
    if (ids.empty()) throw DataError("teacher: table teacher needs image ids");
    const std::size_t per = rows / ids.size();
    Tensor out({rows, width()});
    for (std::size_t b = 0; b < ids.size(); ++b) {
      auto it = table_.find(ids[b]);
      if (it == table_.end()) throw DataError("teacher: no features for image '" + ids[b] + "'");
      if (it->second.size() / width() != per) {
        throw DataError("teacher: features for '" + ids[b] + "' do not match the patch grid");
      }
      std::copy(it->second.storage().begin(), it->second.storage().end(),
                out.storage().begin() + static_cast<std::ptrdiff_t>(b * per * width()));
    }
    return out;
  }

  std::size_t patch_ = 0, channels_ = 0, pool_ = 1;
  bool remove_mean_ = true;
  Tensor proj_, bias_;
  std::map<std::string, Tensor> table_;
};

// ---------------------------------------------------------------------------
// Model

struct ForwardPass {
  LossReport report;
  Var objective;  // lambda_sem * l_sem + l_vq + l_pix
  QuantizeResult quant;
  Var recon;  // [B x S x S x C]
};

class Tokenizer {
 public:
  Tokenizer() = default;

  explicit Tokenizer(TokenizerConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t pd = cfg_.patch_dim(), h = cfg_.hidden, ds = cfg_.sem_width(), dp = cfg_.pix_width();
    auto stream = [&](std::uint64_t tag) { return Rng(derive_seed(cfg_.seed, tag)); };
    if (ds) {
      enc_sem_ = Mlp({pd, h, ds}, stream(seed_tag::kSemanticEncoder));
      dec_sem_ = Mlp({ds, h, cfg_.teacher_width}, stream(seed_tag::kSemanticDecoder));
      teacher_ = Teacher::random_projection(cfg_.patch, cfg_.channels, cfg_.teacher_pool,
                                            cfg_.teacher_width, stream(seed_tag::kTeacher),
                                            cfg_.teacher_remove_mean);
    }
    if (dp) enc_pix_ = Mlp({pd, h, dp}, stream(seed_tag::kPixelEncoder));
    dec_pix_ = Mlp({cfg_.decoder_input_width(), h, pd}, stream(seed_tag::kPixelDecoder));
    CodebookOptions o{.w_dis = cfg_.w_dis, .normalize = cfg_.normalize, .init_scale = cfg_.codebook_init_scale};
    Rng cb_rng = stream(seed_tag::kCodebook);
    cb_ = DualCodebook::random(cfg_.codebook_size, ds, dp, o, cb_rng);
    to_image_ = patches_to_image_map(cfg_.image_side, cfg_.patch, cfg_.channels);
  }

  // Deep copy: parameter nodes are cloned so the copy trains independently.
  Tokenizer clone() const {
    Tokenizer t = *this;  // the codebook copy is already deep
    t.enc_sem_ = enc_sem_.deep_copy();
    t.enc_pix_ = enc_pix_.deep_copy();
    t.dec_sem_ = dec_sem_.deep_copy();
    t.dec_pix_ = dec_pix_.deep_copy();
    return t;
  }

  const TokenizerConfig& config() const { return cfg_; }
  DualCodebook& codebook() { return cb_; }
  const DualCodebook& codebook() const { return cb_; }
  const Teacher& teacher() const { return teacher_; }
  void set_teacher(Teacher t) {
    if (cfg_.has_teacher() && t.width() != cfg_.teacher_width) {
      throw ConfigError("teacher width " + std::to_string(t.width()) + " does not match teacher_width " +
                        std::to_string(cfg_.teacher_width));
    }
    teacher_ = std::move(t);
  }
  void set_gan(GanHook hook) { gan_ = std::move(hook); }

  // Trainable parameters in a fixed order; the codebook tables come last.
  std::vector<std::pair<std::string, Var>> named_parameters() const {
    std::vector<std::pair<std::string, Var>> out;
    if (!enc_sem_.empty()) enc_sem_.append_parameters("enc_sem", out);
    if (!enc_pix_.empty()) enc_pix_.append_parameters("enc_pix", out);
    if (!dec_sem_.empty()) dec_sem_.append_parameters("dec_sem", out);
    dec_pix_.append_parameters("dec_pix", out);
    out.emplace_back("codebook.sem", cb_.sem_param());
    out.emplace_back("codebook.pix", cb_.pix_param());
    return out;
  }
  std::vector<Var> parameters() const {
    std::vector<Var> out;
    for (auto& [name, v] : named_parameters()) out.push_back(v);
    return out;
  }
  std::vector<Var> semantic_branch_parameters() const {
    std::vector<std::pair<std::string, Var>> named;
    if (!enc_sem_.empty()) enc_sem_.append_parameters("enc_sem", named);
    if (!dec_sem_.empty()) dec_sem_.append_parameters("dec_sem", named);
    std::vector<Var> out;
    for (auto& [name, v] : named) out.push_back(v);
    return out;
  }

  ScaleSchedule schedule() const { return ScaleSchedule{cfg_.schedule}; }

  // Encoder outputs as [B x G x G x d] maps.
  std::pair<Var, Var> encode_features(const Tensor& patches, std::size_t batch) const {
    const std::size_t g = cfg_.grid();
    Var pv = constant(patches);
    auto run = [&](const Mlp& enc, std::size_t d) {
      if (d == 0) return constant(Tensor({batch, g, g, 0}));
      Var z = enc.forward(pv);
      if (cfg_.feature_norm) z = normalize_rows(z);
      return reshape(z, {batch, g, g, d});
    };
    return {run(enc_sem_, cfg_.sem_width()), run(enc_pix_, cfg_.pix_width())};
  }

  // Pixel decoder on quantized maps [B x G x G x d]; returns images.
  Var decode_pixels(const Var& q_sem, const Var& q_pix) const {
    const Var& in = cfg_.mode == CodebookMode::SemanticOnly ? q_sem : q_pix;
    const std::size_t batch = in.value().dim(0), g = cfg_.grid(), d = cfg_.decoder_input_width();
    Var rows = reshape(in, {batch * g * g, d});
    Var out = scale_shift(tanh(dec_pix_.forward(rows)), 0.5, 0.5);
    const std::size_t s = cfg_.image_side;
    return linear_map(out, to_image_, {batch, s, s, cfg_.channels});
  }

  Var decode_semantic(const Var& st_sem) const {
    const std::size_t n = st_sem.value().size() / cfg_.sem_width();
    return dec_sem_.forward(reshape(st_sem, {n, cfg_.sem_width()}));
  }

  // Full training forward pass. With `frozen`, the quantizer replays the
  // recorded assignments and stopped values (see MsvqFreeze).
  ForwardPass forward(const Tensor& images, const MsvqFreeze* frozen = nullptr,
                      std::span<const std::string> ids = {}) {
    const Tensor batch = as_batch(images);
    const std::size_t b = batch.dim(0);
    const Tensor patches = image_to_patches(batch, cfg_.patch);
    auto [z_sem, z_pix] = encode_features(patches, b);

    ForwardPass fp;
    fp.quant = msvq_encode(z_sem, z_pix, cb_, schedule(), cfg_.beta, frozen);
    Var l_sem = constant(Tensor::scalar(0.0));
    if (cfg_.has_teacher()) {
      l_sem = semantic_loss(decode_semantic(fp.quant.st_sem), teacher_.features(patches, ids));
    }
    fp.recon = decode_pixels(fp.quant.st_sem, fp.quant.st_pix);
    PixelLoss pl = pixel_loss(fp.recon, batch, cfg_.lambda_g, gan_);
    fp.objective = add(add(scale(l_sem, cfg_.lambda_sem), fp.quant.l_vq), scale(pl.total, cfg_.lambda_pix));
    fp.report = {l_sem.item(), fp.quant.l_vq.item(), pl.l2.item(), pl.percep.item(), pl.gan.item(),
                 fp.objective.item()};
    return fp;
  }

  // Distillation objective on unquantized semantic features.
  Var distill_loss(const Tensor& images, std::span<const std::string> ids = {}) const {
    if (!cfg_.has_teacher()) throw ConfigError("distill_loss: no semantic branch");
    const Tensor batch = as_batch(images);
    const Tensor patches = image_to_patches(batch, cfg_.patch);
    Var z = enc_sem_.forward(constant(patches));
    return semantic_loss(dec_sem_.forward(z), teacher_.features(patches, ids));
  }

  std::size_t image_size() const { return cfg_.image_side * cfg_.image_side * cfg_.channels; }

  Tensor as_batch(const Tensor& images) const {
    auto g = detail::batch_images(images, cfg_.patch, "tokenizer");
    if (g.height != cfg_.image_side || g.channels != cfg_.channels) {
      throw DimensionError("tokenizer: image " + shape_str(images.shape()) + " does not match config side " +
                           std::to_string(cfg_.image_side) + " channels " + std::to_string(cfg_.channels));
    }
    if (g.batch == 0) throw DimensionError("tokenizer: empty batch");
    return images.rank() == 4 ? images : images.reshaped({1, g.height, g.width, g.channels});
  }

 private:
  TokenizerConfig cfg_;
  Mlp enc_sem_, enc_pix_, dec_sem_, dec_pix_;
  DualCodebook cb_;
  Teacher teacher_;
  GanHook gan_;
  std::shared_ptr<const SparseMap> to_image_;
};

// ---------------------------------------------------------------------------
// Optimization

// SGD with momentum (v <- mu v + g; theta <- theta - lr v) or Adam with
// bias correction, where `momentum` plays the role of beta1. Gradients are
// rescaled first when their global norm exceeds max_grad_norm.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerKind kind, double lr, double momentum, double max_grad_norm = 0.0)
      : kind_(kind), lr_(lr), momentum_(momentum), max_norm_(max_grad_norm) {}

  OptimizerKind kind() const { return kind_; }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  // Forgets the state of selected rows of one parameter (after those rows
  // were overwritten).
  void reset_rows(std::size_t param, std::span<const std::uint32_t> rows) {
    if (param >= first_.size()) return;
    for (Tensor* t : {&first_[param], &second_[param]}) {
      const std::size_t w = t->row_width();
      for (auto r : rows) std::fill_n(t->storage().begin() + static_cast<std::ptrdiff_t>(r * w), w, 0.0);
    }
  }

  void step(std::span<const Var> params, std::vector<Tensor>& grads) {
    if (first_.empty()) {
      for (const auto& p : params) {
        first_.emplace_back(p.shape());
        second_.emplace_back(p.shape());
      }
    }
    if (first_.size() != params.size()) throw ParameterError("optimizer: parameter list changed");
    if (max_norm_ > 0.0) {
      double sq = 0.0;
      for (const auto& g : grads) sq += g.squared_norm();
      const double norm = std::sqrt(sq);
      if (norm > max_norm_) {
        for (auto& g : grads)
          for (double& v : g.storage()) v *= max_norm_ / norm;
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(momentum_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Var p = params[i];
      Tensor& m = first_[i];
      Tensor& v = second_[i];
      Tensor& w = p.mutable_value();
      const Tensor& g = grads[i];
      if (kind_ == OptimizerKind::SgdMomentum) {
        for (std::size_t j = 0; j < w.size(); ++j) {
          m[j] = momentum_ * m[j] + g[j];
          w[j] -= lr_ * m[j];
        }
      } else {
        for (std::size_t j = 0; j < w.size(); ++j) {
          m[j] = momentum_ * m[j] + (1.0 - momentum_) * g[j];
          v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * g[j] * g[j];
          w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + kAdamEps);
        }
      }
    }
  }

  static constexpr double kAdamBeta2 = 0.999;
  static constexpr double kAdamEps = 1e-8;

 private:
  OptimizerKind kind_ = OptimizerKind::SgdMomentum;
  double lr_ = 1e-2, momentum_ = 0.9, max_norm_ = 0.0;
  std::uint64_t t_ = 0;
  std::vector<Tensor> first_, second_;
};

inline Optimizer make_optimizer(const TokenizerConfig& cfg) {
  return Optimizer(cfg.optimizer, cfg.lr, cfg.momentum, cfg.max_grad_norm);
}

namespace detail {

[[noreturn]] inline void diverged(const std::string& where, const LossReport& r,
                                  const std::vector<std::string>& bad) {
  std::ostringstream os;
  os << where << ": non-finite values (" << r.str() << ")";
  if (!bad.empty()) {
    os << "; offending tensors:";
    for (const auto& b : bad) os << ' ' << b;
  }
  throw DivergenceError(os.str());
}

}  // namespace detail

// One optimizer update of encoders, decoders and codebook tables on
// L_total. The teacher holds no parameters and never changes.
inline LossReport train_step(Tokenizer& model, const Tensor& batch, Optimizer& opt,
                             std::span<const std::string> ids = {}) {
  ForwardPass fp = model.forward(batch, nullptr, ids);
  auto named = model.named_parameters();
  if (!fp.report.finite()) detail::diverged("train_step", fp.report, {});
  std::vector<Var> params;
  for (auto& [n, v] : named) params.push_back(v);
  auto grads = grad(fp.objective, params);
  std::vector<std::string> bad;
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!grads[i].all_finite()) bad.push_back("grad(" + named[i].first + ")");
  if (!bad.empty()) detail::diverged("train_step", fp.report, bad);
  const double cb_scale = model.config().codebook_lr_scale;
  for (std::size_t i = grads.size() - 2; i < grads.size(); ++i)
    for (double& g : grads[i].storage()) g *= cb_scale;
  opt.step(params, grads);
  for (auto& [n, v] : named)
    if (!v.value().all_finite()) bad.push_back(n);
  if (!bad.empty()) detail::diverged("train_step", fp.report, bad);
  if (model.codebook().normalize()) model.codebook().renormalize();
  return fp.report;
}

// Teacher-initialization analogue: pulls the semantic encoder towards the
// teacher before joint training. Returns l_sem before the update.
inline double distill_step(Tokenizer& model, const Tensor& batch, Optimizer& opt,
                           std::span<const std::string> ids = {}) {
  Var loss = model.distill_loss(batch, ids);
  if (!std::isfinite(loss.item())) detail::diverged("distill_step", {.l_sem = loss.item()}, {});
  auto params = model.semantic_branch_parameters();
  auto grads = grad(loss, params);
  opt.step(params, grads);
  return loss.item();
}

// Rows [idx...] of an image stack [N x S x S x C].
inline Tensor gather_images(const Tensor& images, std::span<const std::size_t> idx) {
  const std::size_t per = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = idx.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= images.dim(0)) throw DimensionError("gather_images: index out of range");
    std::copy_n(images.storage().begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                out.storage().begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

// Deterministic minibatch stream: a fresh shuffle of [0, n) per epoch.
class BatchOrder {
 public:
  BatchOrder(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(std::min(batch, n)), rng_(derive_seed(seed, seed_tag::kBatchOrder)) {
    if (n == 0) throw DataError("training set is empty");
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    while (out.size() < batch_) {
      if (pos_ == perm_.size()) reshuffle();
      out.push_back(perm_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    perm_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
    rng_.shuffle(perm_);
    pos_ = 0;
  }
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> perm_;
  std::size_t pos_ = 0;
};

using StepObserver = std::function<void(std::size_t step, const LossReport&)>;

// Runs config.teacher_init_steps distillation updates, then config.steps
// joint updates on minibatches of `images`.
inline std::vector<LossReport> train_tokenizer(Tokenizer& model, const Tensor& images,
                                               const StepObserver& observe = {}) {
  const auto& cfg = model.config();
  const Tensor all = model.as_batch(images);
  BatchOrder order(all.dim(0), cfg.batch, cfg.seed);
  if (cfg.teacher_init_steps > 0 && cfg.has_teacher()) {
    Optimizer distill = make_optimizer(cfg);
    for (std::size_t s = 0; s < cfg.teacher_init_steps; ++s) {
      auto idx = order.next();
      distill_step(model, gather_images(all, idx), distill);
    }
  }
  Optimizer opt = make_optimizer(cfg);
  model.codebook().start_counting(true);
  std::vector<LossReport> history;
  history.reserve(cfg.steps);
  DualCodebook& cb = model.codebook();
  std::vector<std::uint64_t> window_start(cb.usage_counts().begin(), cb.usage_counts().end());
  Rng reseed_rng(derive_seed(cfg.seed, seed_tag::kCodebook, 1));
  const std::size_t n_params = model.parameters().size();
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    auto idx = order.next();
    Tensor batch = gather_images(all, idx);
    history.push_back(train_step(model, batch, opt));
    if (cfg.reseed_interval > 0 && (s + 1) % cfg.reseed_interval == 0 && s + 1 < cfg.steps) {
      std::vector<std::uint64_t> window(cb.size());
      for (std::size_t i = 0; i < cb.size(); ++i) window[i] = cb.usage_counts()[i] - window_start[i];
      cb.stop_counting();
      const Tensor patches = image_to_patches(batch, cfg.patch);
      auto [zs, zp] = model.encode_features(patches, batch.dim(0));
      auto q = msvq_encode(zs.value(), zp.value(), cb, model.schedule(), cfg.beta);
      Tensor rows_s = q.query_sem.front(), rows_p = q.query_pix.front();
      for (std::size_t k = 1; k < q.query_sem.size(); ++k) {
        rows_s = concat_rows(rows_s, q.query_sem[k]);
        rows_p = concat_rows(rows_p, q.query_pix[k]);
      }
      auto fresh = cb.reseed_unused(rows_s, rows_p, reseed_rng, window);
      opt.reset_rows(n_params - 2, fresh);
      opt.reset_rows(n_params - 1, fresh);
      cb.start_counting(false);
      window_start.assign(cb.usage_counts().begin(), cb.usage_counts().end());
    }
    if (observe) observe(s, history.back());
  }
  model.codebook().stop_counting();
  return history;
}

// ---------------------------------------------------------------------------
// Inference

struct Encoded {
  std::vector<MultiScaleTokens> tokens;
  Tensor q_sem, q_pix;  // [B x G x G x d]
  Tensor f_sem, f_pix;  // encoder outputs before quantization
};

inline Encoded encode(Tokenizer& model, const Tensor& images) {
  const Tensor batch = model.as_batch(images);
  const Tensor patches = image_to_patches(batch, model.config().patch);
  auto [zs, zp] = model.encode_features(patches, batch.dim(0));
  auto q = msvq_encode(zs.value(), zp.value(), model.codebook(), model.schedule(), model.config().beta);
  return {std::move(q.tokens), q.q_sem.value(), q.q_pix.value(), zs.value(), zp.value()};
}

inline Tensor decode_tokens(const Tokenizer& model, std::span<const MultiScaleTokens> tokens) {
  auto [qs, qp] = msvq_decode_batch(tokens, model.codebook(), model.schedule());
  return model.decode_pixels(constant(qs), constant(qp)).value();
}

// Fraction of entries hit while encoding `images` (all scales).
inline double measure_utilization(Tokenizer& model, const Tensor& images, std::size_t chunk = 64) {
  const Tensor all = model.as_batch(images);
  DualCodebook& cb = model.codebook();
  cb.start_counting(true);
  for (std::size_t i = 0; i < all.dim(0); i += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t j = i; j < std::min(all.dim(0), i + chunk); ++j) idx.push_back(j);
    encode(model, gather_images(all, idx));
  }
  cb.stop_counting();
  return utilization(cb);
}

struct Reconstruction {
  Tensor image;
  double psnr = 0.0, ssim = 0.0;
  std::vector<std::string> warnings;
};

// encode -> msvq_encode -> pixel decode. Output is in [0, 1] by construction
// of the decoder head.
inline Reconstruction reconstruct(Tokenizer& model, const Tensor& images) {
  Reconstruction r;
  const auto& usage = model.codebook().usage_counts();
  if (std::all_of(usage.begin(), usage.end(), [](std::uint64_t c) { return c == 0; })) {
    r.warnings.push_back("codebook utilization is 0: the model looks untrained");
  }
  const Tensor batch = model.as_batch(images);
  Encoded e = encode(model, batch);
  r.image = model.decode_pixels(constant(e.q_sem), constant(e.q_pix)).value();
  r.psnr = psnr(batch, r.image);
  r.ssim = model.config().image_side >= kSsimWindow ? ssim(batch, r.image) : 0.0;
  if (images.rank() == 3) r.image = r.image.reshaped(images.shape());
  return r;
}

}  // namespace tokenflow

namespace tokenflow {

// End-to-end gradient probe. L_total is piecewise constant in the codebook
// assignments, so the finite differences are taken on the frozen surrogate:
// the forward pass at the probe point records its assignments and stopped
// values, and every perturbed pass replays them. At the probe point the
// surrogate and the live objective agree in value and in gradient.
struct GradientProbe {
  std::string parameter;
  std::size_t index = 0;
  double analytic = 0.0, numeric = 0.0, rel_error = 0.0;
};

inline std::vector<GradientProbe> probe_gradients(Tokenizer& model, const Tensor& images, std::size_t probes,
                                                  std::uint64_t seed, double h = 1e-5) {
  ForwardPass live = model.forward(images);
  const MsvqFreeze frozen = live.quant.freeze;
  auto named = model.named_parameters();
  std::vector<Var> params;
  for (auto& [n, v] : named) params.push_back(v);
  const auto grads = grad(live.objective, params);

  std::size_t total = 0;
  for (auto& p : params) total += p.value().size();
  Rng rng(seed);
  std::vector<GradientProbe> out;
  for (std::size_t k = 0; k < probes; ++k) {
    // Draw a flat coordinate, then cover each tensor at least once when
    // there are enough probes to do so.
    std::size_t which = k < params.size() && probes >= params.size() ? k : params.size();
    std::size_t idx = 0;
    if (which < params.size() && params[which].value().size() == 0) continue;
    if (which == params.size()) {
      std::size_t flat = rng.below(total);
      for (which = 0; flat >= params[which].value().size(); ++which) flat -= params[which].value().size();
      idx = flat;
    } else {
      idx = rng.below(params[which].value().size());
    }
    Tensor& value = params[which].mutable_value();
    const double orig = value[idx];
    value[idx] = orig + h;
    const double up = model.forward(images, &frozen).objective.item();
    value[idx] = orig - h;
    const double down = model.forward(images, &frozen).objective.item();
    value[idx] = orig;
    GradientProbe g{named[which].first, idx, grads[which][idx], (up - down) / (2.0 * h), 0.0};
    g.rel_error = relative_error(g.analytic, g.numeric);
    out.push_back(g);
  }
  return out;
}

}  // namespace tokenflow
