#pragma once

// Next-scale generation over MultiScaleTokens with multi-step top-k/top-p
// refinement, classifier-free guidance and a toy per-scale prior.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokenflow/autodiff.hpp"
#include "tokenflow/codebook.hpp"
#include "tokenflow/quantizer.hpp"
#include "tokenflow/tensor.hpp"
#include "tokenflow/tokenizer.hpp"

namespace tokenflow {

// ---------------------------------------------------------------------------
// Filtering

inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ParameterError("softmax: empty logits");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double den = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) den += p[i] = std::exp(logits[i] - mx);
  for (double& v : p) v /= den;
  return p;
}

// Indices sorted by probability descending, ties by index ascending.
inline std::vector<std::uint32_t> rank_by_probability(std::span<const double> probs) {
  std::vector<std::uint32_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0u);
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) { return probs[a] > probs[b]; });
  return order;
}

// Softmax, keep the k most probable, then the shortest prefix of those
// (renormalized) whose mass reaches p. p == 0 or k == 1 is greedy. A k larger
// than the vocabulary keeps everything.
inline std::vector<double> top_k_top_p_filter(std::span<const double> logits, std::int64_t k, double p) {
  if (k < 1) throw ParameterError("top_k_top_p_filter: k must be >= 1, got " + std::to_string(k));
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("top_k_top_p_filter: p must be in [0, 1]");
  const std::vector<double> probs = softmax(logits);
  const auto order = rank_by_probability(probs);
  std::vector<double> out(probs.size(), 0.0);
  if (k == 1 || p == 0.0) {
    out[order.front()] = 1.0;
    return out;
  }
  const std::size_t keep_k = std::min<std::size_t>(static_cast<std::size_t>(k), probs.size());
  double top_mass = 0.0;
  for (std::size_t i = 0; i < keep_k; ++i) top_mass += probs[order[i]];
  std::size_t keep = 0;
  double cum = 0.0;
  while (keep < keep_k) {
    cum += probs[order[keep]] / top_mass;
    ++keep;
    if (cum >= p - 1e-12) break;
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) mass += probs[order[i]];
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / mass;
  return out;
}

// Inverse-CDF draw in index order.
inline std::uint32_t sample_index(std::span<const double> probs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::uint32_t last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last = static_cast<std::uint32_t>(i);
    cum += probs[i];
    if (u < cum) return last;
  }
  return last;
}

inline std::vector<double> cfg_mix(std::span<const double> cond, std::span<const double> uncond, double s) {
  if (cond.size() != uncond.size()) {
    throw DimensionError("cfg_mix: widths " + std::to_string(cond.size()) + " and " + std::to_string(uncond.size()));
  }
  std::vector<double> out(cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + s * (cond[i] - uncond[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Schedules

inline constexpr double kReferenceGuidanceScale = 7.5;

struct SampleSchedule {
  std::vector<std::int64_t> k_list{1};
  std::vector<double> p_list{0.0};

  std::size_t steps() const { return k_list.size(); }

  // With k == 1 the step is greedy whatever p says, so p counts as 0 there.
  double effective_p(std::size_t j) const { return k_list[j] == 1 ? 0.0 : p_list[j]; }

  void validate(const std::string& where = "sample_schedule") const {
    if (k_list.empty() || k_list.size() != p_list.size()) {
      throw ConfigError(where + ": k_list and p_list must be nonempty and of equal length (got " +
                        std::to_string(k_list.size()) + " and " + std::to_string(p_list.size()) + ")");
    }
    for (std::size_t j = 0; j < k_list.size(); ++j) {
      if (k_list[j] < 1) throw ConfigError(where + ".k_list[" + std::to_string(j) + "]: must be >= 1");
      if (!(p_list[j] >= 0.0 && p_list[j] <= 1.0)) {
        throw ConfigError(where + ".p_list[" + std::to_string(j) + "]: must be in [0, 1]");
      }
      if (j > 0 && k_list[j] > k_list[j - 1]) throw ConfigError(where + ".k_list: must be nonincreasing");
      if (j > 0 && effective_p(j) > effective_p(j - 1)) throw ConfigError(where + ".p_list: must be nonincreasing");
    }
  }

  static SampleSchedule single(std::int64_t k, double p) { return {{k}, {p}}; }

  // Large-scale defaults: k = [1200, 100, 1], p = [0.8, 0.8, 0].
  static SampleSchedule reference_three_step() { return {{1200, 100, 1}, {0.8, 0.8, 0.0}}; }
  // The same schedule as written in the generation setup, last p = 1.0.
  static SampleSchedule reference_three_step_alt() { return {{1200, 100, 1}, {0.8, 0.8, 1.0}}; }
  static SampleSchedule reference_two_step() { return {{1200, 1}, {0.8, 0.0}}; }

  friend bool operator==(const SampleSchedule&, const SampleSchedule&) = default;
};

struct SamplingConfig {
  std::vector<SampleSchedule> per_scale;
  double guidance_scale = 1.0;
  std::uint64_t seed = 0;
  std::optional<std::uint32_t> class_id;

  // The generation-setup layout: a single step at the first scale, the full
  // schedule at every later one.
  static SamplingConfig repeated(std::size_t scales, const SampleSchedule& s, bool single_first = true) {
    SamplingConfig c;
    for (std::size_t i = 0; i < scales; ++i) {
      if (i == 0 && single_first) {
        c.per_scale.push_back({{s.k_list.front()}, {s.p_list.front()}});
      } else {
        c.per_scale.push_back(s);
      }
    }
    return c;
  }

  std::size_t total_steps() const {
    std::size_t n = 0;
    for (const auto& s : per_scale) n += s.steps();
    return n;
  }
};

// ---------------------------------------------------------------------------
// Toy prior

// One affine head per scale. The features of a position at scale k are
//   [context (D) | neighbour mean (D) | refine flag | position one-hot | class one-hot]
// where the context is the running sum of the upsampled embeddings of the
// earlier scales, area-averaged down to side k, and the neighbour mean reads
// the 4-neighbourhood of the grid being refined (zero with flag 0 on the
// first pass). Embeddings are the semantic and pixel entries concatenated.
// The null class (index num_classes) leaves the class slots at zero, so a
// class row that never saw data leaves the logits unconditional.
class ToyPrior {
 public:
  ToyPrior() = default;
  ToyPrior(const DualCodebook& cb, ScaleSchedule sched, std::uint32_t num_classes, double cond_drop_prob = 0.1)
      : sched_(std::move(sched)), num_classes_(num_classes), cond_drop_(cond_drop_prob) {
    sched_.validate();
    if (cb.size() == 0) throw EmptyCodebookError("prior: codebook has no entries");
    if (!(cond_drop_prob >= 0.0 && cond_drop_prob <= 1.0)) {
      throw ConfigError("prior.cond_drop_prob: must be in [0, 1]");
    }
    set_embeddings(cb);
    for (std::size_t k = 0; k < sched_.size(); ++k) {
      weights_.push_back(parameter(Tensor({feature_width(k), vocab()})));
      biases_.push_back(parameter(Tensor({vocab()})));
    }
  }

  std::size_t vocab() const { return embed_.dim(0); }
  std::size_t embed_width() const { return embed_.dim(1); }
  const ScaleSchedule& schedule() const { return sched_; }
  std::uint32_t num_classes() const { return num_classes_; }
  std::uint32_t null_class() const { return num_classes_; }
  double cond_drop_prob() const { return cond_drop_; }
  const Tensor& embeddings() const { return embed_; }

  std::size_t feature_width(std::size_t k) const {
    const std::size_t s = sched_.sides[k];
    return 2 * embed_width() + 1 + s * s + num_classes_;
  }

  std::vector<Var> parameters() const {
    std::vector<Var> out;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      out.push_back(weights_[k]);
      out.push_back(biases_[k]);
    }
    return out;
  }

  // The codebook can change after the prior was built (e.g. reloaded); the
  // heads only depend on its shape.
  void set_embeddings(const DualCodebook& cb) {
    Tensor e({cb.size(), cb.sem_width() + cb.pix_width()});
    for (std::size_t i = 0; i < cb.size(); ++i) {
      for (std::size_t j = 0; j < cb.sem_width(); ++j) e.at(i, j) = cb.sem().at(i, j);
      for (std::size_t j = 0; j < cb.pix_width(); ++j) e.at(i, cb.sem_width() + j) = cb.pix().at(i, j);
    }
    if (!embed_.empty() && e.shape() != embed_.shape()) {
      throw DimensionError("prior: codebook shape " + shape_str(e.shape()) + " does not match " +
                           shape_str(embed_.shape()));
    }
    embed_ = std::move(e);
  }

  // [s x s x D] embedding of a token grid.
  Tensor embed_grid(std::span<const std::uint32_t> grid, std::size_t side) const {
    const std::size_t d = embed_width();
    Tensor out({side, side, d});
    for (std::size_t i = 0; i < side * side; ++i) {
      if (grid[i] >= vocab()) throw CorruptTokenError("prior: token " + std::to_string(grid[i]) + " >= K");
      std::copy_n(embed_.storage().begin() + static_cast<std::ptrdiff_t>(grid[i] * d), d,
                  out.storage().begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return out;
  }

  // Context maps for every scale of a token set (entry k uses grids < k).
  std::vector<Tensor> contexts(const std::vector<std::vector<std::uint32_t>>& grids, std::size_t upto) const {
    const std::size_t full = sched_.full_side(), d = embed_width();
    std::vector<Tensor> out;
    Tensor acc({full, full, d});
    for (std::size_t k = 0; k < upto; ++k) {
      const std::size_t s = sched_.sides[k];
      out.push_back(downsample(acc, s));
      Tensor up = upsample(embed_grid(grids[k], s), full);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += up[i];
    }
    return out;
  }

  // Rows of features for scale k. `grid` is the current grid at this scale
  // for a refinement pass, or empty for the first pass.
  Tensor features(std::size_t k, const Tensor& ctx, std::span<const std::uint32_t> grid,
                  std::uint32_t cls) const {
    const std::size_t s = sched_.sides[k], d = embed_width(), f = feature_width(k);
    if (cls > num_classes_) throw ParameterError("prior: class " + std::to_string(cls) + " out of range");
    Tensor x({s * s, f});
    Tensor emb;
    if (!grid.empty()) emb = embed_grid(grid, s);
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t xx = 0; xx < s; ++xx) {
        const std::size_t pos = y * s + xx;
        double* row = &x.at(pos, 0);
        for (std::size_t j = 0; j < d; ++j) row[j] = ctx[pos * d + j];
        if (!grid.empty()) {
          std::size_t n = 0;
          const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
          for (int t = 0; t < 4; ++t) {
            const long ny = static_cast<long>(y) + dy[t], nx = static_cast<long>(xx) + dx[t];
            if (ny < 0 || nx < 0 || ny >= static_cast<long>(s) || nx >= static_cast<long>(s)) continue;
            const std::size_t np = static_cast<std::size_t>(ny) * s + static_cast<std::size_t>(nx);
            for (std::size_t j = 0; j < d; ++j) row[d + j] += emb[np * d + j];
            ++n;
          }
          if (n > 0)
            for (std::size_t j = 0; j < d; ++j) row[d + j] /= static_cast<double>(n);
          row[2 * d] = 1.0;
        }
        row[2 * d + 1 + pos] = 1.0;
        if (cls < num_classes_) row[2 * d + 1 + s * s + cls] = 1.0;
      }
    }
    return x;
  }

  Var logits(std::size_t k, const Tensor& features) const {
    return affine(constant(features), weights_[k], biases_[k]);
  }

 private:
  ScaleSchedule sched_;
  std::uint32_t num_classes_ = 0;
  double cond_drop_ = 0.1;
  Tensor embed_;
  std::vector<Var> weights_, biases_;
};

// ---------------------------------------------------------------------------
// Training

struct PriorTrainConfig {
  std::size_t epochs = 100;
  double lr = 0.5;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

namespace detail {

inline void check_token_set(const ToyPrior& prior, const MultiScaleTokens& t, const char* what) {
  t.validate();
  if (t.sides != prior.schedule().sides) {
    throw ConfigError(std::string(what) + ": token scales do not match the prior's schedule");
  }
  if (t.codebook_size != prior.vocab()) {
    throw ConfigError(std::string(what) + ": token K " + std::to_string(t.codebook_size) + " vs prior K " +
                      std::to_string(prior.vocab()));
  }
}

}  // namespace detail

// Full-batch teacher-forced cross-entropy, every scale, both passes (first
// pass without neighbours, refinement pass with the true neighbours). Each
// example's class is replaced by the null class with probability
// cond_drop_prob, redrawn every epoch. Returns the mean loss per epoch,
// measured before that epoch's update.
inline std::vector<double> train_prior(ToyPrior& prior, std::span<const MultiScaleTokens> data,
                                       std::span<const std::uint32_t> labels, const PriorTrainConfig& cfg) {
  if (data.empty()) throw DataError("train_prior: token dataset is empty");
  if (!labels.empty() && labels.size() != data.size()) {
    throw DataError("train_prior: " + std::to_string(labels.size()) + " labels for " + std::to_string(data.size()) +
                    " token sets");
  }
  const std::size_t scales = prior.schedule().size();
  std::vector<std::vector<Tensor>> ctx;
  for (const auto& t : data) {
    detail::check_token_set(prior, t, "train_prior");
    ctx.push_back(prior.contexts(t.grids, scales));
  }
  for (auto l : labels)
    if (l >= prior.num_classes()) throw DataError("train_prior: label " + std::to_string(l) + " out of range");

  auto params = prior.parameters();
  Optimizer opt(OptimizerKind::SgdMomentum, cfg.lr, cfg.momentum, 0.0);
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng drop(derive_seed(cfg.seed, seed_tag::kPrior, epoch));
    std::vector<std::uint32_t> cls(data.size(), prior.null_class());
    for (std::size_t n = 0; n < data.size(); ++n) {
      const bool dropped = drop.uniform() < prior.cond_drop_prob();
      if (!labels.empty() && !dropped) cls[n] = labels[n];
    }
    Var total = constant(Tensor::scalar(0.0));
    for (std::size_t k = 0; k < scales; ++k) {
      const std::size_t s = prior.schedule().sides[k], rows = s * s;
      Tensor x({2 * data.size() * rows, prior.feature_width(k)});
      std::vector<std::uint32_t> targets;
      std::size_t r = 0;
      for (std::size_t n = 0; n < data.size(); ++n) {
        for (int pass = 0; pass < 2; ++pass) {
          const auto& grid = data[n].grids[k];
          Tensor f = prior.features(k, ctx[n][k], pass ? std::span<const std::uint32_t>(grid)
                                                       : std::span<const std::uint32_t>(), cls[n]);
          std::copy(f.storage().begin(), f.storage().end(),
                    x.storage().begin() + static_cast<std::ptrdiff_t>(r * x.dim(1)));
          r += rows;
          targets.insert(targets.end(), grid.begin(), grid.end());
        }
      }
      total = add(total, softmax_cross_entropy(prior.logits(k, x), targets));
    }
    total = scale(total, 1.0 / static_cast<double>(scales));
    if (!std::isfinite(total.item())) {
      throw DivergenceError("train_prior: non-finite loss at epoch " + std::to_string(epoch));
    }
    history.push_back(total.item());
    auto grads = grad(total, params);
    opt.step(params, grads);
  }
  return history;
}

// ---------------------------------------------------------------------------
// Sampling

struct SampleResult {
  MultiScaleTokens tokens;
  std::size_t invocations = 0;  // prior passes; a guided pass counts once
};

namespace detail {

inline std::vector<double> row_of(const Tensor& logits, std::size_t r) {
  return {logits.storage().begin() + static_cast<std::ptrdiff_t>(r * logits.dim(1)),
          logits.storage().begin() + static_cast<std::ptrdiff_t>((r + 1) * logits.dim(1))};
}

}  // namespace detail

// One scale of multi-step sampling. Pass 1 draws every position from
// filter(k1, p1) without neighbour information; each later pass re-embeds
// the current grid, recomputes the logits and redraws every position with
// (k_j, p_j). Position i of pass j draws from its own stream keyed by
// (seed, scale, pass, position), so the order positions are visited in does
// not matter.
inline std::vector<std::uint32_t> multi_step_sample_scale(const ToyPrior& prior, std::size_t k, const Tensor& ctx,
                                                          const SampleSchedule& sched, const SamplingConfig& cfg,
                                                          std::size_t* invocations = nullptr) {
  sched.validate("sampling.per_scale[" + std::to_string(k) + "]");
  const std::size_t s = prior.schedule().sides[k], rows = s * s;
  const bool guided = cfg.class_id.has_value() && cfg.guidance_scale != 1.0;
  const std::uint32_t cls = cfg.class_id.value_or(prior.null_class());
  if (cfg.class_id && *cfg.class_id >= prior.num_classes()) {
    throw ConfigError("sampling.class_id: " + std::to_string(*cfg.class_id) + " out of range");
  }
  std::vector<std::uint32_t> grid;
  for (std::size_t j = 0; j < sched.steps(); ++j) {
    const Tensor cond = prior.logits(k, prior.features(k, ctx, grid, cls)).value();
    Tensor uncond;
    if (guided) uncond = prior.logits(k, prior.features(k, ctx, grid, prior.null_class())).value();
    if (invocations) ++*invocations;
    std::vector<std::uint32_t> next(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      std::vector<double> l = detail::row_of(cond, i);
      if (guided) l = cfg_mix(l, detail::row_of(uncond, i), cfg.guidance_scale);
      const auto probs = top_k_top_p_filter(l, sched.k_list[j], sched.p_list[j]);
      Rng rng(derive_seed(cfg.seed, seed_tag::kSampling, k, j, i));
      next[i] = sample_index(probs, rng);
    }
    grid = std::move(next);
  }
  return grid;
}

inline SampleResult sample_tokens(const ToyPrior& prior, const SamplingConfig& cfg) {
  const auto& sched = prior.schedule();
  if (cfg.per_scale.size() != sched.size()) {
    throw ConfigError("sampling.per_scale: " + std::to_string(cfg.per_scale.size()) + " schedules for " +
                      std::to_string(sched.size()) + " scales");
  }
  SampleResult out;
  out.tokens.codebook_size = static_cast<std::uint32_t>(prior.vocab());
  out.tokens.sides = sched.sides;
  const std::size_t full = sched.full_side(), d = prior.embed_width();
  Tensor acc({full, full, d});
  for (std::size_t k = 0; k < sched.size(); ++k) {
    const std::size_t s = sched.sides[k];
    const Tensor ctx = downsample(acc, s);
    auto grid = multi_step_sample_scale(prior, k, ctx, cfg.per_scale[k], cfg, &out.invocations);
    Tensor up = upsample(prior.embed_grid(grid, s), full);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += up[i];
    out.tokens.grids.push_back(std::move(grid));
  }
  return out;
}

struct Generated {
  SampleResult sample;
  Tensor image;  // [S x S x C]
};

inline Generated generate(const ToyPrior& prior, const Tokenizer& model, const SamplingConfig& cfg) {
  if (prior.schedule() != model.schedule()) {
    throw ConfigError("generate: prior and tokenizer scale schedules differ");
  }
  Generated g;
  g.sample = sample_tokens(prior, cfg);
  const std::size_t s = model.config().image_side;
  g.image = decode_tokens(model, std::span<const MultiScaleTokens>(&g.sample.tokens, 1))
                .reshaped({s, s, model.config().channels});
  return g;
}

// Mean negative log-likelihood per position of a token set under the
// prior's refinement conditional: every position is scored given the true
// earlier scales and its true neighbours at its own scale. Lower means the
// grid is more self-consistent under the prior.
inline double grid_nll(const ToyPrior& prior, const MultiScaleTokens& t,
                       std::optional<std::uint32_t> class_id = std::nullopt) {
  detail::check_token_set(prior, t, "grid_nll");
  const std::uint32_t cls = class_id.value_or(prior.null_class());
  const auto ctx = prior.contexts(t.grids, prior.schedule().size());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < ctx.size(); ++k) {
    const auto& grid = t.grids[k];
    const Tensor logits = prior.logits(k, prior.features(k, ctx[k], grid, cls)).value();
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto p = softmax(detail::row_of(logits, i));
      total += -std::log(std::max(p[grid[i]], std::numeric_limits<double>::min()));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace tokenflow
