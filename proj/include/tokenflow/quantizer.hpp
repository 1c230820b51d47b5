#pragma once

// Multi-scale residual quantization over a DualCodebook.
//
// Features travel as rank-3 [S x S x d] maps (one image) or rank-4
// [B x S x S x d] batches. At each scale side s_k both residuals are
// area-pooled to s_k x s_k, one joint lookup per cell picks a single index
// shared by both spaces, the retrieved embeddings are bilinearly upsampled
// back to S x S, accumulated into the reconstruction and subtracted from the
// residuals.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <tuple>
#include <utility>
#include <vector>

#include "tokenflow/autodiff.hpp"
#include "tokenflow/codebook.hpp"
#include "tokenflow/io.hpp"
#include "tokenflow/tensor.hpp"

namespace tokenflow {

struct ScaleSchedule {
  std::vector<std::size_t> sides;

  std::size_t full_side() const { return sides.empty() ? 0 : sides.back(); }
  std::size_t size() const { return sides.size(); }

  void validate() const {
    if (sides.empty()) throw ConfigError("scale schedule is empty");
    for (std::size_t i = 0; i < sides.size(); ++i) {
      if (sides[i] == 0) throw ConfigError("scale schedule sides must be positive");
      if (i && sides[i] <= sides[i - 1]) throw ConfigError("scale schedule must be strictly increasing");
    }
  }

  friend bool operator==(const ScaleSchedule&, const ScaleSchedule&) = default;
};

// Per-scale index grids, row-major, grid k of side sides[k].
struct MultiScaleTokens {
  std::uint32_t codebook_size = 0;
  std::vector<std::size_t> sides;
  std::vector<std::vector<std::uint32_t>> grids;

  void validate() const {
    if (grids.size() != sides.size()) throw CorruptTokenError("token grid count != scale count");
    for (std::size_t k = 0; k < grids.size(); ++k) {
      if (grids[k].size() != sides[k] * sides[k]) throw CorruptTokenError("token grid has wrong size");
      for (auto t : grids[k]) {
        if (t >= codebook_size) {
          throw CorruptTokenError("token " + std::to_string(t) + " out of range for K=" +
                                  std::to_string(codebook_size));
        }
      }
    }
  }

  friend bool operator==(const MultiScaleTokens&, const MultiScaleTokens&) = default;
};

// ---------------------------------------------------------------------------
// Resampling operators on [side x side x d] blocks.

// Area average over bins with edges round(j * from / to).
inline std::shared_ptr<const SparseMap> downsample_map(std::size_t from, std::size_t to,
                                                        std::size_t d) {
  if (to == 0 || to > from) {
    throw DimensionError("downsample: target side " + std::to_string(to) + " must be in [1, " +
                         std::to_string(from) + "]");
  }
  auto edge = [&](std::size_t j) {
    return static_cast<std::size_t>(std::llround(static_cast<double>(j * from) / static_cast<double>(to)));
  };
  auto map = std::make_shared<SparseMap>();
  map->in_size = from * from * d;
  map->out_size = to * to * d;
  for (std::size_t oy = 0; oy < to; ++oy) {
    const std::size_t y0 = edge(oy), y1 = edge(oy + 1);
    for (std::size_t ox = 0; ox < to; ++ox) {
      const std::size_t x0 = edge(ox), x1 = edge(ox + 1);
      const double w = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x)
          for (std::size_t c = 0; c < d; ++c) {
            map->entries.push_back({static_cast<std::uint32_t>((oy * to + ox) * d + c),
                                    static_cast<std::uint32_t>((y * from + x) * d + c), w});
          }
    }
  }
  return map;
}

// Bilinear interpolation with corner-aligned sampling: output cell j samples
// source coordinate j * (from - 1) / (to - 1).
inline std::shared_ptr<const SparseMap> upsample_map(std::size_t from, std::size_t to,
                                                      std::size_t d) {
  if (from == 0 || to < from) {
    throw DimensionError("upsample: target side " + std::to_string(to) + " must be >= " +
                         std::to_string(from));
  }
  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  std::vector<Tap> taps(to);
  for (std::size_t j = 0; j < to; ++j) {
    if (from == 1 || to == 1) {
      taps[j] = {0, 0, 0.0};
      continue;
    }
    const double src = static_cast<double>(j * (from - 1)) / static_cast<double>(to - 1);
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 >= from - 1) i0 = from - 1;
    const double frac = src - static_cast<double>(i0);
    taps[j] = {i0, std::min(i0 + 1, from - 1), frac};
  }
  auto map = std::make_shared<SparseMap>();
  map->in_size = from * from * d;
  map->out_size = to * to * d;
  for (std::size_t oy = 0; oy < to; ++oy)
    for (std::size_t ox = 0; ox < to; ++ox) {
      const Tap ty = taps[oy], tx = taps[ox];
      const std::pair<std::size_t, double> ys[2] = {{ty.i0, 1.0 - ty.w1}, {ty.i1, ty.w1}};
      const std::pair<std::size_t, double> xs[2] = {{tx.i0, 1.0 - tx.w1}, {tx.i1, tx.w1}};
      for (const auto& [sy, wy] : ys)
        for (const auto& [sx, wx] : xs) {
          const double w = wy * wx;
          if (w == 0.0) continue;
          for (std::size_t c = 0; c < d; ++c) {
            map->entries.push_back({static_cast<std::uint32_t>((oy * to + ox) * d + c),
                                    static_cast<std::uint32_t>((sy * from + sx) * d + c), w});
          }
        }
    }
  return map;
}

namespace detail {
inline void require_square_map(const Tensor& fm, const char* what) {
  if (fm.rank() != 3 || fm.dim(0) != fm.dim(1)) {
    throw DimensionError(std::string(what) + ": expected a square [S x S x d] map, got " +
                         shape_str(fm.shape()));
  }
}
}  // namespace detail

inline Tensor downsample(const Tensor& fm, std::size_t side) {
  detail::require_square_map(fm, "downsample");
  const std::size_t d = fm.dim(2);
  return apply_map(fm, *downsample_map(fm.dim(0), side, d), {side, side, d});
}

inline Tensor upsample(const Tensor& fm, std::size_t side) {
  detail::require_square_map(fm, "upsample");
  const std::size_t d = fm.dim(2);
  return apply_map(fm, *upsample_map(fm.dim(0), side, d), {side, side, d});
}

// Cached resampling operators for one (schedule, width) pair.
class ScaleMaps {
 public:
  ScaleMaps(const ScaleSchedule& sched, std::size_t d) : d_(d) {
    sched.validate();
    const std::size_t full = sched.full_side();
    for (std::size_t s : sched.sides) {
      down_.push_back(downsample_map(full, s, d));
      up_.push_back(upsample_map(s, full, d));
    }
  }
  const SparseMap& down(std::size_t k) const { return *down_[k]; }
  const SparseMap& up(std::size_t k) const { return *up_[k]; }
  std::shared_ptr<const SparseMap> up_ptr(std::size_t k) const { return up_[k]; }
  std::size_t width() const { return d_; }

 private:
  std::size_t d_;
  std::vector<std::shared_ptr<const SparseMap>> down_;
  std::vector<std::shared_ptr<const SparseMap>> up_;
};

// ---------------------------------------------------------------------------
// Straight-through composition: forward value q, identity Jacobian w.r.t. f.
// Same gradient as sg[q - f] + f without the rounding of the sum.

inline Var straight_through(const Var& f, const Tensor& q) {
  require_same_shape(f.value(), q, "straight_through");
  return Var::make(q, {f}, [](detail::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------

// Everything a forward pass treats as constant: the chosen indices and the
// values seen through sg[.]. Re-running msvq_encode with a freeze gives a
// smooth function of the inputs and tables whose derivative is exactly what
// the straight-through/stop-gradient backward pass computes.
struct MsvqFreeze {
  std::vector<std::vector<std::uint32_t>> indices;  // per stage, flat over the batch
  Tensor f_sem, f_pix;                              // encoder outputs in row layout
  std::vector<Tensor> q_sem, q_pix;                 // accumulation after each stage
};

struct QuantizeResult {
  std::vector<MultiScaleTokens> tokens;  // one per batch item
  Var q_sem, q_pix;                      // accumulated reconstruction, shape of the input
  Var st_sem, st_pix;                    // straight-through views
  Var l_vq;                              // scalar
  std::vector<double> residual_sem;      // |r_sem|^2 after each stage (summed over batch)
  std::vector<double> residual_pix;
  std::vector<Tensor> query_sem, query_pix;  // pooled residual rows looked up at each stage
  MsvqFreeze freeze;
};

namespace detail {

struct BatchGeometry {
  std::size_t batch, side, d;
};

inline BatchGeometry geometry(const Tensor& f, const char* what) {
  if (f.rank() == 3 && f.dim(0) == f.dim(1)) return {1, f.dim(0), f.dim(2)};
  if (f.rank() == 4 && f.dim(1) == f.dim(2)) return {f.dim(0), f.dim(1), f.dim(3)};
  throw DimensionError(std::string(what) + ": expected [S x S x d] or [B x S x S x d], got " +
                       shape_str(f.shape()));
}

}  // namespace detail

inline void check_quantizer_config(const Tensor& f_sem, const Tensor& f_pix, const DualCodebook& cb,
                                   const ScaleSchedule& sched) {
  sched.validate();
  auto gs = detail::geometry(f_sem, "msvq_encode");
  auto gp = detail::geometry(f_pix, "msvq_encode");
  if (gs.batch != gp.batch || gs.side != gp.side) {
    throw DimensionError("msvq_encode: semantic " + shape_str(f_sem.shape()) + " vs pixel " +
                         shape_str(f_pix.shape()));
  }
  if (gs.side != sched.full_side()) {
    throw ConfigError("msvq_encode: schedule ends at side " + std::to_string(sched.full_side()) +
                      " but features have side " + std::to_string(gs.side));
  }
  if (gs.d != cb.sem_width() || gp.d != cb.pix_width()) {
    throw ConfigError("msvq_encode: feature widths (" + std::to_string(gs.d) + ", " +
                      std::to_string(gp.d) + ") do not match codebook (" +
                      std::to_string(cb.sem_width()) + ", " + std::to_string(cb.pix_width()) + ")");
  }
  if (cb.size() == 0) throw EmptyCodebookError("msvq_encode: codebook has no entries");
}

// Residual loop. Lookups go through joint_lookup, so an active counting
// session on `cb` records every assignment. The returned graph differentiates
// l_vq w.r.t. both codebook tables and the encoder outputs, and the
// straight-through views w.r.t. the encoder outputs.
inline QuantizeResult msvq_encode(const Var& f_sem, const Var& f_pix, DualCodebook& cb,
                                  const ScaleSchedule& sched, double beta,
                                  const MsvqFreeze* frozen = nullptr) {
  check_quantizer_config(f_sem.value(), f_pix.value(), cb, sched);
  const auto g = detail::geometry(f_sem.value(), "msvq_encode");
  const std::size_t batch = g.batch, full = g.side, ds = cb.sem_width(), dp = cb.pix_width();
  const ScaleMaps maps_sem(sched, ds), maps_pix(sched, dp);
  const Shape row_shape_sem{batch * full * full, ds}, row_shape_pix{batch * full * full, dp};

  Var fs = reshape(f_sem, row_shape_sem);
  Var fp = reshape(f_pix, row_shape_pix);
  Tensor r_sem = fs.value(), r_pix = fp.value();

  QuantizeResult res;
  res.tokens.resize(batch);
  for (auto& t : res.tokens) {
    t.codebook_size = static_cast<std::uint32_t>(cb.size());
    t.sides = sched.sides;
  }
  Var q_sem, q_pix, l_vq;
  for (std::size_t k = 0; k < sched.size(); ++k) {
    const std::size_t s = sched.sides[k];
    Tensor dsem = apply_map(r_sem, maps_sem.down(k), {batch * s * s, ds});
    Tensor dpix = apply_map(r_pix, maps_pix.down(k), {batch * s * s, dp});
    std::vector<std::uint32_t> idx;
    if (frozen) {
      if (frozen->indices.size() != sched.size() || frozen->indices[k].size() != batch * s * s) {
        throw DimensionError("msvq_encode: frozen indices do not match the schedule");
      }
      idx = frozen->indices[k];
    } else {
      std::vector<Assignment> assign = lookup_rows(dsem, dpix, cb);
      idx.resize(assign.size());
      for (std::size_t i = 0; i < assign.size(); ++i) idx[i] = assign[i].index;
    }
    res.freeze.indices.push_back(idx);
    res.query_sem.push_back(std::move(dsem));
    res.query_pix.push_back(std::move(dpix));
    for (std::size_t b = 0; b < batch; ++b) {
      res.tokens[b].grids.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(b * s * s),
                                       idx.begin() + static_cast<std::ptrdiff_t>((b + 1) * s * s));
    }
    // Same index grid drives both tables.
    Var up_sem = linear_map(gather_rows(cb.sem_param(), idx), maps_sem.up_ptr(k), row_shape_sem);
    Var up_pix = linear_map(gather_rows(cb.pix_param(), idx), maps_pix.up_ptr(k), row_shape_pix);
    q_sem = k == 0 ? up_sem : add(q_sem, up_sem);
    q_pix = k == 0 ? up_pix : add(q_pix, up_pix);
    for (std::size_t i = 0; i < r_sem.size(); ++i) r_sem[i] -= up_sem.value()[i];
    for (std::size_t i = 0; i < r_pix.size(); ++i) r_pix[i] -= up_pix.value()[i];
    res.residual_sem.push_back(r_sem.squared_norm());
    res.residual_pix.push_back(r_pix.squared_norm());

    res.freeze.q_sem.push_back(q_sem.value());
    res.freeze.q_pix.push_back(q_pix.value());
    Var stage = frozen ? add(vq_loss(fs, frozen->f_sem, q_sem, frozen->q_sem.at(k), beta),
                             vq_loss(fp, frozen->f_pix, q_pix, frozen->q_pix.at(k), beta))
                       : add(vq_loss(fs, q_sem, beta), vq_loss(fp, q_pix, beta));
    l_vq = k == 0 ? stage : add(l_vq, stage);
  }
  // Equal weight per scale, averaged so the magnitude does not grow with the
  // schedule length.
  l_vq = scale(l_vq, 1.0 / static_cast<double>(sched.size()));

  res.q_sem = reshape(q_sem, f_sem.shape());
  res.q_pix = reshape(q_pix, f_pix.shape());
  res.freeze.f_sem = fs.value();
  res.freeze.f_pix = fp.value();
  if (frozen) {
    // f + (q0 - f0): identity Jacobian, value q0 at the frozen point.
    auto offset = [&](const Tensor& q0, const Tensor& f0) {
      Tensor o = q0;
      for (std::size_t i = 0; i < o.size(); ++i) o[i] -= f0[i];
      return constant(std::move(o));
    };
    res.st_sem = add(f_sem, reshape(offset(frozen->q_sem.back(), frozen->f_sem), f_sem.shape()));
    res.st_pix = add(f_pix, reshape(offset(frozen->q_pix.back(), frozen->f_pix), f_pix.shape()));
  } else {
    res.st_sem = straight_through(f_sem, res.q_sem.value());
    res.st_pix = straight_through(f_pix, res.q_pix.value());
  }
  res.l_vq = l_vq;
  return res;
}

// Tensor convenience overload: no gradients needed by the caller.
inline QuantizeResult msvq_encode(const Tensor& f_sem, const Tensor& f_pix, DualCodebook& cb,
                                  const ScaleSchedule& sched, double beta = kDefaultCommitment) {
  return msvq_encode(constant(f_sem), constant(f_pix), cb, sched, beta);
}

// Sum over scales of upsampled embeddings. Reproduces msvq_encode's
// accumulation operation for operation, so values match bit for bit.
// `upto` keeps only the first scales (a partial decode).
inline std::pair<Tensor, Tensor> msvq_decode_batch(std::span<const MultiScaleTokens> tokens,
                                                   const DualCodebook& cb, const ScaleSchedule& sched,
                                                   std::size_t upto = static_cast<std::size_t>(-1)) {
  sched.validate();
  const std::size_t batch = tokens.size(), full = sched.full_side();
  const std::size_t ds = cb.sem_width(), dp = cb.pix_width();
  for (const auto& t : tokens) {
    t.validate();
    if (t.sides != sched.sides) throw ConfigError("msvq_decode: token scales do not match schedule");
    if (t.codebook_size != cb.size()) throw ConfigError("msvq_decode: token K does not match codebook");
  }
  const ScaleMaps maps_sem(sched, ds), maps_pix(sched, dp);
  Tensor q_sem, q_pix;
  const std::size_t stages = std::max<std::size_t>(1, std::min(upto, sched.size()));
  for (std::size_t k = 0; k < stages; ++k) {
    std::vector<std::uint32_t> idx;
    for (const auto& t : tokens) idx.insert(idx.end(), t.grids[k].begin(), t.grids[k].end());
    Tensor up_sem = apply_map(gather_rows(constant(cb.sem()), idx).value(), maps_sem.up(k),
                              {batch * full * full, ds});
    Tensor up_pix = apply_map(gather_rows(constant(cb.pix()), idx).value(), maps_pix.up(k),
                              {batch * full * full, dp});
    if (k == 0) {
      q_sem = std::move(up_sem);
      q_pix = std::move(up_pix);
    } else {
      for (std::size_t i = 0; i < q_sem.size(); ++i) q_sem[i] = q_sem[i] + up_sem[i];
      for (std::size_t i = 0; i < q_pix.size(); ++i) q_pix[i] = q_pix[i] + up_pix[i];
    }
  }
  return {q_sem.reshaped({batch, full, full, ds}), q_pix.reshaped({batch, full, full, dp})};
}

// Single image: returns [S x S x d_sem], [S x S x d_pix].
inline std::pair<Tensor, Tensor> msvq_decode(const MultiScaleTokens& tokens, const DualCodebook& cb,
                                             const ScaleSchedule& sched) {
  auto [s, p] = msvq_decode_batch(std::span<const MultiScaleTokens>(&tokens, 1), cb, sched);
  const std::size_t full = sched.full_side();
  return {s.reshaped({full, full, cb.sem_width()}), p.reshaped({full, full, cb.pix_width()})};
}

// ---------------------------------------------------------------------------
// Per-stage fitted residual quantization, used to study how reconstruction
// error evolves as scales are added. Each stage gets its own codebook: Lloyd
// iterations on the pooled residual fix the assignment, then the entries are
// refit by ridge least squares through the upsampling operator so that the
// stage minimizes the full-resolution residual. Because zero entries are
// feasible for that refit, no stage can increase the residual energy.

struct StagewiseFit {
  std::vector<DualCodebook> codebooks;
  std::vector<std::vector<std::uint32_t>> grids;
  std::vector<double> error_after_stage;  // |r_sem|^2 + w_dis |r_pix|^2 at full side
  Tensor recon_sem, recon_pix;
};

namespace detail {

// Lloyd iterations with farthest-first seeding; deterministic.
inline std::vector<std::uint32_t> lloyd_assign(const Tensor& pts_sem, const Tensor& pts_pix,
                                               std::size_t k, double w_dis, int iters) {
  const std::size_t n = pts_sem.rows();
  k = std::min(k, n);
  auto dist = [&](std::size_t a, const std::vector<double>& cs, const std::vector<double>& cp) {
    double s = 0.0;
    auto ra = pts_sem.row(a);
    for (std::size_t j = 0; j < ra.size(); ++j) s += (ra[j] - cs[j]) * (ra[j] - cs[j]);
    auto pa = pts_pix.row(a);
    double p = 0.0;
    for (std::size_t j = 0; j < pa.size(); ++j) p += (pa[j] - cp[j]) * (pa[j] - cp[j]);
    return s + w_dis * p;
  };
  std::vector<std::vector<double>> cs, cp;
  cs.emplace_back(pts_sem.row(0).begin(), pts_sem.row(0).end());
  cp.emplace_back(pts_pix.row(0).begin(), pts_pix.row(0).end());
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  while (cs.size() < k) {
    std::size_t far = 0;
    double far_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist(i, cs.back(), cp.back()));
      if (best[i] > far_d) far_d = best[i], far = i;
    }
    cs.emplace_back(pts_sem.row(far).begin(), pts_sem.row(far).end());
    cp.emplace_back(pts_pix.row(far).begin(), pts_pix.row(far).end());
  }
  std::vector<std::uint32_t> assign(n, 0);
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < cs.size(); ++c) {
        const double dd = dist(i, cs[c], cp[c]);
        if (dd < bd) bd = dd, assign[i] = static_cast<std::uint32_t>(c);
      }
    }
    std::vector<std::size_t> count(cs.size(), 0);
    for (auto& c : cs) std::fill(c.begin(), c.end(), 0.0);
    for (auto& c : cp) std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[assign[i]];
      auto rs = pts_sem.row(i);
      auto rp = pts_pix.row(i);
      for (std::size_t j = 0; j < rs.size(); ++j) cs[assign[i]][j] += rs[j];
      for (std::size_t j = 0; j < rp.size(); ++j) cp[assign[i]][j] += rp[j];
    }
    for (std::size_t c = 0; c < cs.size(); ++c) {
      if (count[c] == 0) continue;
      for (double& v : cs[c]) v /= static_cast<double>(count[c]);
      for (double& v : cp[c]) v /= static_cast<double>(count[c]);
    }
  }
  return assign;
}

// argmin_E |r - U A E|^2 + ridge |E|^2 over a [k x d] table E, where A is the
// one-hot assignment of the s*s cells and U the per-image upsampling operator.
inline Tensor refit_entries(const Tensor& residual, std::span<const std::uint32_t> assign,
                            std::size_t k, const SparseMap& up_scalar, std::size_t batch,
                            std::size_t d, double ridge) {
  const std::size_t cells = up_scalar.in_size, full2 = up_scalar.out_size;
  // M = U A per image, accumulated as normal equations over the batch.
  Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  Eigen::MatrixXd atr = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
  for (std::size_t b = 0; b < batch; ++b) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(full2), static_cast<Eigen::Index>(k));
    for (const auto& e : up_scalar.entries) {
      m(e.out, assign[b * cells + e.in]) += e.weight;
    }
    Eigen::MatrixXd r(static_cast<Eigen::Index>(full2), static_cast<Eigen::Index>(d));
    for (std::size_t p = 0; p < full2; ++p)
      for (std::size_t j = 0; j < d; ++j) r(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(j)) =
          residual[(b * full2 + p) * d + j];
    ata += m.transpose() * m;
    atr += m.transpose() * r;
  }
  ata += ridge * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  Eigen::MatrixXd e = ata.ldlt().solve(atr);
  Tensor out({k, d});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  return out;
}

}  // namespace detail

inline StagewiseFit fit_residual_stages(const Tensor& f_sem, const Tensor& f_pix,
                                        const ScaleSchedule& sched, std::size_t k,
                                        double w_dis = kDefaultDistanceWeight, int lloyd_iters = 10,
                                        double ridge = 1e-9) {
  sched.validate();
  const auto gs = detail::geometry(f_sem, "fit_residual_stages");
  const auto gp = detail::geometry(f_pix, "fit_residual_stages");
  if (gs.batch != gp.batch || gs.side != gp.side || gs.side != sched.full_side()) {
    throw DimensionError("fit_residual_stages: features do not match schedule");
  }
  const std::size_t batch = gs.batch, full = gs.side, ds = gs.d, dp = gp.d;
  Tensor r_sem = f_sem.reshaped({batch * full * full, ds});
  Tensor r_pix = f_pix.reshaped({batch * full * full, dp});
  StagewiseFit fit;
  fit.recon_sem = Tensor(r_sem.shape());
  fit.recon_pix = Tensor(r_pix.shape());
  const ScaleMaps maps_sem(sched, ds), maps_pix(sched, dp);
  for (std::size_t st = 0; st < sched.size(); ++st) {
    const std::size_t s = sched.sides[st];
    Tensor dsem = apply_map(r_sem, maps_sem.down(st), {batch * s * s, ds});
    Tensor dpix = apply_map(r_pix, maps_pix.down(st), {batch * s * s, dp});
    auto assign = detail::lloyd_assign(dsem, dpix, k, w_dis, lloyd_iters);
    auto up1 = upsample_map(s, full, 1);
    Tensor es = detail::refit_entries(r_sem, assign, k, *up1, batch, ds, ridge);
    Tensor ep = detail::refit_entries(r_pix, assign, k, *up1, batch, dp, ridge);
    CodebookOptions opts;
    opts.w_dis = w_dis;
    DualCodebook cb(es, ep, opts);
    Tensor up_sem = apply_map(gather_rows(constant(es), assign).value(), maps_sem.up(st), r_sem.shape());
    Tensor up_pix = apply_map(gather_rows(constant(ep), assign).value(), maps_pix.up(st), r_pix.shape());
    for (std::size_t i = 0; i < r_sem.size(); ++i) r_sem[i] -= up_sem[i], fit.recon_sem[i] += up_sem[i];
    for (std::size_t i = 0; i < r_pix.size(); ++i) r_pix[i] -= up_pix[i], fit.recon_pix[i] += up_pix[i];
    fit.error_after_stage.push_back(r_sem.squared_norm() + w_dis * r_pix.squared_norm());
    fit.codebooks.push_back(std::move(cb));
    fit.grids.push_back(std::move(assign));
  }
  return fit;
}

// ---------------------------------------------------------------------------
// DFTK: "DFTK" | u32 K | u8 numScales | per scale: u32 side, side*side u32

inline void write_tokens(std::ostream& os, const MultiScaleTokens& t) {
  t.validate();
  if (t.sides.size() > 255) throw DimensionError("DFTK: more than 255 scales");
  io::write_bytes(os, "DFTK", 4);
  io::write_le<std::uint32_t>(os, t.codebook_size);
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.sides.size()));
  for (std::size_t k = 0; k < t.sides.size(); ++k) {
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.sides[k]));
    for (auto v : t.grids[k]) io::write_le<std::uint32_t>(os, v);
  }
}

inline MultiScaleTokens read_tokens(std::istream& is) {
  io::expect_magic(is, "DFTK", "token file");
  MultiScaleTokens t;
  t.codebook_size = io::read_le<std::uint32_t>(is, "token K");
  const auto n = io::read_le<std::uint8_t>(is, "token scale count");
  for (std::size_t k = 0; k < n; ++k) {
    const auto side = io::read_le<std::uint32_t>(is, "token side");
    if (side == 0 || side > 4096) throw DataError("token file: implausible side " + std::to_string(side));
    t.sides.push_back(side);
    std::vector<std::uint32_t> g(static_cast<std::size_t>(side) * side);
    for (auto& v : g) v = io::read_le<std::uint32_t>(is, "token grid");
    t.grids.push_back(std::move(g));
  }
  t.validate();
  return t;
}

inline void save_tokens(const std::filesystem::path& path, const MultiScaleTokens& t) {
  auto os = io::open_out(path);
  write_tokens(os, t);
}

inline MultiScaleTokens load_tokens(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  return read_tokens(is);
}

}  // namespace tokenflow
