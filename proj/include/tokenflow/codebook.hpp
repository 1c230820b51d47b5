#pragma once

// Paired semantic/pixel embedding tables over one index space, with the joint
// nearest-entry rule
//
//   i* = argmin_i  |z_sem - e_sem,i|^2 + w_dis * |z_pix - e_pix,i|^2
//
// Ties go to the lowest index. A table of width 0 contributes zero distance,
// which is how the single-codebook baselines are expressed.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "tokenflow/autodiff.hpp"
#include "tokenflow/io.hpp"
#include "tokenflow/tensor.hpp"

namespace tokenflow {

inline constexpr double kNormEpsilon = 1e-12;
inline constexpr double kDefaultDistanceWeight = 1.0;
inline constexpr double kDefaultCommitment = 0.25;

struct Normalized {
  Tensor value;
  bool degenerate = false;
};

// v / max(|v|, eps). Below eps the input comes back unchanged and flagged.
inline Normalized l2_normalize(std::span<const double> v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double n = std::sqrt(n2);
  Tensor out({v.size()}, std::vector<double>(v.begin(), v.end()));
  if (n < kNormEpsilon) return {std::move(out), true};
  for (double& x : out.storage()) x /= n;
  return {std::move(out), false};
}

inline Normalized l2_normalize(const Tensor& v) { return l2_normalize(v.data()); }

// out[i] = sum_j (query[j] - entries[i,j])^2
inline Tensor sq_dists(std::span<const double> query, const Tensor& entries) {
  if (entries.rank() != 2 || entries.dim(1) != query.size()) {
    throw DimensionError("sq_dists: query width " + std::to_string(query.size()) +
                         " vs entries " + shape_str(entries.shape()));
  }
  const std::size_t k = entries.dim(0), d = entries.dim(1);
  Tensor out({k});
  for (std::size_t i = 0; i < k; ++i) {
    const double* e = &entries.storage()[i * d];
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = query[j] - e[j];
      s += diff * diff;
    }
    out[i] = s;
  }
  return out;
}

inline Tensor sq_dists(const Tensor& query, const Tensor& entries) {
  return sq_dists(query.data(), entries);
}

struct Assignment {
  std::uint32_t index = 0;
  double d_sem = 0.0;
  double d_pix = 0.0;
  double d_joint = 0.0;
};

struct AssignmentGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Assignment> cells;  // row-major

  const Assignment& operator()(std::size_t y, std::size_t x) const { return cells[y * width + x]; }
  std::vector<std::uint32_t> indices() const {
    std::vector<std::uint32_t> out(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) out[i] = cells[i].index;
    return out;
  }
};

struct CodebookOptions {
  double w_dis = kDefaultDistanceWeight;
  bool normalize = false;
  double init_scale = 1.0;  // radius of the initial entries when not normalizing
};

class DualCodebook {
 public:
  DualCodebook() = default;

  DualCodebook(Tensor sem, Tensor pix, CodebookOptions opts)
      : sem_(parameter(std::move(sem))), pix_(parameter(std::move(pix))), opts_(opts) {
    if (sem_.value().rank() != 2 || pix_.value().rank() != 2 ||
        sem_.value().dim(0) != pix_.value().dim(0)) {
      throw DimensionError("DualCodebook: tables " + shape_str(sem_.shape()) + " and " +
                           shape_str(pix_.shape()) + " must share the entry count");
    }
    if (!(opts_.w_dis > 0.0)) throw ConfigError("DualCodebook: w_dis must be positive");
    usage_.assign(size(), 0);
    if (opts_.normalize) renormalize();
  }

  // Copies are deep: each copy owns its own parameter nodes.
  DualCodebook(const DualCodebook& o)
      : sem_(o.sem_.valid() ? parameter(o.sem()) : Var()),
        pix_(o.pix_.valid() ? parameter(o.pix()) : Var()),
        opts_(o.opts_),
        usage_(o.usage_),
        counting_(o.counting_) {}
  DualCodebook& operator=(const DualCodebook& o) {
    if (this != &o) *this = DualCodebook(o);
    return *this;
  }
  DualCodebook(DualCodebook&&) noexcept = default;
  DualCodebook& operator=(DualCodebook&&) noexcept = default;

  // Entries drawn uniformly from the unit sphere of each table (Gaussian
  // draw then normalization), scaled by init_scale unless normalizing.
  static DualCodebook random(std::size_t k, std::size_t d_sem, std::size_t d_pix,
                             CodebookOptions opts, Rng& rng) {
    auto draw = [&](std::size_t d) {
      Tensor t({k, d});
      for (std::size_t i = 0; i < k; ++i) {
        auto row = t.row(i);
        for (double& v : row) v = rng.normal();
        auto n = l2_normalize(std::span<const double>(row.data(), row.size()));
        const double r = opts.normalize ? 1.0 : opts.init_scale;
        for (std::size_t j = 0; j < d; ++j) row[j] = n.value[j] * r;
      }
      return t;
    };
    Tensor sem = draw(d_sem);
    Tensor pix = draw(d_pix);
    return DualCodebook(std::move(sem), std::move(pix), opts);
  }

  std::size_t size() const { return sem_.value().dim(0); }
  std::size_t sem_width() const { return sem_.value().dim(1); }
  std::size_t pix_width() const { return pix_.value().dim(1); }
  double w_dis() const { return opts_.w_dis; }
  bool normalize() const { return opts_.normalize; }
  const CodebookOptions& options() const { return opts_; }
  // Flag only; entries are not projected.
  void set_normalize_flag(bool v) { opts_.normalize = v; }

  const Tensor& sem() const { return sem_.value(); }
  const Tensor& pix() const { return pix_.value(); }
  const Var& sem_param() const { return sem_; }
  const Var& pix_param() const { return pix_; }
  Tensor& mutable_sem() { return sem_.mutable_value(); }
  Tensor& mutable_pix() { return pix_.mutable_value(); }

  // Pure lookup; does not touch usage counters.
  Assignment nearest(std::span<const double> z_sem, std::span<const double> z_pix) const {
    if (size() == 0) throw EmptyCodebookError("joint_lookup: codebook has no entries");
    if (z_sem.size() != sem_width() || z_pix.size() != pix_width()) {
      throw DimensionError("joint_lookup: query widths (" + std::to_string(z_sem.size()) + ", " +
                           std::to_string(z_pix.size()) + ") vs codebook (" +
                           std::to_string(sem_width()) + ", " + std::to_string(pix_width()) + ")");
    }
    Tensor ds, dp;
    if (opts_.normalize) {
      ds = sq_dists(l2_normalize(z_sem).value, sem());
      dp = sq_dists(l2_normalize(z_pix).value, pix());
    } else {
      ds = sq_dists(z_sem, sem());
      dp = sq_dists(z_pix, pix());
    }
    Assignment best;
    best.d_joint = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < size(); ++i) {
      const double j = ds[i] + opts_.w_dis * dp[i];
      if (j < best.d_joint) best = {static_cast<std::uint32_t>(i), ds[i], dp[i], j};
    }
    return best;
  }

  // Usage counting happens only inside an explicit session.
  void start_counting(bool reset = true) {
    if (reset) std::fill(usage_.begin(), usage_.end(), 0);
    counting_ = true;
  }
  void stop_counting() { counting_ = false; }
  bool counting() const { return counting_; }
  void record(std::uint32_t index) {
    if (counting_) ++usage_.at(index);
  }
  std::span<const std::uint64_t> usage_counts() const { return usage_; }
  void set_usage_counts(std::vector<std::uint64_t> counts) {
    if (counts.size() != size()) throw DimensionError("usage counts length != K");
    usage_ = std::move(counts);
  }

  // Projects every entry back onto the unit sphere (normalize mode).
  void renormalize() {
    for (Tensor* t : {&sem_.mutable_value(), &pix_.mutable_value()}) {
      for (std::size_t i = 0; i < t->dim(0); ++i) {
        auto row = t->row(i);
        auto n = l2_normalize(std::span<const double>(row.data(), row.size()));
        std::copy(n.value.storage().begin(), n.value.storage().end(), row.begin());
      }
    }
  }

  // Replaces entries with zero usage by rows drawn from recent encoder
  // outputs. `usage` overrides the session counters (e.g. counts over a
  // recent window). Returns the reseeded entry indices.
  std::vector<std::uint32_t> reseed_unused(const Tensor& sem_rows, const Tensor& pix_rows, Rng& rng,
                                           std::span<const std::uint64_t> usage = {}) {
    if (usage.empty()) usage = usage_;
    if (usage.size() != size()) throw DimensionError("reseed_unused: usage length != K");
    std::vector<std::uint32_t> out;
    if (sem_rows.rows() == 0 || sem_rows.rows() != pix_rows.rows()) return out;
    for (std::size_t i = 0; i < size(); ++i) {
      if (usage[i] != 0) continue;
      const std::size_t r = static_cast<std::size_t>(rng.below(sem_rows.rows()));
      auto s = sem_rows.row(r);
      auto p = pix_rows.row(r);
      std::copy(s.begin(), s.end(), mutable_sem().row(i).begin());
      std::copy(p.begin(), p.end(), mutable_pix().row(i).begin());
      out.push_back(static_cast<std::uint32_t>(i));
    }
    if (opts_.normalize) renormalize();
    return out;
  }

  void validate() const {
    if (sem().dim(0) != pix().dim(0)) throw DimensionError("codebook tables disagree on K");
    if (!(opts_.w_dis > 0.0)) throw ConfigError("codebook w_dis must be positive");
    if (usage_.size() != size()) throw DimensionError("usage counts length != K");
    if (opts_.normalize) {
      for (const Tensor* t : {&sem(), &pix()}) {
        if (t->dim(1) == 0) continue;
        for (std::size_t i = 0; i < t->dim(0); ++i) {
          double n2 = 0.0;
          for (double v : t->row(i)) n2 += v * v;
          if (std::abs(std::sqrt(n2) - 1.0) > 1e-6) throw ConfigError("codebook entry is not unit norm");
        }
      }
    }
  }

 private:
  Var sem_;
  Var pix_;
  CodebookOptions opts_;
  std::vector<std::uint64_t> usage_;
  bool counting_ = false;
};

// Joint lookup; increments the usage counter when a session is active.
inline Assignment joint_lookup(std::span<const double> z_sem, std::span<const double> z_pix,
                               DualCodebook& cb) {
  Assignment a = cb.nearest(z_sem, z_pix);
  cb.record(a.index);
  return a;
}

inline Assignment joint_lookup(const Tensor& z_sem, const Tensor& z_pix, DualCodebook& cb) {
  return joint_lookup(z_sem.data(), z_pix.data(), cb);
}

// Row-wise lookup over [N x d_sem], [N x d_pix].
inline std::vector<Assignment> lookup_rows(const Tensor& sem_rows, const Tensor& pix_rows,
                                           DualCodebook& cb) {
  if (sem_rows.rows() != pix_rows.rows()) {
    throw DimensionError("lookup_rows: " + std::to_string(sem_rows.rows()) + " semantic rows vs " +
                         std::to_string(pix_rows.rows()) + " pixel rows");
  }
  std::vector<Assignment> out;
  out.reserve(sem_rows.rows());
  for (std::size_t r = 0; r < sem_rows.rows(); ++r) {
    out.push_back(joint_lookup(sem_rows.row(r), pix_rows.row(r), cb));
  }
  return out;
}

// Feature maps are rank-3 tensors [H x W x d].
inline AssignmentGrid batched_lookup(const Tensor& fm_sem, const Tensor& fm_pix, DualCodebook& cb) {
  if (fm_sem.rank() != 3 || fm_pix.rank() != 3 || fm_sem.dim(0) != fm_pix.dim(0) ||
      fm_sem.dim(1) != fm_pix.dim(1)) {
    throw DimensionError("batched_lookup: grids " + shape_str(fm_sem.shape()) + " and " +
                         shape_str(fm_pix.shape()) + " differ");
  }
  AssignmentGrid g{fm_sem.dim(0), fm_sem.dim(1), {}};
  g.cells = lookup_rows(fm_sem, fm_pix, cb);
  return g;
}

// Mean over elements of (sg[z] - q)^2 + beta (z - sg[q])^2. The first term moves
// codebook entries, the second commits the encoder. The five-argument form
// takes the stopped values explicitly, which lets a caller hold them fixed.
inline Var vq_loss(const Var& z, const Tensor& z_sg, const Var& q, const Tensor& q_sg, double beta) {
  const double n = static_cast<double>(std::max<std::size_t>(z.value().size(), 1));
  Var codebook_term = squared_difference_sum(constant(z_sg), q);
  Var commit_term = squared_difference_sum(z, constant(q_sg));
  return scale(add(codebook_term, scale(commit_term, beta)), 1.0 / n);
}

inline Var vq_loss(const Var& z, const Var& q, double beta) {
  return vq_loss(z, z.value(), q, q.value(), beta);
}

struct VqUpdate {
  double l_vq = 0.0;
  Tensor grad_z_sem;  // commitment gradient for the encoder side
  Tensor grad_z_pix;
};

// One gradient step on the entries assigned to z_sem/z_pix rows, summing the
// VQ objective over both spaces. Entries move by -lr * dL/de.
inline VqUpdate codebook_grad_update(DualCodebook& cb, std::span<const Assignment> assignments,
                                     const Tensor& z_sem, const Tensor& z_pix, double beta,
                                     double lr) {
  if (beta < 0.0) throw ParameterError("codebook_grad_update: beta must be >= 0");
  if (assignments.size() != z_sem.rows() || assignments.size() != z_pix.rows()) {
    throw DimensionError("codebook_grad_update: assignment count mismatch");
  }
  std::vector<std::uint32_t> idx(assignments.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = assignments[i].index;
  Var zs = parameter(z_sem);
  Var zp = parameter(z_pix);
  Var loss = add(vq_loss(zs, gather_rows(cb.sem_param(), idx), beta),
                 vq_loss(zp, gather_rows(cb.pix_param(), idx), beta));
  std::vector<Var> params{cb.sem_param(), cb.pix_param(), zs, zp};
  auto g = grad(loss, params);
  for (std::size_t i = 0; i < g[0].size(); ++i) cb.mutable_sem()[i] -= lr * g[0][i];
  for (std::size_t i = 0; i < g[1].size(); ++i) cb.mutable_pix()[i] -= lr * g[1][i];
  if (cb.normalize()) cb.renormalize();
  return {loss.item(), std::move(g[2]), std::move(g[3])};
}

inline double utilization(const DualCodebook& cb) {
  if (cb.size() == 0) return 0.0;
  std::size_t used = 0;
  for (auto c : cb.usage_counts()) used += c > 0;
  return static_cast<double>(used) / static_cast<double>(cb.size());
}

// (index, count) for every entry with a nonzero count, by count descending
// then index ascending.
inline std::vector<std::pair<std::uint32_t, std::uint64_t>> cluster_histogram(const DualCodebook& cb) {
  std::vector<std::pair<std::uint32_t, std::uint64_t>> out;
  auto counts = cb.usage_counts();
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] > 0) out.emplace_back(static_cast<std::uint32_t>(i), counts[i]);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return out;
}

// DFCB: "DFCB" | u32 K | u32 d_sem | u32 d_pix | f32 w_dis | u8 normalize |
//       DFT1 sem | DFT1 pix | K x u64 usage
inline void write_codebook(std::ostream& os, const DualCodebook& cb) {
  io::write_bytes(os, "DFCB", 4);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cb.size()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cb.sem_width()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cb.pix_width()));
  io::write_f32(os, cb.w_dis());
  io::write_le<std::uint8_t>(os, cb.normalize() ? 1 : 0);
  io::write_tensor(os, cb.sem());
  io::write_tensor(os, cb.pix());
  for (auto c : cb.usage_counts()) io::write_le<std::uint64_t>(os, c);
}

inline DualCodebook read_codebook(std::istream& is, double init_scale = 1.0) {
  io::expect_magic(is, "DFCB", "codebook");
  const auto k = io::read_le<std::uint32_t>(is, "codebook K");
  const auto ds = io::read_le<std::uint32_t>(is, "codebook d_sem");
  const auto dp = io::read_le<std::uint32_t>(is, "codebook d_pix");
  CodebookOptions opts;
  opts.w_dis = io::read_f32(is, "codebook w_dis");
  const auto norm = io::read_le<std::uint8_t>(is, "codebook normalize");
  if (norm > 1) throw DataError("codebook: normalize flag must be 0 or 1");
  opts.normalize = norm == 1;
  opts.init_scale = init_scale;
  Tensor sem = io::read_tensor(is, "codebook sem table");
  Tensor pix = io::read_tensor(is, "codebook pix table");
  if (sem.shape() != Shape{k, ds} || pix.shape() != Shape{k, dp}) {
    throw DataError("codebook: table shapes disagree with header");
  }
  if (!(opts.w_dis > 0.0)) throw DataError("codebook: w_dis must be positive");
  std::vector<std::uint64_t> usage(k);
  for (auto& u : usage) u = io::read_le<std::uint64_t>(is, "codebook usage");
  // Stored entries are already unit norm in normalize mode; skip the
  // constructor's projection so f32 values load unchanged.
  opts.normalize = false;
  DualCodebook cb(std::move(sem), std::move(pix), opts);
  cb.set_usage_counts(std::move(usage));
  cb.set_normalize_flag(norm == 1);
  return cb;
}

}  // namespace tokenflow
