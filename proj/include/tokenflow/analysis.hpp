#pragma once

// Evaluation and the ablation harness. rFID needs a pretrained Inception
// network and is not computed; reconstruction MSE, PSNR and SSIM stand in for
// it, and every emitted summary says so.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "tokenflow/config.hpp"
#include "tokenflow/dataio.hpp"
#include "tokenflow/metrics.hpp"
#include "tokenflow/tokenizer.hpp"

namespace tokenflow {

inline constexpr const char* kFidNote =
    "rFID not computed (needs a pretrained Inception network); reconstruction MSE, PSNR and SSIM stand in";

// Element k: pixel MSE when only the first k + 1 scales are decoded.
inline std::vector<double> per_scale_recon_mse(Tokenizer& model, const Tensor& images) {
  const Tensor batch = model.as_batch(images);
  Encoded e = encode(model, batch);
  const auto sched = model.schedule();
  std::vector<double> out;
  for (std::size_t k = 1; k <= sched.size(); ++k) {
    auto [qs, qp] = msvq_decode_batch(e.tokens, model.codebook(), sched, k);
    out.push_back(mse(batch, model.decode_pixels(constant(qs), constant(qp)).value()));
  }
  return out;
}

// Each image's encoder feature maps are average pooled to 1x1 and looked up
// jointly, giving one cluster index per image.
inline std::vector<std::uint32_t> pooled_cluster_assign(Tokenizer& model, const Tensor& images) {
  const Tensor batch = model.as_batch(images);
  const std::size_t b = batch.dim(0), g = model.config().grid();
  auto [zs, zp] = model.encode_features(image_to_patches(batch, model.config().patch), b);
  auto pool = [&](const Tensor& f) {
    const std::size_t d = f.size() / (b * g * g);
    Tensor out({b, d});
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t p = 0; p < g * g; ++p) {
        for (std::size_t c = 0; c < d; ++c) out.at(i, c) += f[(i * g * g + p) * d + c];
      }
      for (std::size_t c = 0; c < d; ++c) out.at(i, c) /= static_cast<double>(g * g);
    }
    return out;
  };
  auto cells = lookup_rows(pool(zs.value()), pool(zp.value()), model.codebook());
  std::vector<std::uint32_t> idx;
  idx.reserve(cells.size());
  for (const auto& c : cells) idx.push_back(c.index);
  return idx;
}

inline std::vector<std::uint64_t> assignment_histogram(std::span<const std::uint32_t> idx, std::size_t k) {
  std::vector<std::uint64_t> h(k, 0);
  for (auto i : idx) {
    if (i >= k) throw ParameterError("assignment_histogram: index " + std::to_string(i) + " >= K");
    ++h[i];
  }
  return h;
}

inline double nonempty_fraction(std::span<const std::uint64_t> hist) {
  if (hist.empty()) return 0.0;
  return static_cast<double>(std::count_if(hist.begin(), hist.end(), [](auto c) { return c > 0; })) /
         static_cast<double>(hist.size());
}

// ---------------------------------------------------------------------------
// Metric rows

struct MetricRow {
  std::string run_id;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string metric;
  std::size_t step = 0;
  double value = 0.0;
};

inline std::string format_value(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

class MetricTable {
 public:
  void add(MetricRow row) {
    if (!std::isfinite(row.value)) {
      throw DataError("metric " + row.run_id + "/" + row.metric + "@" + std::to_string(row.step) + " is not finite");
    }
    auto key = std::make_tuple(row.run_id, row.metric, row.step);
    if (!keys_.insert(key).second) {
      throw DataError("metric " + row.run_id + "/" + row.metric + "@" + std::to_string(row.step) + " already recorded");
    }
    rows_.push_back(std::move(row));
  }

  const std::vector<MetricRow>& rows() const { return rows_; }

  std::optional<double> find(const std::string& run_id, const std::string& metric, std::size_t step) const {
    for (const auto& r : rows_) {
      if (r.run_id == run_id && r.metric == metric && r.step == step) return r.value;
    }
    return std::nullopt;
  }

  static std::string csv_header() { return "run_id,config_hash,seed,metric,step,value\n"; }

  std::string csv_body() const {
    std::string out;
    for (const auto& r : rows_) {
      out += r.run_id + "," + r.config_hash + "," + std::to_string(r.seed) + "," + r.metric + "," +
             std::to_string(r.step) + "," + format_value(r.value) + "\n";
    }
    return out;
  }

  std::string to_csv() const { return csv_header() + csv_body(); }

  // Latest step of each metric, per run.
  Json summary() const {
    Json runs = Json::object();
    std::map<std::pair<std::string, std::string>, std::size_t> latest;
    for (const auto& r : rows_) {
      auto& j = runs[r.run_id];
      j["config_hash"] = r.config_hash;
      j["seed"] = r.seed;
      auto [it, fresh] = latest.try_emplace({r.run_id, r.metric}, r.step);
      if (fresh || r.step >= it->second) {
        it->second = r.step;
        j["metrics"][r.metric] = r.value;
      }
    }
    return Json{{"note", kFidNote}, {"runs", runs}};
  }

  // Appends under an exclusive lock; the header is written only into an
  // empty file.
  void append_csv(const fs::path& path) const {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd < 0) throw DataError("cannot open for appending: " + path.string());
    if (::flock(fd, LOCK_EX) != 0) {
      ::close(fd);
      throw DataError("cannot lock: " + path.string());
    }
    std::string text = (::lseek(fd, 0, SEEK_END) == 0 ? csv_header() : std::string()) + csv_body();
    const char* p = text.data();
    std::size_t left = text.size();
    while (left > 0) {
      const ssize_t n = ::write(fd, p, left);
      if (n <= 0) {
        ::flock(fd, LOCK_UN);
        ::close(fd);
        throw DataError("write failed: " + path.string());
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
    ::flock(fd, LOCK_UN);
    ::close(fd);
  }

 private:
  std::vector<MetricRow> rows_;
  std::set<std::tuple<std::string, std::string, std::size_t>> keys_;
};

// ---------------------------------------------------------------------------
// Ablation harness

struct AblationCell {
  bool shared = true;        // dual codebook with one index; off = semantic-only VQ
  bool msvq = true;          // the configured schedule; off = one scale at the full grid
  bool teacher_init = false;
  std::size_t k = 32;

  std::string run_id() const {
    return std::string("shared") + (shared ? "1" : "0") + "-msvq" + (msvq ? "1" : "0") + "-tinit" +
           (teacher_init ? "1" : "0") + "-K" + std::to_string(k);
  }
};

inline std::vector<AblationCell> ablation_grid(std::vector<std::size_t> ks = {32, 128, 512, 2048}) {
  std::vector<AblationCell> out;
  for (bool shared : {false, true}) {
    for (bool msvq : {false, true}) {
      for (bool tinit : {false, true}) {
        for (auto k : ks) out.push_back({shared, msvq, tinit, k});
      }
    }
  }
  return out;
}

// Teacher initialisation adds distillation updates before joint training;
// the joint budget (steps, batch, lr) is the same for every cell.
inline RunConfig cell_config(const RunConfig& base, const AblationCell& cell) {
  RunConfig c = base;
  auto& t = c.tokenizer;
  t.mode = cell.shared ? CodebookMode::Dual : CodebookMode::SemanticOnly;
  if (!cell.msvq) t.schedule = {t.grid()};
  t.teacher_init_steps = cell.teacher_init ? std::max<std::size_t>(1, t.steps / 4) : 0;
  t.codebook_size = cell.k;
  c.name = base.name + "/" + cell.run_id();
  return c;
}

struct CellResult {
  double recon_mse = 0.0, psnr = 0.0, ssim = 0.0, utilization = 0.0, l_sem = 0.0;
};

inline CellResult evaluate(Tokenizer& model, const Tensor& images) {
  CellResult r;
  auto rec = reconstruct(model, images);
  const Tensor batch = model.as_batch(images);
  r.recon_mse = mse(batch, model.as_batch(rec.image));
  r.psnr = rec.psnr;
  r.ssim = rec.ssim;
  r.utilization = measure_utilization(model, images);
  if (model.config().has_teacher()) r.l_sem = model.forward(batch).report.l_sem;
  return r;
}

inline CellResult train_and_evaluate(const RunConfig& cfg, const Tensor& images) {
  Tokenizer model(cfg.tokenizer_config());
  train_tokenizer(model, images);
  return evaluate(model, images);
}

inline void add_cell_metrics(MetricTable& table, const std::string& run_id, const RunConfig& cfg,
                             const CellResult& r) {
  const std::string h = config_hash(cfg);
  const std::size_t step = cfg.tokenizer.steps;
  auto row = [&](const char* metric, double v) { table.add({run_id, h, cfg.seed, metric, step, v}); };
  row("recon_mse", r.recon_mse);
  row("psnr", r.psnr);
  row("ssim", r.ssim);
  row("utilization", r.utilization);
  row("l_sem", r.l_sem);
}

// Cells run in order with the base config's seed; each cell is a pure
// function of (base, cell, images).
inline MetricTable run_ablation(const RunConfig& base, std::span<const AblationCell> cells, const Tensor& images,
                                const std::function<void(const AblationCell&, const CellResult&)>& progress = {}) {
  MetricTable table;
  for (const auto& cell : cells) {
    const RunConfig cfg = cell_config(base, cell);
    const CellResult r = train_and_evaluate(cfg, images);
    add_cell_metrics(table, cell.run_id(), cfg, r);
    if (progress) progress(cell, r);
  }
  return table;
}

// Codebook-size sweep rows for external plotting.
inline std::string sweep_csv(const MetricTable& t, std::span<const AblationCell> cells) {
  std::string out = "shared,msvq,teacher_init,K,recon_mse,psnr,utilization,l_sem\n";
  for (const auto& c : cells) {
    const auto id = c.run_id();
    auto v = [&](const char* m) {
      for (const auto& r : t.rows()) {
        if (r.run_id == id && r.metric == m) return format_value(r.value);
      }
      return std::string();
    };
    out += std::string(c.shared ? "1" : "0") + "," + (c.msvq ? "1" : "0") + "," + (c.teacher_init ? "1" : "0") + "," +
           std::to_string(c.k) + "," + v("recon_mse") + "," + v("psnr") + "," + v("utilization") + "," + v("l_sem") +
           "\n";
  }
  return out;
}

// Cluster-size distribution, largest first.
inline std::string cluster_csv(std::span<const std::uint64_t> hist) {
  std::vector<std::pair<std::uint32_t, std::uint64_t>> rows;
  for (std::size_t i = 0; i < hist.size(); ++i) rows.emplace_back(static_cast<std::uint32_t>(i), hist[i]);
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::string out = "rank,index,count\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out += std::to_string(r) + "," + std::to_string(rows[r].first) + "," + std::to_string(rows[r].second) + "\n";
  }
  return out;
}

}  // namespace tokenflow
