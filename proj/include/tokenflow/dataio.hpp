#pragma once

// Files on disk.
//   images       binary PPM (P6, maxval 255) or DFT1 [H x W x C] in [0, 1]
//   dataset dir  images/<id>.ppm (or .dft1 when C != 3) + manifest.json
//   checkpoint   manifest.json + params/<name>.dft1 + codebook.dfcb
// Every failure is a DataError that names the file.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tokenflow/config.hpp"
#include "tokenflow/io.hpp"
#include "tokenflow/synthetic.hpp"
#include "tokenflow/tokenizer.hpp"

namespace tokenflow {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PPM

inline std::string encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw DimensionError("ppm: expected an [H x W x 3] image, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + h * w * 3);
  for (double v : image.data()) {
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
  }
  return out;
}

inline Tensor decode_ppm(std::string_view bytes, const std::string& what) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> Tensor { throw DataError(what + ": " + why); };
  // Whitespace and '#' comments may separate header fields.
  auto skip = [&] {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* field) -> std::size_t {
    skip();
    std::size_t start = pos, v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) fail(std::string("ppm ") + field + " too large");
      ++pos;
    }
    if (pos == start) fail(std::string("ppm header: missing ") + field);
    return v;
  };
  if (bytes.substr(0, 2) != "P6") return fail("not a binary PPM (magic P6)");
  pos = 2;
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0) return fail("ppm: zero width or height");
  if (maxval != 255) return fail("ppm: only maxval 255 is supported (got " + std::to_string(maxval) + ")");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    return fail("ppm header: expected whitespace after maxval");
  }
  ++pos;
  const std::size_t n = h * w * 3;
  if (bytes.size() - pos < n) return fail("ppm payload truncated");
  if (bytes.size() - pos > n) return fail("ppm has trailing bytes");
  Tensor t({h, w, 3});
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  return t;
}

inline void save_ppm(const fs::path& path, const Tensor& image) { io::write_file(path, encode_ppm(image)); }

inline Tensor load_ppm(const fs::path& path) { return decode_ppm(io::read_file(path), path.string()); }

// PPM or DFT1 by extension; the result is a single [H x W x C] image in [0, 1].
inline Tensor load_image(const fs::path& path) {
  const auto ext = path.extension().string();
  Tensor t;
  if (ext == ".ppm") {
    t = load_ppm(path);
  } else if (ext == ".dft1") {
    t = io::load_tensor(path);
  } else {
    throw DataError(path.string() + ": unknown image extension (expected .ppm or .dft1)");
  }
  if (t.rank() != 3) throw DataError(path.string() + ": expected an [H x W x C] image, got " + shape_str(t.shape()));
  for (double v : t.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError(path.string() + ": pixel values must lie in [0, 1]");
  }
  return t;
}

inline void save_image(const fs::path& path, const Tensor& image) {
  if (path.extension() == ".ppm") {
    save_ppm(path, image);
  } else {
    io::save_tensor(path, image);
  }
}

inline std::string file_sha256(const fs::path& path) { return sha256_hex(io::read_file(path)); }

inline Json read_json(const fs::path& path) {
  const std::string text = io::read_file(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw DataError(path.string() + ": invalid JSON: " + e.what());
  }
}

inline void write_json(const fs::path& path, const Json& j) { io::write_file(path, j.dump(2) + "\n"); }

inline RunConfig load_config(const fs::path& path) {
  const std::string text = io::read_file(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  try {
    RunConfig c = from_json(j);
    c.validate();
    return c;
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Datasets

inline Json spec_to_json(const SyntheticSpec& s) {
  return Json{{"image_side", s.image_side}, {"channels", s.channels}, {"count", s.count},
              {"kind", generator_name(s.kind)}, {"rectangles", s.rectangles}, {"seed", s.seed}};
}

inline Tensor image_at(const Tensor& images, std::size_t i) {
  const std::size_t n = images.size() / images.dim(0);
  Tensor t({images.dim(1), images.dim(2), images.dim(3)});
  std::copy_n(images.data().begin() + static_cast<std::ptrdiff_t>(i * n), n, t.storage().begin());
  return t;
}

inline void write_dataset(const fs::path& dir, const Dataset& ds, const Json& generator) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec) throw DataError(dir.string() + ": cannot create directory: " + ec.message());
  const bool rgb = ds.images.dim(3) == 3;
  Json images = Json::array();
  for (std::size_t i = 0; i < ds.ids.size(); ++i) {
    const std::string file = "images/" + ds.ids[i] + (rgb ? ".ppm" : ".dft1");
    save_image(dir / file, image_at(ds.images, i));
    images.push_back({{"id", ds.ids[i]}, {"file", file}, {"sha256", file_sha256(dir / file)}, {"label", ds.labels[i]}});
  }
  write_json(dir / "manifest.json", Json{{"format", "tokenflow-dataset"}, {"generator", generator}, {"images", images}});
}

inline Dataset gen_dataset(const SyntheticSpec& spec, const fs::path& dir) {
  spec.validate();
  Dataset ds = generate_dataset(spec);
  write_dataset(dir, ds, spec_to_json(spec));
  return ds;
}

// Loads and verifies a dataset directory, or a single image file as a
// dataset of one.
inline Dataset load_dataset(const fs::path& path) {
  if (fs::is_regular_file(path)) {
    Tensor img = load_image(path);
    Dataset ds;
    ds.images = img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)});
    ds.ids = {path.stem().string()};
    ds.labels = {0};
    return ds;
  }
  const fs::path mpath = path / "manifest.json";
  const Json m = read_json(mpath);
  if (!m.is_object() || m.value("format", "") != "tokenflow-dataset" || !m.contains("images") ||
      !m["images"].is_array() || m["images"].empty()) {
    throw DataError(mpath.string() + ": not a dataset manifest with a nonempty images list");
  }
  Dataset ds;
  std::vector<Tensor> imgs;
  for (const auto& e : m["images"]) {
    if (!e.is_object() || !e.contains("file") || !e.contains("id") || !e["file"].is_string() || !e["id"].is_string()) {
      throw DataError(mpath.string() + ": image entries need string id and file");
    }
    const fs::path file = path / e["file"].get<std::string>();
    if (e.contains("sha256") && file_sha256(file) != e["sha256"].get<std::string>()) {
      throw DataError(file.string() + ": sha256 does not match the manifest");
    }
    imgs.push_back(load_image(file));
    if (imgs.back().shape() != imgs.front().shape()) {
      throw DataError(file.string() + ": shape " + shape_str(imgs.back().shape()) + " differs from the first image");
    }
    ds.ids.push_back(e["id"].get<std::string>());
    ds.labels.push_back(e.value("label", 0u));
  }
  const Shape s = imgs.front().shape();
  ds.images = Tensor({imgs.size(), s[0], s[1], s[2]});
  const std::size_t n = imgs.front().size();
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    std::copy(imgs[i].data().begin(), imgs[i].data().end(), ds.images.storage().begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Json report_to_json(std::size_t step, const LossReport& r) {
  return Json{{"step", step},         {"l_total", r.l_total}, {"l_sem", r.l_sem}, {"l_vq", r.l_vq},
              {"l_pix_l2", r.l_pix_l2}, {"l_percep", r.l_percep}, {"l_gan", r.l_gan}};
}

struct Checkpoint {
  RunConfig config;
  Tokenizer model;
  std::size_t step = 0;
  Json history = Json::array();
};

inline std::string param_file(const std::string& name) { return "params/" + name + ".dft1"; }

inline void save_checkpoint(const fs::path& dir, const RunConfig& cfg, const Tokenizer& model, std::size_t step,
                            const Json& history = Json::array()) {
  std::error_code ec;
  fs::create_directories(dir / "params", ec);
  if (ec) throw DataError(dir.string() + ": cannot create directory: " + ec.message());
  Json params = Json::array();
  for (const auto& [name, v] : model.named_parameters()) {
    if (name.rfind("codebook.", 0) == 0) continue;
    const std::string file = param_file(name);
    io::save_tensor(dir / file, v.value());
    params.push_back({{"name", name}, {"file", file}, {"sha256", file_sha256(dir / file)}});
  }
  {
    auto os = io::open_out(dir / "codebook.dfcb");
    write_codebook(os, model.codebook());
  }
  Json m{{"format", "tokenflow-checkpoint"},
         {"config", to_json(cfg)},
         {"config_hash", config_hash(cfg)},
         {"step", step},
         {"seed", cfg.seed},
         {"history", history},
         {"params", params},
         {"codebook", {{"file", "codebook.dfcb"}, {"sha256", file_sha256(dir / "codebook.dfcb")}}}};
  write_json(dir / "manifest.json", m);
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  const Json m = read_json(mpath);
  if (!m.is_object() || m.value("format", "") != "tokenflow-checkpoint") {
    throw DataError(mpath.string() + ": not a checkpoint manifest");
  }
  Checkpoint ck;
  try {
    ck.config = from_json(m.at("config"));
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(mpath.string() + ": config." + e.what());
  } catch (const Json::exception& e) {
    throw DataError(mpath.string() + ": " + e.what());
  }
  ck.step = m.value("step", std::size_t{0});
  ck.history = m.value("history", Json::array());
  ck.model = Tokenizer(ck.config.tokenizer_config());

  auto verify = [&](const Json& entry, const fs::path& file) {
    if (entry.contains("sha256") && file_sha256(file) != entry["sha256"].get<std::string>()) {
      throw DataError(file.string() + ": sha256 does not match the checkpoint manifest");
    }
  };
  std::map<std::string, Json> listed;
  for (const auto& e : m.value("params", Json::array())) listed[e.value("name", "")] = e;
  for (auto& [name, v] : ck.model.named_parameters()) {
    if (name.rfind("codebook.", 0) == 0) continue;
    auto it = listed.find(name);
    if (it == listed.end()) throw DataError(mpath.string() + ": missing parameter '" + name + "'");
    const fs::path file = dir / it->second.value("file", param_file(name));
    verify(it->second, file);
    Tensor t = io::load_tensor(file);
    if (t.shape() != v.value().shape()) {
      throw DataError(file.string() + ": shape " + shape_str(t.shape()) + " does not match config (" +
                      shape_str(v.value().shape()) + ")");
    }
    v.mutable_value() = std::move(t);
  }
  const Json cb_entry = m.value("codebook", Json{{"file", "codebook.dfcb"}});
  const fs::path cb_file = dir / cb_entry.value("file", "codebook.dfcb");
  verify(cb_entry, cb_file);
  auto is = io::open_in(cb_file);
  DualCodebook cb;
  try {
    cb = read_codebook(is, ck.config.tokenizer.codebook_init_scale);
  } catch (const DataError& e) {
    throw DataError(cb_file.string() + ": " + e.what());
  }
  const auto& tc = ck.config.tokenizer_config();
  if (cb.size() != tc.codebook_size || cb.sem_width() != tc.sem_width() || cb.pix_width() != tc.pix_width()) {
    throw DataError(cb_file.string() + ": codebook geometry does not match config");
  }
  ck.model.codebook() = std::move(cb);
  return ck;
}

}  // namespace tokenflow
