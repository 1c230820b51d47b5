#pragma once

// RunConfig: the JSON document every CLI command reads. The schema is strict:
// an unknown key or a wrongly typed value is a ConfigError naming the dotted
// field path. Serialization writes every field, so parse(serialize(c)) == c.
//
// Seeds. One root seed drives everything. The tokenizer uses it directly (its
// components split it further by seed_tag). Data, prior training and sampling
// use derive_seed(root, kData / kPrior / kSampling) unless the section sets its
// own seed explicitly.

#include <openssl/evp.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenflow/sampler.hpp"
#include "tokenflow/synthetic.hpp"
#include "tokenflow/tokenizer.hpp"

namespace tokenflow {

using Json = nlohmann::json;

// Values carried for documentation only; nothing reads them at run time.
struct ReferenceSettings {
  std::size_t resolution = 0;
  std::string teacher;
  std::size_t training_steps = 0;
  std::size_t batch = 0;

  friend bool operator==(const ReferenceSettings&, const ReferenceSettings&) = default;
};

struct PriorSettings {
  std::size_t epochs = 100;
  double lr = 0.5;
  double momentum = 0.9;
  double cond_drop_prob = 0.1;
  std::optional<std::uint64_t> seed;

  friend bool operator==(const PriorSettings&, const PriorSettings&) = default;
};

struct SamplingSettings {
  // Used when per_scale is empty: the schedule repeated over every scale.
  SampleSchedule schedule = SampleSchedule::single(4, 0.9);
  bool single_first = true;
  std::vector<SampleSchedule> per_scale;
  double guidance_scale = 1.0;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> class_id;

  friend bool operator==(const SamplingSettings&, const SamplingSettings&) = default;
};

struct DataSettings {
  std::size_t count = 256;
  GeneratorKind kind = GeneratorKind::Mixed;
  std::size_t rectangles = 3;
  std::optional<std::uint64_t> seed;

  friend bool operator==(const DataSettings&, const DataSettings&) = default;
};

struct PathSettings {
  std::string data;
  std::string checkpoint;
  std::string output;

  friend bool operator==(const PathSettings&, const PathSettings&) = default;
};

struct RunConfig {
  std::string name = "toy";
  std::uint64_t seed = 0;
  TokenizerConfig tokenizer;
  DataSettings data;
  PriorSettings prior;
  SamplingSettings sampling;
  PathSettings paths;
  std::optional<ReferenceSettings> reference;

  TokenizerConfig tokenizer_config() const {
    TokenizerConfig t = tokenizer;
    t.seed = seed;
    return t;
  }

  SyntheticSpec data_spec() const {
    SyntheticSpec s;
    s.image_side = tokenizer.image_side;
    s.channels = tokenizer.channels;
    s.count = data.count;
    s.kind = data.kind;
    s.rectangles = data.rectangles;
    s.seed = data.seed.value_or(derive_seed(seed, seed_tag::kData));
    return s;
  }

  PriorTrainConfig prior_config() const {
    return {prior.epochs, prior.lr, prior.momentum, prior.seed.value_or(derive_seed(seed, seed_tag::kPrior))};
  }

  SamplingConfig sampling_config(std::optional<std::uint64_t> seed_override = std::nullopt) const {
    SamplingConfig c = sampling.per_scale.empty()
                           ? SamplingConfig::repeated(tokenizer.schedule.size(), sampling.schedule, sampling.single_first)
                           : SamplingConfig{sampling.per_scale, 1.0, 0, std::nullopt};
    c.guidance_scale = sampling.guidance_scale;
    c.class_id = sampling.class_id;
    c.seed = seed_override ? *seed_override : sampling.seed.value_or(derive_seed(seed, seed_tag::kSampling));
    return c;
  }

  void validate() const {
    tokenizer_config().validate();
    data_spec().validate(tokenizer.patch);
    if (prior.epochs == 0) throw ConfigError("prior.epochs: must be >= 1");
    if (!(prior.lr > 0.0)) throw ConfigError("prior.lr: must be positive");
    if (!(prior.momentum >= 0.0 && prior.momentum < 1.0)) throw ConfigError("prior.momentum: must be in [0, 1)");
    if (!(prior.cond_drop_prob >= 0.0 && prior.cond_drop_prob <= 1.0)) {
      throw ConfigError("prior.cond_drop_prob: must be in [0, 1]");
    }
    sampling.schedule.validate("sampling.schedule");
    for (std::size_t i = 0; i < sampling.per_scale.size(); ++i) {
      sampling.per_scale[i].validate("sampling.per_scale[" + std::to_string(i) + "]");
    }
    if (!sampling.per_scale.empty() && sampling.per_scale.size() != tokenizer.schedule.size()) {
      throw ConfigError("sampling.per_scale: " + std::to_string(sampling.per_scale.size()) +
                        " schedules for " + std::to_string(tokenizer.schedule.size()) + " scales");
    }
    if (!std::isfinite(sampling.guidance_scale)) throw ConfigError("sampling.guidance_scale: must be finite");
    if (sampling.class_id && *sampling.class_id >= kNumGeneratorClasses) {
      throw ConfigError("sampling.class_id: must be < " + std::to_string(kNumGeneratorClasses));
    }
  }

  friend bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.name == b.name && a.seed == b.seed && tokenizer_equal(a.tokenizer, b.tokenizer) && a.data == b.data &&
           a.prior == b.prior && a.sampling == b.sampling && a.paths == b.paths && a.reference == b.reference;
  }

  static bool tokenizer_equal(const TokenizerConfig& a, const TokenizerConfig& b);
};

namespace detail {

// Reads one JSON object, remembering which keys were consumed so that the
// leftovers can be reported.
class ObjectReader {
 public:
  ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const Json* find(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  void get(const std::string& key, std::size_t& out) {
    if (auto* v = find(key)) out = static_cast<std::size_t>(unsigned_of(*v, field(key)));
  }
  void get(const std::string& key, double& out) {
    if (auto* v = find(key)) {
      if (!v->is_number()) throw ConfigError(field(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (auto* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (auto* v = find(key)) {
      if (!v->is_string()) throw ConfigError(field(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename T>
  void get_optional(const std::string& key, std::optional<T>& out) {
    if (auto* v = find(key)) {
      if (v->is_null()) {
        out.reset();
        return;
      }
      const auto u = unsigned_of(*v, field(key));
      if (u > std::numeric_limits<T>::max()) throw ConfigError(field(key) + ": out of range");
      out = static_cast<T>(u);
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown key");
    }
  }

  static std::uint64_t unsigned_of(const Json& v, const std::string& where) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError(where + ": expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline SampleSchedule schedule_from_json(const Json& j, const std::string& path) {
  ObjectReader r(j, path);
  SampleSchedule s;
  if (auto* k = r.find("k_list")) {
    if (!k->is_array()) throw ConfigError(r.field("k_list") + ": expected an array");
    s.k_list.clear();
    for (std::size_t i = 0; i < k->size(); ++i) {
      const auto& e = (*k)[i];
      if (!e.is_number_integer()) throw ConfigError(r.field("k_list") + "[" + std::to_string(i) + "]: expected an integer");
      s.k_list.push_back(e.get<std::int64_t>());
    }
  }
  if (auto* p = r.find("p_list")) {
    if (!p->is_array()) throw ConfigError(r.field("p_list") + ": expected an array");
    s.p_list.clear();
    for (std::size_t i = 0; i < p->size(); ++i) {
      const auto& e = (*p)[i];
      if (!e.is_number()) throw ConfigError(r.field("p_list") + "[" + std::to_string(i) + "]: expected a number");
      s.p_list.push_back(e.get<double>());
    }
  }
  r.finish();
  return s;
}

inline Json schedule_to_json(const SampleSchedule& s) { return Json{{"k_list", s.k_list}, {"p_list", s.p_list}}; }

inline Json optional_json(const auto& o) { return o ? Json(*o) : Json(nullptr); }

}  // namespace detail

inline bool RunConfig::tokenizer_equal(const TokenizerConfig& a, const TokenizerConfig& b) {
  return a.image_side == b.image_side && a.channels == b.channels && a.patch == b.patch && a.d_sem == b.d_sem &&
         a.d_pix == b.d_pix && a.hidden == b.hidden && a.teacher_width == b.teacher_width &&
         a.teacher_pool == b.teacher_pool && a.teacher_remove_mean == b.teacher_remove_mean &&
         a.codebook_size == b.codebook_size && a.w_dis == b.w_dis && a.beta == b.beta &&
         a.lambda_sem == b.lambda_sem && a.lambda_pix == b.lambda_pix && a.lambda_g == b.lambda_g &&
         a.normalize == b.normalize && a.feature_norm == b.feature_norm &&
         a.codebook_init_scale == b.codebook_init_scale && a.schedule == b.schedule && a.mode == b.mode &&
         a.optimizer == b.optimizer && a.lr == b.lr && a.momentum == b.momentum &&
         a.max_grad_norm == b.max_grad_norm && a.reseed_interval == b.reseed_interval &&
         a.codebook_lr_scale == b.codebook_lr_scale && a.steps == b.steps && a.batch == b.batch &&
         a.teacher_init_steps == b.teacher_init_steps;
}

inline Json tokenizer_to_json(const TokenizerConfig& t) {
  return Json{{"image_side", t.image_side},
              {"channels", t.channels},
              {"patch", t.patch},
              {"d_sem", t.d_sem},
              {"d_pix", t.d_pix},
              {"hidden", t.hidden},
              {"teacher_width", t.teacher_width},
              {"teacher_pool", t.teacher_pool},
              {"teacher_remove_mean", t.teacher_remove_mean},
              {"codebook_size", t.codebook_size},
              {"w_dis", t.w_dis},
              {"beta", t.beta},
              {"lambda_sem", t.lambda_sem},
              {"lambda_pix", t.lambda_pix},
              {"lambda_g", t.lambda_g},
              {"normalize", t.normalize},
              {"feature_norm", t.feature_norm},
              {"codebook_init_scale", t.codebook_init_scale},
              {"schedule", t.schedule},
              {"mode", mode_name(t.mode)},
              {"optimizer", optimizer_name(t.optimizer)},
              {"lr", t.lr},
              {"momentum", t.momentum},
              {"max_grad_norm", t.max_grad_norm},
              {"reseed_interval", t.reseed_interval},
              {"codebook_lr_scale", t.codebook_lr_scale},
              {"steps", t.steps},
              {"batch", t.batch},
              {"teacher_init_steps", t.teacher_init_steps}};
}

inline TokenizerConfig tokenizer_from_json(const Json& j, TokenizerConfig t = {}) {
  detail::ObjectReader r(j, "tokenizer");
  r.get("image_side", t.image_side);
  r.get("channels", t.channels);
  r.get("patch", t.patch);
  r.get("d_sem", t.d_sem);
  r.get("d_pix", t.d_pix);
  r.get("hidden", t.hidden);
  r.get("teacher_width", t.teacher_width);
  r.get("teacher_pool", t.teacher_pool);
  r.get("teacher_remove_mean", t.teacher_remove_mean);
  r.get("codebook_size", t.codebook_size);
  r.get("w_dis", t.w_dis);
  r.get("beta", t.beta);
  r.get("lambda_sem", t.lambda_sem);
  r.get("lambda_pix", t.lambda_pix);
  r.get("lambda_g", t.lambda_g);
  r.get("normalize", t.normalize);
  r.get("feature_norm", t.feature_norm);
  r.get("codebook_init_scale", t.codebook_init_scale);
  if (auto* s = r.find("schedule")) {
    if (!s->is_array()) throw ConfigError("tokenizer.schedule: expected an array");
    t.schedule.clear();
    for (std::size_t i = 0; i < s->size(); ++i) {
      t.schedule.push_back(detail::ObjectReader::unsigned_of((*s)[i], "tokenizer.schedule[" + std::to_string(i) + "]"));
    }
  }
  if (auto* m = r.find("mode")) {
    if (!m->is_string()) throw ConfigError("tokenizer.mode: expected a string");
    try {
      t.mode = parse_mode(m->get<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("tokenizer.mode: ") + e.what());
    }
  }
  if (auto* o = r.find("optimizer")) {
    if (!o->is_string()) throw ConfigError("tokenizer.optimizer: expected a string");
    try {
      t.optimizer = parse_optimizer(o->get<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("tokenizer.optimizer: ") + e.what());
    }
  }
  r.get("lr", t.lr);
  r.get("momentum", t.momentum);
  r.get("max_grad_norm", t.max_grad_norm);
  r.get("reseed_interval", t.reseed_interval);
  r.get("codebook_lr_scale", t.codebook_lr_scale);
  r.get("steps", t.steps);
  r.get("batch", t.batch);
  r.get("teacher_init_steps", t.teacher_init_steps);
  r.finish();
  return t;
}

inline Json to_json(const RunConfig& c) {
  Json per_scale = Json::array();
  for (const auto& s : c.sampling.per_scale) per_scale.push_back(detail::schedule_to_json(s));
  Json j{{"name", c.name},
         {"seed", c.seed},
         {"tokenizer", tokenizer_to_json(c.tokenizer)},
         {"data",
          {{"count", c.data.count},
           {"kind", generator_name(c.data.kind)},
           {"rectangles", c.data.rectangles},
           {"seed", detail::optional_json(c.data.seed)}}},
         {"prior",
          {{"epochs", c.prior.epochs},
           {"lr", c.prior.lr},
           {"momentum", c.prior.momentum},
           {"cond_drop_prob", c.prior.cond_drop_prob},
           {"seed", detail::optional_json(c.prior.seed)}}},
         {"sampling",
          {{"schedule", detail::schedule_to_json(c.sampling.schedule)},
           {"single_first", c.sampling.single_first},
           {"per_scale", per_scale},
           {"guidance_scale", c.sampling.guidance_scale},
           {"seed", detail::optional_json(c.sampling.seed)},
           {"class_id", detail::optional_json(c.sampling.class_id)}}},
         {"paths", {{"data", c.paths.data}, {"checkpoint", c.paths.checkpoint}, {"output", c.paths.output}}}};
  if (c.reference) {
    j["reference"] = {{"resolution", c.reference->resolution},
                      {"teacher", c.reference->teacher},
                      {"training_steps", c.reference->training_steps},
                      {"batch", c.reference->batch}};
  }
  return j;
}

inline std::string serialize(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

// Fields absent from the document keep the values of `base`.
inline RunConfig from_json(const Json& j, RunConfig c = {}) {
  detail::ObjectReader r(j, "");
  r.get("name", c.name);
  r.get("seed", c.seed);
  if (auto* t = r.find("tokenizer")) c.tokenizer = tokenizer_from_json(*t, c.tokenizer);
  if (auto* d = r.find("data")) {
    detail::ObjectReader dr(*d, "data");
    dr.get("count", c.data.count);
    if (auto* k = dr.find("kind")) {
      if (!k->is_string()) throw ConfigError("data.kind: expected a string");
      c.data.kind = parse_generator(k->get<std::string>());
    }
    dr.get("rectangles", c.data.rectangles);
    dr.get_optional("seed", c.data.seed);
    dr.finish();
  }
  if (auto* p = r.find("prior")) {
    detail::ObjectReader pr(*p, "prior");
    pr.get("epochs", c.prior.epochs);
    pr.get("lr", c.prior.lr);
    pr.get("momentum", c.prior.momentum);
    pr.get("cond_drop_prob", c.prior.cond_drop_prob);
    pr.get_optional("seed", c.prior.seed);
    pr.finish();
  }
  if (auto* s = r.find("sampling")) {
    detail::ObjectReader sr(*s, "sampling");
    if (auto* sc = sr.find("schedule")) c.sampling.schedule = detail::schedule_from_json(*sc, "sampling.schedule");
    sr.get("single_first", c.sampling.single_first);
    if (auto* ps = sr.find("per_scale")) {
      if (!ps->is_array()) throw ConfigError("sampling.per_scale: expected an array");
      c.sampling.per_scale.clear();
      for (std::size_t i = 0; i < ps->size(); ++i) {
        c.sampling.per_scale.push_back(
            detail::schedule_from_json((*ps)[i], "sampling.per_scale[" + std::to_string(i) + "]"));
      }
    }
    sr.get("guidance_scale", c.sampling.guidance_scale);
    sr.get_optional("seed", c.sampling.seed);
    sr.get_optional("class_id", c.sampling.class_id);
    sr.finish();
  }
  if (auto* p = r.find("paths")) {
    detail::ObjectReader pr(*p, "paths");
    pr.get("data", c.paths.data);
    pr.get("checkpoint", c.paths.checkpoint);
    pr.get("output", c.paths.output);
    pr.finish();
  }
  if (auto* ref = r.find("reference")) {
    if (ref->is_null()) {
      c.reference.reset();
    } else {
      detail::ObjectReader rr(*ref, "reference");
      ReferenceSettings rs = c.reference.value_or(ReferenceSettings{});
      rr.get("resolution", rs.resolution);
      rr.get("teacher", rs.teacher);
      rr.get("training_steps", rs.training_steps);
      rr.get("batch", rs.batch);
      rr.finish();
      c.reference = rs;
    }
  }
  r.finish();
  return c;
}

inline RunConfig parse_config(const std::string& text, const std::string& source = "config") {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(source + ": invalid JSON: " + e.what());
  }
  return from_json(j);
}

// Presets. tokenflow-b/l/xl carry the published model settings; their
// resolutions are far beyond what the toy tokenizer trains in reasonable time.
inline RunConfig preset(const std::string& name) {
  RunConfig c;
  c.name = name;
  if (name == "toy") return c;
  if (name == "acceptance") {
    c.tokenizer.patch = 2;
    c.tokenizer.teacher_pool = 1;
    c.tokenizer.schedule = {1, 2, 4, 8};
    c.tokenizer.codebook_size = 64;
    c.tokenizer.steps = 1000;
    c.tokenizer.lr = 0.1;
    c.tokenizer.batch = 16;
    c.tokenizer.reseed_interval = 50;
    return c;
  }
  auto reference = [&](std::size_t side, std::size_t patch, std::vector<std::size_t> scales, std::string teacher,
                       std::size_t resolution, std::size_t steps) {
    auto& t = c.tokenizer;
    t.image_side = side;
    t.patch = patch;
    t.teacher_pool = 1;
    t.schedule = std::move(scales);
    t.codebook_size = 32768;
    t.d_sem = 32;
    t.d_pix = 8;
    t.lr = 1e-4;
    t.batch = 256;
    t.w_dis = 1.0;
    t.beta = 0.25;
    t.lambda_g = 0.5;
    t.max_grad_norm = 1.0;
    t.steps = steps;
    c.sampling.schedule = SampleSchedule::reference_three_step();
    c.sampling.guidance_scale = kReferenceGuidanceScale;
    c.reference = ReferenceSettings{resolution, std::move(teacher), steps, 256};
  };
  if (name == "tokenflow-b") {
    reference(224, 16, {1, 2, 4, 6, 8, 10, 12, 14}, "CLIP ViT-B/14-224", 224, 1000000);
  } else if (name == "tokenflow-l") {
    reference(256, 16, {1, 2, 3, 4, 6, 8, 10, 12, 14, 16}, "ViTamin-XL-256", 256, 500000);
  } else if (name == "tokenflow-xl") {
    // 27 patches of 14 pixels cover 378 of the 384 input pixels.
    reference(378, 14, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 17, 22, 27}, "SigLIP-SO400M-patch14-384", 384, 500000);
  } else {
    throw ConfigError("preset: unknown name '" + name + "' (expected toy, acceptance, tokenflow-b, tokenflow-l, tokenflow-xl)");
  }
  return c;
}

inline std::vector<std::string> preset_names() { return {"toy", "acceptance", "tokenflow-b", "tokenflow-l", "tokenflow-xl"}; }

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256: digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

// Hash of the canonical serialization (sorted keys, compact); paths excluded
// so the same experiment hashes the same wherever it writes.
inline std::string config_hash(const RunConfig& c) {
  Json j = to_json(c);
  j.erase("paths");
  return sha256_hex(j.dump()).substr(0, 16);
}

}  // namespace tokenflow
