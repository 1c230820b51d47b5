// tokenflow: command-line front end.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 numeric divergence.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tokenflow/tokenflow.hpp"

using namespace tokenflow;

namespace {

constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kDivergence = 3;

struct UsageError : Error {
  using Error::Error;
};

struct Common {
  std::string config;
  std::string preset;
};

RunConfig resolve_config(const Common& c) {
  if (!c.config.empty() && !c.preset.empty()) throw UsageError("--config and --preset are exclusive");
  if (!c.config.empty()) return load_config(c.config);
  if (!c.preset.empty()) {
    RunConfig r = preset(c.preset);
    r.validate();
    return r;
  }
  throw UsageError("one of --config or --preset is required");
}

std::string image_ext(std::size_t channels) { return channels == 3 ? ".ppm" : ".dft1"; }

void write_text(const fs::path& path, const std::string& text) { io::write_file(path, text); }

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& common, const std::string& out, std::optional<std::size_t> count) {
  RunConfig cfg = resolve_config(common);
  if (count) cfg.data.count = *count;
  SyntheticSpec spec = cfg.data_spec();
  spec.validate(cfg.tokenizer.patch);
  gen_dataset(spec, out);
  std::cout << "wrote " << spec.count << " images to " << out << "\n";
  return 0;
}

int cmd_train(const Common& common, const std::string& data, const std::string& out,
              std::optional<std::size_t> steps, const std::string& metrics) {
  RunConfig cfg = resolve_config(common);
  if (steps) cfg.tokenizer.steps = *steps;
  cfg.validate();
  Dataset ds = load_dataset(data);
  Tokenizer model(cfg.tokenizer_config());
  Json history = Json::array();
  MetricTable table;
  const std::string hash = config_hash(cfg);
  if (cfg.tokenizer.steps > 0) {
    const auto h = train_tokenizer(model, ds.images, [&](std::size_t s, const LossReport& r) {
      history.push_back(report_to_json(s + 1, r));
      table.add({cfg.name, hash, cfg.seed, "l_total", s + 1, r.l_total});
      table.add({cfg.name, hash, cfg.seed, "l_sem", s + 1, r.l_sem});
      table.add({cfg.name, hash, cfg.seed, "l_vq", s + 1, r.l_vq});
      table.add({cfg.name, hash, cfg.seed, "l_pix_l2", s + 1, r.l_pix_l2});
    });
    std::cout << "step " << h.size() << ": " << h.back().str() << "\n";
  }
  save_checkpoint(out, cfg, model, cfg.tokenizer.steps, history);
  if (!metrics.empty()) write_text(metrics, table.to_csv());
  std::cout << "checkpoint written to " << out << "\n";
  return 0;
}

int cmd_encode(const std::string& ckpt, const std::string& input, const std::string& out, bool features) {
  Checkpoint ck = load_checkpoint(ckpt);
  Dataset ds = load_dataset(input);
  Encoded e = encode(ck.model, ds.images);
  const fs::path dir(out);
  for (std::size_t i = 0; i < ds.ids.size(); ++i) {
    save_tokens(dir / (ds.ids[i] + ".dftk"), e.tokens[i]);
    if (features) {
      io::save_tensor(dir / (ds.ids[i] + ".q_sem.dft1"), image_at(e.q_sem, i));
      io::save_tensor(dir / (ds.ids[i] + ".q_pix.dft1"), image_at(e.q_pix, i));
    }
  }
  std::cout << "encoded " << ds.ids.size() << " images to " << out << "\n";
  return 0;
}

int cmd_decode(const std::string& ckpt, const std::vector<std::string>& tokens, const std::string& out,
               bool features) {
  Checkpoint ck = load_checkpoint(ckpt);
  const fs::path dir(out);
  const auto sched = ck.model.schedule();
  for (const auto& file : tokens) {
    MultiScaleTokens t;
    try {
      t = load_tokens(file);
      auto [qs, qp] = msvq_decode(t, ck.model.codebook(), sched);
      const std::string stem = fs::path(file).stem().string();
      if (features) {
        io::save_tensor(dir / (stem + ".q_sem.dft1"), qs);
        io::save_tensor(dir / (stem + ".q_pix.dft1"), qp);
      }
      Tensor img = decode_tokens(ck.model, std::span<const MultiScaleTokens>(&t, 1));
      save_image(dir / (stem + image_ext(ck.config.tokenizer.channels)), image_at(img, 0));
    } catch (const DataError& e) {
      throw DataError(file + ": " + e.what());
    } catch (const ConfigError& e) {
      throw DataError(file + ": " + e.what());
    }
  }
  std::cout << "decoded " << tokens.size() << " token files to " << out << "\n";
  return 0;
}

int cmd_reconstruct(const std::string& ckpt, const std::string& input, const std::string& out) {
  Checkpoint ck = load_checkpoint(ckpt);
  Dataset ds = load_dataset(input);
  Reconstruction r = reconstruct(ck.model, ds.images);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  const fs::path dir(out);
  const Tensor recon = ck.model.as_batch(r.image);
  for (std::size_t i = 0; i < ds.ids.size(); ++i) {
    save_image(dir / (ds.ids[i] + image_ext(ck.config.tokenizer.channels)), image_at(recon, i));
  }
  Json j{{"psnr", r.psnr},
         {"ssim", r.ssim},
         {"mse", mse(ck.model.as_batch(ds.images), recon)},
         {"per_scale_mse", per_scale_recon_mse(ck.model, ds.images)},
         {"warnings", r.warnings},
         {"note", kFidNote}};
  write_json(dir / "metrics.json", j);
  std::cout << "psnr " << r.psnr << " dB, ssim " << r.ssim << "\n";
  return 0;
}

int cmd_sample(const std::string& ckpt, const std::string& data, const std::string& out, std::optional<std::uint64_t> seed,
               std::size_t count, std::optional<std::uint32_t> class_id, std::optional<double> guidance) {
  Checkpoint ck = load_checkpoint(ckpt);
  Dataset ds = load_dataset(data);
  Encoded e = encode(ck.model, ds.images);
  ToyPrior prior(ck.model.codebook(), ck.model.schedule(), kNumGeneratorClasses, ck.config.prior.cond_drop_prob);
  std::vector<std::uint32_t> labels = ds.labels;
  for (auto& l : labels) l = std::min(l, kNumGeneratorClasses - 1);
  train_prior(prior, e.tokens, labels, ck.config.prior_config());

  SamplingConfig sc = ck.config.sampling_config(seed);
  if (class_id) sc.class_id = *class_id;
  if (guidance) sc.guidance_scale = *guidance;
  if (sc.class_id && *sc.class_id >= kNumGeneratorClasses) {
    throw UsageError("--class: must be < " + std::to_string(kNumGeneratorClasses));
  }
  const fs::path dir(out);
  Json runs = Json::array();
  for (std::size_t i = 0; i < count; ++i) {
    SamplingConfig c = sc;
    c.seed = derive_seed(sc.seed, i);
    Generated g = generate(prior, ck.model, c);
    char name[32];
    std::snprintf(name, sizeof name, "sample_%04zu", i);
    save_tokens(dir / (std::string(name) + ".dftk"), g.sample.tokens);
    save_image(dir / (std::string(name) + image_ext(ck.config.tokenizer.channels)), g.image.rank() == 4 ? image_at(g.image, 0) : g.image);
    runs.push_back({{"name", name}, {"seed", c.seed}, {"invocations", g.sample.invocations},
                    {"grid_nll", grid_nll(prior, g.sample.tokens, c.class_id)}});
  }
  write_json(dir / "samples.json", Json{{"seed", sc.seed},
                                        {"guidance_scale", sc.guidance_scale},
                                        {"class_id", sc.class_id ? Json(*sc.class_id) : Json(nullptr)},
                                        {"samples", runs}});
  std::cout << "wrote " << count << " samples to " << out << "\n";
  return 0;
}

int cmd_stats(const std::string& ckpt, const std::string& input, const std::string& out) {
  Checkpoint ck = load_checkpoint(ckpt);
  Dataset ds = load_dataset(input);
  const fs::path dir(out);
  const double util = measure_utilization(ck.model, ds.images);
  const auto per_scale = per_scale_recon_mse(ck.model, ds.images);
  const auto assign = pooled_cluster_assign(ck.model, ds.images);
  const auto hist = assignment_histogram(assign, ck.model.codebook().size());
  write_text(dir / "clusters.csv", cluster_csv(hist));
  std::string ps = "scales,side,recon_mse\n";
  for (std::size_t k = 0; k < per_scale.size(); ++k) {
    ps += std::to_string(k + 1) + "," + std::to_string(ck.config.tokenizer.schedule[k]) + "," +
          format_value(per_scale[k]) + "\n";
  }
  write_text(dir / "per_scale.csv", ps);
  write_json(dir / "stats.json", Json{{"utilization", util},
                                      {"pooled_nonempty_fraction", nonempty_fraction(hist)},
                                      {"per_scale_mse", per_scale},
                                      {"images", ds.ids.size()},
                                      {"codebook_size", ck.model.codebook().size()},
                                      {"note", kFidNote}});
  std::cout << "utilization " << util << ", pooled clusters used " << nonempty_fraction(hist) << "\n";
  return 0;
}

int cmd_ablate(const Common& common, const std::string& data, const std::string& out, std::vector<std::size_t> ks,
               std::optional<std::size_t> steps) {
  RunConfig cfg = resolve_config(common);
  if (steps) cfg.tokenizer.steps = *steps;
  cfg.validate();
  Dataset ds = load_dataset(data);
  if (ks.empty()) ks = {32, 128, 512, 2048};
  const auto cells = ablation_grid(ks);
  const MetricTable t = run_ablation(cfg, cells, ds.images, [](const AblationCell& c, const CellResult& r) {
    std::cout << c.run_id() << " recon_mse " << r.recon_mse << " util " << r.utilization << "\n";
  });
  const fs::path dir(out);
  write_text(dir / "metrics.csv", t.to_csv());
  write_text(dir / "sweep.csv", sweep_csv(t, cells));
  write_json(dir / "summary.json", t.summary());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tokenflow: dual-codebook image tokenizer toolkit"};
  app.require_subcommand(1);
  Common common;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "RunConfig JSON file");
    sub->add_option("--preset", common.preset, "built-in config (toy, acceptance, tokenflow-b, tokenflow-l, tokenflow-xl)");
  };

  std::string out, data, input, ckpt, metrics;
  std::optional<std::size_t> count, steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint32_t> class_id;
  std::optional<double> guidance;
  std::vector<std::string> token_files;
  std::vector<std::size_t> ks;
  bool features = false;
  std::size_t samples = 1;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset (images + manifest.json)");
  add_config(gen);
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--count", count, "override data.count");

  auto* train = app.add_subcommand("train", "train a tokenizer and write a checkpoint");
  add_config(train);
  train->add_option("--data", data, "dataset directory or image file")->required();
  train->add_option("--out", out, "checkpoint directory")->required();
  train->add_option("--steps", steps, "override tokenizer.steps");
  train->add_option("--metrics", metrics, "write the loss history as metric CSV");

  auto* enc = app.add_subcommand("encode", "images to DFTK token files");
  enc->add_option("--checkpoint", ckpt)->required();
  enc->add_option("--input", input, "dataset directory or image file")->required();
  enc->add_option("--out", out)->required();
  enc->add_flag("--features", features, "also write quantized features as DFT1");

  auto* dec = app.add_subcommand("decode", "DFTK token files to images");
  dec->add_option("--checkpoint", ckpt)->required();
  dec->add_option("--tokens", token_files, "DFTK files")->required();
  dec->add_option("--out", out)->required();
  dec->add_flag("--features", features, "also write quantized features as DFT1");

  auto* rec = app.add_subcommand("reconstruct", "encode and decode images, report PSNR/SSIM");
  rec->add_option("--checkpoint", ckpt)->required();
  rec->add_option("--input", input)->required();
  rec->add_option("--out", out)->required();

  auto* smp = app.add_subcommand("sample", "fit the toy prior on encoded data and generate");
  smp->add_option("--checkpoint", ckpt)->required();
  smp->add_option("--data", data, "dataset the prior is fit on")->required();
  smp->add_option("--out", out)->required();
  smp->add_option("--seed", seed, "sampling seed (default: from the config)");
  smp->add_option("--count", samples, "number of samples")->check(CLI::PositiveNumber);
  smp->add_option("--class", class_id, "class to condition on");
  smp->add_option("--guidance", guidance, "classifier-free guidance scale");

  auto* st = app.add_subcommand("stats", "utilization, per-scale error and cluster histogram");
  st->add_option("--checkpoint", ckpt)->required();
  st->add_option("--input", input)->required();
  st->add_option("--out", out)->required();

  auto* abl = app.add_subcommand("ablate", "train the ablation grid and write metric CSVs");
  add_config(abl);
  abl->add_option("--data", data)->required();
  abl->add_option("--out", out)->required();
  abl->add_option("--ks", ks, "codebook sizes (default 32 128 512 2048)");
  abl->add_option("--steps", steps, "override tokenizer.steps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common, out, count);
    if (train->parsed()) return cmd_train(common, data, out, steps, metrics);
    if (enc->parsed()) return cmd_encode(ckpt, input, out, features);
    if (dec->parsed()) return cmd_decode(ckpt, token_files, out, features);
    if (rec->parsed()) return cmd_reconstruct(ckpt, input, out);
    if (smp->parsed()) return cmd_sample(ckpt, data, out, seed, samples, class_id, guidance);
    if (st->parsed()) return cmd_stats(ckpt, input, out);
    if (abl->parsed()) return cmd_ablate(common, data, out, ks, steps);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
