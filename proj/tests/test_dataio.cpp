#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "tokenflow/tokenflow.hpp"

using namespace tokenflow;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("tokenflow_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig small_config() {
  RunConfig c;
  c.data.count = 6;
  c.tokenizer.steps = 5;
  return c;
}

std::string expect_config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  ADD_FAILURE() << "no ConfigError for " << text;
  return {};
}

}  // namespace

TEST(Config, RoundTripIsIdentity) {
  for (const auto& name : preset_names()) {
    RunConfig c = preset(name);
    const std::string once = serialize(c);
    RunConfig back = parse_config(once);
    EXPECT_TRUE(back == c) << name;
    EXPECT_EQ(serialize(back), once) << name;
  }
  RunConfig c;
  c.data.seed = 12;
  c.sampling.class_id = 2;
  c.sampling.per_scale = {SampleSchedule::single(4, 0.9), SampleSchedule{{4, 1}, {0.9, 0.0}},
                          SampleSchedule{{4, 2, 1}, {0.9, 0.9, 0.0}}};
  c.paths.output = "out";
  c.tokenizer.lr = 0.1 + 0.2;  // not exactly representable in short decimal
  EXPECT_TRUE(parse_config(serialize(c)) == c);
}

TEST(Config, PartialDocumentKeepsDefaults) {
  RunConfig c = parse_config(R"({"seed": 4, "tokenizer": {"codebook_size": 64}})");
  EXPECT_EQ(c.seed, 4u);
  EXPECT_EQ(c.tokenizer.codebook_size, 64u);
  EXPECT_EQ(c.tokenizer.d_sem, TokenizerConfig{}.d_sem);
}

TEST(Config, UnknownKeysAndBadTypesNameTheField) {
  EXPECT_NE(expect_config_error(R"({"sed": 1})").find("sed"), std::string::npos);
  EXPECT_NE(expect_config_error(R"({"tokenizer": {"codebok_size": 3}})").find("tokenizer.codebok_size"),
            std::string::npos);
  EXPECT_NE(expect_config_error(R"({"tokenizer": {"lr": "fast"}})").find("tokenizer.lr"), std::string::npos);
  EXPECT_NE(expect_config_error(R"({"tokenizer": {"patch": -2}})").find("tokenizer.patch"), std::string::npos);
  EXPECT_NE(expect_config_error(R"({"tokenizer": {"mode": "triple"}})").find("tokenizer.mode"), std::string::npos);
  EXPECT_NE(expect_config_error(R"({"sampling": {"per_scale": [{"k_list": [1], "q": 1}]}})")
                .find("sampling.per_scale[0].q"),
            std::string::npos);
  EXPECT_NE(expect_config_error(R"({"data": {"kind": "clouds"}})").find("data.kind"), std::string::npos);
  EXPECT_NE(expect_config_error("{ not json").find("invalid JSON"), std::string::npos);
}

TEST(Config, ValidationRanges) {
  RunConfig c;
  c.tokenizer.image_side = 15;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.data.count = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.sampling.per_scale = {SampleSchedule::single(4, 0.9)};  // 1 schedule for 3 scales
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.sampling.schedule = {{1, 4}, {0.5, 0.5}};
  EXPECT_THROW(c.validate(), ConfigError);
  c = RunConfig{};
  c.prior.cond_drop_prob = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, PresetsCarryPublishedSettings) {
  for (const auto& name : {"tokenflow-b", "tokenflow-l", "tokenflow-xl"}) {
    RunConfig c = preset(name);
    EXPECT_NO_THROW(c.validate()) << name;
    EXPECT_EQ(c.tokenizer.codebook_size, 32768u);
    EXPECT_EQ(c.tokenizer.d_sem, 32u);
    EXPECT_EQ(c.tokenizer.d_pix, 8u);
    EXPECT_DOUBLE_EQ(c.tokenizer.lr, 1e-4);
    EXPECT_EQ(c.tokenizer.batch, 256u);
    EXPECT_DOUBLE_EQ(c.tokenizer.w_dis, 1.0);
    EXPECT_DOUBLE_EQ(c.tokenizer.beta, 0.25);
    EXPECT_DOUBLE_EQ(c.tokenizer.lambda_g, 0.5);
    EXPECT_DOUBLE_EQ(c.tokenizer.max_grad_norm, 1.0);
    EXPECT_DOUBLE_EQ(c.sampling.guidance_scale, 7.5);
    ASSERT_TRUE(c.reference.has_value());
  }
  RunConfig b = preset("tokenflow-b"), l = preset("tokenflow-l"), xl = preset("tokenflow-xl");
  EXPECT_EQ(b.tokenizer.schedule, (std::vector<std::size_t>{1, 2, 4, 6, 8, 10, 12, 14}));
  EXPECT_EQ(l.tokenizer.schedule, (std::vector<std::size_t>{1, 2, 3, 4, 6, 8, 10, 12, 14, 16}));
  EXPECT_EQ(xl.tokenizer.schedule, (std::vector<std::size_t>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 14, 17, 22, 27}));
  EXPECT_EQ(b.reference->resolution, 224u);
  EXPECT_EQ(l.reference->resolution, 256u);
  EXPECT_EQ(xl.reference->resolution, 384u);
  EXPECT_EQ(b.tokenizer.steps, 1000000u);
  EXPECT_EQ(l.tokenizer.steps, 500000u);
  EXPECT_EQ(xl.tokenizer.steps, 500000u);
  EXPECT_EQ(b.reference->teacher, "CLIP ViT-B/14-224");
  EXPECT_EQ(l.reference->teacher, "ViTamin-XL-256");
  EXPECT_EQ(xl.reference->teacher, "SigLIP-SO400M-patch14-384");
  EXPECT_THROW(preset("tokenflow-m"), ConfigError);
}

TEST(Config, SeedDerivation) {
  RunConfig a, b;
  b.seed = 1;
  EXPECT_NE(a.data_spec().seed, b.data_spec().seed);
  EXPECT_NE(a.sampling_config().seed, a.data_spec().seed);
  EXPECT_EQ(a.sampling_config(7).seed, 7u);
  a.data.seed = 99;
  EXPECT_EQ(a.data_spec().seed, 99u);
  EXPECT_EQ(a.sampling_config().per_scale.size(), a.tokenizer.schedule.size());
}

TEST(Config, HashIgnoresPathsOnly) {
  RunConfig a, b;
  b.paths.output = "elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.tokenizer.beta = 0.3;
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Ppm, RoundTripAndErrors) {
  Tensor img({2, 3, 3});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>((i * 37) % 256) / 255.0;
  const std::string bytes = encode_ppm(img);
  EXPECT_EQ(bytes.substr(0, 11), "P6\n3 2\n255\n");
  EXPECT_EQ(decode_ppm(bytes, "mem").storage(), img.storage());
  EXPECT_EQ(decode_ppm("P6 # comment\n3 2\n255\n" + bytes.substr(11), "mem").storage(), img.storage());
  EXPECT_THROW(decode_ppm("P5\n1 1\n255\n\x01", "mem"), DataError);
  EXPECT_THROW(decode_ppm("P6\n3 2\n65535\n", "mem"), DataError);
  EXPECT_THROW(decode_ppm(bytes.substr(0, bytes.size() - 1), "mem"), DataError);
  try {
    decode_ppm("P6\n", "broken.ppm");
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.ppm"), std::string::npos);
  }
  EXPECT_THROW(encode_ppm(Tensor({2, 2, 1})), DimensionError);
}

TEST(Dataset, GenerationIsDeterministicAndVerified) {
  const auto a = scratch("ds_a"), b = scratch("ds_b");
  SyntheticSpec spec;
  spec.count = 5;
  gen_dataset(spec, a);
  gen_dataset(spec, b);
  EXPECT_EQ(io::read_file(a / "manifest.json"), io::read_file(b / "manifest.json"));
  Dataset ds = load_dataset(a);
  EXPECT_EQ(ds.ids.size(), 5u);
  EXPECT_EQ(ds.images.storage(), generate_dataset(spec).images.storage());

  // Tampering is caught by the manifest hash.
  const Json m = read_json(a / "manifest.json");
  const fs::path first = a / m["images"][0]["file"].get<std::string>();
  Tensor img = load_image(first);
  img[0] = img[0] > 0.5 ? 0.0 : 1.0;
  save_image(first, img);
  try {
    load_dataset(a);
    FAIL() << "tampered dataset loaded";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(first.filename().string()), std::string::npos);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, CountOneAndNonRgb) {
  const auto dir = scratch("ds_one");
  SyntheticSpec spec;
  spec.count = 1;
  gen_dataset(spec, dir);
  EXPECT_EQ(read_json(dir / "manifest.json")["images"].size(), 1u);

  const auto gray = scratch("ds_gray");
  spec.channels = 1;
  spec.count = 2;
  gen_dataset(spec, gray);
  Dataset ds = load_dataset(gray);
  EXPECT_EQ(ds.images.dim(3), 1u);
  fs::remove_all(dir);
  fs::remove_all(gray);
}

TEST(Dataset, UnwritablePathIsDataError) {
  const auto dir = scratch("ds_blocked");
  io::write_file(dir / "file", "x");
  SyntheticSpec spec;
  spec.count = 1;
  EXPECT_THROW(gen_dataset(spec, dir / "file" / "sub"), DataError);
  fs::remove_all(dir);
}

TEST(Dataset, SingleImageFile) {
  const auto dir = scratch("single");
  Tensor img({16, 16, 3}, 0.5);
  save_image(dir / "x.ppm", img);
  Dataset ds = load_dataset(dir / "x.ppm");
  EXPECT_EQ(ds.images.shape(), (Shape{1, 16, 16, 3}));
  EXPECT_EQ(ds.ids.front(), "x");
  EXPECT_THROW(load_image(dir / "x.png"), DataError);
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripPreservesModel) {
  const auto dir = scratch("ckpt");
  RunConfig cfg = small_config();
  Dataset ds = generate_dataset(cfg.data_spec());
  Tokenizer model(cfg.tokenizer_config());
  train_tokenizer(model, ds.images);
  save_checkpoint(dir, cfg, model, cfg.tokenizer.steps);
  Checkpoint ck = load_checkpoint(dir);
  EXPECT_TRUE(ck.config == cfg);
  EXPECT_EQ(ck.step, cfg.tokenizer.steps);

  auto a = model.named_parameters(), b = ck.model.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(io::round_to_f32(a[i].second.value()).storage(), b[i].second.value().storage()) << a[i].first;
  }
  EXPECT_EQ(std::vector<std::uint64_t>(model.codebook().usage_counts().begin(), model.codebook().usage_counts().end()),
            std::vector<std::uint64_t>(ck.model.codebook().usage_counts().begin(),
                                       ck.model.codebook().usage_counts().end()));

  // Saving what was loaded reproduces the same files.
  const auto again = scratch("ckpt_again");
  save_checkpoint(again, ck.config, ck.model, ck.step);
  EXPECT_EQ(io::read_file(dir / "codebook.dfcb"), io::read_file(again / "codebook.dfcb"));
  for (auto& [name, v] : a) {
    if (name.rfind("codebook.", 0) == 0) continue;
    EXPECT_EQ(io::read_file(dir / param_file(name)), io::read_file(again / param_file(name))) << name;
  }
  fs::remove_all(dir);
  fs::remove_all(again);
}

TEST(Checkpoint, CorruptionNamesTheFile) {
  const auto dir = scratch("ckpt_bad");
  RunConfig cfg = small_config();
  Tokenizer model(cfg.tokenizer_config());
  save_checkpoint(dir, cfg, model, 0);
  io::write_file(dir / "codebook.dfcb", "DFCB");
  try {
    load_checkpoint(dir);
    FAIL() << "corrupt checkpoint loaded";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("codebook.dfcb"), std::string::npos);
  }
  fs::remove_all(dir);
}
