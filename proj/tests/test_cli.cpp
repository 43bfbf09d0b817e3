// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "sardiff/image_io.hpp"
#include "sardiff/pipeline.hpp"

using namespace sardiff;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "sardiff");
  return cli::cli_main(args);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_toy_models(const fs::path& dir) {
  Rng rng(3);
  VaeConfig vc;
  vc.widths = {4, 4, 8, 8};
  const VaeParams vae = init_vae(vc, rng);
  DenoiserConfig dc;
  dc.base_channels = 8;
  dc.groups = 2;
  dc.time_features = 8;
  dc.text_dim = 4;
  const DenoiserParams den = init_denoiser(dc, rng);
  fs::create_directories(dir);
  save_checkpoint(dir / "vae.ckpt", vae_checkpoint(vae));
  save_checkpoint(dir / "denoiser.ckpt", denoiser_checkpoint(den));
  for (ControlKind k : {ControlKind::canny, ControlKind::tile}) {
    save_checkpoint(dir / ("control_" + std::string(control_kind_name(k)) + ".ckpt"),
                    control_checkpoint(init_control_branch(den, k, rng), dc));
  }
}

}  // namespace

TEST(Pgm, BitExactRoundTrip) {
  for (std::uint16_t maxval : {std::uint16_t{255}, std::uint16_t{65535}, std::uint16_t{1000}}) {
    GrayImage img{7, 5, maxval, {}};
    Rng rng(maxval);
    for (int i = 0; i < 35; ++i) img.pixels.push_back(static_cast<std::uint16_t>(rng.uniform_int(0, maxval)));
    const std::string bytes = encode_pgm(img);
    EXPECT_EQ(decode_pgm(bytes), img);
    EXPECT_EQ(bytes.substr(0, 2), "P5");
    EXPECT_EQ(bytes.size(), std::string("P5\n7 5\n").size() + std::to_string(maxval).size() + 1 +
                                35 * (maxval > 255 ? 2u : 1u));
    const fs::path p = fs::temp_directory_path() / "sardiff_test.pgm";
    write_pgm(p, img);
    EXPECT_EQ(read_pgm(p), img);
    EXPECT_EQ(slurp(p), bytes);
    fs::remove(p);
  }
  EXPECT_THROW(decode_pgm("P2\n1 1\n255\n0"), std::runtime_error);
  EXPECT_THROW(decode_pgm("P5\n2 2\n255\n\x01"), std::runtime_error);
}

TEST(Pgm, TensorConversion) {
  const GrayImage img{2, 1, 65535, {0, 65535}};
  const Tensor t = to_tensor(img);
  EXPECT_EQ(t.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(t[1], 1.0);
  EXPECT_EQ(from_tensor(t), img);
  EXPECT_EQ(from_tensor(Tensor({1, 1, 1, 2}, std::vector<double>{-0.5, 2.0})), img);
  const Tensor q = to_tensor(from_tensor(Tensor({1, 1, 1, 1}, 0.3)));
  EXPECT_NEAR(q[0], 0.3, 0.5 / 65535);
}

TEST(Png, WritesSignatureAndChunks) {
  const fs::path p = fs::temp_directory_path() / "sardiff_test.png";
  write_image(p, Tensor({1, 1, 4, 4}, 0.5));
  const std::string bytes = slurp(p);
  EXPECT_EQ(bytes.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));
  EXPECT_NE(bytes.find("IHDR"), std::string::npos);
  EXPECT_NE(bytes.find("IDAT"), std::string::npos);
  EXPECT_EQ(bytes.substr(bytes.size() - 8, 4), "IEND");
  fs::remove(p);
}

TEST(Cli, UsageErrors) {
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({}), cli::kExitUsage);
  EXPECT_EQ(run({"--bogus"}), cli::kExitUsage);
  EXPECT_EQ(run({"frobnicate"}), cli::kExitUsage);
  EXPECT_EQ(run({"sample", "--count", "0"}), cli::kExitUsage);
  const std::string err = testing::internal::GetCapturedStderr();
  EXPECT_NE(err.find("Usage"), std::string::npos);
  testing::internal::CaptureStdout();
  EXPECT_EQ(run({"--help"}), cli::kExitOk);
  EXPECT_NE(testing::internal::GetCapturedStdout().find("data-gen"), std::string::npos);
}

TEST(Cli, RuntimeErrors) {
  const fs::path d = fresh_dir("sardiff_cli_err");
  testing::internal::CaptureStderr();
  EXPECT_EQ(run({"sample", "--checkpoint", (d / "missing").string(), "--output", d.string()}), cli::kExitRuntime);
  std::ofstream(d / "bad.json") << R"({"version": 1, "tile_size": 64, "colour": 1})";
  EXPECT_EQ(run({"data-gen", "--config", (d / "bad.json").string(), "--output", (d / "data").string()}),
            cli::kExitRuntime);
  testing::internal::GetCapturedStderr();
  fs::remove_all(d);
}

TEST(Cli, GradCheckReportsAndPasses) {
  const fs::path d = fresh_dir("sardiff_cli_gc");
  testing::internal::CaptureStdout();
  EXPECT_EQ(run({"grad-check", "--output", (d / "gc.json").string()}), cli::kExitOk);
  const std::string out = testing::internal::GetCapturedStdout();
  EXPECT_NE(out.find("vae loss"), std::string::npos);
  EXPECT_NE(out.find("PASS"), std::string::npos);
  EXPECT_EQ(out.find("FAIL"), std::string::npos);
  std::ifstream is(d / "gc.json.manifest.json");
  const nlohmann::json m = nlohmann::json::parse(is);
  EXPECT_EQ(m.at("command"), "grad-check");
  EXPECT_EQ(m.at("artifacts")[0], "gc.json");
  fs::remove_all(d);
}

TEST(Cli, DataGenIsByteIdentical) {
  const fs::path d = fresh_dir("sardiff_cli_data");
  std::ofstream(d / "ds.json") << R"({"version": 1, "extent": 128, "tile_size": 32, "stride": 32})";
  const std::string cfg = (d / "ds.json").string();
  testing::internal::CaptureStderr();
  ASSERT_EQ(run({"data-gen", "--config", cfg, "--scenes", "2", "--seed", "5", "--output", (d / "a").string()}), 0);
  ASSERT_EQ(run({"data-gen", "--config", cfg, "--scenes", "2", "--seed", "5", "--threads", "2", "--output",
                 (d / "b").string()}), 0);
  testing::internal::GetCapturedStderr();
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(d / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    const fs::path rel = fs::relative(e.path(), d / "a");
    EXPECT_EQ(slurp(e.path()), slurp(d / "b" / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 40u);
  std::ifstream is(d / "a" / "run_manifest.json");
  const nlohmann::json m = nlohmann::json::parse(is);
  for (const char* key : {"command", "config_hash", "seed", "threads", "artifacts", "versions", "wall_time_seconds"}) {
    EXPECT_TRUE(m.contains(key)) << key;
  }
  fs::remove_all(d);
}

TEST(Cli, UpscaleDefaultConfigQuadruplesExtent) {
  const fs::path d = fresh_dir("sardiff_cli_up");
  write_toy_models(d / "models");
  Rng rng(4);
  Tensor img({1, 1, 64, 64});
  for (double& v : img.storage()) v = rng.uniform();
  write_image(d / "in.pgm", img);
  std::ofstream(d / "p.json") << default_pipeline_config().to_json().dump();
  testing::internal::CaptureStderr();
  for (const char* out : {"b1.png", "b2.png"}) {
    ASSERT_EQ(run({"upscale", "--config", (d / "p.json").string(), "--input", (d / "in.pgm").string(), "--output",
                   (d / out).string(), "--checkpoint", (d / "models").string(), "--seed", "7", "--threads", "1"}),
              0);
  }
  ASSERT_EQ(run({"upscale", "--input", (d / "in.pgm").string(), "--output", (d / "b3.pgm").string(), "--checkpoint",
                 (d / "models").string(), "--dump-intermediates", (d / "dump").string()}),
            0);
  testing::internal::GetCapturedStderr();
  EXPECT_EQ(slurp(d / "b1.png"), slurp(d / "b2.png"));
  EXPECT_TRUE(fs::exists(d / "b1.png.manifest.json"));
  const GrayImage out = read_pgm(d / "b3.pgm");
  EXPECT_EQ(out.width, 256u);
  EXPECT_EQ(out.height, 256u);
  EXPECT_TRUE(fs::exists(d / "dump" / "stage1_cond_tile.pgm"));
  fs::remove_all(d);
}

TEST(Cli, ArtifactRootFollowsEnvironment) {
  ::setenv("SDF_HOME", "/tmp/sardiff_home_test", 1);
  EXPECT_EQ(cli::artifact_root(), fs::path("/tmp/sardiff_home_test"));
  ::unsetenv("SDF_HOME");
  EXPECT_EQ(cli::artifact_root(), fs::path("sdf_home"));
}
