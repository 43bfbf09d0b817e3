// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "sardiff/image_io.hpp"
#include "sardiff/pipeline.hpp"
#include "sardiff/sar_synth.hpp"
#include "sardiff/serialize.hpp"
#include "sardiff/training.hpp"
#include "sardiff/verify.hpp"

namespace sardiff::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::uint64_t seed = 0;
  bool seed_given = false;
  unsigned threads = 1;
  std::string config;
  std::string input;
  std::string output;
  std::string dump;
  std::string checkpoint;
  std::string tier;
  std::size_t scenes = 32;
  long steps = -1;
  std::size_t count = 0;
  std::size_t size = 64;
};

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config '" + path + "'");
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config '" + path + "': " + e.what());
  }
}

std::string hex_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

fs::path or_default(const std::string& given, const fs::path& fallback) { return given.empty() ? fallback : fs::path(given); }

class Run {
 public:
  Run(std::string command, const Options& o) : command_(std::move(command)), opts_(o) {}

  void artifact(const fs::path& p) { artifacts_.push_back(p); }

  void finish(const fs::path& manifest_path, const json& config) const {
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const fs::path base = fs::absolute(manifest_path).parent_path();
    json arts = json::array();
    for (const fs::path& a : artifacts_) arts.push_back(fs::absolute(a).lexically_relative(base).generic_string());
    const json m = {{"command", command_},
                    {"config_hash", hex_hash(config.dump())},
                    {"config", config},
                    {"seed", opts_.seed},
                    {"threads", opts_.threads},
                    {"artifacts", arts},
                    {"versions", {{"sardiff", kVersion}, {"checkpoint_format", 1}, {"config_format", kConfigVersion}}},
                    {"wall_time_seconds", seconds}};
    fs::create_directories(base);
    write_file_atomic(manifest_path, m.dump(2) + "\n");
  }

 private:
  std::string command_;
  const Options& opts_;
  std::vector<fs::path> artifacts_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void log_line(const std::string& command, const std::string& msg) { std::cerr << "[" << command << "] " << msg << "\n"; }

int cmd_data_gen(const Options& o) {
  const DatasetConfig cfg = o.config.empty() ? DatasetConfig{} : DatasetConfig::from_json(read_json(o.config));
  const fs::path out = or_default(o.output, artifact_root() / "data");
  Run run("data-gen", o);
  log_line("data-gen", "generating " + std::to_string(o.scenes) + " scenes into " + out.string());
  const fs::path manifest = make_dataset(o.scenes, cfg, Rng(o.seed), out, o.threads);
  run.artifact(manifest);
  run.artifact(out / "dataset.json");
  json c = cfg.to_json();
  c["scenes"] = o.scenes;
  run.finish(out / "run_manifest.json", c);
  return kExitOk;
}

int cmd_train(TrainTarget target, const std::string& command, const Options& o) {
  TrainConfig cfg;
  if (!o.config.empty()) {
    json j = read_json(o.config);
    if (j.contains("target") && j.at("target") != train_target_name(target)) {
      throw UsageError("config target '" + j.at("target").get<std::string>() + "' does not match command " + command);
    }
    j["target"] = train_target_name(target);
    cfg = TrainConfig::from_json(j);
  }
  cfg.target = target;
  if (o.seed_given) cfg.seed = o.seed;
  if (o.steps >= 0) cfg.steps = o.steps;
  if (!o.tier.empty()) cfg.tier = o.tier;
  cfg.validate();

  const fs::path data = or_default(o.input, artifact_root() / "data");
  const fs::path models = or_default(o.checkpoint, artifact_root() / "models");
  const fs::path out = or_default(o.output, artifact_root() / "models");
  TrainInputs inputs;
  inputs.tiles = load_dataset(data, cfg.tier);
  VaeParams vae;
  DenoiserParams base;
  if (target != TrainTarget::vae) {
    vae = vae_from_checkpoint(load_checkpoint(models / "vae.ckpt"));
    inputs.vae = &vae;
  }
  if (target == TrainTarget::control || target == TrainTarget::lora) {
    base = denoiser_from_checkpoint(load_checkpoint(models / "denoiser.ckpt"));
    inputs.base = &base;
  }
  Run run(command, o);
  log_line(command, std::to_string(inputs.tiles.size()) + " tiles, " + std::to_string(cfg.steps) + " steps");
  train(cfg, inputs, out, [&](const MetricRow& m) {
    std::ostringstream os;
    os << "step " << m.step << " loss " << std::setprecision(6) << m.loss << " (" << std::fixed
       << std::setprecision(1) << m.seconds << " s)";
    log_line(command, os.str());
  });
  const std::string stem = checkpoint_stem(cfg);
  run.artifact(out / (stem + ".ckpt"));
  run.artifact(out / (stem + "_metrics.csv"));
  run.finish(out / (stem + "_run_manifest.json"), cfg.to_json());
  return kExitOk;
}

int cmd_sample(const Options& o) {
  const fs::path models = or_default(o.checkpoint, artifact_root() / "models");
  const fs::path out = or_default(o.output, artifact_root() / "samples");
  const std::string tier = o.tier.empty() ? "sd40" : o.tier;
  const std::size_t count = o.count == 0 ? 4 : o.count;
  const int steps = o.steps < 0 ? 50 : static_cast<int>(o.steps);
  const ModelRegistry reg = load_registry(models);
  const std::string prompt = tier + " " + std::string(kDefaultPrompt);
  Rng rng(o.seed);
  Run run("sample", o);
  const Tensor images = sample_images(reg.model(tier), reg.vae, reg.schedule, prompt, count, o.size, steps, rng);
  fs::create_directories(out);
  for (std::size_t i = 0; i < count; ++i) {
    std::ostringstream name;
    name << "sample_" << std::setw(3) << std::setfill('0') << i << ".pgm";
    write_pgm(out / name.str(), from_tensor(batch_slice(images, i)));
    run.artifact(out / name.str());
  }
  run.finish(out / "run_manifest.json",
             {{"tier", tier}, {"count", count}, {"size", o.size}, {"steps", steps}, {"prompt", prompt}});
  return kExitOk;
}

int cmd_upscale(const Options& o) {
  PipelineConfig cfg = o.config.empty() ? default_pipeline_config() : PipelineConfig::from_json(read_json(o.config));
  if (!o.input.empty()) cfg.input = o.input;
  if (!o.output.empty()) cfg.output = o.output;
  if (!o.dump.empty()) cfg.dump_intermediates = o.dump;
  if (cfg.input.empty() || cfg.output.empty()) throw UsageError("upscale needs --input and --output");
  if (o.seed_given) {
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) cfg.stages[i].seed = o.seed + i;
  }
  const ModelRegistry reg = load_registry(or_default(o.checkpoint, artifact_root() / "models"));
  Run run("upscale", o);
  const Tensor input = read_image(cfg.input);
  const PipelineResult result = run_pipeline(input, cfg, reg);
  const fs::path out(cfg.output);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_image(out, result.output);
  run.artifact(out);
  if (!cfg.dump_intermediates.empty()) {
    dump_intermediates(result, cfg.dump_intermediates);
    run.artifact(fs::path(cfg.dump_intermediates) / "trace.json");
  }
  log_line("upscale", shape_str(input.shape()) + " -> " + shape_str(result.output.shape()));
  run.finish(fs::path(out.string() + ".manifest.json"), cfg.to_json());
  return kExitOk;
}

int cmd_eval_stats(const Options& o) {
  const fs::path data = or_default(o.input, artifact_root() / "data");
  const fs::path models = or_default(o.checkpoint, artifact_root() / "models");
  const fs::path out = or_default(o.output, artifact_root() / "eval_stats.json");
  const std::string tier = o.tier.empty() ? "sd40" : o.tier;
  const std::size_t count = o.count == 0 ? 256 : o.count;
  const int steps = o.steps < 0 ? 50 : static_cast<int>(o.steps);
  const std::vector<SarTile> tiles = load_dataset(data, tier);
  if (tiles.empty()) throw std::runtime_error("no " + tier + " tiles under '" + data.string() + "'");
  const ModelRegistry reg = load_registry(models);
  Run run("eval-stats", o);

  std::vector<Tensor> amps;
  for (const SarTile& t : tiles) amps.push_back(t.amplitude);
  const PixelStats data_stats = pixel_stats(amps);

  double mse = 0.0;
  const std::size_t n_recon = std::min<std::size_t>(256, tiles.size());
  for (std::size_t i = 0; i < n_recon; ++i) {
    const Tensor rec = decode(reg.vae, encode_moments(reg.vae, amps[i]).first);
    mse += std::pow(10.0, -psnr(amps[i], rec) / 10.0);
  }
  const double vae_psnr = 10.0 * std::log10(static_cast<double>(n_recon) / mse);

  Rng rng(o.seed);
  Rng prompt_rng = rng.split(0);
  std::vector<std::string> prompts;
  for (std::size_t i = 0; i < count; ++i) {
    const auto k = prompt_rng.uniform_int(0, static_cast<std::int64_t>(tiles.size()) - 1);
    prompts.push_back(tile_prompt(tiles[static_cast<std::size_t>(k)]));
  }
  const std::size_t size = tiles.front().amplitude.dim(2);
  const Tensor samples = sample_images(reg.model(tier), reg.vae, reg.schedule, prompts, size, steps, rng);
  const PixelStats sample_stats = pixel_stats(std::span(&samples, 1));
  const json result = {
      {"tier", tier},
      {"tiles", tiles.size()},
      {"vae_psnr_db", vae_psnr},
      {"data", {{"mean", data_stats.mean}, {"std", data_stats.stddev}}},
      {"samples", {{"count", count}, {"steps", steps}, {"mean", sample_stats.mean}, {"std", sample_stats.stddev}}},
      {"relative_error",
       {{"mean", std::abs(sample_stats.mean - data_stats.mean) / data_stats.mean},
        {"std", std::abs(sample_stats.stddev - data_stats.stddev) / data_stats.stddev}}}};
  std::cout << result.dump(2) << "\n";
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file_atomic(out, result.dump(2) + "\n");
  run.artifact(out);
  run.finish(fs::path(out.string() + ".manifest.json"), {{"tier", tier}, {"count", count}, {"steps", steps}});
  return kExitOk;
}

int cmd_grad_check(const Options& o) {
  const fs::path out = or_default(o.output, artifact_root() / "grad_check.json");
  Run run("grad-check", o);
  const std::vector<CheckResult> results = gradient_suite(o.seed);
  bool ok = true;
  json rows = json::array();
  for (const CheckResult& r : results) {
    std::printf("%-40s max rel err %.3e  (threshold %.0e)  %s\n", r.name.c_str(), r.value, r.threshold,
                r.passed() ? "PASS" : "FAIL");
    ok = ok && r.passed();
    rows.push_back({{"component", r.name}, {"max_rel_error", r.value}, {"threshold", r.threshold}});
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file_atomic(out, rows.dump(2) + "\n");
  run.artifact(out);
  run.finish(fs::path(out.string() + ".manifest.json"), {{"threshold", kGradCheckThreshold}});
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

fs::path artifact_root() {
  const char* env = std::getenv("SDF_HOME");
  return env && *env ? fs::path(env) : fs::path("sdf_home");
}

int cli_main(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Desk-scale latent diffusion for synthetic SAR imagery", "sardiff"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();

  Options o;
  app.add_option("--seed", o.seed, "Seed for all randomness")->each([&](const std::string&) { o.seed_given = true; });
  app.add_option("--threads", o.threads, "Worker threads for data-parallel sections")->check(CLI::PositiveNumber);
  app.add_option("--config", o.config, "JSON config file");
  app.add_option("--input", o.input, "Input file or directory");
  app.add_option("--output", o.output, "Output file or directory");
  app.add_option("--dump-intermediates", o.dump, "Directory for pipeline intermediates");
  app.add_option("--checkpoint", o.checkpoint, "Model directory");
  app.add_option("--tier", o.tier, "Resolution tier (sd160, sd80, sd40)");

  auto* data_gen = app.add_subcommand("data-gen", "Generate the synthetic SAR dataset");
  data_gen->add_option("--scenes", o.scenes, "Number of scenes")->check(CLI::PositiveNumber);
  auto* train_vae = app.add_subcommand("train-vae", "Train the VAE");
  auto* train_den = app.add_subcommand("train-denoiser", "Train the base denoiser");
  auto* train_ctl = app.add_subcommand("train-control", "Train a control branch on a frozen trunk");
  auto* lora = app.add_subcommand("finetune-lora", "Fit LoRA adapters for one tier");
  for (CLI::App* sub : {train_vae, train_den, train_ctl, lora}) {
    sub->add_option("--steps", o.steps, "Override the step budget")->check(CLI::NonNegativeNumber);
  }
  auto* sample = app.add_subcommand("sample", "Generate images from pure noise");
  sample->add_option("--count", o.count, "Number of images")->check(CLI::PositiveNumber);
  sample->add_option("--steps", o.steps, "Reverse steps")->check(CLI::PositiveNumber);
  sample->add_option("--size", o.size, "Image extent in pixels")->check(CLI::PositiveNumber);
  auto* upscale = app.add_subcommand("upscale", "Run the multi-stage upscaling pipeline");
  auto* eval = app.add_subcommand("eval-stats", "VAE PSNR and sample statistics against the dataset");
  eval->add_option("--count", o.count, "Number of samples")->check(CLI::PositiveNumber);
  eval->add_option("--steps", o.steps, "Reverse steps")->check(CLI::PositiveNumber);
  auto* grad = app.add_subcommand("grad-check", "Gradient checks against central differences");

  if (argc <= 1) {
    std::cerr << app.help();
    return kExitUsage;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    std::cout << kVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (data_gen->parsed()) return cmd_data_gen(o);
    if (train_vae->parsed()) return cmd_train(TrainTarget::vae, "train-vae", o);
    if (train_den->parsed()) return cmd_train(TrainTarget::denoiser, "train-denoiser", o);
    if (train_ctl->parsed()) return cmd_train(TrainTarget::control, "train-control", o);
    if (lora->parsed()) return cmd_train(TrainTarget::lora, "finetune-lora", o);
    if (sample->parsed()) return cmd_sample(o);
    if (upscale->parsed()) return cmd_upscale(o);
    if (eval->parsed()) return cmd_eval_stats(o);
    if (grad->parsed()) return cmd_grad_check(o);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace sardiff::cli
