// SPDX-License-Identifier: Apache-2.0
#include "sardiff/pipeline.hpp"

#include <cmath>
#include <stdexcept>

#include "sardiff/image_io.hpp"
#include "sardiff/serialize.hpp"
#include "sardiff/text.hpp"
#include "sardiff/training.hpp"

namespace sardiff {

void StageConfig::validate() const {
  if (scale_factor < 1) throw std::invalid_argument("stage: scale_factor must be >= 1");
  if (!is_tier_tag(tier)) throw std::invalid_argument("stage: unknown tier '" + tier + "'");
  if (steps < 0) throw std::invalid_argument("stage: steps must be >= 0");
  if (!(denoise_strength >= 0.0 && denoise_strength <= 1.0)) {
    throw std::invalid_argument("stage: denoise_strength must lie in [0, 1]");
  }
  if (tile_factor < 1) throw std::invalid_argument("stage: tile_factor must be >= 1");
  for (const StageControl& c : controls) {
    if (!(c.strength >= 0.0 && c.strength <= 2.0)) throw std::invalid_argument("stage: control strength in [0, 2]");
    if (!(c.end_percent >= 0.0 && c.end_percent <= 1.0)) {
      throw std::invalid_argument("stage: control end_percent must lie in [0, 1]");
    }
  }
}

nlohmann::json StageConfig::to_json() const {
  nlohmann::json ctrls = nlohmann::json::array();
  for (const StageControl& c : controls) {
    ctrls.push_back({{"kind", control_kind_name(c.kind)}, {"strength", c.strength}, {"end_percent", c.end_percent}});
  }
  return {{"scale_factor", scale_factor},
          {"tier", tier},
          {"controls", ctrls},
          {"steps", steps},
          {"denoise_strength", denoise_strength},
          {"seed", seed},
          {"prompt", prompt},
          {"upscale_mode", ops::interp_mode_name(upscale_mode)},
          {"canny", {{"sigma", canny.sigma}, {"low", canny.low}, {"high", canny.high}}},
          {"tile_factor", tile_factor}};
}

namespace {

void require_fields(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, std::string_view what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (std::string_view a : allowed) known = known || a == key;
    if (!known) throw std::invalid_argument(std::string(what) + ": unknown field \"" + key + "\"");
  }
}

}  // namespace

StageConfig StageConfig::from_json(const nlohmann::json& j) {
  require_fields(j,
                 {"scale_factor", "tier", "controls", "steps", "denoise_strength", "seed", "prompt", "upscale_mode",
                  "canny", "tile_factor"},
                 "stage");
  StageConfig s;
  s.scale_factor = j.value("scale_factor", s.scale_factor);
  s.tier = j.value("tier", s.tier);
  s.steps = j.value("steps", s.steps);
  s.denoise_strength = j.value("denoise_strength", s.denoise_strength);
  s.seed = j.value("seed", s.seed);
  s.prompt = j.value("prompt", s.prompt);
  if (j.contains("upscale_mode")) s.upscale_mode = ops::parse_interp_mode(j.at("upscale_mode").get<std::string>());
  if (j.contains("canny")) {
    const auto& k = j.at("canny");
    require_fields(k, {"sigma", "low", "high"}, "stage canny");
    s.canny.sigma = k.value("sigma", s.canny.sigma);
    s.canny.low = k.value("low", s.canny.low);
    s.canny.high = k.value("high", s.canny.high);
  }
  s.tile_factor = j.value("tile_factor", s.tile_factor);
  if (j.contains("controls")) {
    for (const auto& c : j.at("controls")) {
      require_fields(c, {"kind", "strength", "end_percent"}, "stage control");
      StageControl sc;
      sc.kind = parse_control_kind(c.at("kind").get<std::string>());
      sc.strength = c.value("strength", sc.strength);
      sc.end_percent = c.value("end_percent", sc.end_percent);
      s.controls.push_back(sc);
    }
  }
  s.validate();
  return s;
}

void PipelineConfig::validate() const {
  if (stages.empty()) throw std::invalid_argument("pipeline: at least one stage is required");
  for (const StageConfig& s : stages) s.validate();
}

nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json j = {{"version", kConfigVersion}, {"stages", nlohmann::json::array()}};
  for (const StageConfig& s : stages) j["stages"].push_back(s.to_json());
  if (!input.empty()) j["input"] = input;
  if (!output.empty()) j["output"] = output;
  if (!dump_intermediates.empty()) j["dump_intermediates"] = dump_intermediates;
  return j;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  check_config_fields(j, {"stages", "input", "output", "dump_intermediates"}, "pipeline config");
  PipelineConfig c;
  for (const auto& s : j.at("stages")) c.stages.push_back(StageConfig::from_json(s));
  c.input = j.value("input", "");
  c.output = j.value("output", "");
  c.dump_intermediates = j.value("dump_intermediates", "");
  c.validate();
  return c;
}

PipelineConfig default_pipeline_config() {
  PipelineConfig c;
  StageConfig s1;
  s1.tier = "sd80";
  s1.controls = {{ControlKind::canny, 0.8, 0.7}, {ControlKind::tile, 0.8, 0.8}};
  StageConfig s2;
  s2.tier = "sd40";
  s2.seed = 1;
  s2.controls = {{ControlKind::canny, 0.8, 0.8}, {ControlKind::tile, 0.8, 0.8}};
  c.stages = {s1, s2};
  return c;
}

int control_active_steps(double end_percent, int steps) {
  if (!(end_percent >= 0.0 && end_percent <= 1.0)) throw std::invalid_argument("end_percent must lie in [0, 1]");
  // The epsilon absorbs representation error such as 0.7 * 20 = 13.999...
  return std::min(steps, static_cast<int>(std::floor(end_percent * steps + 1e-9)));
}

Tensor latent_upscale(const Tensor& z, int factor, ops::InterpMode mode) {
  if (factor < 1) throw std::invalid_argument("latent_upscale: factor must be >= 1");
  return factor == 1 ? z : ops::interpolate2d(z, factor, mode);
}

const DenoiserParams& ModelRegistry::model(const std::string& tier) const {
  auto it = merged_.find(tier);
  if (it != merged_.end()) return it->second;
  const ModelTier& t = tiers.at(tier);
  return merged_.emplace(tier, merge_lora(base, t.adapters)).first->second;
}

const ControlBranch& ModelRegistry::control(ControlKind kind) const {
  auto it = controls.find(kind);
  if (it == controls.end()) {
    throw std::invalid_argument("no " + std::string(control_kind_name(kind)) + " control branch is loaded");
  }
  return it->second;
}

ModelRegistry load_registry(const std::filesystem::path& dir) {
  ModelRegistry r;
  r.vae = vae_from_checkpoint(load_checkpoint(dir / "vae.ckpt"));
  const Checkpoint den = load_checkpoint(dir / "denoiser.ckpt");
  r.base = denoiser_from_checkpoint(den);
  if (den.header.contains("schedule")) r.schedule = NoiseSchedule::from_json(den.header.at("schedule"));
  const std::string base_id = den.header.value("kind", "denoiser");
  for (std::string_view tag : kTierTags) {
    ModelTier tier{std::string(tag), base_id, {}};
    const auto path = dir / ("lora_" + std::string(tag) + ".ckpt");
    if (std::filesystem::exists(path)) tier.adapters = lora_from_checkpoint(load_checkpoint(path), r.base);
    r.tiers.add(std::move(tier));
  }
  for (ControlKind kind : {ControlKind::canny, ControlKind::tile}) {
    const auto path = dir / ("control_" + std::string(control_kind_name(kind)) + ".ckpt");
    if (std::filesystem::exists(path)) r.controls.emplace(kind, control_from_checkpoint(load_checkpoint(path)));
  }
  return r;
}

StageResult run_stage(const Tensor& image, const StageConfig& stage, const ModelRegistry& registry) {
  stage.validate();
  require_rank(image, 4, "run_stage");
  const DenoiserParams& model = registry.model(stage.tier);
  const auto f = static_cast<std::size_t>(stage.scale_factor);
  if ((image.dim(2) * f) % kVaeDownsample != 0 || (image.dim(3) * f) % kVaeDownsample != 0 ||
      image.dim(2) % kVaeDownsample != 0 || image.dim(3) % kVaeDownsample != 0) {
    throw ShapeError("run_stage: image " + shape_str(image.shape()) + " extents must be divisible by " +
                     std::to_string(kVaeDownsample) + " before and after scaling");
  }

  StageResult out;
  out.upscaled = latent_upscale(image, stage.scale_factor, ops::InterpMode::bilinear);
  std::vector<ControlInput> inputs;
  for (const StageControl& c : stage.controls) {
    out.conditions.push_back(c.kind == ControlKind::canny
                                 ? canny(out.upscaled, stage.canny, "stage_input")
                                 : tile_condition(out.upscaled, stage.tile_factor, ops::InterpMode::bilinear,
                                                  "stage_input"));
  }
  for (std::size_t i = 0; i < stage.controls.size(); ++i) {
    inputs.push_back({&registry.control(stage.controls[i].kind), &out.conditions[i].image, stage.controls[i].strength});
  }
  out.control_applications.assign(stage.controls.size(), 0);

  Tensor z = latent_upscale(encode_latents(registry.vae, image), stage.scale_factor, stage.upscale_mode);
  const NoiseSchedule& s = registry.schedule;
  const int t_start = static_cast<int>(std::lround(stage.denoise_strength * s.steps()));
  const int n = std::min(stage.steps, t_start);
  if (n > 0) {
    Rng rng(stage.seed, 0);
    z = diffuse_to(z, t_start, rng.normal_tensor(z.shape()), s);
    out.timesteps = strided_timesteps(t_start, n);
    const std::vector<TokenSequence> text(z.dim(0), tokenize(stage.tier + " " + stage.prompt));
    std::vector<int> active;
    for (const StageControl& c : stage.controls) active.push_back(control_active_steps(c.end_percent, n));
    const NoisePredictor predict = [&](const Tensor& zt, int t, int step, int) {
      std::vector<ControlInput> live;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (step < active[i]) {
          live.push_back(inputs[i]);
          ++out.control_applications[i];
        }
      }
      const std::vector<int> ts(zt.dim(0), t);
      return predict_noise(model, zt, ts, text, live);
    };
    z = reverse_chain(std::move(z), out.timesteps, predict, s, rng);
  }
  for (double& v : z.data()) v /= registry.vae.latent_scale;
  out.output = decode(registry.vae, z);
  return out;
}

PipelineResult run_pipeline(const Tensor& image, const PipelineConfig& config, const ModelRegistry& registry) {
  config.validate();
  PipelineResult r;
  Tensor current = image;
  for (const StageConfig& stage : config.stages) {
    r.stages.push_back(run_stage(current, stage, registry));
    current = r.stages.back().output;
  }
  r.output = std::move(current);
  return r;
}

Tensor sample_images(const DenoiserParams& model, const VaeParams& vae, const NoiseSchedule& schedule,
                     const std::string& prompt, std::size_t count, std::size_t size, int steps, Rng& rng) {
  return sample_images(model, vae, schedule, std::vector<std::string>(count, prompt), size, steps, rng);
}

Tensor sample_images(const DenoiserParams& model, const VaeParams& vae, const NoiseSchedule& schedule,
                     const std::vector<std::string>& prompts, std::size_t size, int steps, Rng& rng) {
  const std::size_t count = prompts.size();
  if (count == 0 || size == 0 || size % kVaeDownsample != 0) {
    throw std::invalid_argument("sample_images: need count >= 1 and size a positive multiple of 8");
  }
  if (steps < 1 || steps > schedule.steps()) throw std::invalid_argument("sample_images: steps must lie in 1..T");
  std::vector<TokenSequence> text;
  for (const std::string& p : prompts) text.push_back(tokenize(p));
  const NoisePredictor predict = [&](const Tensor& zt, int t, int, int) {
    const std::vector<int> ts(count, t);
    return predict_noise(model, zt, ts, text);
  };
  const std::size_t h = size / kVaeDownsample;
  Tensor z = sample(predict, {count, model.config.latent_channels, h, h}, steps, schedule, rng);
  for (double& v : z.data()) v /= vae.latent_scale;
  return decode(vae, z);
}

void dump_intermediates(const PipelineResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json trace = nlohmann::json::array();
  for (std::size_t i = 0; i < result.stages.size(); ++i) {
    const StageResult& st = result.stages[i];
    const std::string prefix = "stage" + std::to_string(i + 1) + "_";
    write_pgm(dir / (prefix + "upscaled.pgm"), from_tensor(batch_slice(st.upscaled, 0)));
    nlohmann::json conds = nlohmann::json::array();
    for (const ConditionMap& c : st.conditions) {
      const std::string name = prefix + "cond_" + std::string(control_kind_name(c.kind)) + ".pgm";
      write_pgm(dir / name, from_tensor(batch_slice(c.image, 0)));
      conds.push_back({{"file", name}, {"provenance", c.provenance}});
    }
    write_pgm(dir / (prefix + "output.pgm"), from_tensor(batch_slice(st.output, 0)));
    trace.push_back({{"stage", i + 1},
                     {"timesteps", st.timesteps},
                     {"control_applications", st.control_applications},
                     {"conditions", conds}});
  }
  write_file_atomic(dir / "trace.json", trace.dump(2) + "\n");
}

}  // namespace sardiff
