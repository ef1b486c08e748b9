#include "zssrt/trainer.hpp"

#include <cmath>
#include <set>

#include "zssrt/adam.hpp"
#include "zssrt/errors.hpp"
#include "zssrt/rng.hpp"

namespace zssrt {

// ---------------------------------------------------------------------------
// TrainConfig

TrainConfig TrainConfig::full_scale(const std::string& dataset, int scale) {
  if (dataset != "blender" && dataset != "llff")
    throw ConfigError("unknown dataset profile '" + dataset + "' (expected blender or llff)");
  if (scale != 2 && scale != 4) throw ConfigError("full-scale profile needs scale 2 or 4");
  TrainConfig c;
  c.profile = dataset;
  c.scale = scale;
  c.n1 = dataset == "blender" ? 5000 : 10000;
  c.n2 = dataset == "blender" ? 25000 : 20000;
  c.n3 = 10000;
  c.lambda = 0.03;
  c.batch_rays = 4096;
  c.fine_ray_budget = 8192;
  c.patch_p = scale == 2 ? 16 : 32;
  c.batch_patches = scale == 2 ? 32 : 8;
  c.sdm_patch = c.patch_p;
  c.sdm_batch = c.batch_patches;
  if (dataset == "llff") c.background = Vec3d::Zero();
  return c;
}

TrainConfig TrainConfig::desk(int scale) {
  if (scale != 2 && scale != 4) throw ConfigError("desk profile needs scale 2 or 4");
  TrainConfig c;
  c.profile = "desk";
  c.scale = scale;
  c.n1 = 2000;
  c.n2 = 4000;
  c.n3 = 2000;
  c.batch_rays = 1024;
  c.patch_p = scale == 2 ? 8 : 4;
  c.fine_ray_budget = 1024;
  c.batch_patches = 4;
  c.sdm_patch = scale == 2 ? 16 : 32;
  c.sdm_batch = 8;
  c.samples_coarse = 128;
  c.samples_fine = 128;
  c.field.grid_res = 96;
  c.field.hidden = 64;
  return c;
}

TrainConfig TrainConfig::from_profile(const std::string& profile, int scale) {
  if (profile == "desk") return desk(scale);
  return full_scale(profile, scale);
}

int TrainConfig::fine_bundles_per_step() const {
  const double rays = double(scale * patch_p) * double(scale * patch_p);
  const long n = std::lround(fine_ray_budget / rays);
  return static_cast<int>(std::clamp<long>(n, 1, batch_patches));
}

std::vector<int> TrainConfig::snapshot_steps() const {
  std::vector<int> steps;
  for (int k = 0; k < snapshot_count; ++k) steps.push_back(n2 - (snapshot_count - 1 - k) * snapshot_every);
  return steps;
}

void TrainConfig::validate() const {
  if (scale != 1 && scale != 2 && scale != 4) throw ConfigError("scale must be 1, 2 or 4");
  if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
  if (n1 < 1 || n2 < 1 || n3 < 1) throw ConfigError("stage step counts must be >= 1");
  if (batch_rays < 1 || batch_patches < 1 || fine_ray_budget < 1 || sdm_batch < 1)
    throw ConfigError("batch sizes must be >= 1");
  if (patch_p < 1) throw ConfigError("patch_p must be >= 1");
  if (sdm_patch < 1 || sdm_patch % scale != 0 || sdm_patch / scale < 1)
    throw ConfigError("sdm_patch must be a positive multiple of scale");
  if (sdm_patch < 3) throw ConfigError("sdm_patch must be at least 3 pixels");
  if (sdm_width < 1) throw ConfigError("sdm_width must be >= 1");
  if (snapshot_count < 1 || snapshot_every < 1)
    throw ConfigError("snapshot_count and snapshot_every must be >= 1");
  if ((snapshot_count - 1) * snapshot_every >= n2)
    throw ConfigError("snapshot schedule starts before the fine stage (need (count-1)*every < N2)");
  if (samples_coarse < 2 || samples_fine < 2) throw ConfigError("need at least 2 samples per ray");
  if (!(lr_grid > 0 && lr_decoder > 0 && lr_sdm > 0)) throw ConfigError("learning rates must be > 0");
  if (!(lr_decay_final > 0 && lr_decay_final <= 1)) throw ConfigError("lr_decay_final must be in (0, 1]");
  if (!(weight_threshold >= 0)) throw ConfigError("weight_threshold must be >= 0");
  field.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"profile", profile},
          {"scale", scale},
          {"n1", n1},
          {"n2", n2},
          {"n3", n3},
          {"lambda", lambda},
          {"lr_grid", lr_grid},
          {"lr_decoder", lr_decoder},
          {"lr_sdm", lr_sdm},
          {"lr_decay_final", lr_decay_final},
          {"batch_rays", batch_rays},
          {"patch_p", patch_p},
          {"batch_patches", batch_patches},
          {"fine_ray_budget", fine_ray_budget},
          {"sdm_patch", sdm_patch},
          {"sdm_batch", sdm_batch},
          {"sdm_width", sdm_width},
          {"snapshot_every", snapshot_every},
          {"snapshot_count", snapshot_count},
          {"samples_coarse", samples_coarse},
          {"samples_fine", samples_fine},
          {"weight_threshold", weight_threshold},
          {"mask", {{"tau", mask.tau}, {"keep_bg", mask.keep_bg}, {"draw_factor", mask.draw_factor}}},
          {"background", {background.x(), background.y(), background.z()}},
          {"supervision", supervision == Supervision::kSdm ? "sdm" : "box"},
          {"extractor_seed", extractor_seed},
          {"seed", seed},
          {"field", field.to_json()}};
}

namespace {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

}  // namespace

void TrainConfig::merge_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> known = {
      "profile", "scale", "n1", "n2", "n3", "lambda", "lr_grid", "lr_decoder", "lr_sdm",
      "lr_decay_final", "batch_rays", "patch_p", "batch_patches", "fine_ray_budget", "sdm_patch",
      "sdm_batch", "sdm_width", "snapshot_every", "snapshot_count", "samples_coarse",
      "samples_fine", "weight_threshold", "mask", "background", "supervision", "extractor_seed",
      "seed", "field"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("unknown config field '" + it.key() + "'");
  take(j, "profile", profile);
  take(j, "scale", scale);
  take(j, "n1", n1);
  take(j, "n2", n2);
  take(j, "n3", n3);
  take(j, "lambda", lambda);
  take(j, "lr_grid", lr_grid);
  take(j, "lr_decoder", lr_decoder);
  take(j, "lr_sdm", lr_sdm);
  take(j, "lr_decay_final", lr_decay_final);
  take(j, "batch_rays", batch_rays);
  take(j, "patch_p", patch_p);
  take(j, "batch_patches", batch_patches);
  take(j, "fine_ray_budget", fine_ray_budget);
  take(j, "sdm_patch", sdm_patch);
  take(j, "sdm_batch", sdm_batch);
  take(j, "sdm_width", sdm_width);
  take(j, "snapshot_every", snapshot_every);
  take(j, "snapshot_count", snapshot_count);
  take(j, "samples_coarse", samples_coarse);
  take(j, "samples_fine", samples_fine);
  take(j, "weight_threshold", weight_threshold);
  take(j, "extractor_seed", extractor_seed);
  take(j, "seed", seed);
  if (j.contains("mask")) {
    const auto& m = j["mask"];
    take(m, "tau", mask.tau);
    take(m, "keep_bg", mask.keep_bg);
    take(m, "draw_factor", mask.draw_factor);
  }
  if (j.contains("background")) {
    const auto& b = j["background"];
    if (!b.is_array() || b.size() != 3) throw ConfigError("background must be [r, g, b]");
    for (int c = 0; c < 3; ++c) background[c] = b[c].get<double>();
  }
  if (j.contains("supervision")) {
    const std::string s = j["supervision"].get<std::string>();
    if (s == "sdm") supervision = Supervision::kSdm;
    else if (s == "box") supervision = Supervision::kBoxAverage;
    else throw ConfigError("supervision must be 'sdm' or 'box'");
  }
  if (j.contains("field")) {
    nlohmann::json merged = field.to_json();
    merged.merge_patch(j["field"]);
    field = FieldConfig::from_json(merged);
  }
}

std::string TrainConfig::digest() const { return hex64(fnv1a(to_json().dump())); }

// ---------------------------------------------------------------------------
// Shared helpers

namespace {

enum StreamTag : std::uint64_t { kCoarseStream = 1, kSdmStream = 2, kFineStream = 3 };

Rng stage_rng(std::uint64_t seed, StreamTag tag) {
  return Rng(splitmix64(splitmix64(seed) ^ (0x9e3779b97f4a7c15ULL * tag)));
}

// Learning-rate multiplier decaying exponentially to `final` at the last step.
double decay(const TrainConfig& cfg, int step, int total) {
  return std::pow(cfg.lr_decay_final, double(step) / double(std::max(total, 1)));
}

void add_field_groups(Adam<float>& opt, FieldParams<float>& p, const TrainConfig& cfg) {
  p.for_each_group([&](const std::string& name, std::span<float> s, bool is_grid) {
    opt.add_group(name, s, is_grid ? cfg.lr_grid : cfg.lr_decoder);
  });
}

void guard(const char* stage, int step, double loss) {
  if (!std::isfinite(loss))
    throw DivergenceError(std::string(stage) + " stage diverged at step " + std::to_string(step) +
                          ": loss = " + std::to_string(loss));
}

RenderSettings settings_for(const TrainConfig& cfg, int samples) {
  RenderSettings rs;
  rs.samples = samples;
  rs.background = cfg.background;
  rs.weight_threshold = cfg.weight_threshold;
  return rs;
}

}  // namespace

TensorialField<float> warm_start(const TensorialField<float>& coarse) { return coarse; }

// ---------------------------------------------------------------------------
// Stage 1: coarse field

CoarseResult train_coarse(TensorialField<float> field, const std::vector<PosedImage>& images,
                          const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (images.empty()) throw ConfigError("train_coarse: no training images");
  Rng rng = stage_rng(cfg.seed, kCoarseStream);
  Adam<float> opt;
  add_field_groups(opt, field.params(), cfg);
  auto grad = FieldParams<float>::zeros(field.config());
  const RenderSettings rs = settings_for(cfg, cfg.samples_coarse);

  CoarseResult out{field, {}, 0};
  std::vector<Ray> rays(cfg.batch_rays);
  std::vector<float> target(3 * std::size_t(cfg.batch_rays));
  RenderTape<float> tape;
  for (int step = 1; step <= cfg.n1; ++step) {
    for (int r = 0; r < cfg.batch_rays; ++r) {
      const auto& img = images[rng.uniform_int(images.size())];
      const int u = static_cast<int>(rng.uniform_int(img.pixels.width));
      const int v = static_cast<int>(rng.uniform_int(img.pixels.height));
      rays[r] = ray_through(img.pose, u + 0.5, v + 0.5);
      for (int c = 0; c < 3; ++c) target[3 * r + c] = img.pixels.at(v, u, c);
    }
    const auto res = render_rays(field, std::span<const Ray>(rays), rs, &rng, tape);
    double loss = 0;
    std::vector<float> d_rgb(res.rgb.size());
    const float scale = 2.0f / float(res.rgb.size());
    for (std::size_t i = 0; i < res.rgb.size(); ++i) {
      const float diff = res.rgb[i] - target[i];
      loss += double(diff) * diff;
      d_rgb[i] = scale * diff;
    }
    loss /= double(res.rgb.size());
    guard("coarse", step, loss);
    grad.set_zero();
    render_backward(field, tape, std::span<const float>(d_rgb), grad);
    opt.step(group_spans(grad), decay(cfg, step - 1, cfg.n1));
    LossRecord rec{"coarse", step, loss, loss, 0.0};
    out.losses.push_back(rec);
    if (on_step) on_step(rec);
  }
  out.field = std::move(field);
  out.rng_digest = rng.digest();
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2: scene-specific degradation mapping

SdmResult train_sdm(const TensorialField<float>& coarse, const std::vector<PosedImage>& images,
                    const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  const int s = cfg.scale;
  if (s != 2 && s != 4) throw ConfigError("train_sdm: scale must be 2 or 4");
  if (images.empty()) throw ConfigError("train_sdm: no training images");
  const int p = cfg.sdm_patch, q = p / s;

  // Inputs are coarse renders of the training views; targets are the box
  // downsampled ground truth.
  const RenderSettings rs = settings_for(cfg, cfg.samples_coarse);
  const FieldConfig& fc = coarse.config();
  std::vector<Image> renders, targets;
  for (const auto& img : images) {
    if (img.pixels.width < p || img.pixels.height < p)
      throw ShapeError("train_sdm: sdm_patch larger than the training images");
    renders.push_back(render_image(coarse, img.pose, 1, fc.near, fc.far, rs).image.pixels);
    targets.push_back(downsample_gt(img, s).pixels);
  }

  Rng rng = stage_rng(cfg.seed, kSdmStream);
  SdmResult out{SdmNetwork<float>::init(s, cfg.sdm_width, cfg.seed), {}, 0};
  SdmNetwork<float>& net = out.net;
  Adam<float> opt;
  net.for_each_group([&](const std::string& name, std::span<float> sp) { opt.add_group(name, sp, cfg.lr_sdm); });
  SdmNetwork<float> grad = SdmNetwork<float>::zeros(s, cfg.sdm_width);
  SdmTape<float> tape;
  for (int step = 1; step <= cfg.n3; ++step) {
    grad.set_zero();
    double loss = 0;
    for (int b = 0; b < cfg.sdm_batch; ++b) {
      const std::size_t idx = rng.uniform_int(images.size());
      const int a = static_cast<int>(rng.uniform_int(targets[idx].width - q + 1));
      const int c = static_cast<int>(rng.uniform_int(targets[idx].height - q + 1));
      const Image in = renders[idx].crop(c * s, a * s, p, p);
      const Image tgt = targets[idx].crop(c, a, q, q);
      const Image pred = sdm_forward(net, in, &tape);
      Image d(q, q, 3);
      const float k = 2.0f / float(pred.size() * cfg.sdm_batch);
      double l = 0;
      for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const float diff = pred.data[i] - tgt.data[i];
        l += double(diff) * diff;
        d.data[i] = k * diff;
      }
      loss += l / double(pred.size());
      sdm_backward<float>(net, tape, d, nullptr, &grad);
    }
    loss /= cfg.sdm_batch;
    guard("sdm", step, loss);
    std::vector<std::span<const float>> gs;
    grad.for_each_group([&](const std::string&, std::span<const float> sp) { gs.push_back(sp); });
    opt.step(gs, decay(cfg, step - 1, cfg.n3));
    LossRecord rec{"sdm", step, loss, loss, 0.0};
    out.losses.push_back(rec);
    if (on_step) on_step(rec);
  }
  out.rng_digest = rng.digest();
  return out;
}

// ---------------------------------------------------------------------------
// Stage 3: super-resolution training

template <typename Real>
FineLossResult<Real> fine_loss(const PatchBundle& bundle, const TensorialField<Real>& field,
                               const SdmNetwork<Real>* sdm, const FeatureExtractor<Real>& ext,
                               double lambda, const RenderSettings& settings, Rng* rng,
                               FieldParams<Real>* grad) {
  const int s = bundle.scale, q = bundle.hr_size();
  if (sdm && sdm->scale != s)
    throw ShapeError("fine_loss: SDM scale " + std::to_string(sdm->scale) +
                     " does not match bundle scale " + std::to_string(s));
  thread_local RenderTape<Real> tape;
  const auto res = render_rays(field, std::span<const Ray>(bundle.rays), settings, rng, tape);
  Tensor3<Real> hr = to_patch(res, q).rgb;

  thread_local SdmTape<Real> sdm_tape;
  const Tensor3<Real> lhr = sdm ? sdm_forward(*sdm, hr, &sdm_tape) : box_downsample(hr, s);
  const Tensor3<Real> gt = bundle.gt_patch.template cast<Real>();
  if (!lhr.same_shape(gt))
    throw ShapeError("fine_loss: degraded render " + lhr.shape_string() +
                     " does not match ground-truth patch " + gt.shape_string());

  FineLossResult<Real> out;
  Tensor3<Real> d_lhr(lhr.height, lhr.width, 3);
  const Real inv_n = Real(1) / Real(lhr.size());
  for (std::size_t i = 0; i < lhr.data.size(); ++i) {
    const Real diff = lhr.data[i] - gt.data[i];
    out.mse += diff * diff;
    d_lhr.data[i] = Real(2) * diff * inv_n;
  }
  out.mse *= inv_n;
  Tensor3<Real> d_perc(lhr.height, lhr.width, 3);
  out.perc = perceptual_loss(ext, lhr, gt, (grad && lambda > 0) ? &d_perc : nullptr);
  out.total = out.mse + Real(lambda) * out.perc;
  if (!grad) return out;

  if (lambda > 0)
    for (std::size_t i = 0; i < d_lhr.data.size(); ++i) d_lhr.data[i] += Real(lambda) * d_perc.data[i];
  Tensor3<Real> d_hr(q, q, 3);
  if (sdm) sdm_backward<Real>(*sdm, sdm_tape, d_lhr, &d_hr, nullptr);
  else box_downsample_backward(d_lhr, s, d_hr);
  render_backward(field, tape, std::span<const Real>(d_hr.data), *grad);
  return out;
}

FineResult train_fine(const TensorialField<float>& coarse, const SdmNetwork<float>* sdm,
                      const std::vector<PosedImage>& images, const TrainConfig& cfg,
                      const FeatureExtractor<float>& ext, const StepCallback& on_step) {
  cfg.validate();
  if (cfg.scale < 2) throw ConfigError("train_fine: scale must be 2 or 4");
  if (images.empty()) throw ConfigError("train_fine: no training images");
  if (cfg.supervision == Supervision::kSdm && !sdm)
    throw ConfigError("train_fine: SDM supervision requested without an SDM");
  const SdmNetwork<float>* sup = cfg.supervision == Supervision::kSdm ? sdm : nullptr;

  TensorialField<float> field = warm_start(coarse);
  const FieldConfig& fc = field.config();
  // Patch masks come from the coarse field's accumulated opacity.
  const auto opacity = opacity_maps(coarse, images, fc.near, fc.far, settings_for(cfg, cfg.samples_coarse));

  Rng rng = stage_rng(cfg.seed, kFineStream);
  Adam<float> opt;
  add_field_groups(opt, field.params(), cfg);
  auto grad = FieldParams<float>::zeros(fc);
  const RenderSettings rs = settings_for(cfg, cfg.samples_fine);
  const int n_bundles = cfg.fine_bundles_per_step();
  const std::vector<int> snap_steps = cfg.snapshot_steps();
  std::vector<FieldSnapshot<float>> snaps;
  std::vector<LossRecord> losses;

  for (int step = 1; step <= cfg.n2; ++step) {
    const PatchSample batch =
        sample_patch_bundles(images, &opacity, cfg.patch_p, cfg.scale, n_bundles, rng, cfg.mask);
    grad.set_zero();
    LossRecord rec{"fine", step, 0, 0, 0};
    for (const auto& b : batch.bundles) {
      const auto l = fine_loss<float>(b, field, sup, ext, cfg.lambda, rs, &rng, &grad);
      rec.total += l.total;
      rec.mse += l.mse;
      rec.perc += l.perc;
    }
    const std::size_t nb = batch.bundles.size();
    if (nb > 0) {
      rec.total /= double(nb);
      rec.mse /= double(nb);
      rec.perc /= double(nb);
      guard("fine", step, rec.total);
      const float inv = 1.0f / float(nb);
      grad.for_each_group([&](const std::string&, std::span<float> sp, bool) {
        for (auto& v : sp) v *= inv;
      });
      opt.step(group_spans(grad), decay(cfg, step - 1, cfg.n2));
    }
    losses.push_back(rec);
    if (on_step) on_step(rec);
    if (std::find(snap_steps.begin(), snap_steps.end(), step) != snap_steps.end())
      snaps.push_back(snapshot(field, step));
  }
  FineResult out{field, EnsembleField<float>(std::move(snaps)), std::move(losses), rng.digest()};
  return out;
}

template FineLossResult<float> fine_loss<float>(const PatchBundle&, const TensorialField<float>&,
                                                const SdmNetwork<float>*,
                                                const FeatureExtractor<float>&, double,
                                                const RenderSettings&, Rng*, FieldParams<float>*);
template FineLossResult<double> fine_loss<double>(const PatchBundle&,
                                                  const TensorialField<double>&,
                                                  const SdmNetwork<double>*,
                                                  const FeatureExtractor<double>&, double,
                                                  const RenderSettings&, Rng*,
                                                  FieldParams<double>*);

}  // namespace zssrt
