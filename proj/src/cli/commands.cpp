#include <chrono>
#include <cstdio>
#include <regex>

#include "zssrt/cli.hpp"
#include "zssrt/errors.hpp"
#include "zssrt/eval.hpp"
#include "zssrt/png_io.hpp"

namespace zssrt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p))
    throw MissingDependencyError(what + " not found: " + p.string(), p.string());
}

fs::path dataset_dir(const Options& opts, const RunManifest& m) {
  fs::path dir;
  if (opts.dataset)
    dir = *opts.dataset;
  else if (!m.dataset.empty())
    dir = m.dataset;
  else
    throw MissingDependencyError("no dataset given (use --dataset or run generate first)",
                                 "transforms.json");
  require_file(dir / "transforms.json", "dataset");
  return dir;
}

StepCallback progress(const Options& opts, const std::string& stage, int total) {
  if (opts.quiet) return {};
  const int every = std::max(1, total / 20);
  return [stage, total, every](const LossRecord& r) {
    if (r.step % every == 0 || r.step == total)
      std::fprintf(stderr, "[%s] step %d/%d  loss %.6g  mse %.6g\n", stage.c_str(), r.step,
                   total, r.total, r.mse);
  };
}

void note(const Options& opts, const std::string& msg) {
  if (!opts.quiet) std::fprintf(stderr, "%s\n", msg.c_str());
}

// Shared preamble of the training commands.
struct StageContext {
  RunManifest manifest;
  TrainConfig cfg;
  fs::path data;
  Dataset ds;
};

StageContext open_stage(const Options& opts) {
  StageContext c;
  c.manifest = RunManifest::load_or_fresh(opts.run_dir);
  c.data = dataset_dir(opts, c.manifest);
  c.cfg = resolve_config(opts, opts.run_dir);
  LoadOptions lo;
  lo.background = c.cfg.background;
  c.ds = load_dataset(c.data, lo);
  c.cfg.field.bounds = c.ds.bounds;
  c.cfg.validate();
  return c;
}

void persist_config(const Options& opts, StageContext& c) {
  const json j = c.cfg.to_json();
  atomic_write(opts.run_dir / "config.json", j.dump(2) + "\n");
  c.manifest.config = j;
  c.manifest.dataset = fs::absolute(c.data).lexically_normal().string();
}

bool skip_complete(const Options& opts, const RunManifest& m, const std::string& stage,
                   const fs::path& artifact) {
  if (opts.force || !m.stage(stage).complete || !fs::exists(artifact)) return false;
  note(opts, stage + " stage already complete in " + opts.run_dir.string() + " (use --force to rerun)");
  return true;
}

void finish_stage(const Options& opts, RunManifest& m, const std::string& stage, double seconds,
                  std::vector<std::string> artifacts) {
  m.invalidate_from(stage);
  auto& s = m.stage(stage);
  s.complete = true;
  s.seconds = seconds;
  s.artifacts = std::move(artifacts);
  m.save(opts.run_dir);
}

RenderSettings settings_for(const TrainConfig& cfg) {
  RenderSettings rs;
  rs.samples = cfg.samples_fine;
  rs.background = cfg.background;
  rs.weight_threshold = cfg.weight_threshold;
  return rs;
}

std::vector<fs::path> snapshot_files(const fs::path& run_dir) {
  std::vector<std::pair<int, fs::path>> found;
  const fs::path dir = run_dir / "ensemble";
  if (fs::exists(dir)) {
    const std::regex pat("snap_([0-9]+)\\.ckpt");
    for (const auto& e : fs::directory_iterator(dir)) {
      std::smatch mt;
      const std::string name = e.path().filename().string();
      if (std::regex_match(name, mt, pat)) found.emplace_back(std::stoi(mt[1]), e.path());
    }
  }
  std::sort(found.begin(), found.end());
  std::vector<fs::path> out;
  for (auto& f : found) out.push_back(f.second);
  return out;
}

// The field that render/evaluate operate on, kept alive with its snapshots.
struct LoadedField {
  std::unique_ptr<TensorialField<float>> single;
  std::unique_ptr<EnsembleField<float>> ensemble;
  std::string label;
  const RadianceField<float>& get() const {
    if (ensemble) return *ensemble;
    return *single;
  }
};

LoadedField load_field(const Options& opts) {
  LoadedField lf;
  if (opts.field == FieldChoice::kCoarse) {
    require_file(opts.run_dir / "coarse.ckpt", "coarse checkpoint");
    lf.single = std::make_unique<TensorialField<float>>(
        field_from_checkpoint(Checkpoint::load(opts.run_dir / "coarse.ckpt")));
    lf.label = "coarse";
    return lf;
  }
  if (opts.ensemble) {
    const auto files = snapshot_files(opts.run_dir);
    if (files.empty())
      throw MissingDependencyError("no ensemble snapshots in " + (opts.run_dir / "ensemble").string(),
                                   (opts.run_dir / "ensemble" / "snap_0.ckpt").string());
    std::vector<FieldSnapshot<float>> snaps;
    for (const auto& f : files) {
      const Checkpoint ck = Checkpoint::load(f);
      snaps.push_back(snapshot(field_from_checkpoint(ck), ck.meta.value("step", 0)));
    }
    lf.ensemble = std::make_unique<EnsembleField<float>>(std::move(snaps));
    lf.label = "fine_ensemble";
    return lf;
  }
  require_file(opts.run_dir / "fine.ckpt", "fine checkpoint");
  lf.single = std::make_unique<TensorialField<float>>(
      field_from_checkpoint(Checkpoint::load(opts.run_dir / "fine.ckpt")));
  lf.label = "fine";
  return lf;
}

Dataset eval_poses(const fs::path& data, const TrainConfig& cfg, int reference_scale) {
  LoadOptions lo;
  lo.background = cfg.background;
  lo.reference_scale = reference_scale;
  lo.split = fs::exists(data / "transforms_test.json") ? "test" : "train";
  return load_dataset(data, lo);
}

}  // namespace

int cmd_generate(const Options& opts) {
  RunLock lock(opts.run_dir);
  RunManifest m = RunManifest::load_or_fresh(opts.run_dir);
  const fs::path dir = opts.dataset ? *opts.dataset : opts.run_dir / "scene";
  const auto t0 = Clock::now();
  if (!opts.force && m.stage("scene").complete && fs::exists(dir / "transforms.json")) {
    note(opts, "scene already generated at " + dir.string() + " (use --force to regenerate)");
    return kExitOk;
  }
  SyntheticSceneOptions so;
  so.seed = opts.scene_seed;
  so.n_views = opts.views;
  so.n_test_views = opts.test_views;
  so.res = opts.res;
  generate_synthetic_scene(so, dir);
  m.dataset = fs::absolute(dir).lexically_normal().string();
  finish_stage(opts, m, "scene", seconds_since(t0), {m.dataset});
  note(opts, "wrote scene to " + dir.string());
  return kExitOk;
}

int cmd_train_coarse(const Options& opts) {
  RunLock lock(opts.run_dir);
  StageContext c = open_stage(opts);
  const fs::path out = opts.run_dir / "coarse.ckpt";
  if (skip_complete(opts, c.manifest, "coarse", out)) return kExitOk;
  persist_config(opts, c);
  const auto t0 = Clock::now();
  auto field = TensorialField<float>::init(c.cfg.field, c.cfg.seed);
  CoarseResult res = train_coarse(std::move(field), c.ds.images, c.cfg,
                                  progress(opts, "coarse", c.cfg.n1));
  atomic_save(out, field_to_checkpoint(res.field, c.cfg.n1,
                                       {{"stage", "coarse"},
                                        {"config_digest", c.cfg.digest()},
                                        {"rng_digest", hex64(res.rng_digest)}}));
  write_losses(opts.run_dir, "coarse", res.losses);
  finish_stage(opts, c.manifest, "coarse", seconds_since(t0), {"coarse.ckpt"});
  return kExitOk;
}

int cmd_train_sdm(const Options& opts) {
  RunLock lock(opts.run_dir);
  StageContext c = open_stage(opts);
  require_file(opts.run_dir / "coarse.ckpt", "coarse checkpoint");
  const fs::path out = opts.run_dir / "sdm.ckpt";
  if (skip_complete(opts, c.manifest, "sdm", out)) return kExitOk;
  persist_config(opts, c);
  const auto t0 = Clock::now();
  const auto coarse = field_from_checkpoint(Checkpoint::load(opts.run_dir / "coarse.ckpt"));
  SdmResult res = train_sdm(coarse, c.ds.images, c.cfg, progress(opts, "sdm", c.cfg.n3));
  atomic_save(out, sdm_to_checkpoint(res.net, {{"stage", "sdm"},
                                               {"step", c.cfg.n3},
                                               {"config_digest", c.cfg.digest()},
                                               {"rng_digest", hex64(res.rng_digest)}}));
  write_losses(opts.run_dir, "sdm", res.losses);
  finish_stage(opts, c.manifest, "sdm", seconds_since(t0), {"sdm.ckpt"});
  return kExitOk;
}

int cmd_train_fine(const Options& opts) {
  RunLock lock(opts.run_dir);
  StageContext c = open_stage(opts);
  require_file(opts.run_dir / "coarse.ckpt", "coarse checkpoint");
  const bool use_sdm = c.cfg.supervision == Supervision::kSdm;
  if (use_sdm) require_file(opts.run_dir / "sdm.ckpt", "SDM checkpoint");
  const fs::path out = opts.run_dir / "fine.ckpt";
  if (skip_complete(opts, c.manifest, "fine", out)) return kExitOk;
  persist_config(opts, c);
  const auto t0 = Clock::now();
  const auto coarse = field_from_checkpoint(Checkpoint::load(opts.run_dir / "coarse.ckpt"));
  std::optional<SdmNetwork<float>> sdm;
  if (use_sdm) sdm = sdm_from_checkpoint(Checkpoint::load(opts.run_dir / "sdm.ckpt"));
  const auto ext = default_extractor<float>(c.cfg.extractor_seed);
  FineResult res = train_fine(coarse, sdm ? &*sdm : nullptr, c.ds.images, c.cfg, *ext,
                              progress(opts, "fine", c.cfg.n2));

  const json meta = {{"stage", "fine"},
                     {"config_digest", c.cfg.digest()},
                     {"rng_digest", hex64(res.rng_digest)}};
  atomic_save(out, field_to_checkpoint(res.field, c.cfg.n2, meta));
  const fs::path ens_dir = opts.run_dir / "ensemble";
  for (const auto& old : snapshot_files(opts.run_dir)) fs::remove(old);
  fs::create_directories(ens_dir);
  std::vector<std::string> artifacts = {"fine.ckpt"};
  const auto& snaps = res.ensemble.snapshots();
  for (std::size_t k = 0; k < snaps.size(); ++k) {
    const std::string name = "snap_" + std::to_string(k) + ".ckpt";
    json sm = meta;
    sm["snapshot_index"] = k;
    atomic_save(ens_dir / name, field_to_checkpoint(*snaps[k].field, snaps[k].step, sm));
    artifacts.push_back("ensemble/" + name);
  }
  write_losses(opts.run_dir, "fine", res.losses);
  finish_stage(opts, c.manifest, "fine", seconds_since(t0), artifacts);
  return kExitOk;
}

int cmd_render(const Options& opts) {
  RunLock lock(opts.run_dir);
  RunManifest m = RunManifest::load_or_fresh(opts.run_dir);
  const fs::path data = dataset_dir(opts, m);
  const TrainConfig cfg = resolve_config(opts, opts.run_dir);
  const LoadedField lf = load_field(opts);
  const Dataset views = eval_poses(data, cfg, 1);
  const RenderSettings rs = settings_for(cfg);
  const fs::path out_dir = opts.run_dir / "renders" / lf.label;
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < views.images.size(); ++i) {
    const auto r = render_image(lf.get(), views.images[i].pose, cfg.scale, cfg.field.near, cfg.field.far, rs);
    char stem[32];
    std::snprintf(stem, sizeof stem, "view_%03zu", i);
    write_png(out_dir / (std::string(stem) + ".png"), r.image.pixels);
    write_float_map(out_dir / (std::string(stem) + "_depth"), r.depth);
  }
  note(opts, "wrote " + std::to_string(views.images.size()) + " renders to " + out_dir.string());
  return kExitOk;
}

int cmd_evaluate(const Options& opts) {
  RunLock lock(opts.run_dir);
  RunManifest m = RunManifest::load_or_fresh(opts.run_dir);
  const fs::path data = dataset_dir(opts, m);
  const TrainConfig cfg = resolve_config(opts, opts.run_dir);
  const std::string ref_dir = "ref_x" + std::to_string(cfg.scale);
  require_file(data / ref_dir, "reference images");
  const LoadedField lf = load_field(opts);
  const auto t0 = Clock::now();
  const Dataset refs = eval_poses(data, cfg, cfg.scale);
  const RenderSettings rs = settings_for(cfg);
  std::vector<ViewMetric> metrics;
  for (std::size_t i = 0; i < refs.images.size(); ++i) {
    const auto r = render_image(lf.get(), refs.images[i].pose, 1, cfg.field.near, cfg.field.far, rs);
    ViewMetric vm;
    vm.view_id = static_cast<int>(i);
    vm.psnr_db = psnr(r.image.pixels, refs.images[i].pixels);
    vm.ssim = ssim(r.image.pixels, refs.images[i].pixels);
    metrics.push_back(vm);
  }
  const MetricReport report = make_report(std::move(metrics), seconds_since(t0), cfg.digest());
  const bool primary = opts.field == FieldChoice::kFine && opts.ensemble;
  const fs::path out_dir = primary ? opts.run_dir : opts.run_dir / ("eval_" + lf.label);
  const auto losses = read_losses(opts.run_dir);
  emit_report(report, &losses, out_dir);
  if (!opts.quiet)
    std::fprintf(stderr, "[eval %s] mean PSNR %.3f dB  mean SSIM %.4f over %zu views\n",
                 lf.label.c_str(), report.mean_psnr, report.mean_ssim, report.views.size());
  if (primary) finish_stage(opts, m, "eval", report.runtime_seconds, {"metrics.csv", "summary.json", "summary.png"});
  return kExitOk;
}

int cmd_pipeline(const Options& opts) {
  Options o = opts;
  if (!o.dataset) {
    const RunManifest m = RunManifest::load_or_fresh(o.run_dir);
    if (m.dataset.empty() || !fs::exists(fs::path(m.dataset) / "transforms.json")) {
      if (int rc = cmd_generate(o)) return rc;
    }
  }
  const TrainConfig cfg = [&] {
    RunLock lock(o.run_dir);
    return resolve_config(o, o.run_dir);
  }();
  if (int rc = cmd_train_coarse(o)) return rc;
  if (cfg.supervision == Supervision::kSdm)
    if (int rc = cmd_train_sdm(o)) return rc;
  if (int rc = cmd_train_fine(o)) return rc;
  if (int rc = cmd_render(o)) return rc;
  return cmd_evaluate(o);
}

}  // namespace zssrt::cli
