#include "doctest.h"
#include "helpers.hpp"
#include "zssrt/errors.hpp"
#include "zssrt/trainer.hpp"

using namespace zssrt;

namespace {

CameraPose test_pose(int res) {
  return look_at(Vec3d(2.5, -3.0, 1.6), Vec3d(0, 0, -0.3), Vec3d::UnitZ(), 0.6911, res, res);
}

template <typename Real>
TensorialField<Real> visible_field(std::uint64_t seed) {
  auto f = TensorialField<Real>::init(testutil::tiny_field_config(), seed);
  for (int m = 0; m < 3; ++m) {
    for (auto& v : f.params().density_planes[m]) v *= Real(20);
    for (auto& v : f.params().app_planes[m]) v *= Real(5);
  }
  return f;
}

PosedImage noise_image(int res, std::uint64_t seed) {
  PosedImage img;
  img.pose = test_pose(res);
  img.pixels = Image(res, res, 3);
  Rng rng(seed);
  for (auto& v : img.pixels.data) v = static_cast<float>(rng.uniform());
  return img;
}

struct TinyScene {
  std::filesystem::path dir;
  Dataset ds;
};

const TinyScene& tiny_scene() {
  static TinyScene scene = [] {
    TinyScene s;
    s.dir = testutil::temp_dir("trainer_scene");
    SyntheticSceneOptions o;
    o.n_views = 3;
    o.n_test_views = 0;
    o.res = 32;
    generate_synthetic_scene(o, s.dir);
    s.ds = load_dataset(s.dir);
    return s;
  }();
  return scene;
}

TrainConfig tiny_config() {
  TrainConfig c = TrainConfig::desk(2);
  c.n1 = 6;
  c.n2 = 6;
  c.n3 = 5;
  c.batch_rays = 64;
  c.patch_p = 4;
  c.fine_ray_budget = 64;
  c.batch_patches = 2;
  c.sdm_patch = 8;
  c.sdm_batch = 2;
  c.snapshot_every = 2;
  c.snapshot_count = 3;
  c.samples_coarse = 16;
  c.samples_fine = 16;
  c.field = testutil::tiny_field_config();
  c.field.bounds = tiny_scene().ds.bounds;
  return c;
}

template <typename Real>
std::vector<std::vector<Real>> all_params(const TensorialField<Real>& f) {
  std::vector<std::vector<Real>> out;
  f.params().for_each_group([&](const std::string&, std::span<const Real> s, bool) {
    out.emplace_back(s.begin(), s.end());
  });
  return out;
}

}  // namespace

TEST_CASE("full-scale defaults carry the published constants") {
  const TrainConfig b2 = TrainConfig::full_scale("blender", 2);
  CHECK(b2.lambda == 0.03);
  CHECK(b2.n1 == 5000);
  CHECK(b2.n2 == 25000);
  CHECK(b2.n3 == 10000);
  CHECK(b2.patch_p == 16);
  CHECK(b2.batch_patches == 32);
  CHECK(b2.lr_grid == 0.02);
  CHECK(b2.lr_decoder == 0.001);
  CHECK(b2.batch_rays == 4096);
  CHECK(b2.fine_ray_budget == 8192);
  const TrainConfig b4 = TrainConfig::full_scale("blender", 4);
  CHECK(b4.patch_p == 32);
  CHECK(b4.batch_patches == 8);
  const TrainConfig l2 = TrainConfig::full_scale("llff", 2);
  CHECK(l2.n1 == 10000);
  CHECK(l2.n2 == 20000);
  CHECK(l2.n3 == 10000);
  CHECK_THROWS_AS(TrainConfig::full_scale("dtu", 2), ConfigError);
  CHECK_THROWS_AS(TrainConfig::full_scale("blender", 3), ConfigError);
  CHECK_NOTHROW(b2.validate());
  CHECK_NOTHROW(TrainConfig::desk(2).validate());
  CHECK_NOTHROW(TrainConfig::desk(4).validate());
}

TEST_CASE("ray budget decides bundles per fine step") {
  TrainConfig c = TrainConfig::full_scale("blender", 2);
  CHECK(c.fine_bundles_per_step() == 8);  // 8192 / 32^2
  c = TrainConfig::full_scale("blender", 4);
  CHECK(c.fine_bundles_per_step() == 1);  // one 128^2 bundle exceeds the budget
}

TEST_CASE("snapshot schedule") {
  TrainConfig c = TrainConfig::full_scale("blender", 2);
  CHECK(c.snapshot_steps() == std::vector<int>{23000, 24000, 25000});
  c.snapshot_count = 1;
  CHECK(c.snapshot_steps() == std::vector<int>{25000});
  c.snapshot_count = 3;
  c.n2 = 2000;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config json round trip and overrides") {
  TrainConfig c = TrainConfig::desk(2);
  TrainConfig d = TrainConfig::full_scale("blender", 4);
  d.merge_json(c.to_json());
  CHECK(d.to_json() == c.to_json());
  CHECK(d.digest() == c.digest());

  d.merge_json(nlohmann::json{{"lambda", 0.5}, {"field", {{"grid_res", 40}}}});
  CHECK(d.lambda == 0.5);
  CHECK(d.field.grid_res == 40);
  CHECK(d.field.app_rank == c.field.app_rank);
  CHECK(d.digest() != c.digest());
  CHECK_THROWS_AS(d.merge_json(nlohmann::json{{"no_such_key", 1}}), ConfigError);

  TrainConfig bad = TrainConfig::desk(2);
  bad.lambda = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = TrainConfig::desk(2);
  bad.sdm_patch = 15;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("feature extractor shapes and determinism") {
  const auto ext = default_extractor<double>(19);
  Tensor3<double> img(32, 32, 3);
  Rng rng(3);
  for (auto& v : img.data) v = rng.uniform();
  const auto f = ext->features(img, nullptr);
  REQUIRE(f.size() == 3);
  CHECK(f[0].shape_string() == "16x16x8");
  CHECK(f[1].shape_string() == "8x8x16");
  CHECK(f[2].shape_string() == "4x4x32");
  const auto g = default_extractor<double>(19)->features(img, nullptr);
  for (int k = 0; k < 3; ++k) CHECK(f[k].data == g[k].data);
  const auto h = default_extractor<double>(20)->features(img, nullptr);
  CHECK(f[0].data != h[0].data);
  CHECK(perceptual_loss(*ext, img, img, static_cast<Tensor3<double>*>(nullptr)) == 0.0);
}

TEST_CASE("perceptual loss gradient matches central differences") {
  const auto ext = default_extractor<double>(19);
  Tensor3<double> a(12, 12, 3), b(12, 12, 3);
  Rng rng(8);
  for (auto& v : a.data) v = rng.uniform();
  for (auto& v : b.data) v = rng.uniform();
  Tensor3<double> d(12, 12, 3);
  perceptual_loss(*ext, a, b, &d);
  for (int t = 0; t < 15; ++t) {
    const std::size_t i = rng.uniform_int(a.data.size());
    const double keep = a.data[i], h = 1e-6;
    a.data[i] = keep + h;
    const double lp = perceptual_loss(*ext, a, b, static_cast<Tensor3<double>*>(nullptr));
    a.data[i] = keep - h;
    const double lm = perceptual_loss(*ext, a, b, static_cast<Tensor3<double>*>(nullptr));
    a.data[i] = keep;
    CHECK(testutil::close_rel(d.data[i], (lp - lm) / (2 * h), 1e-4, 1e-10));
  }
}

TEST_CASE("fine loss: decomposition, lambda zero and perfect fit") {
  const auto field = visible_field<double>(11);
  const auto sdm = SdmNetwork<float>::init(2, 8, 5).cast<double>();
  const auto ext = default_extractor<double>(19);
  RenderSettings rs;
  rs.samples = 16;
  const PosedImage img = noise_image(8, 1);
  const PatchBundle b = make_patch_bundle(img, 0, 2, 2, 4, 2);

  const auto with = fine_loss<double>(b, field, &sdm, *ext, 0.03, rs, nullptr, nullptr);
  CHECK(with.perc > 0);
  CHECK(std::abs(with.total - (with.mse + 0.03 * with.perc)) <= 1e-9);
  const auto none = fine_loss<double>(b, field, &sdm, *ext, 0.0, rs, nullptr, nullptr);
  CHECK(none.total == none.mse);
  CHECK(none.mse == with.mse);

  // Replace the target by the degraded render itself.
  for (const SdmNetwork<double>* net : {&sdm, static_cast<const SdmNetwork<double>*>(nullptr)}) {
    const auto r = render_rays<double>(field, b.rays, field.config().near, field.config().far, rs, nullptr);
    const auto hr = to_patch(r, b.hr_size()).rgb;
    const auto lhr = net ? sdm_forward(*net, hr) : box_downsample(hr, 2);
    PatchBundle fit = b;
    fit.gt_patch = lhr.cast<float>();
    // The target is stored in float; compare in float precision.
    const auto l = fine_loss<double>(fit, field, net, *ext, 0.03, rs, nullptr, nullptr);
    CHECK(l.mse < 1e-14);
    CHECK(l.total < 1e-12);
  }
}

TEST_CASE("fine loss gradient matches central differences") {
  auto field = visible_field<double>(12);
  const auto sdm = SdmNetwork<float>::init(2, 8, 6).cast<double>();
  const auto ext = default_extractor<double>(19);
  RenderSettings rs;
  rs.samples = 16;
  rs.weight_threshold = 0.0;
  const PosedImage img = noise_image(8, 2);
  const PatchBundle b = make_patch_bundle(img, 0, 1, 3, 4, 2);

  for (const SdmNetwork<double>* net : {&sdm, static_cast<const SdmNetwork<double>*>(nullptr)}) {
    auto grad = FieldParams<double>::zeros(field.config());
    fine_loss<double>(b, field, net, *ext, 0.03, rs, nullptr, &grad);
    auto loss = [&] { return fine_loss<double>(b, field, net, *ext, 0.03, rs, nullptr, nullptr).total; };
    std::vector<std::span<double>> ps, gs;
    field.params().for_each_group([&](const std::string&, std::span<double> s, bool) { ps.push_back(s); });
    grad.for_each_group([&](const std::string&, std::span<double> s, bool) { gs.push_back(s); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      std::size_t best = 0;
      for (std::size_t i = 0; i < gs[k].size(); ++i)
        if (std::abs(gs[k][i]) > std::abs(gs[k][best])) best = i;
      const double keep = ps[k][best], h = 1e-6;
      ps[k][best] = keep + h;
      const double lp = loss();
      ps[k][best] = keep - h;
      const double lm = loss();
      ps[k][best] = keep;
      const double num = (lp - lm) / (2 * h);
      INFO("sdm ", net != nullptr, " group ", k, " analytic ", gs[k][best], " numeric ", num);
      CHECK(testutil::close_rel(gs[k][best], num, 1e-3, 1e-9));
    }
  }
}

TEST_CASE("warm start copies the coarse field exactly") {
  const auto coarse = visible_field<float>(3);
  const auto fine = warm_start(coarse);
  CHECK(all_params(fine) == all_params(coarse));
  CHECK(fine.config() == coarse.config());
}

TEST_CASE("tiny runs are deterministic and leave the SDM untouched") {
  const auto& scene = tiny_scene();
  TrainConfig cfg = tiny_config();
  cfg.seed = 4;

  const auto c1 = train_coarse(TensorialField<float>::init(cfg.field, cfg.seed), scene.ds.images, cfg);
  const auto c2 = train_coarse(TensorialField<float>::init(cfg.field, cfg.seed), scene.ds.images, cfg);
  CHECK(all_params(c1.field) == all_params(c2.field));
  CHECK(c1.rng_digest == c2.rng_digest);
  REQUIRE(c1.losses.size() == 6);
  CHECK(c1.losses.front().stage == "coarse");

  const auto s1 = train_sdm(c1.field, scene.ds.images, cfg);
  const auto s2 = train_sdm(c1.field, scene.ds.images, cfg);
  CHECK(s1.net.head_weight == s2.net.head_weight);
  CHECK(s1.losses.size() == 5);

  const auto sdm_before = s1.net;
  const auto ext = default_extractor<float>(cfg.extractor_seed);
  int calls = 0;
  const auto f1 = train_fine(c1.field, &s1.net, scene.ds.images, cfg, *ext,
                             [&](const LossRecord&) { ++calls; });
  const auto f2 = train_fine(c1.field, &s1.net, scene.ds.images, cfg, *ext);
  CHECK(calls == 6);
  CHECK(all_params(f1.field) == all_params(f2.field));
  CHECK(all_params(f1.field) != all_params(c1.field));
  CHECK(s1.net.head_weight == sdm_before.head_weight);
  CHECK(s1.net.stages[0].weight == sdm_before.stages[0].weight);
  CHECK(s1.net.stages[0].beta == sdm_before.stages[0].beta);

  REQUIRE(f1.ensemble.size() == 3);
  CHECK(f1.ensemble.snapshots()[0].step == 2);
  CHECK(f1.ensemble.snapshots()[2].step == 6);
  CHECK(all_params(*f1.ensemble.snapshots()[2].field) == all_params(f1.field));

  TrainConfig other = cfg;
  other.seed = 5;
  const auto c3 = train_coarse(TensorialField<float>::init(cfg.field, cfg.seed), scene.ds.images, other);
  CHECK(all_params(c3.field) != all_params(c1.field));
}

TEST_CASE("box supervision needs no SDM; SDM supervision does") {
  const auto& scene = tiny_scene();
  TrainConfig cfg = tiny_config();
  const auto coarse = TensorialField<float>::init(cfg.field, 1);
  const auto ext = default_extractor<float>(cfg.extractor_seed);
  CHECK_THROWS_AS(train_fine(coarse, nullptr, scene.ds.images, cfg, *ext), ConfigError);
  cfg.supervision = Supervision::kBoxAverage;
  CHECK_NOTHROW(train_fine(coarse, nullptr, scene.ds.images, cfg, *ext));
}

TEST_CASE("non-finite loss raises a divergence error") {
  TrainConfig cfg = tiny_config();
  std::vector<PosedImage> imgs = {noise_image(16, 3)};
  for (auto& v : imgs[0].pixels.data) v = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(train_coarse(TensorialField<float>::init(cfg.field, 1), imgs, cfg), DivergenceError);
}
