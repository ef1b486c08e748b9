#include "doctest.h"
#include "helpers.hpp"
#include "zssrt/errors.hpp"
#include "zssrt/renderer.hpp"

using namespace zssrt;

namespace {

class ZeroField : public RadianceField<double> {
 public:
  const Aabb& bounds() const override { return box_; }
  void density(std::span<const Vec3>, std::span<double> s) const override {
    std::fill(s.begin(), s.end(), 0.0);
  }
  void color(std::span<const Vec3>, std::span<const Vec3>, std::span<double> c) const override {
    std::fill(c.begin(), c.end(), 0.3);
  }

 private:
  Aabb box_;
};

// Step-by-step compositing written independently of the library: explicit
// transmittance products rather than a running accumulator.
std::array<double, 4> composite_oracle(const std::vector<double>& sig,
                                       const std::vector<std::array<double, 3>>& col,
                                       const std::vector<double>& del, const double bg[3]) {
  std::array<double, 4> out{0, 0, 0, 0};
  for (std::size_t i = 0; i < sig.size(); ++i) {
    double tau = 1;
    for (std::size_t j = 0; j < i; ++j) tau *= std::exp(-sig[j] * del[j]);
    const double w = tau * (1 - std::exp(-sig[i] * del[i]));
    for (int c = 0; c < 3; ++c) out[c] += w * col[i][c];
    out[3] += w;
  }
  for (int c = 0; c < 3; ++c) out[c] += (1 - out[3]) * bg[c];
  return out;
}

CameraPose test_pose(int res) {
  return look_at(Vec3d(2.5, -3.0, 1.6), Vec3d(0, 0, -0.3), Vec3d::UnitZ(), 0.6911, res, res);
}

}  // namespace

TEST_CASE("stratified sampling") {
  Ray r;
  r.origin = Vec3d::Zero();
  r.direction = Vec3d::UnitX();
  Aabb big;
  big.min = Vec3d::Constant(-10);
  big.max = Vec3d::Constant(10);
  const auto p = stratified_samples(r, 0.0, 1.0, 4, nullptr, big);
  const double expect[4] = {0.125, 0.375, 0.625, 0.875};
  for (int i = 0; i < 4; ++i) {
    CHECK(p.depths[i] == doctest::Approx(expect[i]));
    CHECK(p.deltas[i] == doctest::Approx(0.25));
    CHECK(p.valid[i]);
  }
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto q = stratified_samples(r, 0.5, 2.5, 8, &rng, big);
    for (int i = 0; i < 8; ++i) {
      CHECK(q.depths[i] >= 0.5 + i * 0.25);
      CHECK(q.depths[i] <= 0.5 + (i + 1) * 0.25);
      CHECK(q.deltas[i] > 0);
    }
  }
  CHECK_THROWS_AS(stratified_samples(r, 0.0, 1.0, 1, nullptr, big), ConfigError);
  CHECK_THROWS_AS(stratified_samples(r, 1.0, 1.0, 4, nullptr, big), ConfigError);
  Aabb unit;
  unit.min = Vec3d::Constant(-0.5);
  unit.max = Vec3d::Constant(0.5);
  const auto v = stratified_samples(r, 0.0, 1.0, 4, nullptr, unit);
  CHECK(v.valid[0]);
  CHECK_FALSE(v.valid[3]);
}

TEST_CASE("compositing examples") {
  const double black[3] = {0, 0, 0}, white[3] = {1, 1, 1};
  {
    std::vector<double> s{0, 0, 0}, c{0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.1, 0.1, 0.1}, d{1, 1, 1};
    const auto r = composite<double>(s, c, d, {}, white);
    CHECK(r.opacity == 0.0);
    for (int k = 0; k < 3; ++k) CHECK(r.rgb[k] == 1.0);
  }
  {
    std::vector<double> s{1.0, 2.0}, c{1, 0, 0, 0, 1, 0}, d{0.5, 0.5};
    const auto r = composite<double>(s, c, d, {}, black);
    const auto o = composite_oracle(s, {{1, 0, 0}, {0, 1, 0}}, d, black);
    const double closed[3] = {1 - std::exp(-0.5), std::exp(-0.5) * (1 - std::exp(-1.0)), 0};
    for (int k = 0; k < 3; ++k) {
      CHECK(std::abs(r.rgb[k] - o[k]) <= 1e-12);
      CHECK(std::abs(r.rgb[k] - closed[k]) <= 1e-12);
    }
    CHECK(std::abs(r.rgb[0] - 0.3934693402873666) <= 1e-12);
    CHECK(std::abs(r.rgb[1] - 0.3834004995642036) <= 1e-12);
  }
  {
    std::vector<double> s{1e6, 3.0}, c{0.2, 0.7, 0.9, 1, 1, 1}, d{1, 1};
    const auto r = composite<double>(s, c, d, {}, white);
    CHECK(std::abs(r.rgb[0] - 0.2) <= 1e-6);
    CHECK(std::abs(r.rgb[1] - 0.7) <= 1e-6);
    CHECK(std::abs(r.opacity - 1.0) <= 1e-6);
  }
  {
    std::vector<double> s{-0.1}, c{0, 0, 0}, d{1};
    CHECK_THROWS_AS(composite<double>(s, c, d, {}, white), DomainError);
  }
}

TEST_CASE("compositing invariants") {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const int k = 2 + static_cast<int>(rng.uniform_int(7));
    std::vector<double> s(k), c(3 * k), d(k), w(k), tau(k);
    for (auto& v : s) v = rng.uniform(0, 4);
    for (auto& v : c) v = rng.uniform();
    for (auto& v : d) v = rng.uniform(0.05, 0.5);
    const double bg[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    const auto r = composite<double>(s, c, d, {}, bg, w, tau);
    CHECK(tau[0] == 1.0);
    CHECK(r.opacity >= 0.0);
    CHECK(r.opacity <= 1.0);
    for (int ch = 0; ch < 3; ++ch) {
      double lo = bg[ch], hi = bg[ch];
      for (int i = 0; i < k; ++i) {
        lo = std::min(lo, c[3 * i + ch]);
        hi = std::max(hi, c[3 * i + ch]);
      }
      CHECK(r.rgb[ch] >= lo - 1e-12);
      CHECK(r.rgb[ch] <= hi + 1e-12);
    }
    // Splitting a sample into two halves leaves the result unchanged.
    const int split = static_cast<int>(rng.uniform_int(k));
    std::vector<double> s2, c2, d2;
    for (int i = 0; i < k; ++i) {
      const int reps = i == split ? 2 : 1;
      for (int q = 0; q < reps; ++q) {
        s2.push_back(s[i]);
        d2.push_back(d[i] / reps);
        for (int ch = 0; ch < 3; ++ch) c2.push_back(c[3 * i + ch]);
      }
    }
    const auto r2 = composite<double>(s2, c2, d2, {}, bg);
    for (int ch = 0; ch < 3; ++ch) CHECK(std::abs(r.rgb[ch] - r2.rgb[ch]) <= 1e-6);
    // Monotone opacity.
    auto s3 = s;
    s3[rng.uniform_int(k)] += rng.uniform(0, 1);
    CHECK(composite<double>(s3, c, d, {}, bg).opacity >= r.opacity);
  }
}

TEST_CASE("compositing gradients match central differences") {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const int k = 1 + static_cast<int>(rng.uniform_int(8));
    std::vector<double> s(k), c(3 * k), d(k);
    for (auto& v : s) v = rng.uniform(0.05, 4);
    for (auto& v : c) v = rng.uniform();
    for (auto& v : d) v = rng.uniform(0.05, 0.5);
    const double bg[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    const double g[3] = {rng.normal(), rng.normal(), rng.normal()};
    const double g_op = rng.normal();
    auto loss = [&](const std::vector<double>& ss, const std::vector<double>& cc) {
      const auto r = composite<double>(ss, cc, d, {}, bg);
      return g[0] * r.rgb[0] + g[1] * r.rgb[1] + g[2] * r.rgb[2] + g_op * r.opacity;
    };
    std::vector<double> ds(k), dc(3 * k);
    composite_backward<double>(s, c, d, bg, g, g_op, ds, dc);
    const double h = 1e-6;
    for (int i = 0; i < k; ++i) {
      auto sp = s, sm = s;
      sp[i] += h;
      sm[i] -= h;
      const double num = (loss(sp, c) - loss(sm, c)) / (2 * h);
      CHECK(testutil::close_rel(ds[i], num, 1e-3, 1e-8));
    }
    for (int i = 0; i < 3 * k; ++i) {
      auto cp = c, cm = c;
      cp[i] += h;
      cm[i] -= h;
      const double num = (loss(s, cp) - loss(s, cm)) / (2 * h);
      CHECK(testutil::close_rel(dc[i], num, 1e-3, 1e-8));
    }
  }
}

TEST_CASE("empty field renders the background") {
  const ZeroField z;
  RenderSettings rs;
  rs.background = Vec3d(0.2, 0.4, 0.6);
  rs.samples = 16;
  PosedImage img;
  img.pose = test_pose(16);
  img.pixels = Image(16, 16, 3);
  const auto b = make_patch_bundle(img, 0, 2, 3, 4, 2);
  const auto p = render_patch<double>(z, b, 0.1, 10.0, rs);
  CHECK(p.rgb.height == 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) CHECK(p.rgb.at(y, x, c) == doctest::Approx(rs.background[c]));

  auto cfg = testutil::tiny_field_config();
  auto f = TensorialField<float>::init(cfg, 1);
  for (int m = 0; m < 3; ++m) {
    std::fill(f.params().density_planes[m].begin(), f.params().density_planes[m].end(), 10.0f);
    std::fill(f.params().density_lines[m].begin(), f.params().density_lines[m].end(), -10.0f);
  }
  const auto im = render_image(f, test_pose(16), 1, cfg.near, cfg.far, rs);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c)
        CHECK(im.image.pixels.at(y, x, c) == doctest::Approx(rs.background[c]).epsilon(1e-6));
}

TEST_CASE("render_image is invariant to chunking") {
  FieldConfig cfg = testutil::tiny_field_config();
  cfg.hidden = 32;
  auto f = TensorialField<float>::init(cfg, 2);
  for (int m = 0; m < 3; ++m)
    for (auto& v : f.params().density_planes[m]) v *= 100;
  RenderSettings rs;
  rs.samples = 48;
  const auto pose = test_pose(64);
  const auto a = render_image(f, pose, 1, cfg.near, cfg.far, rs, 1024);
  const auto b = render_image(f, pose, 1, cfg.near, cfg.far, rs, 4096);
  const auto c = render_image(f, pose, 1, cfg.near, cfg.far, rs, 333);
  CHECK(a.image.pixels.data == b.image.pixels.data);
  CHECK(a.image.pixels.data == c.image.pixels.data);
  CHECK(a.depth.data == c.depth.data);
  const std::uint64_t seed = 99;
  const auto j1 = render_image(f, pose, 1, cfg.near, cfg.far, rs, 1000, &seed);
  const auto j2 = render_image(f, pose, 1, cfg.near, cfg.far, rs, 77, &seed);
  CHECK(j1.image.pixels.data == j2.image.pixels.data);
  CHECK(j1.image.pixels.data != a.image.pixels.data);
  double max_op = 0;
  for (float o : a.opacity.data) max_op = std::max<double>(max_op, o);
  CHECK(max_op > 0.05);
}

TEST_CASE("patch and image code paths agree") {
  FieldConfig cfg = testutil::tiny_field_config();
  auto f = TensorialField<float>::init(cfg, 3);
  for (int m = 0; m < 3; ++m)
    for (auto& v : f.params().density_planes[m]) v *= 30;
  RenderSettings rs;
  rs.samples = 32;
  PosedImage img;
  img.pose = test_pose(24);
  img.pixels = Image(24, 24, 3);
  const auto full = render_image(f, img.pose, 1, cfg.near, cfg.far, rs);
  const auto b = make_patch_bundle(img, 0, 5, 9, 8, 1);
  const auto p = render_patch<float>(f, b, cfg.near, cfg.far, rs);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 3; ++c) CHECK(p.rgb.at(y, x, c) == full.image.pixels.at(9 + y, 5 + x, c));

  const EnsembleField<float> ens({snapshot(f, 1), snapshot(f, 2), snapshot(f, 3)});
  const auto pe = render_patch<float>(ens, b, cfg.near, cfg.far, rs);
  CHECK(pe.rgb.data == p.rgb.data);
  CHECK(pe.opacity.data == p.opacity.data);
}

TEST_CASE("super-sampled analytic render box-averages to the pixel render") {
  const AnalyticScene scene = AnalyticScene::procedural(7);
  const AnalyticField<float> field(scene, Aabb{});
  RenderSettings rs;
  rs.samples = 192;
  // Pixel-center sampling aliases at silhouettes, so the mismatch falls off as
  // 1/resolution; 256 keeps it under the bound.
  const auto pose = test_pose(256);
  const auto one = render_image(field, pose, 1, 0.1, 10.0, rs);
  const auto two = render_image(field, pose, 2, 0.1, 10.0, rs);
  const Image down = box_downsample(two.image.pixels, 2);
  double mae = 0;
  for (std::size_t i = 0; i < down.data.size(); ++i)
    mae += std::abs(down.data[i] - one.image.pixels.data[i]);
  mae /= double(down.data.size());
  MESSAGE("mean abs difference ", mae);
  CHECK(mae <= 2.0 / 255.0);
}

TEST_CASE("differentiable render matches forward render and central differences") {
  FieldConfig cfg = testutil::tiny_field_config();
  auto f = TensorialField<double>::init(cfg, 4);
  for (int m = 0; m < 3; ++m) {
    for (auto& v : f.params().density_planes[m]) v *= 20;
    for (auto& v : f.params().app_planes[m]) v *= 5;
  }
  RenderSettings rs;
  rs.samples = 24;
  rs.weight_threshold = 0.0;
  const auto rays = gen_rays(test_pose(8), 1);
  std::vector<Ray> sub(rays.begin() + 20, rays.begin() + 44);
  RenderTape<double> tape;
  const auto taped = render_rays(f, sub, rs, nullptr, tape);
  const auto plain = render_rays<double>(f, sub, cfg.near, cfg.far, rs, nullptr);
  CHECK(taped.rgb == plain.rgb);

  Rng rng(5);
  std::vector<double> g(taped.rgb.size());
  for (auto& v : g) v = rng.normal();
  auto loss = [&](const TensorialField<double>& fld) {
    const auto r = render_rays<double>(fld, sub, cfg.near, cfg.far, rs, nullptr);
    double l = 0;
    for (std::size_t i = 0; i < g.size(); ++i) l += g[i] * r.rgb[i];
    return l;
  };
  auto grad = FieldParams<double>::zeros(cfg);
  render_backward(f, tape, std::span<const double>(g), grad);
  std::vector<std::span<double>> ps, gs;
  f.params().for_each_group([&](const std::string&, std::span<double> s, bool) { ps.push_back(s); });
  grad.for_each_group([&](const std::string&, std::span<double> s, bool) { gs.push_back(s); });
  for (std::size_t k = 0; k < ps.size(); ++k) {
    std::size_t best = 0;
    for (std::size_t i = 0; i < gs[k].size(); ++i)
      if (std::abs(gs[k][i]) > std::abs(gs[k][best])) best = i;
    const double keep = ps[k][best], h = 1e-6;
    ps[k][best] = keep + h;
    const double lp = loss(f);
    ps[k][best] = keep - h;
    const double lm = loss(f);
    ps[k][best] = keep;
    const double num = (lp - lm) / (2 * h);
    INFO("group ", k, " analytic ", gs[k][best], " numeric ", num);
    CHECK(testutil::close_rel(gs[k][best], num, 1e-3, 1e-8));
  }
}
