#include <cstring>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "zssrt/errors.hpp"
#include "zssrt/field.hpp"
#include "zssrt/math.hpp"
#include "zssrt/renderer.hpp"

using namespace zssrt;
using V3d = Eigen::Vector3d;

namespace {

V3d random_point(Rng& rng, const Aabb& b, double margin = 0.05) {
  V3d p;
  for (int a = 0; a < 3; ++a) p[a] = rng.uniform(b.min[a] + margin, b.max[a] - margin);
  return p;
}

V3d random_dir(Rng& rng) {
  V3d d(rng.normal(), rng.normal(), rng.normal());
  return d.normalized();
}

}  // namespace

TEST_CASE("init is deterministic and validated") {
  FieldConfig cfg;
  cfg.grid_res = 64;
  cfg.density_rank = 4;
  cfg.app_rank = 12;
  const auto a = TensorialField<float>::init(cfg, 1);
  const auto b = TensorialField<float>::init(cfg, 1);
  std::vector<std::span<const float>> sa, sb;
  a.params().for_each_group([&](const std::string&, std::span<const float> s, bool) { sa.push_back(s); });
  b.params().for_each_group([&](const std::string&, std::span<const float> s, bool) { sb.push_back(s); });
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i)
    CHECK(std::memcmp(sa[i].data(), sb[i].data(), sa[i].size_bytes()) == 0);

  FieldConfig bad = cfg;
  bad.density_rank = 0;
  CHECK_THROWS_AS(TensorialField<float>::init(bad, 1), ConfigError);
  bad = cfg;
  bad.grid_res = 8;
  CHECK_THROWS_AS(TensorialField<float>::init(bad, 1), ConfigError);
}

TEST_CASE("fresh field is nearly transparent along random rays") {
  FieldConfig cfg;
  cfg.grid_res = 64;
  cfg.density_rank = 4;
  cfg.app_rank = 12;
  const auto f = TensorialField<float>::init(cfg, 1);
  Rng rng(17);
  std::vector<Ray> rays;
  for (int i = 0; i < 100; ++i) {
    Ray r;
    r.origin = random_dir(rng) * 4.0;
    r.direction = (random_point(rng, cfg.bounds, 0.5) - r.origin).normalized();
    rays.push_back(r);
  }
  RenderSettings rs;
  rs.samples = 256;
  const auto out = render_rays<float>(f, rays, cfg.near, cfg.far, rs, nullptr);
  for (float o : out.opacity) CHECK(o < 0.5f);
}

TEST_CASE("zero density grids give a small constant density") {
  auto cfg = testutil::tiny_field_config();
  auto f = TensorialField<double>::init(cfg, 2);
  for (int m = 0; m < 3; ++m) {
    std::fill(f.params().density_planes[m].begin(), f.params().density_planes[m].end(), 0.0);
    std::fill(f.params().density_lines[m].begin(), f.params().density_lines[m].end(), 0.0);
  }
  Rng rng(3);
  for (int i = 0; i < 10; ++i) {
    const auto [sigma, rgb] = f.query(random_point(rng, cfg.bounds), random_dir(rng));
    CHECK(sigma == doctest::Approx(softplus(-5.0)));
    CHECK(sigma < 0.01);
  }
}

TEST_CASE("outside bounds is culled") {
  const auto f = TensorialField<double>::init(testutil::tiny_field_config(), 3);
  const auto [sigma, rgb] = f.query(V3d(2.0, 0, 0), V3d::UnitX());
  CHECK(sigma == 0.0);
  CHECK(rgb.isZero());
}

TEST_CASE("lattice-node queries match direct factor products") {
  const auto cfg = testutil::tiny_field_config();
  const auto f = TensorialField<double>::init(cfg, 4);
  const auto& p = f.params();
  const int g = cfg.grid_res, R = cfg.density_rank;
  const int axes[3][3] = {{0, 1, 2}, {0, 2, 1}, {1, 2, 0}};
  Rng rng(5);
  for (int t = 0; t < 25; ++t) {
    int idx[3];
    V3d x;
    for (int a = 0; a < 3; ++a) {
      idx[a] = static_cast<int>(rng.uniform_int(g));
      x[a] = cfg.bounds.min[a] + (cfg.bounds.max[a] - cfg.bounds.min[a]) * idx[a] / (g - 1);
    }
    double raw = cfg.density_shift;
    for (int m = 0; m < 3; ++m)
      for (int r = 0; r < R; ++r)
        raw += p.density_planes[m][(std::size_t(idx[axes[m][0]]) * g + idx[axes[m][1]]) * R + r] *
               p.density_lines[m][std::size_t(idx[axes[m][2]]) * R + r];
    CHECK(std::abs(f.raw_density(x) - raw) <= 1e-6);
  }
}

TEST_CASE("queries are continuous across cell boundaries") {
  const auto cfg = testutil::tiny_field_config();
  const auto f = TensorialField<double>::init(cfg, 6);
  const double cell = (cfg.bounds.max[0] - cfg.bounds.min[0]) / (cfg.grid_res - 1);
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    V3d x = random_point(rng, cfg.bounds, 0.2);
    const int k = static_cast<int>(rng.uniform_int(3));
    // Snap one coordinate onto a cell boundary.
    x[k] = cfg.bounds.min[k] + std::round((x[k] - cfg.bounds.min[k]) / cell) * cell;
    const V3d d = random_dir(rng);
    V3d y = x;
    y[k] += 1e-6 * cell;
    const auto [sa, ca] = f.query(x, d);
    const auto [sb, cb] = f.query(y, d);
    CHECK(std::abs(sa - sb) <= 1e-4);
    CHECK((ca - cb).cwiseAbs().maxCoeff() <= 1e-4);
  }
}

TEST_CASE("analytic gradients match central differences for every parameter group") {
  const auto cfg = testutil::tiny_field_config();
  auto f = TensorialField<double>::init(cfg, 8);
  // Larger grid values make the appearance path non-trivial.
  for (int m = 0; m < 3; ++m) {
    for (auto& v : f.params().app_planes[m]) v *= 5;
    for (auto& v : f.params().app_lines[m]) v *= 5;
  }
  Rng rng(9);
  std::vector<V3d> xs, ds;
  for (int i = 0; i < 20; ++i) {
    xs.push_back(random_point(rng, cfg.bounds));
    ds.push_back(random_dir(rng));
  }
  std::vector<double> ws(20), wc(60);
  for (auto& v : ws) v = rng.normal();
  for (auto& v : wc) v = rng.normal();

  auto loss = [&](const TensorialField<double>& fld) {
    std::vector<double> sig(20), rgb(60);
    fld.density(xs, sig);
    fld.color(xs, ds, rgb);
    double l = 0;
    for (int i = 0; i < 20; ++i) l += ws[i] * sig[i];
    for (int i = 0; i < 60; ++i) l += wc[i] * rgb[i];
    return l;
  };

  auto grad = FieldParams<double>::zeros(cfg);
  {
    std::vector<double> rgb(60);
    AppearanceTape<double> tape;
    f.color_forward(xs, ds, rgb, tape);
    f.color_backward(tape, wc, grad);
    f.density_backward(xs, ws, grad);
  }

  std::vector<std::pair<std::string, std::span<double>>> pg, gg;
  f.params().for_each_group([&](const std::string& n, std::span<double> s, bool) { pg.push_back({n, s}); });
  grad.for_each_group([&](const std::string& n, std::span<double> s, bool) { gg.push_back({n, s}); });
  const double h = 1e-6;
  for (std::size_t g = 0; g < pg.size(); ++g) {
    auto params = pg[g].second;
    auto an = gg[g].second;
    // Largest-gradient entries plus random ones.
    std::vector<std::size_t> picks;
    std::size_t best = 0;
    for (std::size_t i = 0; i < an.size(); ++i)
      if (std::abs(an[i]) > std::abs(an[best])) best = i;
    picks.push_back(best);
    for (int t = 0; t < 6; ++t) picks.push_back(rng.uniform_int(an.size()));
    bool any_nonzero = false;
    for (std::size_t i : picks) {
      const double keep = params[i];
      params[i] = keep + h;
      const double lp = loss(f);
      params[i] = keep - h;
      const double lm = loss(f);
      params[i] = keep;
      const double num = (lp - lm) / (2 * h);
      any_nonzero = any_nonzero || std::abs(an[i]) > 1e-8;
      INFO(pg[g].first, " index ", i, " analytic ", an[i], " numeric ", num);
      CHECK(testutil::close_rel(an[i], num, 1e-3, 1e-8));
    }
    INFO(pg[g].first);
    CHECK(any_nonzero);
  }
}

TEST_CASE("snapshots are immutable copies") {
  const auto cfg = testutil::tiny_field_config();
  auto f = TensorialField<double>::init(cfg, 10);
  const auto s1 = snapshot(f, 5);
  const auto s2 = snapshot(f, 5);
  CHECK(s1.field->params().w1 == s2.field->params().w1);
  const V3d x(0.1, -0.2, 0.3), d = V3d(1, 2, 3).normalized();
  const auto before = f.query(x, d);
  for (auto& v : f.params().w1) v += 0.5;
  for (auto& v : f.params().density_lines[0]) v += 0.5;
  const auto snap = s1.field->query(x, d);
  CHECK(snap.first == before.first);
  CHECK(snap.second == before.second);
  CHECK(f.query(x, d).first != before.first);
}

TEST_CASE("ensemble averages samples") {
  const auto cfg = testutil::tiny_field_config();
  const auto a = TensorialField<double>::init(cfg, 11);
  const auto b = TensorialField<double>::init(cfg, 12);
  CHECK_THROWS_AS(EnsembleField<double>({}), ConfigError);
  CHECK_THROWS_AS(EnsembleField<double>({snapshot(a, 2), snapshot(a, 1)}), ConfigError);

  Rng rng(13);
  const EnsembleField<double> one({snapshot(a, 1)});
  const EnsembleField<double> three({snapshot(a, 1), snapshot(a, 2), snapshot(a, 3)});
  const EnsembleField<double> aab({snapshot(a, 1), snapshot(a, 2), snapshot(b, 3)});
  for (int i = 0; i < 20; ++i) {
    const V3d x = random_point(rng, cfg.bounds), d = random_dir(rng);
    const auto qa = a.query(x, d), qb = b.query(x, d);
    const auto q1 = ensemble_query(one, x, d), q3 = ensemble_query(three, x, d);
    CHECK(q1.first == qa.first);
    CHECK(q1.second == qa.second);
    CHECK(q3.first == qa.first);
    CHECK(q3.second == qa.second);
    const auto qm = ensemble_query(aab, x, d);
    CHECK(std::abs(qm.first - (2 * qa.first + qb.first) / 3) <= 1e-7);
    CHECK((qm.second - (2 * qa.second + qb.second) / 3).cwiseAbs().maxCoeff() <= 1e-7);
  }

  // Constant grids: raw = shift + 3 R (plane * line), giving sigma ~ 0 and sigma = 2.
  auto constant_field = [&](double plane, double line) {
    auto p = FieldParams<double>::zeros(cfg);
    TensorialField<double> base = TensorialField<double>::init(cfg, 14);
    p = base.params();
    for (int m = 0; m < 3; ++m) {
      std::fill(p.density_planes[m].begin(), p.density_planes[m].end(), plane);
      std::fill(p.density_lines[m].begin(), p.density_lines[m].end(), line);
    }
    return TensorialField<double>(cfg, p);
  };
  const double R = cfg.density_rank;
  const double c2 = std::sqrt((std::log(std::expm1(2.0)) - cfg.density_shift) / (3 * R));
  const auto f0 = constant_field(10.0, -10.0);
  const auto f2 = constant_field(c2, c2);
  const EnsembleField<double> mix({snapshot(f0, 1), snapshot(f2, 2)});
  const V3d x(0.2, 0.1, -0.3), d = V3d::UnitZ();
  CHECK(f0.query(x, d).first < 1e-100);
  CHECK(f2.query(x, d).first == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(ensemble_query(mix, x, d).first == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("renders are invariant under permutation of rank components") {
  const auto cfg = testutil::tiny_field_config();
  const auto f = TensorialField<double>::init(cfg, 15);
  auto p = f.params();
  const int R = cfg.density_rank;
  for (int m = 0; m < 3; ++m) {
    auto& pl = p.density_planes[m];
    auto& ln = p.density_lines[m];
    for (std::size_t i = 0; i < pl.size(); i += R) std::reverse(pl.begin() + i, pl.begin() + i + R);
    for (std::size_t i = 0; i < ln.size(); i += R) std::reverse(ln.begin() + i, ln.begin() + i + R);
  }
  const TensorialField<double> g(cfg, p);
  Rng rng(16);
  for (int i = 0; i < 20; ++i) {
    const V3d x = random_point(rng, cfg.bounds);
    CHECK(std::abs(f.raw_density(x) - g.raw_density(x)) <= 1e-12);
  }
}

TEST_CASE("checkpoint roundtrip is bit-identical") {
  FieldConfig cfg = testutil::tiny_field_config();
  const auto f = TensorialField<float>::init(cfg, 18);
  const auto dir = testutil::temp_dir("ckpt");
  field_to_checkpoint(f, 42, {{"rng_digest", "abc"}}).save(dir / "f.ckpt");
  const auto loaded = Checkpoint::load(dir / "f.ckpt");
  {
    std::ifstream in(dir / "f.ckpt", std::ios::binary);
    std::string magic;
    std::getline(in, magic);
    CHECK(magic == kCheckpointFormat);
  }
  std::ofstream(dir / "bad.ckpt") << "not-a-checkpoint\n";
  CHECK_THROWS_AS(Checkpoint::load(dir / "bad.ckpt"), IoError);
  CHECK(loaded.meta["step"] == 42);
  CHECK(loaded.meta["rng_digest"] == "abc");
  const auto g = field_from_checkpoint(loaded);
  CHECK(g.config() == f.config());
  const CameraPose pose = look_at(Vec3d(0, -4, 1), Vec3d::Zero(), Vec3d::UnitZ(), 0.7, 16, 16);
  RenderSettings rs;
  rs.samples = 32;
  const auto a = render_image(f, pose, 1, cfg.near, cfg.far, rs);
  const auto b = render_image(g, pose, 1, cfg.near, cfg.far, rs);
  CHECK(a.image.pixels.data == b.image.pixels.data);
}
