#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "zssrt/errors.hpp"
#include "zssrt/eval.hpp"

using namespace zssrt;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  Image img(h, w, 3);
  Rng rng(seed);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

Image constant_image(int h, int w, float v) { return Image(h, w, 3, v); }

// Windowed SSIM evaluated window by window with direct 2-D Gaussian sums.
double ssim_oracle(const Image& a, const Image& b) {
  double g[11][11], gsum = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
      gsum += g[i][j];
    }
  auto lum = [](const Image& im, int y, int x) {
    return 0.299 * im.at(y, x, 0) + 0.587 * im.at(y, x, 1) + 0.114 * im.at(y, x, 2);
  };
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  int count = 0;
  for (int y = 0; y + 11 <= a.height; ++y)
    for (int x = 0; x + 11 <= a.width; ++x) {
      double ma = 0, mb = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          ma += g[i][j] / gsum * lum(a, y + i, x + j);
          mb += g[i][j] / gsum * lum(b, y + i, x + j);
        }
      double va = 0, vb = 0, cov = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double da = lum(a, y + i, x + j) - ma, db = lum(b, y + i, x + j) - mb;
          va += g[i][j] / gsum * da * da;
          vb += g[i][j] / gsum * db * db;
          cov += g[i][j] / gsum * da * db;
        }
      total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  return total / count;
}

Image flip_horizontal(const Image& img) {
  Image out(img.height, img.width, img.channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("psnr closed form and edge cases") {
  const Image a = random_image(16, 16, 1);
  CHECK(psnr(a, a) == kPsnrInfinity);
  const Image zero = constant_image(16, 16, 0.0f);
  const Image tenth = constant_image(16, 16, 0.1f);
  const double mse = double(0.1f) * double(0.1f);
  CHECK(psnr(zero, tenth) == doctest::Approx(10 * std::log10(1 / mse)).epsilon(1e-12));
  CHECK(psnr(zero, tenth) == doctest::Approx(20.0).epsilon(1e-6));
  const Image b = random_image(16, 16, 2);
  CHECK(psnr(a, b) == psnr(b, a));
  CHECK_THROWS_AS(psnr(a, random_image(16, 8, 2)), ShapeError);
}

TEST_CASE("psnr decreases as noise grows") {
  const Image clean = random_image(32, 32, 3);
  Rng rng(4);
  std::vector<double> noise(clean.data.size());
  for (auto& v : noise) v = rng.normal();
  double prev = kPsnrInfinity;
  for (double amp : {0.01, 0.03, 0.1}) {
    Image noisy = clean;
    for (std::size_t i = 0; i < noisy.data.size(); ++i) noisy.data[i] += static_cast<float>(amp * noise[i]);
    const double p = psnr(clean, noisy);
    CHECK(p < prev);
    prev = p;
  }
}

TEST_CASE("ssim matches a brute-force windowed reference") {
  const Image a = random_image(20, 23, 5);
  Image b = random_image(20, 23, 6);
  for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] = 0.6f * a.data[i] + 0.4f * b.data[i];
  CHECK(std::abs(ssim(a, b) - ssim_oracle(a, b)) <= 1e-6);
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  const Image black = constant_image(16, 16, 0.0f), white = constant_image(16, 16, 1.0f);
  CHECK(ssim(black, white) < 1.0);
  CHECK_THROWS_AS(ssim(random_image(10, 20, 1), random_image(10, 20, 2)), ShapeError);
  CHECK_THROWS_AS(ssim(a, random_image(20, 22, 1)), ShapeError);
}

TEST_CASE("ssim approaches one for vanishing noise") {
  const Image a = random_image(24, 24, 7);
  Rng rng(8);
  std::vector<double> noise(a.data.size());
  for (auto& v : noise) v = rng.normal();
  std::vector<double> gaps;
  for (double eps : {1e-3, 1e-4}) {
    Image b = a;
    for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] += static_cast<float>(eps * noise[i]);
    gaps.push_back(1.0 - ssim(a, b));
  }
  CHECK(gaps[0] < 1e-3);
  CHECK(gaps[1] < gaps[0]);
  CHECK(gaps[1] < 1e-5);
}

TEST_CASE("metrics are invariant to flipping both inputs") {
  const Image a = random_image(16, 18, 9), b = random_image(16, 18, 10);
  const Image fa = flip_horizontal(a), fb = flip_horizontal(b);
  CHECK(psnr(fa, fb) == doctest::Approx(psnr(a, b)).epsilon(1e-12));
  CHECK(ssim(fa, fb) == doctest::Approx(ssim(a, b)).epsilon(1e-12));
}

TEST_CASE("consistency probe") {
  const AnalyticScene scene = AnalyticScene::procedural(7);
  const Aabb bounds;
  const AnalyticField<float> field(scene, bounds);
  RenderSettings rs;
  rs.samples = 256;
  std::vector<CameraPose> poses;
  for (int k = 0; k < 4; ++k) {
    const double az = 0.5 + 0.25 * k;
    poses.push_back(look_at(Vec3d(4 * std::cos(az), 4 * std::sin(az), 2.5), Vec3d(0, 0, -0.4),
                            Vec3d::UnitZ(), 0.6911, 256, 256));
  }

  // Surface points of the first view that every pose sees unoccluded.
  std::vector<Vec3d> points;
  for (int v = 32; v < 256 && points.size() < 40; v += 24)
    for (int u = 32; u < 256; u += 24) {
      const Ray r = ray_through(poses[0], u + 0.5, v + 0.5);
      const auto hit = scene.trace(r);
      if (!hit) continue;
      const Vec3d p = r.origin + hit->t * r.direction;
      bool clear = true;
      for (const auto& pose : poses) {
        const Vec3d o = pose.origin();
        const Ray back{o, (p - o).normalized()};
        const auto h2 = scene.trace(back);
        if (!h2 || std::abs(h2->t - (p - o).norm()) > 1e-3) clear = false;
      }
      if (clear) points.push_back(p);
    }
  REQUIRE(points.size() >= 10);

  const auto res = consistency_probe(field, poses, points, 0.05, 12.0, rs);
  CHECK(res.skipped < int(points.size()));
  CHECK(res.mean_variance < 1e-2);

  const std::vector<CameraPose> same = {poses[1], poses[1], poses[1]};
  const auto dup = consistency_probe(field, same, points, 0.05, 12.0, rs);
  for (std::size_t i = 0; i < points.size(); ++i)
    if (!std::isnan(dup.variance[i])) CHECK(dup.variance[i] == 0.0);
  CHECK(dup.skipped < int(points.size()));

  CHECK_THROWS_AS(consistency_probe(field, {poses[0]}, points, 0.05, 12.0, rs), ConfigError);

  // A point behind every camera cannot be projected and is skipped.
  const auto far = consistency_probe(field, poses, {Vec3d(40, 40, 40)}, 0.05, 12.0, rs);
  CHECK(far.skipped == 1);
  CHECK(std::isnan(far.variance[0]));
}

TEST_CASE("report means and emitted files") {
  std::vector<ViewMetric> views = {{0, 25.5, 0.91}, {1, 27.25, 0.93}, {2, 24.0, 0.88}};
  const MetricReport r = make_report(views, 1.5, "abc123");
  CHECK(std::abs(r.mean_psnr - (25.5 + 27.25 + 24.0) / 3) <= 1e-9);
  CHECK(std::abs(r.mean_ssim - (0.91 + 0.93 + 0.88) / 3) <= 1e-9);
  CHECK_THROWS_AS(make_report({}, 0, ""), ConfigError);

  const std::vector<LossRecord> losses = {{"coarse", 1, 0.1, 0.1, 0}, {"coarse", 2, 0.05, 0.05, 0},
                                          {"fine", 1, 0.02, 0.019, 0.03}};
  const auto d1 = testutil::temp_dir("report1"), d2 = testutil::temp_dir("report2");
  emit_report(r, &losses, d1);
  emit_report(r, &losses, d2);
  CHECK(slurp(d1 / "metrics.csv") == slurp(d2 / "metrics.csv"));
  CHECK(slurp(d1 / "summary.png") == slurp(d2 / "summary.png"));
  CHECK(slurp(d1 / "metrics.csv").rfind("view_id,psnr_db,ssim\n0,25.500000,0.910000\n", 0) == 0);
  const auto j = nlohmann::json::parse(slurp(d1 / "summary.json"));
  CHECK(j.at("config_digest") == "abc123");
  CHECK(j.at("mean_psnr_db").get<double>() == doctest::Approx(r.mean_psnr));

  MetricReport empty = r;
  empty.views.clear();
  CHECK_THROWS_AS(emit_report(empty, nullptr, d1), ConfigError);

  const MetricReport perfect = make_report({{0, kPsnrInfinity, 1.0}}, 0, "x");
  const auto d3 = testutil::temp_dir("report3");
  emit_report(perfect, nullptr, d3);
  CHECK(slurp(d3 / "metrics.csv") == "view_id,psnr_db,ssim\n0,inf,1.000000\n");
}
