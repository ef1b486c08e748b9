#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
#include "zssrt/cli.hpp"
#include "zssrt/eval.hpp"
#include "zssrt/renderer.hpp"
#include "zssrt/sdm.hpp"
#include "zssrt/trainer.hpp"

using namespace zssrt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using T3 = Tensor3<double>;
using V3d = Eigen::Vector3d;

namespace {

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Pass when |a - n| <= rel_tol max(|a|, |n|) + abs_floor; `worst` is the largest
// relative error among entries above report_floor.
struct GradCheck {
  double rel_tol = 1e-3;
  double abs_floor = 1e-8;
  double report_floor = 1e-5;
  double worst = 0;
  int checked = 0;
  int failed = 0;

  void add(double analytic, double numeric) {
    ++checked;
    const double diff = std::abs(analytic - numeric);
    const double scale = std::max(std::abs(analytic), std::abs(numeric));
    if (diff > rel_tol * scale + abs_floor) ++failed;
    if (scale > report_floor) worst = std::max(worst, diff / scale);
  }
};

template <typename F>
double central(double& param, F&& loss, double h = 1e-6) {
  const double keep = param;
  param = keep + h;
  const double lp = loss();
  param = keep - h;
  const double lm = loss();
  param = keep;
  return (lp - lm) / (2 * h);
}

T3 random_tensor(int h, int w, int c, Rng& rng, double lo = 0, double hi = 1) {
  T3 t(h, w, c);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

double dot(const T3& a, const T3& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

PacStage<double> random_stage(int in, int out, Rng& rng) {
  auto s = PacStage<double>::zeros(in, out);
  for (auto& v : s.weight) v = rng.normal() * 0.3;
  for (auto& v : s.bias) v = rng.normal() * 0.3;
  s.beta = 0.7;
  return s;
}

FieldConfig tiny_field() {
  FieldConfig c;
  c.grid_res = 16;
  c.density_rank = 2;
  c.app_rank = 3;
  c.app_dim = 5;
  c.hidden = 8;
  return c;
}

CameraPose test_pose(int res) {
  return look_at(Vec3d(2.5, -3.0, 1.6), Vec3d(0, 0, -0.3), Vec3d::UnitZ(), 0.6911, res, res);
}

// ---------------------------------------------------------------------------

void grad_composite(GradCheck& gc) {
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
    auto loss = [&] {
      const auto r = composite<double>(s, c, d, {}, bg);
      return g[0] * r.rgb[0] + g[1] * r.rgb[1] + g[2] * r.rgb[2] + g_op * r.opacity;
    };
    std::vector<double> ds(k), dc(3 * k);
    composite_backward<double>(s, c, d, bg, g, g_op, ds, dc);
    for (int i = 0; i < k; ++i) gc.add(ds[i], central(s[i], loss));
    for (int i = 0; i < 3 * k; ++i) gc.add(dc[i], central(c[i], loss));
  }
}

void grad_query_field(GradCheck& gc) {
  const auto cfg = tiny_field();
  auto f = TensorialField<double>::init(cfg, 8);
  for (int m = 0; m < 3; ++m) {
    for (auto& v : f.params().app_planes[m]) v *= 5;
    for (auto& v : f.params().app_lines[m]) v *= 5;
  }
  Rng rng(9);
  const int n = 20;
  std::vector<V3d> xs, ds;
  for (int i = 0; i < n; ++i) {
    V3d p;
    for (int a = 0; a < 3; ++a) p[a] = rng.uniform(cfg.bounds.min[a] + 0.05, cfg.bounds.max[a] - 0.05);
    xs.push_back(p);
    ds.push_back(V3d(rng.normal(), rng.normal(), rng.normal()).normalized());
  }
  std::vector<double> ws(n), wc(3 * n);
  for (auto& v : ws) v = rng.normal();
  for (auto& v : wc) v = rng.normal();
  auto loss = [&] {
    std::vector<double> sig(n), rgb(3 * n);
    f.density(xs, sig);
    f.color(xs, ds, rgb);
    double l = 0;
    for (int i = 0; i < n; ++i) l += ws[i] * sig[i];
    for (int i = 0; i < 3 * n; ++i) l += wc[i] * rgb[i];
    return l;
  };
  auto grad = FieldParams<double>::zeros(cfg);
  {
    std::vector<double> rgb(3 * n);
    AppearanceTape<double> tape;
    f.color_forward(xs, ds, rgb, tape);
    f.color_backward(tape, wc, grad);
    f.density_backward(xs, ws, grad);
  }
  std::vector<std::span<double>> ps, gs;
  f.params().for_each_group([&](const std::string&, std::span<double> s, bool) { ps.push_back(s); });
  grad.for_each_group([&](const std::string&, std::span<double> s, bool) { gs.push_back(s); });
  for (std::size_t g = 0; g < ps.size(); ++g) {
    std::vector<std::size_t> picks;
    std::size_t best = 0;
    for (std::size_t i = 0; i < gs[g].size(); ++i)
      if (std::abs(gs[g][i]) > std::abs(gs[g][best])) best = i;
    picks.push_back(best);
    for (int t = 0; t < 6; ++t) picks.push_back(rng.uniform_int(gs[g].size()));
    for (std::size_t i : picks) gc.add(gs[g][i], central(ps[g][i], loss));
  }
}

void grad_pac(GradCheck& gc) {
  Rng rng(5);
  for (int trial = 0; trial < 4; ++trial) {
    auto st = random_stage(2, 2, rng);
    T3 in = random_tensor(5, 5, 2, rng);
    T3 gd = random_tensor(5, 5, 1, rng, 0, 1.5);
    const T3 w = random_tensor(3, 3, 2, rng, -1, 1);
    auto loss = [&] { return dot(pac_apply(in, gd, st), w); };
    T3 d_in(5, 5, 2), d_g(5, 5, 1);
    auto d_st = PacStage<double>::zeros(2, 2);
    d_st.beta = 0;
    pac_backward(in, gd, st, w, PacGrads<double>{&d_in, &d_g, &d_st});
    for (std::size_t i = 0; i < st.weight.size(); ++i) gc.add(d_st.weight[i], central(st.weight[i], loss));
    for (std::size_t i = 0; i < st.bias.size(); ++i) gc.add(d_st.bias[i], central(st.bias[i], loss));
    gc.add(d_st.beta, central(st.beta, loss));
    for (std::size_t i = 0; i < in.data.size(); ++i) gc.add(d_in.data[i], central(in.data[i], loss));
    for (std::size_t i = 0; i < gd.data.size(); ++i) gc.add(d_g.data[i], central(gd.data[i], loss));
  }
}

void grad_fine_loss(GradCheck& gc) {
  auto field = TensorialField<double>::init(tiny_field(), 12);
  for (int m = 0; m < 3; ++m) {
    for (auto& v : field.params().density_planes[m]) v *= 20;
    for (auto& v : field.params().app_planes[m]) v *= 5;
  }
  const auto sdm = SdmNetwork<float>::init(2, 8, 6).cast<double>();
  const auto ext = default_extractor<double>(19);
  RenderSettings rs;
  rs.samples = 16;
  rs.weight_threshold = 0.0;
  PosedImage img;
  img.pose = test_pose(8);
  img.pixels = Image(8, 8, 3);
  Rng rng(2);
  for (auto& v : img.pixels.data) v = static_cast<float>(rng.uniform());
  const PatchBundle b = make_patch_bundle(img, 0, 1, 3, 4, 2);

  for (const SdmNetwork<double>* net : {&sdm, static_cast<const SdmNetwork<double>*>(nullptr)}) {
    auto grad = FieldParams<double>::zeros(field.config());
    fine_loss<double>(b, field, net, *ext, 0.03, rs, nullptr, &grad);
    auto loss = [&] { return fine_loss<double>(b, field, net, *ext, 0.03, rs, nullptr, nullptr).total; };
    std::vector<std::span<double>> ps, gs;
    field.params().for_each_group([&](const std::string&, std::span<double> s, bool) { ps.push_back(s); });
    grad.for_each_group([&](const std::string&, std::span<double> s, bool) { gs.push_back(s); });
    for (std::size_t k = 0; k < ps.size(); ++k) {
      std::vector<std::size_t> picks;
      std::size_t best = 0;
      for (std::size_t i = 0; i < gs[k].size(); ++i)
        if (std::abs(gs[k][i]) > std::abs(gs[k][best])) best = i;
      picks.push_back(best);
      for (int t = 0; t < 2; ++t) picks.push_back(rng.uniform_int(gs[k].size()));
      for (std::size_t i : picks) gc.add(gs[k][i], central(ps[k][i], loss));
    }
  }
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  Outcome o;
  std::string parts;
  const std::pair<const char*, void (*)(GradCheck&)> cases[] = {
      {"composite", grad_composite}, {"query_field", grad_query_field},
      {"pac_apply", grad_pac}, {"fine_loss", grad_fine_loss}};
  for (const auto& [name, fn] : cases) {
    GradCheck gc;
    fn(gc);
    o.pass = o.pass && gc.failed == 0 && gc.checked > 0;
    parts += fmt("%s%s %d/%d worst rel %.1e", parts.empty() ? "" : ", ", name, gc.checked - gc.failed,
                 gc.checked, gc.worst);
  }
  const double secs = seconds_since(t0);
  o.pass = o.pass && secs < 120;
  o.detail = parts + fmt("; %.1f s (limit 120 s)", secs);
  return o;
}

// ---------------------------------------------------------------------------

T3 strided_conv(const T3& in, const PacStage<double>& st) {
  const int r = st.kernel / 2;
  T3 out((in.height + 1) / 2, (in.width + 1) / 2, st.out_channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int o = 0; o < st.out_channels; ++o) {
        double acc = st.bias[o];
        for (int ky = 0; ky < st.kernel; ++ky)
          for (int kx = 0; kx < st.kernel; ++kx)
            for (int c = 0; c < st.in_channels; ++c)
              acc += st.w(o, c, ky, kx) * in.clamped(2 * y + ky - r, 2 * x + kx - r, c);
        out.at(y, x, o) = acc;
      }
  return out;
}

Outcome criterion_convolution() {
  Rng rng(3);
  double worst_conv = 0, worst_brute = 0;
  for (int t = 0; t < 10; ++t) {
    const int h = 5 + static_cast<int>(rng.uniform_int(8)), w = 5 + static_cast<int>(rng.uniform_int(8));
    const auto st = random_stage(1 + static_cast<int>(rng.uniform_int(3)), 1 + static_cast<int>(rng.uniform_int(3)), rng);
    const T3 in = random_tensor(h, w, st.in_channels, rng);
    const T3 flat(h, w, 1, rng.uniform(0, 3));
    const T3 a = pac_apply(in, flat, st), b = strided_conv(in, st);
    if (!a.same_shape(b)) return {false, "shape mismatch against strided convolution"};
    for (std::size_t i = 0; i < a.data.size(); ++i) worst_conv = std::max(worst_conv, std::abs(a.data[i] - b.data[i]));
  }
  for (int t = 0; t < 10; ++t) {
    auto st = random_stage(1, 1, rng);
    st.beta = rng.uniform(0.1, 3);
    const T3 in = random_tensor(5, 5, 1, rng);
    const T3 f = random_tensor(5, 5, 1, rng, 0, 2);
    const T3 out = pac_apply(in, f, st);
    if (out.height != 3 || out.width != 3) return {false, "5x5 input did not give 3x3 output"};
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        const int iy = 2 * oy, ix = 2 * ox;
        double v = st.bias[0];
        for (int jy = iy - 2; jy <= iy + 2; ++jy)
          for (int jx = ix - 2; jx <= ix + 2; ++jx) {
            const int cy = std::clamp(jy, 0, 4), cx = std::clamp(jx, 0, 4);
            const double df = f.at(iy, ix) - f.at(cy, cx);
            v += std::exp(-st.beta * df * df / 2) * st.w(0, 0, jy - iy + 2, jx - ix + 2) * in.at(cy, cx);
          }
        worst_brute = std::max(worst_brute, std::abs(out.at(oy, ox) - v));
      }
  }
  return {worst_conv <= 1e-6 && worst_brute <= 1e-7,
          fmt("constant guidance vs strided conv max %.1e (tol 1e-6), 5x5 direct sum max %.1e (tol 1e-7)",
              worst_conv, worst_brute)};
}

// ---------------------------------------------------------------------------

class ZeroField : public RadianceField<double> {
 public:
  const Aabb& bounds() const override { return box_; }
  void density(std::span<const Vec3>, std::span<double> s) const override { std::fill(s.begin(), s.end(), 0.0); }
  void color(std::span<const Vec3>, std::span<const Vec3>, std::span<double> c) const override {
    std::fill(c.begin(), c.end(), 0.3);
  }

 private:
  Aabb box_;
};

Outcome criterion_compositing() {
  // Two samples, red then green, over black.
  const double black[3] = {0, 0, 0};
  std::vector<double> s{1.0, 2.0}, c{1, 0, 0, 0, 1, 0}, d{0.5, 0.5};
  const auto r = composite<double>(s, c, d, {}, black);
  const double closed[3] = {1 - std::exp(-0.5), std::exp(-0.5) * (1 - std::exp(-1.0)), 0};
  double two = 0;
  for (int k = 0; k < 3; ++k) two = std::max(two, std::abs(r.rgb[k] - closed[k]));
  two = std::max(two, std::abs(r.opacity - (1 - std::exp(-1.5))));

  Rng rng(2);
  double split_err = 0;
  for (int t = 0; t < 200; ++t) {
    const int k = 2 + static_cast<int>(rng.uniform_int(7));
    std::vector<double> ss(k), cc(3 * k), dd(k);
    for (auto& v : ss) v = rng.uniform(0, 4);
    for (auto& v : cc) v = rng.uniform();
    for (auto& v : dd) v = rng.uniform(0.05, 0.5);
    const double bg[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    const int split = static_cast<int>(rng.uniform_int(k));
    const int parts = 2 + static_cast<int>(rng.uniform_int(3));
    std::vector<double> s2, c2, d2;
    for (int i = 0; i < k; ++i) {
      const int reps = i == split ? parts : 1;
      for (int q = 0; q < reps; ++q) {
        s2.push_back(ss[i]);
        d2.push_back(dd[i] / reps);
        for (int ch = 0; ch < 3; ++ch) c2.push_back(cc[3 * i + ch]);
      }
    }
    const auto a = composite<double>(ss, cc, dd, {}, bg), b = composite<double>(s2, c2, d2, {}, bg);
    for (int ch = 0; ch < 3; ++ch) split_err = std::max(split_err, std::abs(a.rgb[ch] - b.rgb[ch]));
  }

  bool exact_bg = true;
  for (int t = 0; t < 20; ++t) {
    const int k = 1 + static_cast<int>(rng.uniform_int(16));
    std::vector<double> zs(k, 0.0), cc(3 * k), dd(k);
    for (auto& v : cc) v = rng.uniform();
    for (auto& v : dd) v = rng.uniform(0.01, 1);
    const double bg[3] = {rng.uniform(), rng.uniform(), rng.uniform()};
    const auto z = composite<double>(zs, cc, dd, {}, bg);
    for (int ch = 0; ch < 3; ++ch) exact_bg = exact_bg && z.rgb[ch] == bg[ch];
    exact_bg = exact_bg && z.opacity == 0.0;
  }
  const ZeroField zero;
  RenderSettings rs;
  rs.samples = 32;
  rs.background = Vec3d(0.25, 0.5, 0.75);
  const auto rays = gen_rays(test_pose(8), 1);
  const auto rr = render_rays<double>(zero, rays, 0.1, 10.0, rs, nullptr);
  for (std::size_t i = 0; i < rays.size(); ++i)
    for (int ch = 0; ch < 3; ++ch) exact_bg = exact_bg && rr.rgb[3 * i + ch] == rs.background[ch];

  return {two <= 1e-9 && split_err <= 1e-6 && exact_bg,
          fmt("two-sample closed form %.1e (tol 1e-9), splitting %.1e (tol 1e-6), zero density %s",
              two, split_err, exact_bg ? "returns background exactly" : "DIFFERS from background")};
}

// ---------------------------------------------------------------------------

Outcome criterion_sobel() {
  bool const_ok = true, ramp_ok = true;
  double ramp_worst = 0;
  for (double level : {0.0, 0.4, 1.0}) {
    const T3 flat(9, 11, 3, level);
    for (double v : gradient_view(flat).data) const_ok = const_ok && v == 0.0;
    const Image flatf(9, 11, 3, static_cast<float>(level));
    for (float v : gradient_view(flatf).data) const_ok = const_ok && v == 0.0f;
  }
  // Luminance equal to the column index: all channels set to u.
  T3 ramp(7, 9, 3);
  Image rampf(7, 9, 3);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x)
      for (int c = 0; c < 3; ++c) {
        ramp.at(y, x, c) = x;
        rampf.at(y, x, c) = static_cast<float>(x);
      }
  const T3 g = gradient_view(ramp);
  const Image gf = gradient_view(rampf);
  for (int y = 1; y < 6; ++y)
    for (int x = 1; x < 8; ++x) {
      ramp_ok = ramp_ok && g.at(y, x) == 8.0 && gf.at(y, x) == 8.0f;
      ramp_worst = std::max({ramp_worst, std::abs(g.at(y, x) - 8.0), std::abs(double(gf.at(y, x)) - 8.0)});
    }
  return {const_ok && ramp_ok, fmt("constant image %s, ramp interior max |g-8| = %.1e",
                                   const_ok ? "gives 0 exactly" : "NONZERO", ramp_worst)};
}

// ---------------------------------------------------------------------------

Outcome criterion_ensemble() {
  const auto cfg = tiny_field();
  auto a = TensorialField<float>::init(cfg, 11);
  auto b = TensorialField<float>::init(cfg, 12);
  for (auto* f : {&a, &b})
    for (int m = 0; m < 3; ++m) {
      for (auto& v : f->params().density_planes[m]) v *= 20;
      for (auto& v : f->params().app_planes[m]) v *= 5;
    }
  RenderSettings rs;
  rs.samples = 64;
  const CameraPose pose = test_pose(16);
  const std::uint64_t seed = 5;

  const EnsembleField<float> one({snapshot(a, 1)});
  const EnsembleField<float> same({snapshot(a, 1), snapshot(a, 2), snapshot(a, 3)});
  const auto ref = render_image(a, pose, 2, cfg.near, cfg.far, rs, 4096, &seed);
  bool bits = true;
  for (const RadianceField<float>* e : {static_cast<const RadianceField<float>*>(&one),
                                        static_cast<const RadianceField<float>*>(&same)}) {
    const auto r = render_image(*e, pose, 2, cfg.near, cfg.far, rs, 4096, &seed);
    bits = bits && r.image.pixels.data.size() == ref.image.pixels.data.size() &&
           std::memcmp(r.image.pixels.data.data(), ref.image.pixels.data.data(),
                       ref.image.pixels.data.size() * sizeof(float)) == 0 &&
           std::memcmp(r.depth.data.data(), ref.depth.data.data(), ref.depth.data.size() * sizeof(float)) == 0;
  }

  // Sample-level mean of a, a, b against the ensemble.
  const auto ad = a.cast<double>(), bd = b.cast<double>();
  const EnsembleField<double> mix({snapshot(ad, 1), snapshot(ad, 2), snapshot(bd, 3)});
  Rng rng(13);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    V3d x;
    for (int k = 0; k < 3; ++k) x[k] = rng.uniform(cfg.bounds.min[k], cfg.bounds.max[k]);
    const V3d d = V3d(rng.normal(), rng.normal(), rng.normal()).normalized();
    const auto qa = ad.query(x, d), qb = bd.query(x, d), qm = mix.query(x, d);
    const double sig = (2 * qa.first + qb.first) / 3;
    worst = std::max(worst, std::abs(qm.first - sig) / std::max(1.0, std::abs(sig)));
    worst = std::max(worst, (qm.second - (2 * qa.second + qb.second) / 3).cwiseAbs().maxCoeff());
  }
  return {bits && worst <= 1e-7,
          fmt("N=1 and identical-snapshot renders %s; mixed ensemble vs mean max %.1e (tol 1e-7)",
              bits ? "bit-identical" : "DIFFER", worst)};
}

// ---------------------------------------------------------------------------
// Desk-scale study shared by the trend and SDM-learning checks.

// Desk profile with halved stage lengths.
struct DeskOptions {
  fs::path work;
  int n1 = 1000, n2 = 2000, n3 = 2000, snapshot_every = 500;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
};

struct SeedResult {
  std::uint64_t seed = 0;
  double coarse = 0, box = 0, sdm = 0, sdm_single = 0;
  double sdm_ratio = 0;
  double seconds = 0;
};

struct DeskStudy {
  std::vector<SeedResult> seeds;
  double seconds = 0;
  TrainConfig cfg;
};

double mean_psnr(const RadianceField<float>& field, const Dataset& refs, const TrainConfig& cfg) {
  RenderSettings rs;
  rs.samples = cfg.samples_fine;
  rs.background = cfg.background;
  rs.weight_threshold = cfg.weight_threshold;
  double sum = 0;
  for (const auto& ref : refs.images)
    sum += psnr(render_image(field, ref.pose, 1, cfg.field.near, cfg.field.far, rs).image.pixels, ref.pixels);
  return sum / refs.images.size();
}

double window_ratio(const std::vector<LossRecord>& losses) {
  const std::size_t w = std::max<std::size_t>(1, losses.size() / 10);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < w; ++i) {
    first += losses[i].total;
    last += losses[losses.size() - 1 - i].total;
  }
  return last / first;
}

const DeskStudy& desk_study(const DeskOptions& o) {
  static std::optional<DeskStudy> cached;
  if (cached) return *cached;
  const auto t0 = Clock::now();
  DeskStudy st;
  const fs::path scene = o.work / "desk_scene";
  SyntheticSceneOptions so;
  so.seed = 7;
  so.n_views = 8;
  so.res = 64;
  generate_synthetic_scene(so, scene);

  st.cfg = TrainConfig::desk(2);
  if (o.n1) st.cfg.n1 = o.n1;
  if (o.n2) st.cfg.n2 = o.n2;
  if (o.n3) st.cfg.n3 = o.n3;
  if (o.snapshot_every) st.cfg.snapshot_every = o.snapshot_every;
  const Dataset ds = load_dataset(scene);
  LoadOptions lo;
  lo.split = "test";
  lo.reference_scale = 2;
  const Dataset refs = load_dataset(scene, lo);
  st.cfg.field.bounds = ds.bounds;
  st.cfg.validate();
  const auto ext = default_extractor<float>(st.cfg.extractor_seed);

  for (std::uint64_t seed : o.seeds) {
    const auto ts = Clock::now();
    SeedResult r;
    r.seed = seed;
    TrainConfig cfg = st.cfg;
    cfg.seed = seed;
    const auto coarse = train_coarse(TensorialField<float>::init(cfg.field, seed), ds.images, cfg);
    r.coarse = mean_psnr(coarse.field, refs, cfg);
    const auto sdm = train_sdm(coarse.field, ds.images, cfg);
    r.sdm_ratio = window_ratio(sdm.losses);
    const auto fine = train_fine(coarse.field, &sdm.net, ds.images, cfg, *ext);
    r.sdm = mean_psnr(fine.ensemble, refs, cfg);
    r.sdm_single = mean_psnr(fine.field, refs, cfg);
    TrainConfig box = cfg;
    box.supervision = Supervision::kBoxAverage;
    box.lambda = 0;
    const auto fine_box = train_fine(coarse.field, nullptr, ds.images, box, *ext);
    r.box = mean_psnr(fine_box.field, refs, box);
    r.seconds = seconds_since(ts);
    std::printf("  desk seed %llu: coarse %.3f dB, box %.3f dB, sdm %.3f dB (last snapshot alone %.3f dB), "
                "sdm loss ratio %.3f (%.0f s)\n",
                static_cast<unsigned long long>(seed), r.coarse, r.box, r.sdm, r.sdm_single, r.sdm_ratio,
                r.seconds);
    std::fflush(stdout);
    st.seeds.push_back(r);
  }
  st.seconds = seconds_since(t0);
  cached = std::move(st);
  return *cached;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Outcome criterion_trend(const DeskOptions& o) {
  const DeskStudy& st = desk_study(o);
  std::vector<double> c, b, s;
  for (const auto& r : st.seeds) {
    c.push_back(r.coarse);
    b.push_back(r.box);
    s.push_back(r.sdm);
  }
  const double mc = median(c), mb = median(b), ms = median(s);
  const bool pass = ms >= mb + 0.1 && mb >= mc + 0.3 && st.seconds < 45 * 60;
  return {pass, fmt("median PSNR sdm %.3f, box %.3f, coarse %.3f dB; sdm-box %+.3f (need >= 0.1), "
                    "box-coarse %+.3f (need >= 0.3); N1 %d N2 %d N3 %d; %.0f s (limit 2700 s)",
                    ms, mb, mc, ms - mb, mb - mc, st.cfg.n1, st.cfg.n2, st.cfg.n3, st.seconds)};
}

Outcome criterion_sdm_learning(const DeskOptions& o) {
  const DeskStudy& st = desk_study(o);
  bool pass = !st.seeds.empty();
  std::string ratios;
  for (const auto& r : st.seeds) {
    pass = pass && r.sdm_ratio <= 0.5;
    ratios += fmt("%s%.3f", ratios.empty() ? "" : ", ", r.sdm_ratio);
  }
  return {pass, fmt("final/first 10%% SDM loss ratio per seed: %s (need <= 0.5); N3 %d", ratios.c_str(), st.cfg.n3)};
}

// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bits(const RenderedImage& a, const RenderedImage& b) {
  auto eq = [](const Tensor3<float>& x, const Tensor3<float>& y) {
    return x.same_shape(y) && std::memcmp(x.data.data(), y.data.data(), x.data.size() * sizeof(float)) == 0;
  };
  return eq(a.image.pixels, b.image.pixels) && eq(a.depth, b.depth) && eq(a.opacity, b.opacity);
}

Outcome criterion_reproducibility(const fs::path& work) {
  const fs::path cfg_path = work / "repro.json";
  {
    std::ofstream out(cfg_path);
    out << R"({"n1": 150, "n2": 60, "n3": 150, "snapshot_every": 20})";
  }
  const fs::path scene = work / "repro_scene";
  if (cli::run({"generate", "-q", "--out", (work / "repro_gen").string(), "--dataset", scene.string()}) != 0)
    return {false, "scene generation failed"};
  for (const char* run : {"repro_a", "repro_b"}) {
    const int rc = cli::run({"pipeline", "-q", "--out", (work / run).string(), "--dataset", scene.string(),
                             "--config", cfg_path.string(), "--seed", "7"});
    if (rc != 0) return {false, fmt("pipeline exited with %d", rc)};
  }
  int files = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(work / "repro_a")) {
    if (e.path().extension() != ".ckpt") continue;
    ++files;
    const fs::path other = work / "repro_b" / fs::relative(e.path(), work / "repro_a");
    if (!fs::exists(other) || slurp(e.path()) != slurp(other)) ++differing;
  }

  // In-memory field -> checkpoint -> loaded field must render the same bits.
  const Checkpoint loaded_ckpt = Checkpoint::load(work / "repro_a" / "fine.ckpt");
  const TensorialField<float> fine = field_from_checkpoint(loaded_ckpt);
  const fs::path resaved = work / "resaved.ckpt";
  field_to_checkpoint(fine, loaded_ckpt.meta.value("step", 0), loaded_ckpt.meta).save(resaved);
  const TensorialField<float> again = field_from_checkpoint(Checkpoint::load(resaved));
  const Dataset ds = load_dataset(scene);
  RenderSettings rs;
  rs.samples = 128;
  bool render_same = true;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto r1 = render_image(fine, ds.images[i].pose, 2, fine.config().near, fine.config().far, rs);
    const auto r2 = render_image(again, ds.images[i].pose, 2, again.config().near, again.config().far, rs);
    render_same = render_same && same_bits(r1, r2);
  }
  auto field = TensorialField<float>::init(tiny_field(), 21);
  for (int m = 0; m < 3; ++m)
    for (auto& v : field.params().density_planes[m]) v *= 20;
  const fs::path mem = work / "memory.ckpt";
  field_to_checkpoint(field, 0).save(mem);
  const auto reloaded = field_from_checkpoint(Checkpoint::load(mem));
  const auto m1 = render_image(field, test_pose(16), 2, field.config().near, field.config().far, rs);
  const auto m2 = render_image(reloaded, test_pose(16), 2, reloaded.config().near, reloaded.config().far, rs);
  render_same = render_same && same_bits(m1, m2);
  const bool resave_same = slurp(resaved) == slurp(work / "repro_a" / "fine.ckpt");

  return {files >= 4 && differing == 0 && render_same && resave_same,
          fmt("%d checkpoints compared across two pipeline runs, %d differ; save-load-render %s; "
              "re-saved checkpoint %s",
              files, differing, render_same ? "bit-identical" : "DIFFERS",
              resave_same ? "byte-identical" : "DIFFERS")};
}

// ---------------------------------------------------------------------------

Outcome criterion_constants(const fs::path& work) {
  struct Expect {
    const char* profile;
    int scale, n1, n2, n3, patch, batches;
  };
  const Expect table[] = {{"blender", 2, 5000, 25000, 10000, 16, 32},
                          {"blender", 4, 5000, 25000, 10000, 32, 8},
                          {"llff", 2, 10000, 20000, 10000, 16, 32},
                          {"llff", 4, 10000, 20000, 10000, 32, 8}};
  const fs::path empty = work / "constants";
  fs::create_directories(empty);
  std::vector<std::string> bad;
  for (const auto& e : table) {
    cli::Options o;
    o.profile = e.profile;
    o.scale = e.scale;
    const TrainConfig c = cli::resolve_config(o, empty);
    const std::string tag = fmt("%s x%d", e.profile, e.scale);
    auto want = [&](bool ok, const char* what) {
      if (!ok) bad.push_back(tag + " " + what);
    };
    want(c.lambda == 0.03, "lambda");
    want(c.n1 == e.n1, "N1");
    want(c.n2 == e.n2, "N2");
    want(c.n3 == e.n3, "N3");
    want(c.patch_p == e.patch, "patch");
    want(c.batch_patches == e.batches, "patch batch");
    want(c.lr_grid == 0.02, "grid lr");
    want(c.lr_decoder == 0.001, "decoder lr");
    want(c.batch_rays == 4096, "coarse ray batch");
    want(c.fine_ray_budget == 8192, "fine ray batch");
  }
  std::string list;
  for (const auto& s : bad) list += (list.empty() ? "" : ", ") + s;
  return {bad.empty(), bad.empty() ? "lambda 0.03, N1 5000/10000, N2 25000/20000, N3 10000, patch 16/32, "
                                     "batches 32/8, lr 0.02/0.001, rays 4096/8192 all match"
                                   : "mismatch: " + list};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks", "zssrt_acceptance"};
  std::string only;
  DeskOptions desk;
  std::string work;
  app.add_option("--only", only, "Comma-separated criterion numbers to run");
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--n1", desk.n1, "Coarse steps for the desk study");
  app.add_option("--n2", desk.n2, "Fine steps for the desk study");
  app.add_option("--n3", desk.n3, "SDM steps for the desk study");
  app.add_option("--snapshot-every", desk.snapshot_every, "Snapshot spacing for the desk study");
  app.add_option("--seeds", desk.seeds, "Training seeds for the desk study");
  CLI11_PARSE(app, argc, argv);

  desk.work = work.empty() ? fs::temp_directory_path() / ("zssrt_acceptance_" + std::to_string(::getpid()))
                           : fs::path(work);
  fs::remove_all(desk.work);
  fs::create_directories(desk.work);

  std::set<int> selected;
  {
    std::stringstream ss(only);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) selected.insert(std::stoi(tok));
  }

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient oracles", criterion_gradients},
      {"convolution oracle", criterion_convolution},
      {"compositing oracle", criterion_compositing},
      {"sobel checks", criterion_sobel},
      {"ensemble identities", criterion_ensemble},
      {"desk-scale trend", [&] { return criterion_trend(desk); }},
      {"sdm internal learning", [&] { return criterion_sdm_learning(desk); }},
      {"reproducibility and persistence", [&] { return criterion_reproducibility(desk.work); }},
      {"published-constant fidelity", [&] { return criterion_constants(desk.work); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %-32s %s  %s\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(desk.work);
  return failed ? 1 : 0;
}
