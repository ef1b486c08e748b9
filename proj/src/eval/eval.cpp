#include "zssrt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "json.hpp"
#include "zssrt/png_io.hpp"

namespace zssrt {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shapes differ (" + a.shape_string() + " vs " +
                     b.shape_string() + ")");
}

std::vector<double> luminance_plane(const Image& img) {
  std::vector<double> out(std::size_t(img.height) * img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const std::size_t i = std::size_t(y) * img.width + x;
      if (img.channels >= 3)
        out[i] = luminance(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
      else
        out[i] = img.at(y, x, 0);
    }
  return out;
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  double sum = 0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    g[i] = std::exp(-d * d / (2 * sigma * sigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

// Separable valid-mode filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& src, int h, int w,
                                 const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  const int oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(std::size_t(h) * ow), out(std::size_t(oh) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < k; ++i) acc += g[i] * src[std::size_t(y) * w + x + i];
      tmp[std::size_t(y) * ow + x] = acc;
    }
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < k; ++i) acc += g[i] * tmp[std::size_t(y + i) * ow + x];
      out[std::size_t(y) * ow + x] = acc;
    }
  return out;
}

std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

nlohmann::json metric_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

void fill_rect(Image& img, int x0, int y0, int x1, int y1, const Vec3d& c) {
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, img.width);
  y1 = std::min(y1, img.height);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = static_cast<float>(c[ch]);
}

void draw_line(Image& img, double xa, double ya, double xb, double yb, const Vec3d& c) {
  const int steps = static_cast<int>(std::ceil(std::max(std::abs(xb - xa), std::abs(yb - ya)))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = double(i) / steps;
    const int x = static_cast<int>(std::lround(xa + t * (xb - xa)));
    const int y = static_cast<int>(std::lround(ya + t * (yb - ya)));
    fill_rect(img, x, y, x + 1, y + 2, c);
  }
}

// Top panel: log10 of the total loss per stage. Bottom panel: per-view PSNR.
Image summary_plot(const MetricReport& report, const std::vector<LossRecord>* losses) {
  constexpr int kW = 512, kH = 320, kPanel = 150, kMargin = 8;
  Image img(kH, kW, 3, 1.0f);
  const Vec3d frame(0.8, 0.8, 0.8);
  fill_rect(img, kMargin, kMargin, kW - kMargin, kMargin + 1, frame);
  fill_rect(img, kMargin, kMargin + kPanel, kW - kMargin, kMargin + kPanel + 1, frame);

  if (losses && !losses->empty()) {
    std::map<std::string, std::vector<const LossRecord*>> by_stage;
    std::vector<std::string> order;
    for (const auto& r : *losses) {
      if (!by_stage.count(r.stage)) order.push_back(r.stage);
      by_stage[r.stage].push_back(&r);
    }
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& r : *losses)
      if (r.total > 0 && std::isfinite(r.total)) {
        lo = std::min(lo, std::log10(r.total));
        hi = std::max(hi, std::log10(r.total));
      }
    if (hi <= lo) hi = lo + 1;
    const Vec3d palette[] = {{0.15, 0.35, 0.75}, {0.8, 0.35, 0.1}, {0.15, 0.6, 0.25},
                             {0.55, 0.2, 0.6}};
    const double seg = double(kW - 2 * kMargin) / order.size();
    for (std::size_t s = 0; s < order.size(); ++s) {
      const auto& recs = by_stage[order[s]];
      const int max_step = std::max(1, recs.back()->step);
      double px = -1, py = -1;
      for (const auto* r : recs) {
        if (!(r->total > 0) || !std::isfinite(r->total)) continue;
        const double x = kMargin + s * seg + seg * r->step / max_step;
        const double y = kMargin + 4 + (kPanel - 8) * (hi - std::log10(r->total)) / (hi - lo);
        if (px >= 0) draw_line(img, px, py, x, y, palette[s % 4]);
        px = x;
        py = y;
      }
    }
  }

  const int n = static_cast<int>(report.views.size());
  double top = 0;
  for (const auto& v : report.views)
    if (std::isfinite(v.psnr_db)) top = std::max(top, v.psnr_db);
  top = std::max(top, 1.0);
  const int base = kH - kMargin;
  const int avail = kH - 2 * kMargin - kPanel - 8;
  const double bw = double(kW - 2 * kMargin) / std::max(n, 1);
  for (int i = 0; i < n; ++i) {
    const double p = std::isfinite(report.views[i].psnr_db) ? report.views[i].psnr_db : top;
    const int h = static_cast<int>(std::lround(avail * std::max(p, 0.0) / top));
    const int x0 = static_cast<int>(kMargin + i * bw + 1);
    const int x1 = static_cast<int>(kMargin + (i + 1) * bw - 1);
    fill_rect(img, x0, base - h, std::max(x1, x0 + 1), base, Vec3d(0.3, 0.45, 0.7));
  }
  const int mean_y = base - static_cast<int>(std::lround(avail * std::max(report.mean_psnr, 0.0) / top));
  if (std::isfinite(report.mean_psnr))
    fill_rect(img, kMargin, mean_y, kW - kMargin, mean_y + 1, Vec3d(0.85, 0.1, 0.1));
  return img;
}

}  // namespace

double luminance(float r, float g, float b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  if (a.data.empty()) throw ShapeError("psnr: empty images");
  double se = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    se += d * d;
  }
  const double mse = se / a.data.size();
  if (mse == 0.0) return kPsnrInfinity;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  constexpr int kWin = 11;
  if (std::min(a.height, a.width) < kWin)
    throw ShapeError("ssim: images must be at least 11x11, got " + a.shape_string());
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto g = gaussian_window(kWin, 1.5);
  const auto la = luminance_plane(a), lb = luminance_plane(b);
  const int h = a.height, w = a.width;
  std::vector<double> aa(la.size()), bb(la.size()), ab(la.size());
  for (std::size_t i = 0; i < la.size(); ++i) {
    aa[i] = la[i] * la[i];
    bb[i] = lb[i] * lb[i];
    ab[i] = la[i] * lb[i];
  }
  const auto mu_a = filter_valid(la, h, w, g), mu_b = filter_valid(lb, h, w, g);
  const auto e_aa = filter_valid(aa, h, w, g), e_bb = filter_valid(bb, h, w, g),
             e_ab = filter_valid(ab, h, w, g);
  double sum = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = e_aa[i] - mu_a[i] * mu_a[i];
    const double vb = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    sum += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
           ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
  }
  return sum / mu_a.size();
}

ProbeResult consistency_probe(const RadianceField<float>& field,
                              const std::vector<CameraPose>& poses,
                              const std::vector<Vec3d>& points, double near, double far,
                              const RenderSettings& settings) {
  if (poses.size() < 2) throw ConfigError("consistency_probe: at least two poses are required");
  ProbeResult res;
  res.variance.assign(points.size(), std::numeric_limits<double>::quiet_NaN());
  res.views_used.assign(points.size(), 0);
  double total = 0;
  int counted = 0;
  for (std::size_t p = 0; p < points.size(); ++p) {
    std::vector<Ray> rays;
    for (const auto& pose : poses) {
      const auto uv = project_point(pose, points[p]);
      if (!uv) continue;
      const double u = std::floor((*uv)[0]), v = std::floor((*uv)[1]);
      if (u < 0 || v < 0 || u >= pose.width || v >= pose.height) continue;
      rays.push_back(ray_through(pose, u + 0.5, v + 0.5));
    }
    std::vector<Vec3d> colors;
    if (!rays.empty()) {
      const auto r = render_rays(field, std::span<const Ray>(rays), near, far, settings, nullptr);
      for (std::size_t i = 0; i < rays.size(); ++i)
        if (r.opacity[i] >= 0.5f)
          colors.emplace_back(r.rgb[3 * i], r.rgb[3 * i + 1], r.rgb[3 * i + 2]);
    }
    res.views_used[p] = static_cast<int>(colors.size());
    if (colors.size() < 2) {
      ++res.skipped;
      continue;
    }
    Vec3d mean = Vec3d::Zero();
    for (const auto& c : colors) mean += c;
    mean /= double(colors.size());
    double var = 0;
    for (const auto& c : colors) var += (c - mean).squaredNorm();
    var /= 3.0 * colors.size();
    res.variance[p] = var;
    total += var;
    ++counted;
  }
  res.mean_variance = counted > 0 ? total / counted : std::numeric_limits<double>::quiet_NaN();
  return res;
}

MetricReport make_report(std::vector<ViewMetric> views, double runtime_seconds,
                         std::string config_digest) {
  if (views.empty()) throw ConfigError("make_report: no per-view metrics");
  MetricReport r;
  r.views = std::move(views);
  double sp = 0, ss = 0;
  for (const auto& v : r.views) {
    sp += v.psnr_db;
    ss += v.ssim;
  }
  r.mean_psnr = sp / r.views.size();
  r.mean_ssim = ss / r.views.size();
  r.runtime_seconds = runtime_seconds;
  r.config_digest = std::move(config_digest);
  return r;
}

void emit_report(const MetricReport& report, const std::vector<LossRecord>* losses,
                 const std::filesystem::path& out_dir) {
  if (report.views.empty()) throw ConfigError("emit_report: no per-view metrics");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("emit_report: cannot create " + out_dir.string() + ": " + ec.message());

  {
    std::ofstream csv(out_dir / "metrics.csv", std::ios::binary);
    if (!csv) throw IoError("emit_report: cannot write " + (out_dir / "metrics.csv").string());
    csv << "view_id,psnr_db,ssim\n";
    for (const auto& v : report.views)
      csv << v.view_id << ',' << format_metric(v.psnr_db) << ',' << format_metric(v.ssim) << '\n';
    if (!csv) throw IoError("emit_report: write failed for metrics.csv");
  }

  nlohmann::json j;
  j["n_views"] = report.views.size();
  j["mean_psnr_db"] = metric_json(report.mean_psnr);
  j["mean_ssim"] = metric_json(report.mean_ssim);
  j["runtime_seconds"] = report.runtime_seconds;
  j["config_digest"] = report.config_digest;
  j["lpips"] = "not computed (requires a pretrained network)";
  {
    std::ofstream js(out_dir / "summary.json", std::ios::binary);
    if (!js) throw IoError("emit_report: cannot write " + (out_dir / "summary.json").string());
    js << j.dump(2) << '\n';
    if (!js) throw IoError("emit_report: write failed for summary.json");
  }
  write_png(out_dir / "summary.png", summary_plot(report, losses));
}

}  // namespace zssrt
