#pragma once

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "zssrt/field.hpp"
#include "zssrt/renderer.hpp"
#include "zssrt/scenekit.hpp"
#include "zssrt/trainer.hpp"

namespace zssrt {

inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

// 10 log10(1 / MSE) over all channels; kPsnrInfinity for identical inputs.
double psnr(const Image& a, const Image& b);

// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) of the luminance,
// k1 = 0.01, k2 = 0.03, L = 1.
double ssim(const Image& a, const Image& b);

double luminance(float r, float g, float b);

struct ProbeResult {
  std::vector<double> variance;  // per probe point; NaN when skipped
  std::vector<int> views_used;
  int skipped = 0;
  double mean_variance = 0;      // over points that were not skipped
};

// Projects each point into every pose, renders that pixel and reports the
// across-view RGB variance (mean over channels) among views where the pixel
// ray reaches opacity >= 0.5. Points seen in fewer than two views are skipped.
ProbeResult consistency_probe(const RadianceField<float>& field,
                              const std::vector<CameraPose>& poses,
                              const std::vector<Vec3d>& points, double near, double far,
                              const RenderSettings& settings);

struct ViewMetric {
  int view_id = 0;
  double psnr_db = 0;
  double ssim = 0;
};

struct MetricReport {
  std::vector<ViewMetric> views;
  double mean_psnr = 0;
  double mean_ssim = 0;
  double runtime_seconds = 0;
  std::string config_digest;
};

MetricReport make_report(std::vector<ViewMetric> views, double runtime_seconds,
                         std::string config_digest);

// Writes metrics.csv, summary.json and summary.png (loss curve when losses
// are given, per-view PSNR bars) into out_dir.
void emit_report(const MetricReport& report, const std::vector<LossRecord>* losses,
                 const std::filesystem::path& out_dir);

}  // namespace zssrt
