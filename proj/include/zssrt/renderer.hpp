#pragma once

#include <span>
#include <vector>

#include "zssrt/field.hpp"
#include "zssrt/rng.hpp"
#include "zssrt/scenekit.hpp"

namespace zssrt {

struct RaySamplePack {
  std::vector<Vec3d> positions;
  std::vector<double> depths;
  std::vector<double> deltas;
  std::vector<unsigned char> valid;  // inside scene bounds
};

// K depths in [near, far]: stratum midpoints when rng is null, otherwise one
// uniform draw per stratum. delta_i = t_{i+1} - t_i, last delta = (far-near)/K.
RaySamplePack stratified_samples(const Ray& ray, double near, double far, int k, Rng* rng,
                                 const Aabb& bounds);

template <typename Real>
struct CompositeResult {
  Real rgb[3] = {0, 0, 0};
  Real opacity = 0;
  Real depth = 0;
};

inline constexpr double kDepthEpsilon = 1e-8;

// Alpha compositing of K samples (colors: 3 per sample) over a background.
// weights/transmittance receive per-sample w_i and tau_i when non-empty.
template <typename Real>
CompositeResult<Real> composite(std::span<const Real> sigmas, std::span<const Real> colors,
                                std::span<const Real> deltas, std::span<const Real> depths,
                                const Real background[3], std::span<Real> weights = {},
                                std::span<Real> transmittance = {});

// Gradients of composite() w.r.t. sigmas and colors given upstream gradients
// on rgb and opacity.
template <typename Real>
void composite_backward(std::span<const Real> sigmas, std::span<const Real> colors,
                        std::span<const Real> deltas, const Real background[3],
                        const Real d_rgb[3], Real d_opacity, std::span<Real> d_sigmas,
                        std::span<Real> d_colors);

struct RenderSettings {
  int samples = 128;
  Vec3d background = Vec3d::Ones();
  // Appearance is evaluated only where the compositing weight exceeds this.
  double weight_threshold = 1e-4;
};

template <typename Real>
struct RenderResult {
  std::vector<Real> rgb;  // N x 3
  std::vector<Real> opacity;
  std::vector<Real> depth;
};

template <typename Real>
struct RenderTape {
  using Vec3 = Eigen::Matrix<Real, 3, 1>;
  std::vector<std::size_t> ray_begin;  // sample range per ray, size N+1
  std::vector<Vec3> positions;
  std::vector<Vec3> directions;
  std::vector<Real> deltas;
  std::vector<Real> depths;
  std::vector<Real> sigmas;
  std::vector<Real> colors;      // 3 per sample, zero where not evaluated
  std::vector<int> color_slot;   // index into the appearance batch or -1
  std::vector<unsigned char> valid;
  AppearanceTape<Real> appearance;
  std::vector<Vec3> kept_positions;
  std::vector<Vec3> kept_directions;
  Vec3 background = Vec3::Ones();
};

// Forward rendering of any radiance field.
template <typename Real>
RenderResult<Real> render_rays(const RadianceField<Real>& field, std::span<const Ray> rays,
                               double near, double far, const RenderSettings& settings,
                               Rng* rng);

// Differentiable rendering of a tensorial field; `tape` keeps what
// render_backward needs.
template <typename Real>
RenderResult<Real> render_rays(const TensorialField<Real>& field, std::span<const Ray> rays,
                               const RenderSettings& settings, Rng* rng, RenderTape<Real>& tape);

template <typename Real>
void render_backward(const TensorialField<Real>& field, const RenderTape<Real>& tape,
                     std::span<const Real> d_rgb, FieldParams<Real>& grad);

template <typename Real>
struct RenderedPatch {
  Tensor3<Real> rgb;      // q x q x 3, q = s*p
  Tensor3<Real> opacity;  // q x q x 1
  Tensor3<Real> depth;    // q x q x 1
};

template <typename Real>
RenderedPatch<Real> to_patch(const RenderResult<Real>& r, int q);

template <typename Real>
RenderedPatch<Real> render_patch(const RadianceField<Real>& field, const PatchBundle& bundle,
                                 double near, double far, const RenderSettings& settings,
                                 Rng* rng = nullptr);

struct RenderedImage {
  PosedImage image;
  Tensor3<float> depth;
  Tensor3<float> opacity;
};

// Chunked full-frame render at (s*H) x (s*W). With a seed, each ray gets its
// own jitter stream keyed by its pixel index.
RenderedImage render_image(const RadianceField<float>& field, const CameraPose& pose, int s,
                           double near, double far, const RenderSettings& settings,
                           int chunk = 4096, const std::uint64_t* jitter_seed = nullptr);

// Per-image H x W x 1 accumulated-opacity maps used for patch masks.
std::vector<Tensor3<float>> opacity_maps(const RadianceField<float>& field,
                                         const std::vector<PosedImage>& images, double near,
                                         double far, const RenderSettings& settings);

// Volumetric stand-in for an analytic scene: constant density inside
// primitives, shaded albedo as color.
template <typename Real>
class AnalyticField : public RadianceField<Real> {
 public:
  using Vec3 = typename RadianceField<Real>::Vec3;

  AnalyticField(const AnalyticScene& scene, Aabb bounds, double density = 2000.0)
      : scene_(scene), bounds_(bounds), density_(density) {}

  const Aabb& bounds() const override { return bounds_; }
  void density(std::span<const Vec3> x, std::span<Real> sigma) const override;
  void color(std::span<const Vec3> x, std::span<const Vec3> d,
             std::span<Real> rgb) const override;

 private:
  const AnalyticScene& scene_;
  Aabb bounds_;
  double density_;
};

}  // namespace zssrt
