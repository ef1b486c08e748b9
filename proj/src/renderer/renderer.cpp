#include "zssrt/renderer.hpp"

#include <cmath>

#include "zssrt/errors.hpp"

namespace zssrt {

RaySamplePack stratified_samples(const Ray& ray, double near, double far, int k, Rng* rng,
                                 const Aabb& bounds) {
  if (!(near < far)) throw ConfigError("stratified_samples: near must be < far");
  if (k < 2) throw ConfigError("stratified_samples: need at least 2 samples");
  RaySamplePack pack;
  pack.positions.resize(k);
  pack.depths.resize(k);
  pack.deltas.resize(k);
  pack.valid.resize(k);
  const double step = (far - near) / k;
  for (int i = 0; i < k; ++i) {
    const double jitter = rng ? rng->uniform() : 0.5;
    pack.depths[i] = near + (i + jitter) * step;
  }
  for (int i = 0; i < k; ++i) {
    pack.deltas[i] = i + 1 < k ? pack.depths[i + 1] - pack.depths[i] : step;
    pack.positions[i] = ray.origin + pack.depths[i] * ray.direction;
    pack.valid[i] = bounds.contains(pack.positions[i]) ? 1 : 0;
  }
  return pack;
}

template <typename Real>
CompositeResult<Real> composite(std::span<const Real> sigmas, std::span<const Real> colors,
                                std::span<const Real> deltas, std::span<const Real> depths,
                                const Real background[3], std::span<Real> weights,
                                std::span<Real> transmittance) {
  CompositeResult<Real> r;
  Real trans = 1, depth_acc = 0;
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (sigmas[i] < Real(0)) throw DomainError("composite: negative density");
    const Real e = std::exp(-sigmas[i] * deltas[i]);
    const Real w = trans * (Real(1) - e);
    if (!transmittance.empty()) transmittance[i] = trans;
    if (!weights.empty()) weights[i] = w;
    for (int c = 0; c < 3; ++c) r.rgb[c] += w * colors[3 * i + c];
    r.opacity += w;
    if (!depths.empty()) depth_acc += w * depths[i];
    trans *= e;
  }
  for (int c = 0; c < 3; ++c) r.rgb[c] += (Real(1) - r.opacity) * background[c];
  r.depth = depth_acc / std::max(r.opacity, Real(kDepthEpsilon));
  return r;
}

template <typename Real>
void composite_backward(std::span<const Real> sigmas, std::span<const Real> colors,
                        std::span<const Real> deltas, const Real background[3],
                        const Real d_rgb[3], Real d_opacity, std::span<Real> d_sigmas,
                        std::span<Real> d_colors) {
  const std::size_t k = sigmas.size();
  // e_i: sensitivity of the loss to w_i.
  Real trans = 1, suffix = 0;
  std::vector<Real> w(k), t_next(k), e(k);
  for (std::size_t i = 0; i < k; ++i) {
    const Real ex = std::exp(-sigmas[i] * deltas[i]);
    w[i] = trans * (Real(1) - ex);
    trans *= ex;
    t_next[i] = trans;
    e[i] = d_opacity;
    for (int c = 0; c < 3; ++c) e[i] += d_rgb[c] * (colors[3 * i + c] - background[c]);
  }
  for (std::size_t j = k; j-- > 0;) {
    d_sigmas[j] = deltas[j] * (t_next[j] * e[j] - suffix);
    suffix += w[j] * e[j];
    for (int c = 0; c < 3; ++c) d_colors[3 * j + c] = w[j] * d_rgb[c];
  }
}

namespace {

struct Jitter {
  Rng* shared = nullptr;
  const std::uint64_t* seed = nullptr;
  std::uint64_t key_base = 0;
};

template <typename Real>
void sample_rays(std::span<const Ray> rays, double near, double far, int k, const Aabb& bounds,
                 const Jitter& jitter, RenderTape<Real>& tape) {
  using Vec3 = Eigen::Matrix<Real, 3, 1>;
  tape.ray_begin.assign(1, 0);
  tape.positions.clear();
  tape.directions.clear();
  tape.deltas.clear();
  tape.depths.clear();
  tape.valid.clear();
  for (std::size_t r = 0; r < rays.size(); ++r) {
    const Ray& ray = rays[r];
    const auto hit = bounds.intersect(ray);
    double tn = near, tf = far;
    if (hit) {
      tn = std::max(near, hit->first);
      tf = std::min(far, hit->second);
    }
    if (hit && tn < tf) {
      Rng keyed;
      Rng* rng = jitter.shared;
      if (jitter.seed) {
        keyed = Rng::keyed(*jitter.seed, jitter.key_base + r);
        rng = &keyed;
      }
      const RaySamplePack pack = stratified_samples(ray, tn, tf, k, rng, bounds);
      const Vec3 dir = ray.direction.template cast<Real>();
      for (int i = 0; i < k; ++i) {
        tape.positions.push_back(pack.positions[i].template cast<Real>());
        tape.directions.push_back(dir);
        tape.deltas.push_back(Real(pack.deltas[i]));
        tape.depths.push_back(Real(pack.depths[i]));
        tape.valid.push_back(pack.valid[i]);
      }
    }
    tape.ray_begin.push_back(tape.positions.size());
  }
}

// Marks samples whose compositing weight clears the threshold; their
// positions and directions are gathered for one batched appearance query.
template <typename Real>
void select_kept(const RenderTape<Real>& tape, double threshold, std::vector<int>& slot,
                 std::vector<typename RenderTape<Real>::Vec3>& kx,
                 std::vector<typename RenderTape<Real>::Vec3>& kd) {
  const std::size_t n = tape.positions.size();
  slot.assign(n, -1);
  kx.clear();
  kd.clear();
  for (std::size_t r = 0; r + 1 < tape.ray_begin.size(); ++r) {
    Real trans = 1;
    for (std::size_t i = tape.ray_begin[r]; i < tape.ray_begin[r + 1]; ++i) {
      const Real ex = std::exp(-tape.sigmas[i] * tape.deltas[i]);
      const Real w = trans * (Real(1) - ex);
      trans *= ex;
      if (tape.valid[i] && (threshold <= 0 || w > Real(threshold))) {
        slot[i] = static_cast<int>(kx.size());
        kx.push_back(tape.positions[i]);
        kd.push_back(tape.directions[i]);
      }
    }
  }
}

template <typename Real>
RenderResult<Real> finish(RenderTape<Real>& tape, std::span<const Real> kept_rgb,
                          const RenderSettings& settings) {
  const std::size_t n_rays = tape.ray_begin.size() - 1;
  tape.colors.assign(tape.positions.size() * 3, Real(0));
  for (std::size_t i = 0; i < tape.positions.size(); ++i)
    if (tape.color_slot[i] >= 0)
      for (int c = 0; c < 3; ++c) tape.colors[3 * i + c] = kept_rgb[3 * tape.color_slot[i] + c];
  const Real bg[3] = {Real(settings.background[0]), Real(settings.background[1]),
                      Real(settings.background[2])};
  RenderResult<Real> out;
  out.rgb.resize(n_rays * 3);
  out.opacity.resize(n_rays);
  out.depth.resize(n_rays);
  for (std::size_t r = 0; r < n_rays; ++r) {
    const std::size_t b = tape.ray_begin[r], e = tape.ray_begin[r + 1];
    const auto cr = composite<Real>(std::span<const Real>(tape.sigmas).subspan(b, e - b),
                                    std::span<const Real>(tape.colors).subspan(3 * b, 3 * (e - b)),
                                    std::span<const Real>(tape.deltas).subspan(b, e - b),
                                    std::span<const Real>(tape.depths).subspan(b, e - b), bg);
    for (int c = 0; c < 3; ++c) out.rgb[3 * r + c] = cr.rgb[c];
    out.opacity[r] = cr.opacity;
    out.depth[r] = cr.depth;
  }
  return out;
}

template <typename Real>
RenderResult<Real> render_generic(const RadianceField<Real>& field, std::span<const Ray> rays,
                                  double near, double far, const RenderSettings& settings,
                                  const Jitter& jitter) {
  thread_local RenderTape<Real> tape;
  sample_rays(rays, near, far, settings.samples, field.bounds(), jitter, tape);
  tape.sigmas.resize(tape.positions.size());
  field.density(tape.positions, tape.sigmas);
  select_kept(tape, settings.weight_threshold, tape.color_slot, tape.kept_positions,
              tape.kept_directions);
  std::vector<Real> kept_rgb(tape.kept_positions.size() * 3);
  field.color(tape.kept_positions, tape.kept_directions, kept_rgb);
  return finish<Real>(tape, kept_rgb, settings);
}

}  // namespace

template <typename Real>
RenderResult<Real> render_rays(const RadianceField<Real>& field, std::span<const Ray> rays,
                               double near, double far, const RenderSettings& settings,
                               Rng* rng) {
  return render_generic(field, rays, near, far, settings, Jitter{rng});
}

template <typename Real>
RenderResult<Real> render_rays(const TensorialField<Real>& field, std::span<const Ray> rays,
                               const RenderSettings& settings, Rng* rng, RenderTape<Real>& tape) {
  const FieldConfig& cfg = field.config();
  sample_rays(rays, cfg.near, cfg.far, settings.samples, cfg.bounds, Jitter{rng}, tape);
  tape.sigmas.resize(tape.positions.size());
  field.density(tape.positions, tape.sigmas);
  select_kept(tape, settings.weight_threshold, tape.color_slot, tape.kept_positions,
              tape.kept_directions);
  std::vector<Real> kept_rgb(tape.kept_positions.size() * 3);
  field.color_forward(tape.kept_positions, tape.kept_directions, kept_rgb, tape.appearance);
  tape.background = settings.background.template cast<Real>();
  return finish<Real>(tape, kept_rgb, settings);
}

template <typename Real>
void render_backward(const TensorialField<Real>& field, const RenderTape<Real>& tape,
                     std::span<const Real> d_rgb, FieldParams<Real>& grad) {
  const std::size_t n = tape.positions.size();
  std::vector<Real> d_sigma(n, Real(0)), d_color(3 * n, Real(0));
  const Real bg[3] = {tape.background[0], tape.background[1], tape.background[2]};
  for (std::size_t r = 0; r + 1 < tape.ray_begin.size(); ++r) {
    const std::size_t b = tape.ray_begin[r], e = tape.ray_begin[r + 1];
    if (b == e) continue;
    composite_backward<Real>(std::span<const Real>(tape.sigmas).subspan(b, e - b),
                             std::span<const Real>(tape.colors).subspan(3 * b, 3 * (e - b)),
                             std::span<const Real>(tape.deltas).subspan(b, e - b), bg,
                             &d_rgb[3 * r], Real(0), std::span<Real>(d_sigma).subspan(b, e - b),
                             std::span<Real>(d_color).subspan(3 * b, 3 * (e - b)));
  }
  std::vector<Real> d_kept(tape.kept_positions.size() * 3, Real(0));
  for (std::size_t i = 0; i < n; ++i)
    if (tape.color_slot[i] >= 0)
      for (int c = 0; c < 3; ++c) d_kept[3 * tape.color_slot[i] + c] = d_color[3 * i + c];
  field.color_backward(tape.appearance, d_kept, grad);
  field.density_backward(tape.positions, d_sigma, grad);
}

template <typename Real>
RenderedPatch<Real> to_patch(const RenderResult<Real>& r, int q) {
  if (r.opacity.size() != std::size_t(q) * q)
    throw ShapeError("to_patch: ray count does not match a " + std::to_string(q) + "^2 patch");
  RenderedPatch<Real> p{Tensor3<Real>(q, q, 3), Tensor3<Real>(q, q, 1), Tensor3<Real>(q, q, 1)};
  std::copy(r.rgb.begin(), r.rgb.end(), p.rgb.data.begin());
  std::copy(r.opacity.begin(), r.opacity.end(), p.opacity.data.begin());
  std::copy(r.depth.begin(), r.depth.end(), p.depth.data.begin());
  return p;
}

template <typename Real>
RenderedPatch<Real> render_patch(const RadianceField<Real>& field, const PatchBundle& bundle,
                                 double near, double far, const RenderSettings& settings,
                                 Rng* rng) {
  return to_patch(render_rays(field, std::span<const Ray>(bundle.rays), near, far, settings, rng),
                  bundle.hr_size());
}

RenderedImage render_image(const RadianceField<float>& field, const CameraPose& pose, int s,
                           double near, double far, const RenderSettings& settings, int chunk,
                           const std::uint64_t* jitter_seed) {
  if (chunk < 1) throw ConfigError("render_image: chunk must be >= 1");
  const std::vector<Ray> rays = gen_rays(pose, s);
  const int h = pose.height * s, w = pose.width * s;
  RenderedImage out;
  out.image.pose = pose.scaled(s);
  out.image.level = s > 1 ? LevelTag::kHR : LevelTag::kLR;
  out.image.pixels = Image(h, w, 3);
  out.depth = Tensor3<float>(h, w, 1);
  out.opacity = Tensor3<float>(h, w, 1);
  for (std::size_t b = 0; b < rays.size(); b += chunk) {
    const std::size_t n = std::min<std::size_t>(chunk, rays.size() - b);
    const auto r = render_generic<float>(field, std::span<const Ray>(rays).subspan(b, n), near,
                                         far, settings, Jitter{nullptr, jitter_seed, b});
    std::copy(r.rgb.begin(), r.rgb.end(), out.image.pixels.data.begin() + 3 * b);
    std::copy(r.opacity.begin(), r.opacity.end(), out.opacity.data.begin() + b);
    std::copy(r.depth.begin(), r.depth.end(), out.depth.data.begin() + b);
  }
  return out;
}

std::vector<Tensor3<float>> opacity_maps(const RadianceField<float>& field,
                                         const std::vector<PosedImage>& images, double near,
                                         double far, const RenderSettings& settings) {
  std::vector<Tensor3<float>> maps;
  maps.reserve(images.size());
  for (const auto& img : images)
    maps.push_back(render_image(field, img.pose, 1, near, far, settings).opacity);
  return maps;
}

template <typename Real>
void AnalyticField<Real>::density(std::span<const Vec3> x, std::span<Real> sigma) const {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Vec3d p = x[i].template cast<double>();
    sigma[i] = bounds_.contains(p) && scene_.inside(p) >= 0 ? Real(density_) : Real(0);
  }
}

template <typename Real>
void AnalyticField<Real>::color(std::span<const Vec3> x, std::span<const Vec3>,
                                std::span<Real> rgb) const {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Vec3d p = x[i].template cast<double>();
    const int k = bounds_.contains(p) ? scene_.inside(p) : -1;
    Vec3d c = Vec3d::Zero();
    if (k >= 0) {
      const Primitive& prim = scene_.primitives()[k];
      c = scene_.shade(prim, p, prim.outward_normal(p));
    }
    for (int j = 0; j < 3; ++j) rgb[3 * i + j] = Real(c[j]);
  }
}

#define ZSSRT_RENDER_INSTANTIATE(T)                                                            \
  template CompositeResult<T> composite<T>(std::span<const T>, std::span<const T>,             \
                                           std::span<const T>, std::span<const T>, const T[3], \
                                           std::span<T>, std::span<T>);                         \
  template void composite_backward<T>(std::span<const T>, std::span<const T>,                  \
                                      std::span<const T>, const T[3], const T[3], T,           \
                                      std::span<T>, std::span<T>);                             \
  template RenderResult<T> render_rays<T>(const RadianceField<T>&, std::span<const Ray>,       \
                                          double, double, const RenderSettings&, Rng*);        \
  template RenderResult<T> render_rays<T>(const TensorialField<T>&, std::span<const Ray>,      \
                                          const RenderSettings&, Rng*, RenderTape<T>&);        \
  template void render_backward<T>(const TensorialField<T>&, const RenderTape<T>&,             \
                                   std::span<const T>, FieldParams<T>&);                       \
  template RenderedPatch<T> to_patch<T>(const RenderResult<T>&, int);                          \
  template RenderedPatch<T> render_patch<T>(const RadianceField<T>&, const PatchBundle&,       \
                                            double, double, const RenderSettings&, Rng*);      \
  template class AnalyticField<T>;

ZSSRT_RENDER_INSTANTIATE(float)
ZSSRT_RENDER_INSTANTIATE(double)

}  // namespace zssrt
