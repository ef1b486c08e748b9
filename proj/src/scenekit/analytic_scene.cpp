#include <cmath>

#include "zssrt/scenekit.hpp"

namespace zssrt {
namespace {

Vec3d random_color(Rng& rng) {
  // Saturated colors: one dominant channel, others attenuated.
  Vec3d c(rng.uniform(0.15, 0.55), rng.uniform(0.15, 0.55), rng.uniform(0.15, 0.55));
  c[rng.uniform_int(3)] = rng.uniform(0.75, 0.95);
  return c;
}

Vec3d random_point(Rng& rng, double lo, double hi) {
  return Vec3d(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi));
}

}  // namespace

std::optional<std::pair<double, Vec3d>> Primitive::hit(const Ray& ray) const {
  if (kind == Kind::kSphere) {
    const Vec3d oc = ray.origin - center;
    const double b = oc.dot(ray.direction);
    const double c = oc.squaredNorm() - radius * radius;
    const double disc = b * b - c;
    if (disc < 0) return std::nullopt;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t <= 1e-9) t = -b + sq;
    if (t <= 1e-9) return std::nullopt;
    const Vec3d p = ray.origin + t * ray.direction;
    return std::make_pair(t, Vec3d((p - center) / radius));
  }
  Aabb box{center - half_extent, center + half_extent};
  auto span = box.intersect(ray);
  if (!span) return std::nullopt;
  double t = span->first;
  if (t <= 1e-9) t = span->second;
  if (t <= 1e-9) return std::nullopt;
  const Vec3d p = ray.origin + t * ray.direction;
  return std::make_pair(t, outward_normal(p));
}

bool Primitive::inside(const Vec3d& p) const {
  if (kind == Kind::kSphere) return (p - center).squaredNorm() <= radius * radius;
  return ((p - center).cwiseAbs().array() <= half_extent.array()).all();
}

Vec3d Primitive::outward_normal(const Vec3d& p) const {
  if (kind == Kind::kSphere) {
    const Vec3d d = p - center;
    const double n = d.norm();
    return n > 0 ? Vec3d(d / n) : Vec3d::UnitZ();
  }
  // Face whose plane is nearest to p.
  const Vec3d local = p - center;
  int axis = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double gap = half_extent[a] - std::abs(local[a]);
    if (gap < best) {
      best = gap;
      axis = a;
    }
  }
  Vec3d n = Vec3d::Zero();
  n[axis] = local[axis] >= 0 ? 1.0 : -1.0;
  return n;
}

AnalyticScene AnalyticScene::procedural(std::uint64_t seed) {
  Rng rng(splitmix64(seed));
  std::vector<Primitive> prims;

  // Ground slab (z-up world).
  Primitive ground;
  ground.kind = Primitive::Kind::kBox;
  ground.center = Vec3d(0, 0, -0.95);
  ground.half_extent = Vec3d(1.05, 1.05, 0.08);
  ground.albedo = Vec3d(0.85, 0.85, 0.8);
  ground.albedo_alt = Vec3d(0.25, 0.25, 0.3);
  ground.checker_period = 0.25;
  prims.push_back(ground);

  const int n_boxes = 3 + static_cast<int>(rng.uniform_int(2));
  for (int i = 0; i < n_boxes; ++i) {
    Primitive b;
    b.kind = Primitive::Kind::kBox;
    b.half_extent = Vec3d(rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.4), rng.uniform(0.15, 0.4));
    b.center = random_point(rng, -0.6, 0.6);
    b.center.z() = -0.87 + b.half_extent.z() + rng.uniform(0.0, 0.6);
    b.albedo = random_color(rng);
    b.albedo_alt = b.albedo * 0.35;
    b.checker_period = rng.uniform() < 0.6 ? rng.uniform(0.08, 0.18) : 0.0;
    prims.push_back(b);
  }
  const int n_spheres = 2 + static_cast<int>(rng.uniform_int(2));
  for (int i = 0; i < n_spheres; ++i) {
    Primitive s;
    s.kind = Primitive::Kind::kSphere;
    s.radius = rng.uniform(0.18, 0.38);
    s.center = random_point(rng, -0.6, 0.6);
    s.center.z() = rng.uniform(-0.87 + s.radius, 0.5);
    s.albedo = random_color(rng);
    s.albedo_alt = Vec3d::Constant(0.95);
    s.checker_period = rng.uniform() < 0.5 ? rng.uniform(0.1, 0.2) : 0.0;
    prims.push_back(s);
  }
  return AnalyticScene(std::move(prims));
}

std::optional<SurfaceHit> AnalyticScene::trace(const Ray& ray) const {
  std::optional<SurfaceHit> best;
  for (const auto& prim : prims_) {
    auto h = prim.hit(ray);
    if (!h || (best && h->first >= best->t)) continue;
    const Vec3d p = ray.origin + h->first * ray.direction;
    best = SurfaceHit{h->first, shade(prim, p, h->second)};
  }
  return best;
}

int AnalyticScene::inside(const Vec3d& p) const {
  for (std::size_t i = 0; i < prims_.size(); ++i)
    if (prims_[i].inside(p)) return static_cast<int>(i);
  return -1;
}

Vec3d AnalyticScene::shade(const Primitive& prim, const Vec3d& p, const Vec3d& normal) const {
  Vec3d albedo = prim.albedo;
  if (prim.checker_period > 0) {
    const long parity = static_cast<long>(std::floor(p.x() / prim.checker_period)) +
                        static_cast<long>(std::floor(p.y() / prim.checker_period)) +
                        static_cast<long>(std::floor(p.z() / prim.checker_period));
    if (parity & 1) albedo = prim.albedo_alt;
  }
  const double lambert = std::max(0.0, normal.dot(light_));
  return (albedo * (ambient_ + (1.0 - ambient_) * lambert)).cwiseMin(1.0).cwiseMax(0.0);
}

Tensor3<float> render_analytic_rgba(const AnalyticScene& scene, const CameraPose& pose,
                                    int supersample) {
  if (supersample < 1) throw ConfigError("render_analytic_rgba: supersample must be >= 1");
  Tensor3<float> out(pose.height, pose.width, 4);
  const double inv = 1.0 / supersample;
  for (int y = 0; y < pose.height; ++y)
    for (int x = 0; x < pose.width; ++x) {
      Vec3d sum = Vec3d::Zero();
      int hits = 0;
      for (int sy = 0; sy < supersample; ++sy)
        for (int sx = 0; sx < supersample; ++sx) {
          const Ray r = ray_through(pose, x + (sx + 0.5) * inv, y + (sy + 0.5) * inv);
          if (auto h = scene.trace(r)) {
            sum += h->rgb;
            ++hits;
          }
        }
      const double n = double(supersample) * supersample;
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = hits ? static_cast<float>(sum[c] / hits) : 0.0f;
      out.at(y, x, 3) = static_cast<float>(hits / n);
    }
  return out;
}

Image composite_over(const Tensor3<float>& rgba, const Vec3d& background) {
  Image out(rgba.height, rgba.width, 3);
  for (int y = 0; y < rgba.height; ++y)
    for (int x = 0; x < rgba.width; ++x) {
      const float a = rgba.channels == 4 ? rgba.at(y, x, 3) : 1.0f;
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = rgba.at(y, x, c) * a + static_cast<float>(background[c]) * (1.0f - a);
    }
  return out;
}

}  // namespace zssrt
