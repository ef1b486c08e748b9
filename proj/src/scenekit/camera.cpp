#include <cmath>
#include <string>

#include <Eigen/Geometry>

#include "zssrt/scenekit.hpp"

namespace zssrt {

std::optional<std::pair<double, double>> Aabb::intersect(const Ray& ray) const {
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a], d = ray.direction[a];
    if (std::abs(d) < 1e-15) {
      if (o < min[a] || o > max[a]) return std::nullopt;
      continue;
    }
    double ta = (min[a] - o) / d, tb = (max[a] - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1) return std::nullopt;
  return std::make_pair(t0, t1);
}

double CameraPose::focal() const { return 0.5 * width / std::tan(0.5 * fov_x); }

void CameraPose::validate(double tol) const {
  if (width < 8 || height < 8)
    throw ValidationError("camera image must be at least 8x8, got " + std::to_string(width) +
                          "x" + std::to_string(height));
  if (!(fov_x > 0.0 && fov_x < M_PI)) throw ValidationError("camera fov_x out of range");
  const Eigen::Matrix3d r = cam_to_world.block<3, 3>(0, 0);
  const double dev = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (!(dev <= tol))
    throw ValidationError("camera rotation is not orthonormal (max |R^T R - I| = " +
                          std::to_string(dev) + ")");
  const Eigen::RowVector4d last = cam_to_world.row(3);
  if ((last - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > tol)
    throw ValidationError("camera transform last row must be [0, 0, 0, 1]");
}

CameraPose CameraPose::scaled(double factor) const {
  CameraPose p = *this;
  p.width = static_cast<int>(std::lround(width * factor));
  p.height = static_cast<int>(std::lround(height * factor));
  return p;
}

const char* to_string(LevelTag tag) {
  switch (tag) {
    case LevelTag::kLR: return "LR";
    case LevelTag::kLLR: return "LLR";
    case LevelTag::kHR: return "HR";
  }
  return "?";
}

Ray ray_through(const CameraPose& pose, double u, double v) {
  const double f = pose.focal();
  const Vec3d d_cam((u - 0.5 * pose.width) / f, -(v - 0.5 * pose.height) / f, -1.0);
  Ray r;
  r.origin = pose.origin();
  r.direction = (pose.cam_to_world.block<3, 3>(0, 0) * d_cam).normalized();
  return r;
}

std::vector<Ray> gen_rays(const CameraPose& pose, int s) {
  if (s < 1) throw ConfigError("gen_rays: scale must be >= 1");
  const int h = pose.height * s, w = pose.width * s;
  std::vector<Ray> rays;
  rays.reserve(std::size_t(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      rays.push_back(ray_through(pose, (x + 0.5) / s, (y + 0.5) / s));
  return rays;
}

std::optional<Eigen::Vector2d> project_point(const CameraPose& pose, const Vec3d& p) {
  const Eigen::Matrix3d r = pose.cam_to_world.block<3, 3>(0, 0);
  const Vec3d pc = r.transpose() * (p - pose.origin());
  if (pc.z() >= -1e-9) return std::nullopt;
  const double f = pose.focal();
  const double u = 0.5 * pose.width + f * pc.x() / -pc.z();
  const double v = 0.5 * pose.height - f * pc.y() / -pc.z();
  return Eigen::Vector2d(u, v);
}

CameraPose look_at(const Vec3d& eye, const Vec3d& target, const Vec3d& up, double fov_x,
                   int width, int height) {
  const Vec3d forward = (target - eye).normalized();
  const Vec3d right = forward.cross(up).normalized();
  const Vec3d true_up = right.cross(forward);
  CameraPose pose;
  pose.cam_to_world.setIdentity();
  pose.cam_to_world.block<3, 1>(0, 0) = right;
  pose.cam_to_world.block<3, 1>(0, 1) = true_up;
  pose.cam_to_world.block<3, 1>(0, 2) = -forward;
  pose.cam_to_world.block<3, 1>(0, 3) = eye;
  pose.fov_x = fov_x;
  pose.width = width;
  pose.height = height;
  return pose;
}

PosedImage downsample_gt(const PosedImage& img, int s) {
  if (s < 1) throw ConfigError("downsample_gt: scale must be >= 1");
  if (img.pixels.height % s != 0 || img.pixels.width % s != 0)
    throw ShapeError("downsample_gt: image " + img.pixels.shape_string() +
                     " is not divisible by " + std::to_string(s));
  PosedImage out;
  out.pixels = box_downsample(img.pixels, s);
  out.pose = img.pose;
  out.pose.width = img.pose.width / s;
  out.pose.height = img.pose.height / s;
  out.level = LevelTag::kLLR;
  return out;
}

PatchBundle make_patch_bundle(const PosedImage& img, int image_index, int u0, int v0, int p,
                              int s) {
  if (s < 1 || p < 1) throw ConfigError("make_patch_bundle: invalid patch or scale");
  if (u0 < 0 || v0 < 0 || u0 + p > img.pixels.width || v0 + p > img.pixels.height)
    throw ShapeError("make_patch_bundle: patch outside image");
  PatchBundle b;
  b.gt_patch = img.pixels.crop(v0, u0, p, p);
  b.image_index = image_index;
  b.anchor_u = u0;
  b.anchor_v = v0;
  b.scale = s;
  const int q = s * p;
  b.rays.reserve(std::size_t(q) * q);
  for (int y = 0; y < q; ++y)
    for (int x = 0; x < q; ++x)
      b.rays.push_back(ray_through(img.pose, u0 + (x + 0.5) / s, v0 + (y + 0.5) / s));
  return b;
}

PatchSample sample_patch_bundles(const std::vector<PosedImage>& images,
                                 const std::vector<Tensor3<float>>* opacity, int p, int s,
                                 int batch, Rng& rng, const MaskSettings& mask) {
  if (images.empty()) throw ConfigError("sample_patch_bundles: no images");
  if (batch < 1) throw ConfigError("sample_patch_bundles: batch must be >= 1");
  if (opacity && opacity->size() != images.size())
    throw ShapeError("sample_patch_bundles: one opacity map per image required");
  for (const auto& img : images)
    if (img.pixels.width < p || img.pixels.height < p)
      throw ShapeError("sample_patch_bundles: patch larger than image");

  PatchSample out;
  const int max_draws = std::max(1, mask.draw_factor) * batch;
  while (static_cast<int>(out.bundles.size()) < batch && out.draws < max_draws) {
    ++out.draws;
    const int idx = static_cast<int>(rng.uniform_int(images.size()));
    const auto& img = images[idx];
    const int u0 = static_cast<int>(rng.uniform_int(img.pixels.width - p + 1));
    const int v0 = static_cast<int>(rng.uniform_int(img.pixels.height - p + 1));
    // Both draws are consumed unconditionally so the stream does not depend
    // on whether a mask is active.
    const double keep_draw = rng.uniform();
    bool keep = true;
    if (opacity) {
      const auto& op = (*opacity)[idx];
      float peak = 0.0f;
      for (int y = v0; y < v0 + p; ++y)
        for (int x = u0; x < u0 + p; ++x) peak = std::max(peak, op.at(y, x, 0));
      keep = peak >= mask.tau || keep_draw < mask.keep_bg;
    }
    if (!keep) continue;
    out.bundles.push_back(make_patch_bundle(img, idx, u0, v0, p, s));
  }
  out.short_batch = static_cast<int>(out.bundles.size()) < batch;
  return out;
}

}  // namespace zssrt
