#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "zssrt/geometry.hpp"
#include "zssrt/rng.hpp"
#include "zssrt/tensor.hpp"

namespace zssrt {

// Pinhole camera, OpenGL axes: looks down -z, +x right, +y up.
struct CameraPose {
  Mat4d cam_to_world = Mat4d::Identity();
  double fov_x = 0.6911;
  int width = 64;
  int height = 64;

  double focal() const;
  Vec3d origin() const { return cam_to_world.block<3, 1>(0, 3); }
  // Throws ValidationError when the rotation block is not orthonormal within
  // `tol`, the last row is not [0,0,0,1] or the image is smaller than 8x8.
  void validate(double tol = 1e-6) const;
  // Same camera with the image plane resampled by `factor` (fov unchanged).
  CameraPose scaled(double factor) const;
};

enum class LevelTag { kLR, kLLR, kHR };
const char* to_string(LevelTag tag);

struct PosedImage {
  Image pixels;  // H x W x 3 in [0, 1]
  CameraPose pose;
  LevelTag level = LevelTag::kLR;
};

struct Dataset {
  std::vector<PosedImage> images;
  Aabb bounds;
  double camera_angle_x = 0.0;
  std::vector<std::string> names;
};

// ---------------------------------------------------------------------------
// Rays

// Ray through continuous image-plane point (u, v) in pixel units of `pose`
// (u to the right, v downward; pixel centers sit at index + 0.5).
Ray ray_through(const CameraPose& pose, double u, double v);

// (s*H) x (s*W) rays, row-major; ray (V, U) passes through
// ((U + 0.5) / s, (V + 0.5) / s).
std::vector<Ray> gen_rays(const CameraPose& pose, int s);

// Projects a world point to continuous pixel coordinates; nullopt when the
// point is behind the camera.
std::optional<Eigen::Vector2d> project_point(const CameraPose& pose, const Vec3d& p);

CameraPose look_at(const Vec3d& eye, const Vec3d& target, const Vec3d& up, double fov_x,
                   int width, int height);

// ---------------------------------------------------------------------------
// Ground-truth pyramid

PosedImage downsample_gt(const PosedImage& img, int s);

// ---------------------------------------------------------------------------
// Patch sampling

struct PatchBundle {
  Image gt_patch;           // p x p x 3 from the LR image
  std::vector<Ray> rays;    // (s*p)^2 sub-pixel rays, row-major over the HR patch
  int image_index = 0;
  int anchor_u = 0;         // top-left LR pixel of the patch
  int anchor_v = 0;
  int scale = 1;
  bool mask_keep = true;

  int patch_size() const { return gt_patch.height; }
  int hr_size() const { return gt_patch.height * scale; }
};

PatchBundle make_patch_bundle(const PosedImage& img, int image_index, int u0, int v0, int p,
                              int s);

struct MaskSettings {
  double tau = 0.01;       // accumulated-opacity threshold
  double keep_bg = 0.2;    // probability of keeping an empty patch
  int draw_factor = 50;    // bounded draws = draw_factor * batch
};

struct PatchSample {
  std::vector<PatchBundle> bundles;
  int draws = 0;
  bool short_batch = false;  // fewer than `batch` kept patches were found
};

// Uniform patch anchors on the LR grid. `opacity` holds one H x W x 1
// accumulated-opacity map per image (rendered from the coarse field); when it
// is null every patch is kept.
PatchSample sample_patch_bundles(const std::vector<PosedImage>& images,
                                 const std::vector<Tensor3<float>>* opacity, int p, int s,
                                 int batch, Rng& rng, const MaskSettings& mask = {});

// ---------------------------------------------------------------------------
// Procedural analytic scene

struct Primitive {
  enum class Kind { kBox, kSphere };
  Kind kind = Kind::kBox;
  Vec3d center = Vec3d::Zero();
  Vec3d half_extent = Vec3d::Constant(0.5);  // boxes
  double radius = 0.5;                       // spheres
  Vec3d albedo = Vec3d::Constant(0.8);
  Vec3d albedo_alt = Vec3d::Constant(0.3);   // checker secondary color
  double checker_period = 0.0;               // 0 disables the checker texture

  std::optional<std::pair<double, Vec3d>> hit(const Ray& ray) const;  // (t, normal)
  bool inside(const Vec3d& p) const;
  Vec3d outward_normal(const Vec3d& p) const;
};

struct SurfaceHit {
  double t = 0.0;
  Vec3d rgb = Vec3d::Zero();
};

// Lambertian primitives under a fixed directional light; colors are
// view-independent so the scene is multi-view consistent by construction.
class AnalyticScene {
 public:
  AnalyticScene() = default;
  explicit AnalyticScene(std::vector<Primitive> prims) : prims_(std::move(prims)) {}

  static AnalyticScene procedural(std::uint64_t seed);

  const std::vector<Primitive>& primitives() const { return prims_; }
  std::optional<SurfaceHit> trace(const Ray& ray) const;
  // Index of the first primitive containing p, or -1.
  int inside(const Vec3d& p) const;
  Vec3d shade(const Primitive& prim, const Vec3d& p, const Vec3d& normal) const;

 private:
  std::vector<Primitive> prims_;
  Vec3d light_ = Vec3d(0.4, 0.3, 0.85).normalized();
  double ambient_ = 0.35;
};

// Area-integrated render: supersample x supersample point samples per pixel,
// box filtered. Returns straight (unpremultiplied) RGB plus coverage alpha.
Tensor3<float> render_analytic_rgba(const AnalyticScene& scene, const CameraPose& pose,
                                    int supersample);

// Composite straight RGBA over a constant background.
Image composite_over(const Tensor3<float>& rgba, const Vec3d& background);

// ---------------------------------------------------------------------------
// Dataset IO

struct SyntheticSceneOptions {
  std::uint64_t seed = 7;
  int n_views = 8;
  int n_test_views = 4;
  int res = 64;
  double radius = 4.0;
  double fov_x = 0.6911;
};

// Writes transforms.json / transforms_test.json, train/ and test/ RGBA PNGs,
// and area-integrated references at 2x and 4x under ref_x2/ and ref_x4/.
void generate_synthetic_scene(const SyntheticSceneOptions& opts,
                              const std::filesystem::path& dir);

struct LoadOptions {
  std::string split = "train";        // reads transforms.json or transforms_<split>.json
  int reference_scale = 1;            // >1 loads ref_x<scale>/ images instead
  Vec3d background = Vec3d::Ones();
};

Dataset load_dataset(const std::filesystem::path& dir, const LoadOptions& opts = {});

}  // namespace zssrt
