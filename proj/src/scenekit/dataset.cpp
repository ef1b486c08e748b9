#include <cmath>
#include <fstream>

#include "json.hpp"
#include "zssrt/png_io.hpp"
#include "zssrt/scenekit.hpp"

namespace zssrt {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json matrix_to_json(const Mat4d& m) {
  json rows = json::array();
  for (int r = 0; r < 4; ++r) {
    json row = json::array();
    for (int c = 0; c < 4; ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

Mat4d matrix_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) throw ValidationError("transform_matrix must be 4x4");
  Mat4d m;
  for (int r = 0; r < 4; ++r) {
    if (!j[r].is_array() || j[r].size() != 4) throw ValidationError("transform_matrix must be 4x4");
    for (int c = 0; c < 4; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

std::vector<CameraPose> hemisphere_poses(int n, double radius, double fov_x, int res,
                                         double azimuth_offset, bool alternate_elevation) {
  std::vector<CameraPose> poses;
  for (int i = 0; i < n; ++i) {
    const double az = azimuth_offset + 2.0 * M_PI * i / n;
    const double el = alternate_elevation ? (i % 2 == 0 ? 0.42 : 0.78) : 0.6;
    const Vec3d eye(radius * std::cos(el) * std::cos(az), radius * std::cos(el) * std::sin(az),
                    radius * std::sin(el));
    poses.push_back(look_at(eye, Vec3d(0, 0, -0.3), Vec3d::UnitZ(), fov_x, res, res));
  }
  return poses;
}

void write_split(const AnalyticScene& scene, const std::vector<CameraPose>& poses,
                 const std::string& split, const fs::path& dir, double fov_x) {
  json frames = json::array();
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const std::string rel = split + "/r_" + std::to_string(i);
    // Sub-sample positions coincide across levels: 8x8 per LR pixel.
    write_png(dir / (rel + ".png"), render_analytic_rgba(scene, poses[i], 8));
    write_png(dir / "ref_x2" / (rel + ".png"), render_analytic_rgba(scene, poses[i].scaled(2), 4));
    write_png(dir / "ref_x4" / (rel + ".png"), render_analytic_rgba(scene, poses[i].scaled(4), 2));
    frames.push_back({{"file_path", "./" + rel}, {"transform_matrix", matrix_to_json(poses[i].cam_to_world)}});
  }
  json root = {{"camera_angle_x", fov_x},
               {"frames", frames},
               {"bounds", {{"min", {-1.5, -1.5, -1.5}}, {"max", {1.5, 1.5, 1.5}}}}};
  const std::string name = split == "train" ? "transforms.json" : "transforms_" + split + ".json";
  std::ofstream out(dir / name);
  if (!out) throw IoError("cannot write " + (dir / name).string());
  out << root.dump(2) << "\n";
}

}  // namespace

void generate_synthetic_scene(const SyntheticSceneOptions& opts, const fs::path& dir) {
  if (opts.n_views < 2)
    throw ConfigError("generate_synthetic_scene: need at least 2 views, got " +
                      std::to_string(opts.n_views));
  if (opts.res < 32)
    throw ConfigError("generate_synthetic_scene: resolution must be >= 32");
  fs::create_directories(dir);
  const AnalyticScene scene = AnalyticScene::procedural(opts.seed);
  Rng rng(splitmix64(opts.seed ^ 0x5ca1ab1eULL));
  const double offset = rng.uniform(0.0, 2.0 * M_PI);
  write_split(scene, hemisphere_poses(opts.n_views, opts.radius, opts.fov_x, opts.res, offset, true),
              "train", dir, opts.fov_x);
  if (opts.n_test_views > 0)
    write_split(scene,
                hemisphere_poses(opts.n_test_views, opts.radius, opts.fov_x, opts.res,
                                 offset + M_PI / opts.n_views, false),
                "test", dir, opts.fov_x);
}

Dataset load_dataset(const fs::path& dir, const LoadOptions& opts) {
  const fs::path file =
      dir / (opts.split == "train" ? "transforms.json" : "transforms_" + opts.split + ".json");
  std::ifstream in(file);
  if (!in) throw IoError("cannot open dataset transforms: " + file.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed " + file.string() + ": " + e.what());
  }

  Dataset ds;
  ds.camera_angle_x = root.at("camera_angle_x").get<double>();
  if (root.contains("bounds")) {
    const auto& b = root["bounds"];
    for (int a = 0; a < 3; ++a) {
      ds.bounds.min[a] = b.at("min").at(a).get<double>();
      ds.bounds.max[a] = b.at("max").at(a).get<double>();
    }
  }
  const auto& frames = root.at("frames");
  if (frames.empty()) throw IoError("dataset has no frames: " + file.string());
  for (const auto& fr : frames) {
    std::string rel = fr.at("file_path").get<std::string>();
    if (fs::path(rel).extension().empty()) rel += ".png";
    const fs::path img_path = opts.reference_scale > 1
                                  ? dir / ("ref_x" + std::to_string(opts.reference_scale)) / rel
                                  : dir / rel;
    if (!fs::exists(img_path)) throw IoError("missing image: " + img_path.string());
    const Tensor3<float> raw = read_png(img_path);

    PosedImage pi;
    pi.pose.cam_to_world = matrix_from_json(fr.at("transform_matrix"));
    pi.pose.fov_x = ds.camera_angle_x;
    pi.pose.width = raw.width;
    pi.pose.height = raw.height;
    pi.pose.validate();
    pi.pixels = raw.channels == 4 ? composite_over(raw, opts.background) : raw;
    if (pi.pixels.channels != 3) throw ValidationError("unsupported channel count in " + img_path.string());
    pi.level = opts.reference_scale > 1 ? LevelTag::kHR : LevelTag::kLR;
    ds.images.push_back(std::move(pi));
    ds.names.push_back(rel);
  }
  return ds;
}

}  // namespace zssrt
