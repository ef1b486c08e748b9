#pragma once

#include <optional>
#include <utility>

#include <Eigen/Core>

namespace zssrt {

using Vec3d = Eigen::Vector3d;
using Mat4d = Eigen::Matrix4d;

struct Ray {
  Vec3d origin = Vec3d::Zero();
  Vec3d direction = Vec3d::UnitZ();
};

struct Aabb {
  Vec3d min = Vec3d::Constant(-1.5);
  Vec3d max = Vec3d::Constant(1.5);

  bool contains(const Vec3d& p) const {
    return (p.array() >= min.array()).all() && (p.array() <= max.array()).all();
  }
  Vec3d extent() const { return max - min; }

  // Parametric entry/exit distances of the ray, if it hits the box.
  std::optional<std::pair<double, double>> intersect(const Ray& ray) const;
};

}  // namespace zssrt
