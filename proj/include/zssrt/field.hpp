#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "zssrt/checkpoint.hpp"
#include "zssrt/geometry.hpp"

namespace zssrt {

struct FieldConfig {
  int grid_res = 128;       // per-axis lattice resolution
  int density_rank = 8;     // components per axis pairing
  int app_rank = 24;
  int app_dim = 27;         // appearance code width produced by the basis
  int hidden = 128;         // decoder width, two hidden layers
  int dir_octaves = 2;
  double density_shift = -5.0;
  double init_scale = 0.1;
  Aabb bounds;
  double near = 0.1;
  double far = 10.0;

  int app_features() const { return 3 * app_rank; }
  int decoder_input() const { return app_dim + 3 + 6 * dir_octaves; }

  void validate() const;
  nlohmann::json to_json() const;
  static FieldConfig from_json(const nlohmann::json& j);
  bool operator==(const FieldConfig& o) const;
};

template <typename Real>
struct FieldParams {
  // plane m: grid_res^2 x rank, line m: grid_res x rank (rank innermost).
  // Pairings: m=0 plane(x,y)/line z, m=1 plane(x,z)/line y, m=2 plane(y,z)/line x.
  std::array<std::vector<Real>, 3> density_planes, density_lines;
  std::array<std::vector<Real>, 3> app_planes, app_lines;
  std::vector<Real> basis;  // app_dim x 3*app_rank, row-major
  std::vector<Real> w1, b1, w2, b2, w3, b3;

  static FieldParams zeros(const FieldConfig& cfg);

  // f(name, span, is_grid) over every parameter group in a fixed order.
  template <typename F>
  void for_each_group(F&& f) {
    visit_groups(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each_group(F&& f) const {
    visit_groups(*this, std::forward<F>(f));
  }

  void set_zero();
  std::size_t parameter_count() const;

  template <typename U>
  FieldParams<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit_groups(Self& self, F&& f) {
    static const char* kAxes[3] = {"0", "1", "2"};
    for (int m = 0; m < 3; ++m)
      f(std::string("density.plane") + kAxes[m], std::span(self.density_planes[m]), true);
    for (int m = 0; m < 3; ++m)
      f(std::string("density.line") + kAxes[m], std::span(self.density_lines[m]), true);
    for (int m = 0; m < 3; ++m)
      f(std::string("app.plane") + kAxes[m], std::span(self.app_planes[m]), true);
    for (int m = 0; m < 3; ++m)
      f(std::string("app.line") + kAxes[m], std::span(self.app_lines[m]), true);
    f(std::string("basis"), std::span(self.basis), false);
    f(std::string("decoder.w1"), std::span(self.w1), false);
    f(std::string("decoder.b1"), std::span(self.b1), false);
    f(std::string("decoder.w2"), std::span(self.w2), false);
    f(std::string("decoder.b2"), std::span(self.b2), false);
    f(std::string("decoder.w3"), std::span(self.w3), false);
    f(std::string("decoder.b3"), std::span(self.b3), false);
  }
};

// Anything that maps (position, direction) to (density, color).
template <typename Real>
class RadianceField {
 public:
  using Vec3 = Eigen::Matrix<Real, 3, 1>;

  virtual ~RadianceField() = default;
  virtual const Aabb& bounds() const = 0;
  // Positions outside bounds yield sigma = 0.
  virtual void density(std::span<const Vec3> x, std::span<Real> sigma) const = 0;
  // rgb is laid out as 3 values per point; outside bounds yields 0.
  virtual void color(std::span<const Vec3> x, std::span<const Vec3> d,
                     std::span<Real> rgb) const = 0;

  std::pair<Real, Vec3> query(const Vec3& x, const Vec3& d) const;
};

// Intermediates of a batched appearance evaluation kept for the backward pass.
template <typename Real>
struct AppearanceTape {
  using Vec3 = Eigen::Matrix<Real, 3, 1>;
  std::vector<Vec3> positions;
  std::vector<unsigned char> inside;
  std::vector<Real> features;  // M x 3R
  std::vector<Real> input;     // M x decoder_input (code followed by direction encoding)
  std::vector<Real> h1, h2;    // M x hidden, post-activation
  std::vector<Real> out;       // M x 3, post-sigmoid
  int rows = 0;
};

// Vector-matrix factorized radiance field with an appearance basis and a
// small MLP decoder.
template <typename Real>
class TensorialField : public RadianceField<Real> {
 public:
  using Vec3 = typename RadianceField<Real>::Vec3;

  TensorialField(FieldConfig cfg, FieldParams<Real> params);

  // Grids ~ init_scale * N(0,1); basis and decoder use fan-in uniform init.
  static TensorialField init(const FieldConfig& cfg, std::uint64_t seed);

  const FieldConfig& config() const { return cfg_; }
  const FieldParams<Real>& params() const { return params_; }
  FieldParams<Real>& params() { return params_; }

  const Aabb& bounds() const override { return cfg_.bounds; }
  void density(std::span<const Vec3> x, std::span<Real> sigma) const override;
  void color(std::span<const Vec3> x, std::span<const Vec3> d,
             std::span<Real> rgb) const override;

  // Pre-activation density (sum of factor products plus shift).
  Real raw_density(const Vec3& x) const;

  // Accumulates d(loss)/d(params) given d(loss)/d(sigma) at each point.
  void density_backward(std::span<const Vec3> x, std::span<const Real> d_sigma,
                        FieldParams<Real>& grad) const;

  void color_forward(std::span<const Vec3> x, std::span<const Vec3> d, std::span<Real> rgb,
                     AppearanceTape<Real>& tape) const;
  void color_backward(const AppearanceTape<Real>& tape, std::span<const Real> d_rgb,
                      FieldParams<Real>& grad) const;

  template <typename U>
  TensorialField<U> cast() const {
    return TensorialField<U>(cfg_, params_.template cast<U>());
  }

 private:
  struct Lattice {
    std::array<int, 3> i0;
    std::array<Real, 3> frac;
  };
  Lattice locate(const Vec3& x) const;
  void appearance_features(const Lattice& l, Real* out) const;

  FieldConfig cfg_;
  FieldParams<Real> params_;
};

template <typename Real>
struct FieldSnapshot {
  int step = 0;
  std::shared_ptr<const TensorialField<Real>> field;
};

// Deep, immutable copy of the field at a training step.
template <typename Real>
FieldSnapshot<Real> snapshot(const TensorialField<Real>& field, int step);

// Sample-level average of density and color over field snapshots.
template <typename Real>
class EnsembleField : public RadianceField<Real> {
 public:
  using Vec3 = typename RadianceField<Real>::Vec3;

  explicit EnsembleField(std::vector<FieldSnapshot<Real>> snapshots);

  const std::vector<FieldSnapshot<Real>>& snapshots() const { return snaps_; }
  std::size_t size() const { return snaps_.size(); }

  const Aabb& bounds() const override { return snaps_.front().field->bounds(); }
  void density(std::span<const Vec3> x, std::span<Real> sigma) const override;
  void color(std::span<const Vec3> x, std::span<const Vec3> d,
             std::span<Real> rgb) const override;

 private:
  std::vector<FieldSnapshot<Real>> snaps_;
};

template <typename Real>
std::pair<Real, typename RadianceField<Real>::Vec3> ensemble_query(
    const EnsembleField<Real>& ens, const typename RadianceField<Real>::Vec3& x,
    const typename RadianceField<Real>::Vec3& d) {
  return ens.query(x, d);
}

// Direction encoding fed to the decoder: raw d followed by sin/cos octaves.
template <typename Real>
void encode_direction(const Eigen::Matrix<Real, 3, 1>& d, int octaves, Real* out);

Checkpoint field_to_checkpoint(const TensorialField<float>& field, int step,
                               const nlohmann::json& extra_meta = {});
TensorialField<float> field_from_checkpoint(const Checkpoint& ckpt);

}  // namespace zssrt
