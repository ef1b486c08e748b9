#include "zssrt/field.hpp"

#include <cmath>

#include "dense.hpp"
#include "zssrt/errors.hpp"
#include "zssrt/math.hpp"
#include "zssrt/rng.hpp"

namespace zssrt {
namespace {

// (plane axis a, plane axis b, line axis c) for each pairing.
constexpr int kAxes[3][3] = {{0, 1, 2}, {0, 2, 1}, {1, 2, 0}};

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <typename Real>
using ConstMapMat = Eigen::Map<const RowMat<Real>>;

template <typename Real>
void fill_normal(std::vector<Real>& v, Rng& rng, double scale) {
  for (auto& x : v) x = static_cast<Real>(scale * rng.normal());
}

template <typename Real>
void fill_uniform(std::vector<Real>& v, Rng& rng, double bound) {
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
}

nlohmann::json bounds_json(const Aabb& b) {
  return {{"min", {b.min.x(), b.min.y(), b.min.z()}}, {"max", {b.max.x(), b.max.y(), b.max.z()}}};
}

}  // namespace

// ---------------------------------------------------------------------------
// FieldConfig

void FieldConfig::validate() const {
  if (grid_res < 16) throw ConfigError("field: grid_res must be >= 16");
  if (density_rank < 1 || app_rank < 1) throw ConfigError("field: ranks must be >= 1");
  if (app_dim < 1 || hidden < 1) throw ConfigError("field: app_dim and hidden must be >= 1");
  if (dir_octaves < 0) throw ConfigError("field: dir_octaves must be >= 0");
  if (!((bounds.max.array() > bounds.min.array()).all()))
    throw ConfigError("field: bounds must have positive extent");
  if (!(near >= 0 && near < far)) throw ConfigError("field: need 0 <= near < far");
}

nlohmann::json FieldConfig::to_json() const {
  return {{"grid_res", grid_res},       {"density_rank", density_rank},
          {"app_rank", app_rank},       {"app_dim", app_dim},
          {"hidden", hidden},           {"dir_octaves", dir_octaves},
          {"density_shift", density_shift}, {"init_scale", init_scale},
          {"bounds", bounds_json(bounds)}, {"near", near},
          {"far", far}};
}

FieldConfig FieldConfig::from_json(const nlohmann::json& j) {
  FieldConfig c;
  c.grid_res = j.value("grid_res", c.grid_res);
  c.density_rank = j.value("density_rank", c.density_rank);
  c.app_rank = j.value("app_rank", c.app_rank);
  c.app_dim = j.value("app_dim", c.app_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.dir_octaves = j.value("dir_octaves", c.dir_octaves);
  c.density_shift = j.value("density_shift", c.density_shift);
  c.init_scale = j.value("init_scale", c.init_scale);
  c.near = j.value("near", c.near);
  c.far = j.value("far", c.far);
  if (j.contains("bounds")) {
    for (int a = 0; a < 3; ++a) {
      c.bounds.min[a] = j["bounds"].at("min").at(a).get<double>();
      c.bounds.max[a] = j["bounds"].at("max").at(a).get<double>();
    }
  }
  return c;
}

bool FieldConfig::operator==(const FieldConfig& o) const { return to_json() == o.to_json(); }

// ---------------------------------------------------------------------------
// FieldParams

template <typename Real>
FieldParams<Real> FieldParams<Real>::zeros(const FieldConfig& cfg) {
  FieldParams p;
  const std::size_t g = cfg.grid_res;
  for (int m = 0; m < 3; ++m) {
    p.density_planes[m].assign(g * g * cfg.density_rank, Real(0));
    p.density_lines[m].assign(g * cfg.density_rank, Real(0));
    p.app_planes[m].assign(g * g * cfg.app_rank, Real(0));
    p.app_lines[m].assign(g * cfg.app_rank, Real(0));
  }
  p.basis.assign(std::size_t(cfg.app_dim) * cfg.app_features(), Real(0));
  p.w1.assign(std::size_t(cfg.hidden) * cfg.decoder_input(), Real(0));
  p.b1.assign(cfg.hidden, Real(0));
  p.w2.assign(std::size_t(cfg.hidden) * cfg.hidden, Real(0));
  p.b2.assign(cfg.hidden, Real(0));
  p.w3.assign(std::size_t(3) * cfg.hidden, Real(0));
  p.b3.assign(3, Real(0));
  return p;
}

template <typename Real>
void FieldParams<Real>::set_zero() {
  for_each_group([](const std::string&, std::span<Real> s, bool) {
    std::fill(s.begin(), s.end(), Real(0));
  });
}

template <typename Real>
std::size_t FieldParams<Real>::parameter_count() const {
  std::size_t n = 0;
  for_each_group([&](const std::string&, std::span<const Real> s, bool) { n += s.size(); });
  return n;
}

template <typename Real>
template <typename U>
FieldParams<U> FieldParams<Real>::cast() const {
  FieldParams<U> out;
  auto conv = [](const std::vector<Real>& v) { return std::vector<U>(v.begin(), v.end()); };
  for (int m = 0; m < 3; ++m) {
    out.density_planes[m] = conv(density_planes[m]);
    out.density_lines[m] = conv(density_lines[m]);
    out.app_planes[m] = conv(app_planes[m]);
    out.app_lines[m] = conv(app_lines[m]);
  }
  out.basis = conv(basis);
  out.w1 = conv(w1);
  out.b1 = conv(b1);
  out.w2 = conv(w2);
  out.b2 = conv(b2);
  out.w3 = conv(w3);
  out.b3 = conv(b3);
  return out;
}

// ---------------------------------------------------------------------------
// RadianceField

template <typename Real>
std::pair<Real, typename RadianceField<Real>::Vec3> RadianceField<Real>::query(
    const Vec3& x, const Vec3& d) const {
  Real sigma = 0;
  Vec3 rgb;
  density(std::span(&x, 1), std::span(&sigma, 1));
  color(std::span(&x, 1), std::span(&d, 1), std::span(rgb.data(), 3));
  return {sigma, rgb};
}

template <typename Real>
void encode_direction(const Eigen::Matrix<Real, 3, 1>& d, int octaves, Real* out) {
  out[0] = d.x();
  out[1] = d.y();
  out[2] = d.z();
  int k = 3;
  for (int o = 0; o < octaves; ++o) {
    const Real f = Real(1 << o);
    for (int a = 0; a < 3; ++a) out[k++] = std::sin(f * d[a]);
    for (int a = 0; a < 3; ++a) out[k++] = std::cos(f * d[a]);
  }
}

// ---------------------------------------------------------------------------
// TensorialField

template <typename Real>
TensorialField<Real>::TensorialField(FieldConfig cfg, FieldParams<Real> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  const FieldParams<Real> ref = FieldParams<Real>::zeros(cfg_);
  std::vector<std::size_t> expected;
  ref.for_each_group([&](const std::string&, std::span<const Real> s, bool) { expected.push_back(s.size()); });
  std::size_t i = 0;
  params_.for_each_group([&](const std::string& name, std::span<const Real> s, bool) {
    if (s.size() != expected[i++])
      throw ShapeError("TensorialField: parameter group " + name + " has wrong size");
  });
}

template <typename Real>
TensorialField<Real> TensorialField<Real>::init(const FieldConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  FieldParams<Real> p = FieldParams<Real>::zeros(cfg);
  Rng rng(splitmix64(seed));
  for (int m = 0; m < 3; ++m) fill_normal(p.density_planes[m], rng, cfg.init_scale);
  for (int m = 0; m < 3; ++m) fill_normal(p.density_lines[m], rng, cfg.init_scale);
  for (int m = 0; m < 3; ++m) fill_normal(p.app_planes[m], rng, cfg.init_scale);
  for (int m = 0; m < 3; ++m) fill_normal(p.app_lines[m], rng, cfg.init_scale);
  fill_uniform(p.basis, rng, 1.0 / std::sqrt(double(cfg.app_features())));
  const double b_in = 1.0 / std::sqrt(double(cfg.decoder_input()));
  const double b_h = 1.0 / std::sqrt(double(cfg.hidden));
  fill_uniform(p.w1, rng, b_in);
  fill_uniform(p.b1, rng, b_in);
  fill_uniform(p.w2, rng, b_h);
  fill_uniform(p.b2, rng, b_h);
  fill_uniform(p.w3, rng, b_h);
  std::fill(p.b3.begin(), p.b3.end(), Real(0));
  return TensorialField(cfg, std::move(p));
}

template <typename Real>
typename TensorialField<Real>::Lattice TensorialField<Real>::locate(const Vec3& x) const {
  Lattice l;
  const int g = cfg_.grid_res;
  for (int a = 0; a < 3; ++a) {
    const Real lo = Real(cfg_.bounds.min[a]);
    const Real ext = Real(cfg_.bounds.max[a] - cfg_.bounds.min[a]);
    const Real u = (x[a] - lo) / ext * Real(g - 1);
    const int i0 = std::clamp(static_cast<int>(std::floor(u)), 0, g - 2);
    l.i0[a] = i0;
    l.frac[a] = u - Real(i0);
  }
  return l;
}

namespace {

// Sum over ranks of bilinear(plane) * linear(line) for one pairing, or the
// per-rank products when `out` is given.
template <typename Real>
struct PairingView {
  const Real* p00;
  const Real* p01;
  const Real* p10;
  const Real* p11;
  const Real* l0;
  const Real* l1;
  Real w00, w01, w10, w11, lw0, lw1;
};

template <typename Real, typename Lat>
PairingView<Real> pairing_view(const std::vector<Real>& plane, const std::vector<Real>& line,
                               int g, int rank, int m, const Lat& l) {
  const int a = kAxes[m][0], b = kAxes[m][1], c = kAxes[m][2];
  PairingView<Real> v;
  const std::size_t base = (std::size_t(l.i0[a]) * g + l.i0[b]) * rank;
  v.p00 = plane.data() + base;
  v.p01 = v.p00 + rank;
  v.p10 = v.p00 + std::size_t(g) * rank;
  v.p11 = v.p10 + rank;
  v.l0 = line.data() + std::size_t(l.i0[c]) * rank;
  v.l1 = v.l0 + rank;
  const Real fa = l.frac[a], fb = l.frac[b], fc = l.frac[c];
  v.w00 = (Real(1) - fa) * (Real(1) - fb);
  v.w01 = (Real(1) - fa) * fb;
  v.w10 = fa * (Real(1) - fb);
  v.w11 = fa * fb;
  v.lw0 = Real(1) - fc;
  v.lw1 = fc;
  return v;
}

}  // namespace

template <typename Real>
Real TensorialField<Real>::raw_density(const Vec3& x) const {
  const Lattice l = locate(x);
  const int g = cfg_.grid_res, rank = cfg_.density_rank;
  Real raw = Real(cfg_.density_shift);
  for (int m = 0; m < 3; ++m) {
    const auto v = pairing_view(params_.density_planes[m], params_.density_lines[m], g, rank, m, l);
    Real acc = 0;
    for (int r = 0; r < rank; ++r) {
      const Real pv = v.w00 * v.p00[r] + v.w01 * v.p01[r] + v.w10 * v.p10[r] + v.w11 * v.p11[r];
      const Real lv = v.lw0 * v.l0[r] + v.lw1 * v.l1[r];
      acc += pv * lv;
    }
    raw += acc;
  }
  return raw;
}

template <typename Real>
void TensorialField<Real>::density(std::span<const Vec3> x, std::span<Real> sigma) const {
  const Aabb& b = cfg_.bounds;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Vec3d p = x[i].template cast<double>();
    sigma[i] = b.contains(p) ? softplus(raw_density(x[i])) : Real(0);
  }
}

template <typename Real>
void TensorialField<Real>::density_backward(std::span<const Vec3> x, std::span<const Real> d_sigma,
                                            FieldParams<Real>& grad) const {
  const Aabb& b = cfg_.bounds;
  const int g = cfg_.grid_res, rank = cfg_.density_rank;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (d_sigma[i] == Real(0)) continue;
    if (!b.contains(x[i].template cast<double>())) continue;
    const Real d_raw = d_sigma[i] * sigmoid(raw_density(x[i]));
    const Lattice l = locate(x[i]);
    for (int m = 0; m < 3; ++m) {
      const auto v = pairing_view(params_.density_planes[m], params_.density_lines[m], g, rank, m, l);
      const std::ptrdiff_t po = v.p00 - params_.density_planes[m].data();
      const std::ptrdiff_t lo = v.l0 - params_.density_lines[m].data();
      Real* gp00 = grad.density_planes[m].data() + po;
      Real* gp01 = gp00 + rank;
      Real* gp10 = gp00 + std::size_t(g) * rank;
      Real* gp11 = gp10 + rank;
      Real* gl0 = grad.density_lines[m].data() + lo;
      Real* gl1 = gl0 + rank;
      for (int r = 0; r < rank; ++r) {
        const Real pv = v.w00 * v.p00[r] + v.w01 * v.p01[r] + v.w10 * v.p10[r] + v.w11 * v.p11[r];
        const Real lv = v.lw0 * v.l0[r] + v.lw1 * v.l1[r];
        const Real gpv = d_raw * lv, glv = d_raw * pv;
        gp00[r] += v.w00 * gpv;
        gp01[r] += v.w01 * gpv;
        gp10[r] += v.w10 * gpv;
        gp11[r] += v.w11 * gpv;
        gl0[r] += v.lw0 * glv;
        gl1[r] += v.lw1 * glv;
      }
    }
  }
}

template <typename Real>
void TensorialField<Real>::appearance_features(const Lattice& l, Real* out) const {
  const int g = cfg_.grid_res, rank = cfg_.app_rank;
  for (int m = 0; m < 3; ++m) {
    const auto v = pairing_view(params_.app_planes[m], params_.app_lines[m], g, rank, m, l);
    Real* o = out + m * rank;
    for (int r = 0; r < rank; ++r) {
      const Real pv = v.w00 * v.p00[r] + v.w01 * v.p01[r] + v.w10 * v.p10[r] + v.w11 * v.p11[r];
      const Real lv = v.lw0 * v.l0[r] + v.lw1 * v.l1[r];
      o[r] = pv * lv;
    }
  }
}

template <typename Real>
void TensorialField<Real>::color(std::span<const Vec3> x, std::span<const Vec3> d,
                                 std::span<Real> rgb) const {
  thread_local AppearanceTape<Real> tape;
  color_forward(x, d, rgb, tape);
}

template <typename Real>
void TensorialField<Real>::color_forward(std::span<const Vec3> x, std::span<const Vec3> d,
                                         std::span<Real> rgb, AppearanceTape<Real>& tape) const {
  const int m_rows = static_cast<int>(x.size());
  const int nf = cfg_.app_features(), nd = cfg_.app_dim, nin = cfg_.decoder_input(),
            nh = cfg_.hidden;
  tape.rows = m_rows;
  tape.positions.assign(x.begin(), x.end());
  tape.inside.resize(m_rows);
  tape.features.assign(std::size_t(m_rows) * nf, Real(0));
  tape.input.resize(std::size_t(m_rows) * nin);
  tape.h1.resize(std::size_t(m_rows) * nh);
  tape.h2.resize(std::size_t(m_rows) * nh);
  tape.out.resize(std::size_t(m_rows) * 3);
  if (m_rows == 0) return;

  for (int i = 0; i < m_rows; ++i) {
    tape.inside[i] = cfg_.bounds.contains(x[i].template cast<double>()) ? 1 : 0;
    if (tape.inside[i]) appearance_features(locate(x[i]), &tape.features[std::size_t(i) * nf]);
    encode_direction<Real>(d[i], cfg_.dir_octaves, &tape.input[std::size_t(i) * nin + nd]);
  }

  std::vector<Real> wt;
  detail::dense_rows<Real>(tape.features.data(), m_rows, nf, nf, params_.basis.data(), nullptr, nd,
                     tape.input.data(), nin, wt);
  detail::dense_rows(tape.input.data(), m_rows, nin, nin, params_.w1.data(), params_.b1.data(),
                     nh, tape.h1.data(), nh, wt);
  for (auto& v : tape.h1) v = std::max(v, Real(0));
  detail::dense_rows(tape.h1.data(), m_rows, nh, nh, params_.w2.data(), params_.b2.data(), nh,
                     tape.h2.data(), nh, wt);
  for (auto& v : tape.h2) v = std::max(v, Real(0));
  detail::dense_rows(tape.h2.data(), m_rows, nh, nh, params_.w3.data(), params_.b3.data(), 3,
                     tape.out.data(), 3, wt);
  for (int i = 0; i < m_rows; ++i)
    for (int c = 0; c < 3; ++c) {
      Real& o = tape.out[std::size_t(i) * 3 + c];
      o = sigmoid(o);
      rgb[std::size_t(i) * 3 + c] = tape.inside[i] ? o : Real(0);
    }
}

template <typename Real>
void TensorialField<Real>::color_backward(const AppearanceTape<Real>& tape,
                                          std::span<const Real> d_rgb,
                                          FieldParams<Real>& grad) const {
  const int m_rows = tape.rows;
  if (m_rows == 0) return;
  const int nf = cfg_.app_features(), nd = cfg_.app_dim, nin = cfg_.decoder_input(),
            nh = cfg_.hidden;

  thread_local std::vector<Real> buf_dz3, buf_dz, buf_dz1, buf_dcode, buf_dfeat;
  buf_dz3.resize(std::size_t(m_rows) * 3);
  buf_dz.resize(std::size_t(m_rows) * nh);
  buf_dz1.resize(std::size_t(m_rows) * nh);
  buf_dcode.resize(std::size_t(m_rows) * nd);
  buf_dfeat.resize(std::size_t(m_rows) * nf);
  MapMat<Real> dz3(buf_dz3.data(), m_rows, 3), dz(buf_dz.data(), m_rows, nh),
      dz1(buf_dz1.data(), m_rows, nh), dcode(buf_dcode.data(), m_rows, nd),
      dfeat(buf_dfeat.data(), m_rows, nf);
  for (int i = 0; i < m_rows; ++i)
    for (int c = 0; c < 3; ++c) {
      const Real o = tape.out[std::size_t(i) * 3 + c];
      dz3(i, c) = tape.inside[i] ? d_rgb[std::size_t(i) * 3 + c] * o * (Real(1) - o) : Real(0);
    }

  ConstMapMat<Real> in(tape.input.data(), m_rows, nin);
  ConstMapMat<Real> h1(tape.h1.data(), m_rows, nh), h2(tape.h2.data(), m_rows, nh);
  ConstMapMat<Real> w1(params_.w1.data(), nh, nin), w2(params_.w2.data(), nh, nh),
      w3(params_.w3.data(), 3, nh);
  MapMat<Real> gw1(grad.w1.data(), nh, nin), gw2(grad.w2.data(), nh, nh),
      gw3(grad.w3.data(), 3, nh);

  auto relu_mask = [](std::vector<Real>& g, const std::vector<Real>& h, std::size_t n) {
    for (std::size_t q = 0; q < n; ++q)
      if (!(h[q] > Real(0))) g[q] = Real(0);
  };
  // Column sums in row order.
  auto add_column_sums = [m_rows](const std::vector<Real>& g, int cols, std::vector<Real>& out) {
    for (int i = 0; i < m_rows; ++i) {
      const Real* row = g.data() + std::size_t(i) * cols;
      for (int j = 0; j < cols; ++j) out[j] += row[j];
    }
  };
  const std::size_t nhid = std::size_t(m_rows) * nh;

  gw3.noalias() += dz3.transpose() * h2;
  add_column_sums(buf_dz3, 3, grad.b3);
  dz.noalias() = dz3 * w3;
  relu_mask(buf_dz, tape.h2, nhid);
  gw2.noalias() += dz.transpose() * h1;
  add_column_sums(buf_dz, nh, grad.b2);
  dz1.noalias() = dz * w2;
  relu_mask(buf_dz1, tape.h1, nhid);
  gw1.noalias() += dz1.transpose() * in;
  add_column_sums(buf_dz1, nh, grad.b1);

  dcode.noalias() = dz1 * w1.leftCols(nd);
  ConstMapMat<Real> feat(tape.features.data(), m_rows, nf);
  ConstMapMat<Real> basis(params_.basis.data(), nd, nf);
  MapMat<Real> gbasis(grad.basis.data(), nd, nf);
  gbasis.noalias() += dcode.transpose() * feat;
  dfeat.noalias() = dcode * basis;

  const int g = cfg_.grid_res, rank = cfg_.app_rank;
  for (int i = 0; i < m_rows; ++i) {
    if (!tape.inside[i]) continue;
    const Lattice l = locate(tape.positions[i]);
    for (int m = 0; m < 3; ++m) {
      const auto v = pairing_view(params_.app_planes[m], params_.app_lines[m], g, rank, m, l);
      const std::ptrdiff_t po = v.p00 - params_.app_planes[m].data();
      const std::ptrdiff_t lo = v.l0 - params_.app_lines[m].data();
      Real* gp00 = grad.app_planes[m].data() + po;
      Real* gp01 = gp00 + rank;
      Real* gp10 = gp00 + std::size_t(g) * rank;
      Real* gp11 = gp10 + rank;
      Real* gl0 = grad.app_lines[m].data() + lo;
      Real* gl1 = gl0 + rank;
      for (int r = 0; r < rank; ++r) {
        const Real df = dfeat(i, m * rank + r);
        if (df == Real(0)) continue;
        const Real pv = v.w00 * v.p00[r] + v.w01 * v.p01[r] + v.w10 * v.p10[r] + v.w11 * v.p11[r];
        const Real lv = v.lw0 * v.l0[r] + v.lw1 * v.l1[r];
        const Real gpv = df * lv, glv = df * pv;
        gp00[r] += v.w00 * gpv;
        gp01[r] += v.w01 * gpv;
        gp10[r] += v.w10 * gpv;
        gp11[r] += v.w11 * gpv;
        gl0[r] += v.lw0 * glv;
        gl1[r] += v.lw1 * glv;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Snapshots and ensembles

template <typename Real>
FieldSnapshot<Real> snapshot(const TensorialField<Real>& field, int step) {
  return {step, std::make_shared<const TensorialField<Real>>(field)};
}

template <typename Real>
EnsembleField<Real>::EnsembleField(std::vector<FieldSnapshot<Real>> snapshots)
    : snaps_(std::move(snapshots)) {
  if (snaps_.empty()) throw ConfigError("EnsembleField: at least one snapshot is required");
  for (std::size_t i = 0; i < snaps_.size(); ++i) {
    if (!snaps_[i].field) throw ConfigError("EnsembleField: null snapshot");
    if (!(snaps_[i].field->config() == snaps_[0].field->config()))
      throw ConfigError("EnsembleField: snapshots have different configurations");
    if (i > 0 && snaps_[i].step <= snaps_[i - 1].step)
      throw ConfigError("EnsembleField: snapshot steps must be strictly increasing");
  }
}

// Running means; identical snapshots reproduce the single-snapshot value exactly.
template <typename Real>
void EnsembleField<Real>::density(std::span<const Vec3> x, std::span<Real> sigma) const {
  std::vector<Real> tmp(x.size());
  snaps_[0].field->density(x, sigma);
  for (std::size_t k = 1; k < snaps_.size(); ++k) {
    snaps_[k].field->density(x, tmp);
    const Real inv = Real(1) / Real(k + 1);
    for (std::size_t i = 0; i < x.size(); ++i) sigma[i] += (tmp[i] - sigma[i]) * inv;
  }
}

template <typename Real>
void EnsembleField<Real>::color(std::span<const Vec3> x, std::span<const Vec3> d,
                                std::span<Real> rgb) const {
  std::vector<Real> tmp(rgb.size());
  snaps_[0].field->color(x, d, rgb);
  for (std::size_t k = 1; k < snaps_.size(); ++k) {
    snaps_[k].field->color(x, d, tmp);
    const Real inv = Real(1) / Real(k + 1);
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] += (tmp[i] - rgb[i]) * inv;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint field_to_checkpoint(const TensorialField<float>& field, int step,
                               const nlohmann::json& extra_meta) {
  const FieldConfig& cfg = field.config();
  const std::int64_t g = cfg.grid_res;
  Checkpoint ckpt;
  ckpt.meta = {{"model", "field"}, {"config", cfg.to_json()}, {"step", step}};
  if (extra_meta.is_object())
    for (auto it = extra_meta.begin(); it != extra_meta.end(); ++it) ckpt.meta[it.key()] = it.value();
  field.params().for_each_group([&](const std::string& name, std::span<const float> s, bool) {
    std::vector<std::int64_t> shape;
    if (name.starts_with("density.plane")) shape = {g, g, cfg.density_rank};
    else if (name.starts_with("density.line")) shape = {g, cfg.density_rank};
    else if (name.starts_with("app.plane")) shape = {g, g, cfg.app_rank};
    else if (name.starts_with("app.line")) shape = {g, cfg.app_rank};
    else if (name == "basis") shape = {cfg.app_dim, cfg.app_features()};
    else if (name == "decoder.w1") shape = {cfg.hidden, cfg.decoder_input()};
    else if (name == "decoder.w2") shape = {cfg.hidden, cfg.hidden};
    else if (name == "decoder.w3") shape = {3, cfg.hidden};
    else shape = {static_cast<std::int64_t>(s.size())};
    ckpt.arrays[name] = NamedArray::from(std::vector<float>(s.begin(), s.end()), shape);
  });
  return ckpt;
}

TensorialField<float> field_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("model", "") != "field")
    throw IoError("checkpoint does not hold a radiance field");
  const FieldConfig cfg = FieldConfig::from_json(ckpt.meta.at("config"));
  FieldParams<float> p = FieldParams<float>::zeros(cfg);
  p.for_each_group([&](const std::string& name, std::span<float> s, bool) {
    const auto v = ckpt.array(name).to_vector<float>();
    if (v.size() != s.size()) throw ShapeError("checkpoint array " + name + " has wrong size");
    std::copy(v.begin(), v.end(), s.begin());
  });
  return TensorialField<float>(cfg, std::move(p));
}

template struct FieldParams<float>;
template struct FieldParams<double>;
template FieldParams<double> FieldParams<float>::cast<double>() const;
template FieldParams<float> FieldParams<double>::cast<float>() const;
template FieldParams<float> FieldParams<float>::cast<float>() const;
template FieldParams<double> FieldParams<double>::cast<double>() const;
template class RadianceField<float>;
template class RadianceField<double>;
template class TensorialField<float>;
template class TensorialField<double>;
template class EnsembleField<float>;
template class EnsembleField<double>;
template FieldSnapshot<float> snapshot(const TensorialField<float>&, int);
template FieldSnapshot<double> snapshot(const TensorialField<double>&, int);
template void encode_direction<float>(const Eigen::Matrix<float, 3, 1>&, int, float*);
template void encode_direction<double>(const Eigen::Matrix<double, 3, 1>&, int, double*);

}  // namespace zssrt
