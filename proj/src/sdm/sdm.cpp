#include "zssrt/sdm.hpp"

#include <cmath>

#include "zssrt/errors.hpp"
#include "zssrt/rng.hpp"

namespace zssrt {
namespace {

constexpr double kLumaR = 0.299, kLumaB = 0.114;
// Horizontal Sobel kernel; the vertical one is its transpose.
constexpr int kSobel[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};

template <typename Real>
Tensor3<Real> luminance_of(const Tensor3<Real>& img) {
  Tensor3<Real> l(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      // 0.299 r + 0.587 g + 0.114 b; exact on gray pixels.
      const Real g = img.at(y, x, 1);
      l.at(y, x) = g + Real(kLumaR) * (img.at(y, x, 0) - g) + Real(kLumaB) * (img.at(y, x, 2) - g);
    }
  return l;
}

// Each response is a difference of two weighted sums so constant regions give
// exactly zero.
template <typename Real>
void sobel(const Tensor3<Real>& l, int y, int x, Real& du, Real& dv) {
  auto v = [&](int a, int b) { return l.clamped(y + a - 1, x + b - 1); };
  du = (v(0, 2) + Real(2) * v(1, 2) + v(2, 2)) - (v(0, 0) + Real(2) * v(1, 0) + v(2, 0));
  dv = (v(2, 0) + Real(2) * v(2, 1) + v(2, 2)) - (v(0, 0) + Real(2) * v(0, 1) + v(0, 2));
}

template <typename Real>
void fill_uniform(std::vector<Real>& v, Rng& rng, double bound) {
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
}

}  // namespace

template <typename Real>
Tensor3<Real> gradient_view(const Tensor3<Real>& img) {
  if (img.height < 3 || img.width < 3)
    throw ShapeError("gradient_view: image " + img.shape_string() + " smaller than 3x3");
  if (img.channels != 3) throw ShapeError("gradient_view: expected 3 channels");
  const Tensor3<Real> l = luminance_of(img);
  Tensor3<Real> g(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      Real du, dv;
      sobel(l, y, x, du, dv);
      g.at(y, x) = std::sqrt(du * du + dv * dv);
    }
  return g;
}

template <typename Real>
void gradient_view_backward(const Tensor3<Real>& img, const Tensor3<Real>& d_magnitude,
                            Tensor3<Real>& d_img) {
  const Tensor3<Real> l = luminance_of(img);
  Tensor3<Real> d_l(img.height, img.width, 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const Real gm = d_magnitude.at(y, x);
      if (gm == Real(0)) continue;
      Real du, dv;
      sobel(l, y, x, du, dv);
      const Real mag = std::sqrt(du * du + dv * dv);
      if (mag <= Real(0)) continue;
      const Real gu = gm * du / mag, gv = gm * dv / mag;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          const int yy = std::clamp(y + a - 1, 0, img.height - 1);
          const int xx = std::clamp(x + b - 1, 0, img.width - 1);
          d_l.at(yy, xx) += gu * Real(kSobel[a][b]) + gv * Real(kSobel[b][a]);
        }
    }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const Real dl = d_l.at(y, x);
      d_img.at(y, x, 0) += Real(kLumaR) * dl;
      d_img.at(y, x, 1) += (Real(1) - Real(kLumaR) - Real(kLumaB)) * dl;
      d_img.at(y, x, 2) += Real(kLumaB) * dl;
    }
}

template <typename Real>
PacStage<Real> PacStage<Real>::zeros(int in, int out, int kernel) {
  PacStage s;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = kernel;
  s.weight.assign(std::size_t(out) * in * kernel * kernel, Real(0));
  s.bias.assign(out, Real(0));
  s.beta = 1;
  return s;
}

namespace {

template <typename Real>
void check_pac_shapes(const Tensor3<Real>& input, const Tensor3<Real>& guidance,
                      const PacStage<Real>& stage) {
  if (input.height != guidance.height || input.width != guidance.width)
    throw ShapeError("pac: guidance " + guidance.shape_string() + " not aligned with input " +
                     input.shape_string());
  if (input.channels != stage.in_channels)
    throw ShapeError("pac: input has " + std::to_string(input.channels) + " channels, stage expects " +
                     std::to_string(stage.in_channels));
}

template <typename Real>
Real guidance_distance(const Tensor3<Real>& g, int y0, int x0, int y1, int x1) {
  Real d = 0;
  for (int c = 0; c < g.channels; ++c) {
    const Real t = g.at(y0, x0, c) - g.at(y1, x1, c);
    d += t * t;
  }
  return d;
}

}  // namespace

template <typename Real>
Tensor3<Real> pac_apply(const Tensor3<Real>& input, const Tensor3<Real>& guidance,
                        const PacStage<Real>& stage) {
  check_pac_shapes(input, guidance, stage);
  const int k = stage.kernel, r = k / 2, ci = stage.in_channels, co = stage.out_channels;
  Tensor3<Real> out((input.height + 1) / 2, (input.width + 1) / 2, co);
  std::vector<Real> acc(co);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const int ay = 2 * y, ax = 2 * x;
      for (int o = 0; o < co; ++o) acc[o] = stage.bias[o];
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int jy = std::clamp(ay + ky - r, 0, input.height - 1);
          const int jx = std::clamp(ax + kx - r, 0, input.width - 1);
          const Real kern =
              std::exp(-stage.beta * Real(0.5) * guidance_distance(guidance, ay, ax, jy, jx));
          const Real* v = &input.at(jy, jx, 0);
          for (int o = 0; o < co; ++o) {
            Real s = 0;
            for (int c = 0; c < ci; ++c) s += stage.w(o, c, ky, kx) * v[c];
            acc[o] += kern * s;
          }
        }
      for (int o = 0; o < co; ++o) out.at(y, x, o) = acc[o];
    }
  return out;
}

template <typename Real>
void pac_backward(const Tensor3<Real>& input, const Tensor3<Real>& guidance,
                  const PacStage<Real>& stage, const Tensor3<Real>& d_out,
                  const PacGrads<Real>& grads) {
  check_pac_shapes(input, guidance, stage);
  const int k = stage.kernel, r = k / 2, ci = stage.in_channels, co = stage.out_channels;
  for (int y = 0; y < d_out.height; ++y)
    for (int x = 0; x < d_out.width; ++x) {
      const int ay = 2 * y, ax = 2 * x;
      const Real* g = &d_out.at(y, x, 0);
      if (grads.d_stage)
        for (int o = 0; o < co; ++o) grads.d_stage->bias[o] += g[o];
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const int jy = std::clamp(ay + ky - r, 0, input.height - 1);
          const int jx = std::clamp(ax + kx - r, 0, input.width - 1);
          const Real dist = guidance_distance(guidance, ay, ax, jy, jx);
          const Real kern = std::exp(-stage.beta * Real(0.5) * dist);
          const Real* v = &input.at(jy, jx, 0);
          Real d_kern = 0;
          for (int o = 0; o < co; ++o) {
            Real s = 0;
            for (int c = 0; c < ci; ++c) s += stage.w(o, c, ky, kx) * v[c];
            d_kern += g[o] * s;
            const Real gk = g[o] * kern;
            if (grads.d_stage)
              for (int c = 0; c < ci; ++c) grads.d_stage->w(o, c, ky, kx) += gk * v[c];
            if (grads.d_input)
              for (int c = 0; c < ci; ++c) grads.d_input->at(jy, jx, c) += gk * stage.w(o, c, ky, kx);
          }
          const Real d_arg = d_kern * kern;  // d/d(-beta*dist/2)
          if (grads.d_stage) grads.d_stage->beta += d_arg * Real(-0.5) * dist;
          if (grads.d_guidance && (ay != jy || ax != jx))
            for (int c = 0; c < guidance.channels; ++c) {
              const Real diff = guidance.at(ay, ax, c) - guidance.at(jy, jx, c);
              const Real t = d_arg * -stage.beta * diff;
              grads.d_guidance->at(ay, ax, c) += t;
              grads.d_guidance->at(jy, jx, c) -= t;
            }
        }
    }
}

template <typename Real>
SdmNetwork<Real> SdmNetwork<Real>::zeros(int scale, int width) {
  if (scale != 2 && scale != 4) throw ConfigError("sdm: scale must be 2 or 4");
  if (width < 1) throw ConfigError("sdm: width must be >= 1");
  SdmNetwork net;
  net.scale = scale;
  const int n_stages = scale == 2 ? 1 : 2;
  int in = 3;
  for (int i = 0; i < n_stages; ++i) {
    net.stages.push_back(PacStage<Real>::zeros(in, width));
    in = width;
  }
  net.head_in = width;
  net.head_weight.assign(std::size_t(3) * width, Real(0));
  net.head_bias.assign(3, Real(0));
  return net;
}

// Fan-in uniform initialization; beta starts at 1.
template <typename Real>
SdmNetwork<Real> SdmNetwork<Real>::init(int scale, int width, std::uint64_t seed) {
  SdmNetwork net = zeros(scale, width);
  Rng rng(splitmix64(seed ^ 0x5d3aULL));
  for (auto& st : net.stages) {
    const double bound = 1.0 / std::sqrt(double(st.in_channels * st.kernel * st.kernel));
    fill_uniform(st.weight, rng, bound);
    fill_uniform(st.bias, rng, bound);
  }
  const double hb = 1.0 / std::sqrt(double(net.head_in));
  fill_uniform(net.head_weight, rng, hb);
  fill_uniform(net.head_bias, rng, hb);
  return net;
}

template <typename Real>
void SdmNetwork<Real>::set_zero() {
  for_each_group([](const std::string&, std::span<Real> s) { std::fill(s.begin(), s.end(), Real(0)); });
}

template <typename Real>
template <typename U>
SdmNetwork<U> SdmNetwork<Real>::cast() const {
  SdmNetwork<U> out;
  out.scale = scale;
  out.residual = residual;
  out.head_in = head_in;
  for (const auto& st : stages) {
    PacStage<U> s;
    s.in_channels = st.in_channels;
    s.out_channels = st.out_channels;
    s.kernel = st.kernel;
    s.weight.assign(st.weight.begin(), st.weight.end());
    s.bias.assign(st.bias.begin(), st.bias.end());
    s.beta = static_cast<U>(st.beta);
    out.stages.push_back(std::move(s));
  }
  out.head_weight.assign(head_weight.begin(), head_weight.end());
  out.head_bias.assign(head_bias.begin(), head_bias.end());
  return out;
}

template <typename Real>
Tensor3<Real> sdm_forward(const SdmNetwork<Real>& net, const Tensor3<Real>& img,
                          SdmTape<Real>* tape, bool clamp_output) {
  const int s = net.scale;
  if (img.height % s != 0 || img.width % s != 0)
    throw ShapeError("sdm_forward: input " + img.shape_string() + " not divisible by " +
                     std::to_string(s));
  if (img.channels != 3) throw ShapeError("sdm_forward: expected 3 channels");
  Tensor3<Real> guide = gradient_view(img);
  Tensor3<Real> h = img;
  if (tape) {
    tape->input = img;
    tape->guidance.clear();
    tape->stage_in.clear();
    tape->pre_act.clear();
  }
  for (std::size_t i = 0; i < net.stages.size(); ++i) {
    if (i > 0) guide = box_downsample(guide, 2);
    Tensor3<Real> pre = pac_apply(h, guide, net.stages[i]);
    if (tape) {
      tape->guidance.push_back(guide);
      tape->stage_in.push_back(h);
      tape->pre_act.push_back(pre);
    }
    for (auto& v : pre.data) v = softplus(v);
    h = std::move(pre);
  }
  if (tape) tape->features = h;

  Tensor3<Real> out(h.height, h.width, 3);
  if (net.residual) out = box_downsample(img, s);
  for (int y = 0; y < h.height; ++y)
    for (int x = 0; x < h.width; ++x) {
      const Real* f = &h.at(y, x, 0);
      for (int o = 0; o < 3; ++o) {
        Real acc = net.head_bias[o];
        for (int c = 0; c < net.head_in; ++c) acc += net.head_weight[std::size_t(o) * net.head_in + c] * f[c];
        out.at(y, x, o) += acc;
      }
    }
  if (clamp_output)
    for (auto& v : out.data) v = std::clamp(v, Real(0), Real(1));
  return out;
}

template <typename Real>
void sdm_backward(const SdmNetwork<Real>& net, const SdmTape<Real>& tape,
                  const Tensor3<Real>& d_out, Tensor3<Real>* d_img, SdmNetwork<Real>* d_net) {
  const Tensor3<Real>& feat = tape.features;
  require_same_shape(d_out, Tensor3<Real>(feat.height, feat.width, 3), "sdm_backward");
  Tensor3<Real> d_h(feat.height, feat.width, feat.channels);
  for (int y = 0; y < feat.height; ++y)
    for (int x = 0; x < feat.width; ++x) {
      const Real* f = &feat.at(y, x, 0);
      for (int o = 0; o < 3; ++o) {
        const Real g = d_out.at(y, x, o);
        if (d_net) {
          d_net->head_bias[o] += g;
          for (int c = 0; c < net.head_in; ++c) d_net->head_weight[std::size_t(o) * net.head_in + c] += g * f[c];
        }
        for (int c = 0; c < net.head_in; ++c)
          d_h.at(y, x, c) += g * net.head_weight[std::size_t(o) * net.head_in + c];
      }
    }

  const std::size_t n = net.stages.size();
  std::vector<Tensor3<Real>> d_guides(n);
  for (std::size_t i = n; i-- > 0;) {
    const Tensor3<Real>& pre = tape.pre_act[i];
    for (std::size_t q = 0; q < d_h.data.size(); ++q) d_h.data[q] *= sigmoid(pre.data[q]);
    const Tensor3<Real>& in = tape.stage_in[i];
    Tensor3<Real> d_in(in.height, in.width, in.channels);
    d_guides[i] = Tensor3<Real>(tape.guidance[i].height, tape.guidance[i].width, 1);
    PacGrads<Real> pg;
    pg.d_input = (i > 0 || d_img) ? &d_in : nullptr;
    pg.d_guidance = d_img ? &d_guides[i] : nullptr;
    pg.d_stage = d_net ? &d_net->stages[i] : nullptr;
    pac_backward(in, tape.guidance[i], net.stages[i], d_h, pg);
    d_h = std::move(d_in);
  }
  if (!d_img) return;
  // d_h now holds the gradient at the network input.
  for (std::size_t q = 0; q < d_h.data.size(); ++q) d_img->data[q] += d_h.data[q];
  if (net.residual) box_downsample_backward(d_out, net.scale, *d_img);
  // Guidance of stage i is the magnitude box-averaged i times.
  Tensor3<Real> d_g = d_guides[n - 1];
  for (std::size_t i = n - 1; i > 0; --i) {
    Tensor3<Real> up(d_guides[i - 1].height, d_guides[i - 1].width, 1);
    box_downsample_backward(d_g, 2, up);
    for (std::size_t q = 0; q < up.data.size(); ++q) up.data[q] += d_guides[i - 1].data[q];
    d_g = std::move(up);
  }
  gradient_view_backward(tape.input, d_g, *d_img);
}

Checkpoint sdm_to_checkpoint(const SdmNetwork<float>& net, const nlohmann::json& extra) {
  Checkpoint ckpt;
  ckpt.meta = {{"model", "sdm"},
               {"scale", net.scale},
               {"residual", net.residual},
               {"width", net.head_in},
               {"stages", net.stages.size()}};
  if (extra.is_object())
    for (auto it = extra.begin(); it != extra.end(); ++it) ckpt.meta[it.key()] = it.value();
  for (std::size_t i = 0; i < net.stages.size(); ++i) {
    const auto& st = net.stages[i];
    const std::string p = "stage" + std::to_string(i);
    ckpt.arrays[p + ".weight"] =
        NamedArray::from(st.weight, {st.out_channels, st.in_channels, st.kernel, st.kernel});
    ckpt.arrays[p + ".bias"] = NamedArray::from(st.bias, {st.out_channels});
    ckpt.arrays[p + ".beta"] = NamedArray::from(std::vector<float>{st.beta}, {1});
  }
  ckpt.arrays["head.weight"] = NamedArray::from(net.head_weight, {3, net.head_in});
  ckpt.arrays["head.bias"] = NamedArray::from(net.head_bias, {3});
  return ckpt;
}

SdmNetwork<float> sdm_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("model", "") != "sdm") throw IoError("checkpoint does not hold an SDM");
  SdmNetwork<float> net =
      SdmNetwork<float>::zeros(ckpt.meta.at("scale").get<int>(), ckpt.meta.at("width").get<int>());
  net.residual = ckpt.meta.value("residual", true);
  net.for_each_group([&](const std::string& name, std::span<float> s) {
    const auto v = ckpt.array(name).to_vector<float>();
    if (v.size() != s.size()) throw ShapeError("checkpoint array " + name + " has wrong size");
    std::copy(v.begin(), v.end(), s.begin());
  });
  return net;
}

#define ZSSRT_SDM_INSTANTIATE(T)                                                              \
  template Tensor3<T> gradient_view<T>(const Tensor3<T>&);                                    \
  template void gradient_view_backward<T>(const Tensor3<T>&, const Tensor3<T>&, Tensor3<T>&); \
  template struct PacStage<T>;                                                                \
  template Tensor3<T> pac_apply<T>(const Tensor3<T>&, const Tensor3<T>&, const PacStage<T>&); \
  template void pac_backward<T>(const Tensor3<T>&, const Tensor3<T>&, const PacStage<T>&,     \
                                const Tensor3<T>&, const PacGrads<T>&);                       \
  template struct SdmNetwork<T>;                                                              \
  template Tensor3<T> sdm_forward<T>(const SdmNetwork<T>&, const Tensor3<T>&, SdmTape<T>*,    \
                                     bool);                                                   \
  template void sdm_backward<T>(const SdmNetwork<T>&, const SdmTape<T>&, const Tensor3<T>&,   \
                                Tensor3<T>*, SdmNetwork<T>*);

ZSSRT_SDM_INSTANTIATE(float)
ZSSRT_SDM_INSTANTIATE(double)
template SdmNetwork<double> SdmNetwork<float>::cast<double>() const;
template SdmNetwork<float> SdmNetwork<double>::cast<float>() const;
template SdmNetwork<float> SdmNetwork<float>::cast<float>() const;

}  // namespace zssrt
