#include "doctest.h"
#include "helpers.hpp"
#include "zssrt/errors.hpp"
#include "zssrt/sdm.hpp"

using namespace zssrt;
using T3 = Tensor3<double>;

namespace {

T3 random_tensor(int h, int w, int c, Rng& rng, double lo = 0, double hi = 1) {
  T3 t(h, w, c);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

PacStage<double> random_stage(int in, int out, Rng& rng) {
  auto s = PacStage<double>::zeros(in, out);
  for (auto& v : s.weight) v = rng.normal() * 0.3;
  for (auto& v : s.bias) v = rng.normal() * 0.3;
  s.beta = 0.7;
  return s;
}

// Plain strided cross-correlation with replicate padding.
T3 strided_conv(const T3& in, const PacStage<double>& st) {
  const int r = st.kernel / 2;
  T3 out((in.height + 1) / 2, (in.width + 1) / 2, st.out_channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int o = 0; o < st.out_channels; ++o) {
        double acc = st.bias[o];
        for (int ky = 0; ky < st.kernel; ++ky)
          for (int kx = 0; kx < st.kernel; ++kx)
            for (int c = 0; c < st.in_channels; ++c)
              acc += st.w(o, c, ky, kx) * in.clamped(2 * y + ky - r, 2 * x + kx - r, c);
        out.at(y, x, o) = acc;
      }
  return out;
}

double dot(const T3& a, const T3& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

}  // namespace

TEST_CASE("gradient view") {
  T3 flat(8, 8, 3, 0.4);
  for (double v : gradient_view(flat).data) CHECK(v == 0.0);

  // Luminance ramp I(u, v) = u: every channel equal to u gives luminance u.
  T3 ramp(7, 9, 3);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x)
      for (int c = 0; c < 3; ++c) ramp.at(y, x, c) = x;
  const T3 g = gradient_view(ramp);
  // Direct 3x3 application of the horizontal kernel at an interior pixel.
  const int k[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  double du = 0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) du += k[a][b] * double(4 + b - 1);
  CHECK(du == 8.0);
  for (int y = 1; y < 6; ++y)
    for (int x = 1; x < 8; ++x) CHECK(g.at(y, x) == doctest::Approx(8.0).epsilon(1e-12));

  Rng rng(1);
  const T3 img = random_tensor(10, 13, 3, rng);
  T3 tr(13, 10, 3);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 13; ++x)
      for (int c = 0; c < 3; ++c) tr.at(x, y, c) = img.at(y, x, c);
  const T3 ga = gradient_view(img), gb = gradient_view(tr);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 13; ++x) CHECK(ga.at(y, x) == doctest::Approx(gb.at(x, y)).epsilon(1e-12));

  T3 shifted = img;
  for (auto& v : shifted.data) v += 0.25;
  const T3 gs = gradient_view(shifted);
  for (std::size_t i = 0; i < ga.data.size(); ++i) CHECK(std::abs(ga.data[i] - gs.data[i]) < 1e-12);

  CHECK_THROWS_AS(gradient_view(T3(2, 8, 3)), ShapeError);
}

TEST_CASE("gradient view backward matches central differences") {
  Rng rng(2);
  T3 img = random_tensor(6, 7, 3, rng);
  const T3 w = random_tensor(6, 7, 1, rng, -1, 1);
  T3 d_img(6, 7, 3);
  gradient_view_backward(img, w, d_img);
  const double h = 1e-6;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double keep = img.data[i];
    img.data[i] = keep + h;
    const double lp = dot(gradient_view(img), w);
    img.data[i] = keep - h;
    const double lm = dot(gradient_view(img), w);
    img.data[i] = keep;
    CHECK(testutil::close_rel(d_img.data[i], (lp - lm) / (2 * h), 1e-3, 1e-8));
  }
}

TEST_CASE("pixel-adaptive convolution") {
  Rng rng(3);
  const auto st = random_stage(2, 3, rng);
  const T3 in = random_tensor(8, 6, 2, rng);
  const T3 flat(8, 6, 1, 0.3);
  const T3 a = pac_apply(in, flat, st), b = strided_conv(in, st);
  REQUIRE(a.same_shape(b));
  for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(std::abs(a.data[i] - b.data[i]) <= 1e-6);

  auto zero_beta = st;
  zero_beta.beta = 0;
  const T3 guide = random_tensor(8, 6, 1, rng, 0, 5);
  const T3 c = pac_apply(in, guide, zero_beta);
  for (std::size_t i = 0; i < c.data.size(); ++i) CHECK(std::abs(c.data[i] - b.data[i]) <= 1e-6);

  CHECK_THROWS_AS(pac_apply(in, T3(4, 6, 1), st), ShapeError);
}

TEST_CASE("pixel-adaptive convolution on a 5x5 input matches direct summation") {
  Rng rng(4);
  auto st = random_stage(1, 1, rng);
  st.beta = 1.3;
  const T3 in = random_tensor(5, 5, 1, rng);
  const T3 f = random_tensor(5, 5, 1, rng, 0, 2);
  const T3 out = pac_apply(in, f, st);
  REQUIRE(out.height == 3);
  REQUIRE(out.width == 3);
  for (int oy = 0; oy < 3; ++oy)
    for (int ox = 0; ox < 3; ++ox) {
      const int iy = 2 * oy, ix = 2 * ox;
      double v = st.bias[0];
      for (int jy = iy - 2; jy <= iy + 2; ++jy)
        for (int jx = ix - 2; jx <= ix + 2; ++jx) {
          const int cy = jy < 0 ? 0 : (jy > 4 ? 4 : jy);
          const int cx = jx < 0 ? 0 : (jx > 4 ? 4 : jx);
          const double df = f.at(iy, ix) - f.at(cy, cx);
          const double kern = std::exp(-st.beta * df * df / 2);
          v += kern * st.w(0, 0, jy - iy + 2, jx - ix + 2) * in.at(cy, cx);
        }
      CHECK(std::abs(out.at(oy, ox) - v) <= 1e-7);
    }
}

TEST_CASE("pixel-adaptive convolution gradients match central differences") {
  Rng rng(5);
  for (int trial = 0; trial < 4; ++trial) {
    auto st = random_stage(2, 2, rng);
    T3 in = random_tensor(5, 5, 2, rng);
    T3 gd = random_tensor(5, 5, 1, rng, 0, 1.5);
    const T3 w = random_tensor(3, 3, 2, rng, -1, 1);
    auto loss = [&]() { return dot(pac_apply(in, gd, st), w); };
    T3 d_in(5, 5, 2), d_g(5, 5, 1);
    auto d_st = PacStage<double>::zeros(2, 2);
    d_st.beta = 0;
    pac_backward(in, gd, st, w, PacGrads<double>{&d_in, &d_g, &d_st});
    const double h = 1e-6;
    auto check = [&](double& param, double analytic) {
      const double keep = param;
      param = keep + h;
      const double lp = loss();
      param = keep - h;
      const double lm = loss();
      param = keep;
      CHECK(testutil::close_rel(analytic, (lp - lm) / (2 * h), 1e-3, 1e-8));
    };
    for (std::size_t i = 0; i < st.weight.size(); i += 7) check(st.weight[i], d_st.weight[i]);
    for (std::size_t i = 0; i < st.bias.size(); ++i) check(st.bias[i], d_st.bias[i]);
    check(st.beta, d_st.beta);
    for (std::size_t i = 0; i < in.data.size(); ++i) check(in.data[i], d_in.data[i]);
    for (std::size_t i = 0; i < gd.data.size(); ++i) check(gd.data[i], d_g.data[i]);
  }
}

TEST_CASE("SDM shapes and residual identity") {
  Rng rng(6);
  auto net = SdmNetwork<double>::zeros(2, 16);
  const T3 img = random_tensor(16, 12, 3, rng);
  const T3 out = sdm_forward(net, img);
  const T3 box = box_downsample(img, 2);
  CHECK(out.data == box.data);

  auto n4 = SdmNetwork<double>::init(4, 16, 1);
  CHECK(n4.stages.size() == 2);
  const T3 big = random_tensor(64, 64, 3, rng);
  const T3 o4 = sdm_forward(n4, big);
  CHECK(o4.height == 16);
  CHECK(o4.width == 16);
  CHECK(o4.channels == 3);
  // Fully convolutional: a larger input scales the output.
  const T3 o4b = sdm_forward(n4, random_tensor(256, 128, 3, rng));
  CHECK(o4b.height == 64);
  CHECK(o4b.width == 32);

  // Zero stage parameters: the output differs from the box average by the
  // head's response to softplus(0) features.
  auto z = SdmNetwork<double>::init(2, 8, 3);
  for (auto& st : z.stages) {
    std::fill(st.weight.begin(), st.weight.end(), 0.0);
    std::fill(st.bias.begin(), st.bias.end(), 0.0);
  }
  const T3 oz = sdm_forward(z, img);
  for (int o = 0; o < 3; ++o) {
    double head = z.head_bias[o];
    for (int c = 0; c < 8; ++c) head += z.head_weight[o * 8 + c] * std::log(2.0);
    for (int y = 0; y < oz.height; ++y)
      for (int x = 0; x < oz.width; ++x)
        CHECK(std::abs(oz.at(y, x, o) - box.at(y, x, o) - head) <= 1e-12);
  }

  const auto cnet = SdmNetwork<double>::init(2, 8, 4);
  const T3 clamped = sdm_forward<double>(cnet, img, nullptr, true);
  for (double v : clamped.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  CHECK_THROWS_AS(sdm_forward(net, random_tensor(15, 16, 3, rng)), ShapeError);
  CHECK_THROWS_AS(SdmNetwork<double>::zeros(3, 16), ConfigError);
}

TEST_CASE("SDM backward matches central differences") {
  for (int scale : {2, 4}) {
    Rng rng(7 + scale);
    auto net = SdmNetwork<double>::init(scale, 4, 11);
    for (auto& st : net.stages) st.beta = 0.8;
    T3 img = random_tensor(4 * scale, 4 * scale, 3, rng);
    const T3 w = random_tensor(4, 4, 3, rng, -1, 1);
    SdmTape<double> tape;
    sdm_forward(net, img, &tape);
    T3 d_img(img.height, img.width, 3);
    auto d_net = SdmNetwork<double>::zeros(scale, 4);
    d_net.set_zero();
    sdm_backward(net, tape, w, &d_img, &d_net);

    auto loss = [&]() { return dot(sdm_forward(net, img), w); };
    const double h = 1e-6;
    std::vector<std::span<double>> ps, gs;
    net.for_each_group([&](const std::string&, std::span<double> s) { ps.push_back(s); });
    d_net.for_each_group([&](const std::string&, std::span<double> s) { gs.push_back(s); });
    for (std::size_t g = 0; g < ps.size(); ++g)
      for (std::size_t i = 0; i < ps[g].size(); i += 1 + ps[g].size() / 5) {
        const double keep = ps[g][i];
        ps[g][i] = keep + h;
        const double lp = loss();
        ps[g][i] = keep - h;
        const double lm = loss();
        ps[g][i] = keep;
        CHECK(testutil::close_rel(gs[g][i], (lp - lm) / (2 * h), 1e-3, 1e-8));
      }
    for (std::size_t i = 0; i < img.data.size(); i += 3) {
      const double keep = img.data[i];
      img.data[i] = keep + h;
      const double lp = loss();
      img.data[i] = keep - h;
      const double lm = loss();
      img.data[i] = keep;
      CHECK(testutil::close_rel(d_img.data[i], (lp - lm) / (2 * h), 1e-3, 1e-8));
    }
  }
}

TEST_CASE("SDM checkpoint roundtrip") {
  const auto net = SdmNetwork<float>::init(4, 16, 5);
  const auto dir = testutil::temp_dir("sdm_ckpt");
  sdm_to_checkpoint(net).save(dir / "sdm.ckpt");
  const auto ck = Checkpoint::load(dir / "sdm.ckpt");
  CHECK(ck.meta["model"] == "sdm");
  const auto back = sdm_from_checkpoint(ck);
  CHECK(back.scale == 4);
  CHECK(back.stages.size() == 2);
  CHECK(back.head_weight == net.head_weight);
  CHECK(back.stages[1].weight == net.stages[1].weight);
  CHECK(back.stages[0].beta == net.stages[0].beta);
}
