#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "zssrt/checkpoint.hpp"
#include "zssrt/math.hpp"
#include "zssrt/tensor.hpp"

namespace zssrt {

// Sobel gradient magnitude of the luminance, replicate padding. H x W x 1.
template <typename Real>
Tensor3<Real> gradient_view(const Tensor3<Real>& img);

template <typename Real>
void gradient_view_backward(const Tensor3<Real>& img, const Tensor3<Real>& d_magnitude,
                            Tensor3<Real>& d_img);

// One stride-2 pixel-adaptive convolution layer.
template <typename Real>
struct PacStage {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 5;
  std::vector<Real> weight;  // out x in x k x k
  std::vector<Real> bias;    // out
  Real beta = 1;             // guidance bandwidth

  Real& w(int o, int c, int dy, int dx) {
    return weight[((std::size_t(o) * in_channels + c) * kernel + dy) * kernel + dx];
  }
  const Real& w(int o, int c, int dy, int dx) const {
    return weight[((std::size_t(o) * in_channels + c) * kernel + dy) * kernel + dx];
  }
  static PacStage zeros(int in, int out, int kernel = 5);
};

// Output site (y, x) is anchored at input (2y, 2x); its k x k window is
// weighted by exp(-beta/2 * |f_anchor - f_j|^2). Replicate padding; odd
// sizes give ceil(H/2) x ceil(W/2) outputs.
template <typename Real>
Tensor3<Real> pac_apply(const Tensor3<Real>& input, const Tensor3<Real>& guidance,
                        const PacStage<Real>& stage);

template <typename Real>
struct PacGrads {
  Tensor3<Real>* d_input = nullptr;
  Tensor3<Real>* d_guidance = nullptr;
  PacStage<Real>* d_stage = nullptr;  // weight, bias and beta accumulate here
};

template <typename Real>
void pac_backward(const Tensor3<Real>& input, const Tensor3<Real>& guidance,
                  const PacStage<Real>& stage, const Tensor3<Real>& d_out,
                  const PacGrads<Real>& grads);

// Learned degradation: log2(s) PAC stages with softplus between them, a 1x1
// head to RGB, optionally added to the s x s box average of the input.
template <typename Real>
struct SdmNetwork {
  int scale = 2;
  bool residual = true;
  std::vector<PacStage<Real>> stages;
  int head_in = 0;
  std::vector<Real> head_weight;  // 3 x head_in
  std::vector<Real> head_bias;    // 3

  static SdmNetwork init(int scale, int width, std::uint64_t seed);
  static SdmNetwork zeros(int scale, int width);

  template <typename F>
  void for_each_group(F&& f) {
    visit(*this, std::forward<F>(f));
  }
  template <typename F>
  void for_each_group(F&& f) const {
    visit(*this, std::forward<F>(f));
  }
  void set_zero();

  template <typename U>
  SdmNetwork<U> cast() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    for (std::size_t i = 0; i < self.stages.size(); ++i) {
      const std::string p = "stage" + std::to_string(i);
      f(p + ".weight", std::span(self.stages[i].weight));
      f(p + ".bias", std::span(self.stages[i].bias));
      f(p + ".beta", std::span(&self.stages[i].beta, 1));
    }
    f(std::string("head.weight"), std::span(self.head_weight));
    f(std::string("head.bias"), std::span(self.head_bias));
  }
};

template <typename Real>
struct SdmTape {
  Tensor3<Real> input;
  std::vector<Tensor3<Real>> guidance;   // per stage
  std::vector<Tensor3<Real>> stage_in;   // per stage
  std::vector<Tensor3<Real>> pre_act;    // per stage, before softplus
  Tensor3<Real> features;                // input to the head
};

// Maps an (sH) x (sW) x 3 image to H x W x 3. `clamp_output` is for
// evaluation; training uses the unclamped output.
template <typename Real>
Tensor3<Real> sdm_forward(const SdmNetwork<Real>& net, const Tensor3<Real>& img,
                          SdmTape<Real>* tape = nullptr, bool clamp_output = false);

// Backpropagates through a forward pass recorded in `tape`. Either output may
// be null: d_img receives input gradients (guidance path included), d_net
// accumulates parameter gradients.
template <typename Real>
void sdm_backward(const SdmNetwork<Real>& net, const SdmTape<Real>& tape,
                  const Tensor3<Real>& d_out, Tensor3<Real>* d_img, SdmNetwork<Real>* d_net);

Checkpoint sdm_to_checkpoint(const SdmNetwork<float>& net, const nlohmann::json& extra = {});
SdmNetwork<float> sdm_from_checkpoint(const Checkpoint& ckpt);

}  // namespace zssrt
