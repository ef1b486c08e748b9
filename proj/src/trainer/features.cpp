#include "zssrt/features.hpp"

#include <cmath>

#include "zssrt/errors.hpp"
#include "zssrt/math.hpp"
#include "zssrt/rng.hpp"

namespace zssrt {
namespace {

// 3x3 stride-2 convolution anchored at input (2y, 2x), replicate padding.
template <typename Real>
Tensor3<Real> conv3s2(const Tensor3<Real>& in, const typename ConvStackExtractor<Real>::Layer& l) {
  if (in.channels != l.in_channels)
    throw ShapeError("feature extractor: expected " + std::to_string(l.in_channels) +
                     " channels, got " + std::to_string(in.channels));
  Tensor3<Real> out((in.height + 1) / 2, (in.width + 1) / 2, l.out_channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int o = 0; o < l.out_channels; ++o) {
        Real acc = l.bias[o];
        const Real* w = &l.weight[std::size_t(o) * l.in_channels * 9];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const Real* v = &in.clamped(2 * y + ky - 1, 2 * x + kx - 1, 0);
            for (int c = 0; c < l.in_channels; ++c) acc += w[c * 9 + ky * 3 + kx] * v[c];
          }
        out.at(y, x, o) = acc;
      }
  return out;
}

template <typename Real>
void conv3s2_backward_input(const Tensor3<Real>& d_out,
                            const typename ConvStackExtractor<Real>::Layer& l,
                            Tensor3<Real>& d_in) {
  for (int y = 0; y < d_out.height; ++y)
    for (int x = 0; x < d_out.width; ++x)
      for (int o = 0; o < l.out_channels; ++o) {
        const Real g = d_out.at(y, x, o);
        if (g == Real(0)) continue;
        const Real* w = &l.weight[std::size_t(o) * l.in_channels * 9];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int yy = std::clamp(2 * y + ky - 1, 0, d_in.height - 1);
            const int xx = std::clamp(2 * x + kx - 1, 0, d_in.width - 1);
            Real* d = &d_in.at(yy, xx, 0);
            for (int c = 0; c < l.in_channels; ++c) d[c] += g * w[c * 9 + ky * 3 + kx];
          }
      }
}

}  // namespace

template <typename Real>
ConvStackExtractor<Real> ConvStackExtractor<Real>::random(const std::vector<int>& channels,
                                                          std::uint64_t seed) {
  if (channels.size() < 2) throw ConfigError("feature extractor needs at least one layer");
  Rng rng(splitmix64(seed ^ 0xfea7ULL));
  std::vector<Layer> layers;
  for (std::size_t i = 0; i + 1 < channels.size(); ++i) {
    Layer l;
    l.in_channels = channels[i];
    l.out_channels = channels[i + 1];
    l.weight.resize(std::size_t(l.out_channels) * l.in_channels * 9);
    const double std_dev = std::sqrt(2.0 / (l.in_channels * 9));
    for (auto& w : l.weight) w = static_cast<Real>(std_dev * rng.normal());
    l.bias.assign(l.out_channels, Real(0));
    layers.push_back(std::move(l));
  }
  return ConvStackExtractor(std::move(layers));
}

template <typename Real>
ConvStackExtractor<Real> ConvStackExtractor<Real>::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.value("model", "") != "extractor")
    throw IoError("checkpoint does not hold a feature extractor");
  std::vector<Layer> layers;
  for (int i = 0;; ++i) {
    const std::string p = "layer" + std::to_string(i);
    if (!ckpt.arrays.count(p + ".weight")) break;
    const NamedArray& w = ckpt.array(p + ".weight");
    if (w.shape.size() != 4 || w.shape[2] != 3 || w.shape[3] != 3)
      throw ShapeError(p + ".weight must be out x in x 3 x 3");
    Layer l;
    l.out_channels = static_cast<int>(w.shape[0]);
    l.in_channels = static_cast<int>(w.shape[1]);
    l.weight = w.to_vector<Real>();
    l.bias = ckpt.array(p + ".bias").to_vector<Real>();
    if (static_cast<int>(l.bias.size()) != l.out_channels) throw ShapeError(p + ".bias has wrong size");
    if (!layers.empty() && layers.back().out_channels != l.in_channels)
      throw ShapeError(p + " does not chain with the previous layer");
    layers.push_back(std::move(l));
  }
  if (layers.empty()) throw IoError("extractor checkpoint has no layers");
  return ConvStackExtractor(std::move(layers));
}

template <typename Real>
Checkpoint ConvStackExtractor<Real>::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta = {{"model", "extractor"}, {"layers", layers_.size()}};
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = "layer" + std::to_string(i);
    ckpt.arrays[p + ".weight"] = NamedArray::from(
        std::vector<float>(l.weight.begin(), l.weight.end()), {l.out_channels, l.in_channels, 3, 3});
    ckpt.arrays[p + ".bias"] =
        NamedArray::from(std::vector<float>(l.bias.begin(), l.bias.end()), {l.out_channels});
  }
  return ckpt;
}

template <typename Real>
std::vector<Tensor3<Real>> ConvStackExtractor<Real>::features(
    const Tensor3<Real>& img, std::vector<Tensor3<Real>>* cache) const {
  std::vector<Tensor3<Real>> feats;
  if (cache) cache->clear();
  const Tensor3<Real>* in = &img;
  for (const auto& l : layers_) {
    Tensor3<Real> pre = conv3s2(*in, l);
    if (cache) cache->push_back(pre);
    for (auto& v : pre.data) v = softplus(v);
    feats.push_back(std::move(pre));
    in = &feats.back();
  }
  return feats;
}

template <typename Real>
void ConvStackExtractor<Real>::backward(const Tensor3<Real>& img,
                                        const std::vector<Tensor3<Real>>& cache,
                                        const std::vector<Tensor3<Real>>& d_features,
                                        Tensor3<Real>& d_img) const {
  if (cache.size() != layers_.size() || d_features.size() != layers_.size())
    throw ShapeError("feature extractor backward: cache does not match layers");
  Tensor3<Real> d_next;  // gradient flowing into layer i's output from layer i+1
  for (std::size_t i = layers_.size(); i-- > 0;) {
    Tensor3<Real> d = d_features[i];
    if (!d_next.empty())
      for (std::size_t q = 0; q < d.data.size(); ++q) d.data[q] += d_next.data[q];
    for (std::size_t q = 0; q < d.data.size(); ++q) d.data[q] *= sigmoid(cache[i].data[q]);
    if (i == 0) {
      conv3s2_backward_input(d, layers_[0], d_img);
    } else {
      Tensor3<Real> d_in(cache[i - 1].height, cache[i - 1].width, cache[i - 1].channels);
      conv3s2_backward_input(d, layers_[i], d_in);
      d_next = std::move(d_in);
    }
  }
  (void)img;
}

template <typename Real>
template <typename U>
ConvStackExtractor<U> ConvStackExtractor<Real>::cast() const {
  std::vector<typename ConvStackExtractor<U>::Layer> out;
  for (const auto& l : layers_) {
    typename ConvStackExtractor<U>::Layer m;
    m.in_channels = l.in_channels;
    m.out_channels = l.out_channels;
    m.weight.assign(l.weight.begin(), l.weight.end());
    m.bias.assign(l.bias.begin(), l.bias.end());
    out.push_back(std::move(m));
  }
  return ConvStackExtractor<U>(std::move(out));
}

template <typename Real>
std::unique_ptr<FeatureExtractor<Real>> default_extractor(std::uint64_t seed) {
  return std::make_unique<ConvStackExtractor<Real>>(
      ConvStackExtractor<Real>::random({3, 8, 16, 32}, seed));
}

template <typename Real>
Real perceptual_loss(const FeatureExtractor<Real>& ext, const Tensor3<Real>& a,
                     const Tensor3<Real>& b, Tensor3<Real>* d_a) {
  require_same_shape(a, b, "perceptual_loss");
  std::vector<Tensor3<Real>> cache;
  const auto fa = ext.features(a, d_a ? &cache : nullptr);
  const auto fb = ext.features(b, nullptr);
  Real loss = 0;
  const Real depth_w = Real(1) / Real(fa.size());
  std::vector<Tensor3<Real>> d_feats;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    Real acc = 0;
    Tensor3<Real> d(fa[i].height, fa[i].width, fa[i].channels);
    const Real inv_n = Real(1) / Real(fa[i].size());
    for (std::size_t q = 0; q < fa[i].data.size(); ++q) {
      const Real diff = fa[i].data[q] - fb[i].data[q];
      acc += diff * diff;
      d.data[q] = Real(2) * diff * inv_n * depth_w;
    }
    loss += acc * inv_n * depth_w;
    d_feats.push_back(std::move(d));
  }
  if (d_a) ext.backward(a, cache, d_feats, *d_a);
  return loss;
}

template class ConvStackExtractor<float>;
template class ConvStackExtractor<double>;
template ConvStackExtractor<double> ConvStackExtractor<float>::cast<double>() const;
template ConvStackExtractor<float> ConvStackExtractor<double>::cast<float>() const;
template std::unique_ptr<FeatureExtractor<float>> default_extractor<float>(std::uint64_t);
template std::unique_ptr<FeatureExtractor<double>> default_extractor<double>(std::uint64_t);
template float perceptual_loss<float>(const FeatureExtractor<float>&, const Tensor3<float>&,
                                      const Tensor3<float>&, Tensor3<float>*);
template double perceptual_loss<double>(const FeatureExtractor<double>&, const Tensor3<double>&,
                                        const Tensor3<double>&, Tensor3<double>*);

}  // namespace zssrt
