#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "zssrt/checkpoint.hpp"
#include "zssrt/tensor.hpp"

namespace zssrt {

// Frozen image -> feature-stack map used by the perceptual loss.
template <typename Real>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  // Returns one feature array per depth. `cache` (optional) keeps what
  // backward() needs.
  virtual std::vector<Tensor3<Real>> features(const Tensor3<Real>& img,
                                              std::vector<Tensor3<Real>>* cache) const = 0;

  // Accumulates the input gradient into d_img.
  virtual void backward(const Tensor3<Real>& img, const std::vector<Tensor3<Real>>& cache,
                        const std::vector<Tensor3<Real>>& d_features,
                        Tensor3<Real>& d_img) const = 0;
};

// Stack of 3x3 stride-2 convolutions with softplus, every stage's output
// being one feature depth.
template <typename Real>
class ConvStackExtractor : public FeatureExtractor<Real> {
 public:
  struct Layer {
    int in_channels = 0;
    int out_channels = 0;
    std::vector<Real> weight;  // out x in x 3 x 3
    std::vector<Real> bias;
  };

  explicit ConvStackExtractor(std::vector<Layer> layers) : layers_(std::move(layers)) {}

  // He-normal weights from a fixed seed.
  static ConvStackExtractor random(const std::vector<int>& channels, std::uint64_t seed);
  // Weights from a "zssrt-ckpt-v1" container with model=extractor (layerN.weight/bias).
  static ConvStackExtractor from_checkpoint(const Checkpoint& ckpt);
  Checkpoint to_checkpoint() const;

  const std::vector<Layer>& layers() const { return layers_; }

  std::vector<Tensor3<Real>> features(const Tensor3<Real>& img,
                                      std::vector<Tensor3<Real>>* cache) const override;
  void backward(const Tensor3<Real>& img, const std::vector<Tensor3<Real>>& cache,
                const std::vector<Tensor3<Real>>& d_features,
                Tensor3<Real>& d_img) const override;

  template <typename U>
  ConvStackExtractor<U> cast() const;

 private:
  std::vector<Layer> layers_;
};

// Fixed-seed 3 -> 8 -> 16 -> 32 stack.
template <typename Real>
std::unique_ptr<FeatureExtractor<Real>> default_extractor(std::uint64_t seed = 19);

// Mean over depths of the per-depth mean squared feature difference.
// Writes d(loss)/d(a) into d_a when given.
template <typename Real>
Real perceptual_loss(const FeatureExtractor<Real>& ext, const Tensor3<Real>& a,
                     const Tensor3<Real>& b, Tensor3<Real>* d_a);

}  // namespace zssrt
