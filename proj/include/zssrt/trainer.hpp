#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "zssrt/features.hpp"
#include "zssrt/field.hpp"
#include "zssrt/renderer.hpp"
#include "zssrt/scenekit.hpp"
#include "zssrt/sdm.hpp"

namespace zssrt {

enum class Supervision { kSdm, kBoxAverage };

struct TrainConfig {
  std::string profile = "blender";
  int scale = 2;

  int n1 = 5000;    // coarse steps
  int n2 = 25000;   // fine steps
  int n3 = 10000;   // SDM steps
  double lambda = 0.03;

  double lr_grid = 0.02;
  double lr_decoder = 0.001;
  double lr_sdm = 0.001;
  double lr_decay_final = 0.1;  // multiplier reached at the end of each stage

  int batch_rays = 4096;        // coarse stage
  int patch_p = 16;             // LR patch side (fine stage and SDM)
  int batch_patches = 32;       // patch batch size (fine stage and SDM)
  int fine_ray_budget = 8192;   // cap on HR rays per fine step
  int sdm_patch = 16;           // SDM input patch side (LR pixels, divisible by scale)
  int sdm_batch = 32;
  int sdm_width = 16;

  int snapshot_every = 1000;
  int snapshot_count = 3;

  int samples_coarse = 128;
  int samples_fine = 192;
  double weight_threshold = 1e-4;
  MaskSettings mask;
  Vec3d background = Vec3d::Ones();

  Supervision supervision = Supervision::kSdm;
  std::uint64_t extractor_seed = 19;
  std::uint64_t seed = 0;

  FieldConfig field;

  // Full-scale defaults ("blender" or "llff") for scale 2 or 4.
  static TrainConfig full_scale(const std::string& dataset, int scale);
  // CPU-sized profile: 8 x 64^2 views, s=2, N1=2000, N2=4000, N3=2000.
  static TrainConfig desk(int scale = 2);
  static TrainConfig from_profile(const std::string& profile, int scale);

  // Bundles per fine step: round(budget / (s p)^2) clamped to [1, batch_patches].
  int fine_bundles_per_step() const;
  std::vector<int> snapshot_steps() const;

  void validate() const;
  nlohmann::json to_json() const;
  // Overrides fields present in `j` on top of *this.
  void merge_json(const nlohmann::json& j);
  std::string digest() const;
};

struct LossRecord {
  std::string stage;
  int step = 0;
  double total = 0;
  double mse = 0;
  double perc = 0;
};

using StepCallback = std::function<void(const LossRecord&)>;

struct CoarseResult {
  TensorialField<float> field;
  std::vector<LossRecord> losses;
  std::uint64_t rng_digest = 0;
};

// Photometric ray-batch training of the low-resolution field.
CoarseResult train_coarse(TensorialField<float> field, const std::vector<PosedImage>& images,
                          const TrainConfig& cfg, const StepCallback& on_step = {});

struct SdmResult {
  SdmNetwork<float> net;
  std::vector<LossRecord> losses;
  std::uint64_t rng_digest = 0;
};

// Internal learning of the degradation map: coarse renders of the training
// views -> box-downsampled ground truth.
SdmResult train_sdm(const TensorialField<float>& coarse, const std::vector<PosedImage>& images,
                    const TrainConfig& cfg, const StepCallback& on_step = {});

template <typename Real>
struct FineLossResult {
  Real total = 0;
  Real mse = 0;
  Real perc = 0;
};

// Renders the bundle's HR rays, maps them to LR with the frozen SDM (or a box
// average when sdm is null) and compares against the LR patch. When `grad`
// is given, field gradients of the total loss are accumulated into it.
template <typename Real>
FineLossResult<Real> fine_loss(const PatchBundle& bundle, const TensorialField<Real>& field,
                               const SdmNetwork<Real>* sdm, const FeatureExtractor<Real>& ext,
                               double lambda, const RenderSettings& settings, Rng* rng,
                               FieldParams<Real>* grad);

struct FineResult {
  TensorialField<float> field;
  EnsembleField<float> ensemble;
  std::vector<LossRecord> losses;
  std::uint64_t rng_digest = 0;
};

// Warm-started super-resolution training with SDM (or box) supervision and
// snapshot capture for the temporal ensemble.
FineResult train_fine(const TensorialField<float>& coarse, const SdmNetwork<float>* sdm,
                      const std::vector<PosedImage>& images, const TrainConfig& cfg,
                      const FeatureExtractor<float>& ext, const StepCallback& on_step = {});

// Fine field initialization: an exact copy of the coarse field.
TensorialField<float> warm_start(const TensorialField<float>& coarse);

// Collects parameter-group spans of a FieldParams in canonical order.
template <typename Real>
std::vector<std::span<const Real>> group_spans(const FieldParams<Real>& p) {
  std::vector<std::span<const Real>> out;
  p.for_each_group([&](const std::string&, std::span<const Real> s, bool) { out.push_back(s); });
  return out;
}

}  // namespace zssrt
