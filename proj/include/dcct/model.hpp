#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "dcct/backbones.hpp"
#include "dcct/cca.hpp"
#include "dcct/features.hpp"
#include "dcct/hta.hpp"
#include "dcct/losses.hpp"
#include "dcct/model_config.hpp"

namespace dcct {

struct ForwardTrace {
  CcaTrace cca;
  HtaTrace hta;
};

struct ForwardOutput {
  int clips = 0;
  int frames = 0;
  Var x1_rows;    // [N*T*P, c1] CNN feature maps
  Var x2_rows;    // [N*T*P, c2] Transformer feature maps
  Var x1_pooled;  // [N*T, c1]
  Var x2_pooled;  // [N*T, c2]
  Var f1;         // [N*T, c1] CCA output; undefined for the coupled baseline
  Var f2;
  HtaOutput hta;  // undefined members for the coupled baseline
};

// The full network: coupled backbones, CCA, stacked HTA layers, classifier
// heads and hint networks. hta_depth = 0 builds the coupled baseline (no CCA,
// no HTA). Movable, not copyable: modules alias tensors in `parameters()`.
class DcctModel {
 public:
  // Deterministic in config.seed. Throws ConfigError on an invalid config.
  static DcctModel build(const ModelConfig& config);

  DcctModel(DcctModel&&) = default;
  DcctModel& operator=(DcctModel&&) = default;
  DcctModel(const DcctModel&) = delete;
  DcctModel& operator=(const DcctModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  // frames [N*T,3,H,W] for N clips.
  ForwardOutput forward(const Tensor& frames, int clips, ForwardTrace* trace = nullptr) const;
  // Backbones and pooling only; never touches CCA or HTA.
  ForwardOutput forward_backbones(const Tensor& frames, int clips) const;

  // [N, c1+c2]: temporal means of the pooled backbone features, concatenated.
  static Var backbone_feature(const ForwardOutput& out);
  // [N, D]: S3 (or S3 with the pooled refined sequences when configured).
  Var retrieval_feature(const ForwardOutput& out) const;

  std::vector<SpatialFeatureMap> cnn_backbone_forward(const VideoClip& clip) const;
  std::vector<SpatialFeatureMap> vit_backbone_forward(const VideoClip& clip) const;

  Cca& cca() { return cca_; }
  const Cca& cca() const { return cca_; }
  Hta& hta() { return hta_; }
  const Hta& hta() const { return hta_; }
  const LossHeads& heads() const { return heads_; }

  bool has_temporal_modules() const { return config_.hta_depth > 0; }

  // Number of CCA / HTA invocations since build.
  std::uint64_t cca_calls() const { return counters_->cca.load(); }
  std::uint64_t hta_calls() const { return counters_->hta.load(); }

 private:
  struct Counters {
    std::atomic<std::uint64_t> cca{0};
    std::atomic<std::uint64_t> hta{0};
  };

  DcctModel() = default;

  ModelConfig config_;
  ParameterStore store_;
  CnnBackbone cnn_;
  VitBackbone vit_;
  Cca cca_;
  Hta hta_;
  LossHeads heads_;
  std::unique_ptr<Counters> counters_ = std::make_unique<Counters>();
};

}  // namespace dcct
