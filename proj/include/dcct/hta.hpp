#pragma once

#include <random>
#include <string>
#include <vector>

#include "dcct/features.hpp"
#include "dcct/layers.hpp"
#include "dcct/model_config.hpp"

namespace dcct {

// Transformer layer over the T frames of a clip:
//   Z = MHSA(F + pos)            (per-head softmax(QK^T / sqrt(d)) V, heads concatenated)
//   S = norm(fc2(relu(fc1(Z + F))))
class TemporalTransformer {
 public:
  static TemporalTransformer create(ParameterStore& store, const std::string& name, int channels, int frames, int heads,
                                    int ffn_mult, std::mt19937_64& rng);

  // seq [N*T, C] -> [N*T, C]. `probs` receives attention rows [N][heads][T][T].
  Var forward(const Var& seq, std::vector<double>* probs = nullptr) const;

  int channels() const { return channels_; }
  int frames() const { return frames_; }
  int heads() const { return heads_; }
  Var& position() { return position_; }
  const Var& position() const { return position_; }

 private:
  Var position_;  // [T, C]
  Linear query_;
  Linear key_;
  Linear value_;
  Linear ffn_in_;
  Linear ffn_out_;
  LayerNorm ffn_norm_;
  int channels_ = 0;
  int frames_ = 0;
  int heads_ = 1;
};

// Decouples S3 back to each branch and gates it into the frame features:
//   S~_i = omega_i(S3), A_i = sigmoid(phi_i(S_i^t * S~_i)), M_i^t = A_i * S_i^t + (1 - A_i) * S~_i
struct GatedAttention {
  Linear decouple_cnn;  // omega1: c1+c2 -> c1
  Linear decouple_vit;  // omega2: c1+c2 -> c2
  Linear gate_cnn;      // phi1: c1 -> c1
  Linear gate_vit;      // phi2: c2 -> c2
};

struct HtaLayer {
  TemporalTransformer tt_cnn;
  TemporalTransformer tt_vit;
  TemporalTransformer aggregate;
  GatedAttention gate;
};

// Intermediate values of one forward call, for invariant checks.
struct HtaTrace {
  std::vector<std::vector<double>> attention;  // one entry per transformer call, [N][heads][T][T]
  std::vector<Tensor> gates;                   // gate activations, [N*T, C] each
};

struct HtaOutput {
  Var m1;            // [N*T, c1]
  Var m2;            // [N*T, c2]
  Var s3_sequence;   // [N*T, c1+c2], last layer's aggregated-transformer tokens
  Var s3;            // [N, c1+c2]
};

struct GateResult {
  Var m1;
  Var m2;
  Var gate1;
  Var gate2;
  Var decoupled1;  // [N, c1]
  Var decoupled2;  // [N, c2]
};

// Batched gated attention: s1 [N*T, c1], s2 [N*T, c2], s3 [N, c1+c2].
GateResult gated_attention_forward(const GatedAttention& ga, const Var& s1, const Var& s2, const Var& s3, int frames,
                                   bool enabled);

class Hta {
 public:
  static Hta create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng);

  // f1 [N*T, c1], f2 [N*T, c2]; runs the first `depth` layers.
  HtaOutput forward(const Var& f1, const Var& f2, int depth, HtaTrace* trace = nullptr) const;

  int depth() const { return static_cast<int>(layers_.size()); }
  int frames() const { return frames_; }
  HtaLayer& layer(int k) { return layers_.at(k); }
  const HtaLayer& layer(int k) const { return layers_.at(k); }

  bool use_temporal_transformer = true;
  bool use_aggregated_transformer = true;
  bool use_gated_attention = true;

 private:
  std::vector<HtaLayer> layers_;
  int frames_ = 0;
};

// Per-clip value API. A TemporalSequence holds one clip's frames as [T, C].
struct TemporalSequence {
  Tensor frames;
};

struct AggregatedVideoFeature {
  std::vector<double> values;
};

struct RefinedFrames {
  FrameFeatureVector m1;
  FrameFeatureVector m2;
  std::vector<double> gate1;
  std::vector<double> gate2;
  std::vector<double> decoupled1;
  std::vector<double> decoupled2;
};

TemporalSequence temporal_transformer_forward(const TemporalSequence& seq, const TemporalTransformer& tt);
std::pair<TemporalSequence, AggregatedVideoFeature> aggregated_transformer_forward(const TemporalSequence& s1,
                                                                                   const TemporalSequence& s2,
                                                                                   const TemporalTransformer& at);
RefinedFrames gated_attention(const FrameFeatureVector& s1_t, const FrameFeatureVector& s2_t,
                              const AggregatedVideoFeature& s3, const GatedAttention& ga);

struct HtaResult {
  TemporalSequence m1;
  TemporalSequence m2;
  AggregatedVideoFeature s3;
};
HtaResult hta_forward(const Hta& hta, const TemporalSequence& f1, const TemporalSequence& f2, int depth);

}  // namespace dcct
