#pragma once

#include <random>
#include <utility>
#include <vector>

#include "dcct/features.hpp"
#include "dcct/layers.hpp"
#include "dcct/model_config.hpp"

namespace dcct {

enum class AttentionKind { Self, Cross };

// One attention map: a global query vector scores every grid position of a
// local feature map. logits[p] = <key_proj(local[p]), query_proj(query)>, no
// temperature.
struct CcaHead {
  Linear query_proj;  // theta: C_query -> cca_dim
  Linear key_proj;    // phi:   C_local -> cca_dim
};

// One branch of CCA: its self head, its cross head, two C -> C/2 value
// projections and the C -> C fusion layer followed by layer norm.
struct CcaBranch {
  CcaHead self_head;
  CcaHead cross_head;
  Linear value_self;   // eta
  Linear value_cross;  // eta tilde
  Linear fuse;         // psi
  LayerNorm fuse_norm;
  Activation fuse_activation = Activation::None;
  int channels = 0;
};

struct AttentionMap {
  int height = 0;
  int width = 0;
  std::vector<double> weights;  // row-major over the grid, sums to 1
  AttentionKind kind = AttentionKind::Self;
  Branch branch = Branch::Cnn;
};

struct FusedFrameFeature {
  std::vector<double> values;
  Branch branch = Branch::Cnn;
};

// Attention maps of one CCA call, each [N, H*W].
struct CcaTrace {
  Tensor self_cnn;
  Tensor cross_cnn;
  Tensor self_transformer;
  Tensor cross_transformer;
};

// Batched attention weights: local [N*P, C_local], query [N, C_query] -> [N, P].
Var cca_attention_weights(const Var& local, const Var& query, const CcaHead& head, int positions);

// F = norm(psi([sum_p a_self * eta(local), sum_p a_cross * eta~(local)] + global_same)).
Var cca_attend_and_fuse(const Var& local, const Var& a_self, const Var& a_cross, const Var& global_same,
                        const CcaBranch& branch, int positions);

class Cca {
 public:
  static Cca create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng);

  // x1 [N*P, c1] (CNN), x2 [N*P, c2] (Transformer) -> F1 [N, c1], F2 [N, c2].
  std::pair<Var, Var> forward(const Var& x1, const Var& x2, int positions, CcaTrace* trace = nullptr) const;

  const CcaBranch& cnn_branch() const { return cnn_; }
  const CcaBranch& transformer_branch() const { return transformer_; }

  // Replaces the self / cross heads with uniform attention.
  bool ablate_self_head = false;
  bool ablate_cross_head = false;

 private:
  CcaBranch cnn_;
  CcaBranch transformer_;
};

// Per-frame value API.
AttentionMap attention_map(const SpatialFeatureMap& local, const FrameFeatureVector& global_query, const CcaHead& head,
                           AttentionKind kind);
FusedFrameFeature attend_and_fuse(const SpatialFeatureMap& local, const AttentionMap& a_self, const AttentionMap& a_cross,
                                  const FrameFeatureVector& global_same, const CcaBranch& branch);
std::pair<FusedFrameFeature, FusedFrameFeature> cca_forward(const Cca& cca, const SpatialFeatureMap& x1,
                                                            const SpatialFeatureMap& x2);

}  // namespace dcct
