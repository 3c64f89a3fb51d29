#pragma once

#include <random>
#include <vector>

#include "dcct/layers.hpp"
#include "dcct/model_config.hpp"

namespace dcct {

// conv3x3 (bias-free) -> group norm -> GELU
struct ConvBlock {
  Var weight;
  Var gamma;
  Var beta;
  int stride = 1;
  int groups = 1;
};

// Three conv blocks followed by a bias-free 1x1 projection to c1. The first
// log2(downsample) blocks have stride 2. Frames are processed independently.
class CnnBackbone {
 public:
  static CnnBackbone create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng);

  // frames [N,3,H,W] -> per-position features [N*map_h*map_w, c1].
  Var forward(const Tensor& frames) const;

 private:
  std::vector<ConvBlock> blocks_;
  Var projection_;
  int image_h_ = 0;
  int image_w_ = 0;
};

struct VitEncoderLayer {
  LayerNorm attn_norm;
  Linear query;
  Linear key;
  Linear value;
  Linear out;
  LayerNorm mlp_norm;
  Linear fc1;
  Linear fc2;
};

// Patch embedding, learned 2-D position table, pre-norm encoder layers and a
// final norm. No class token: every patch token maps back to its grid cell.
class VitBackbone {
 public:
  static VitBackbone create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng);

  // frames [N,3,H,W] -> tokens [N*map_h*map_w, c2] in row-major patch order.
  Var forward(const Tensor& frames) const;

 private:
  Linear patch_embed_;
  Var position_;
  std::vector<VitEncoderLayer> layers_;
  LayerNorm final_norm_;
  int patch_ = 0;
  int heads_ = 1;
  int image_h_ = 0;
  int image_w_ = 0;
};

// [N,3,H,W] -> [N*(H/p)*(W/p), 3*p*p]; each row is one patch flattened as (c, y, x).
Tensor patchify(const Tensor& frames, int patch);

}  // namespace dcct
