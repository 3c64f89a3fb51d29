#pragma once

#include <cstdint>
#include <string>

#include "dcct/ini.hpp"
#include "dcct/layers.hpp"

namespace dcct {

enum class RetrievalFeature {
  AggregatedOnly,       // S3
  AggregatedWithFrames  // S3 ++ temporal mean of the final refined sequences
};

struct ModelConfig {
  int frames_T = 4;
  int image_h = 64;
  int image_w = 32;
  int map_h = 8;
  int map_w = 4;
  int c1 = 128;  // CNN branch channels
  int c2 = 64;   // Transformer branch channels
  int num_heads = 4;
  int hta_depth = 2;
  int num_classes = 10;
  std::uint64_t seed = 0;

  // Toy backbone sizes.
  int cnn_width = 16;
  int vit_layers = 2;
  int vit_mlp_mult = 2;

  int cca_dim = 32;  // attention projection width in CCA
  Activation psi_activation = Activation::None;
  bool ablate_self_head = false;
  bool ablate_cross_head = false;

  int ffn_mult = 2;  // hidden width of the temporal feed-forward network, in units of C
  bool use_temporal_transformer = true;
  bool use_aggregated_transformer = true;
  bool use_gated_attention = true;

  int hint_dim = 64;  // bottleneck width of the hint networks
  RetrievalFeature retrieval = RetrievalFeature::AggregatedOnly;

  int downsample() const { return image_h / map_h; }
  int positions() const { return map_h * map_w; }
  int video_dim() const { return c1 + c2; }
  // Number of stride-2 blocks in the CNN (log2 of the downsample factor).
  int cnn_stride2_blocks() const;

  // Throws ConfigError naming the violated invariant.
  void validate() const;

  static ModelConfig from_ini(const IniDocument& doc);
  std::string to_ini() const;
};

// Small configuration used by gradient checks and fast tests.
ModelConfig tiny_model_config();

}  // namespace dcct
