#include "dcct/model_config.hpp"

#include <sstream>

#include "dcct/errors.hpp"

namespace dcct {

namespace {

void check(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Relu:
      return "relu";
    case Activation::Gelu:
      return "gelu";
    case Activation::None:
      break;
  }
  return "none";
}

Activation parse_activation(const std::string& s) {
  if (s == "none") return Activation::None;
  if (s == "relu") return Activation::Relu;
  if (s == "gelu") return Activation::Gelu;
  throw ConfigError("psi_activation must be none|relu|gelu, got '" + s + "'");
}

}  // namespace

int ModelConfig::cnn_stride2_blocks() const {
  int f = downsample();
  int blocks = 0;
  while (f > 1 && f % 2 == 0) {
    f /= 2;
    ++blocks;
  }
  return blocks;
}

void ModelConfig::validate() const {
  check(frames_T >= 2, "frames_T must be >= 2 (got " + std::to_string(frames_T) + ")");
  check(image_h > 0 && image_w > 0, "image_h and image_w must be positive");
  check(map_h > 0 && map_w > 0, "map_h and map_w must be positive");
  check(map_h * map_w >= 2, "map_h*map_w must be >= 2 so attention covers at least two positions");
  check(image_h % map_h == 0 && image_w % map_w == 0, "image size must be an integer multiple of the feature grid");
  check(image_h / map_h == image_w / map_w, "image_h/map_h must equal image_w/map_w (uniform downsample factor)");
  const int f = downsample();
  check(f == 1 || f == 2 || f == 4 || f == 8, "downsample factor must be 1, 2, 4 or 8 (got " + std::to_string(f) + ")");
  check(c1 > 0 && c2 > 0, "c1 and c2 must be positive");
  check(num_heads > 0, "num_heads must be positive");
  check(c1 % num_heads == 0, "c1 (" + std::to_string(c1) + ") must be divisible by num_heads (" + std::to_string(num_heads) + ")");
  check(c2 % num_heads == 0, "c2 (" + std::to_string(c2) + ") must be divisible by num_heads (" + std::to_string(num_heads) + ")");
  check((c1 + c2) % num_heads == 0, "c1+c2 must be divisible by num_heads");
  check(c1 % 2 == 0 && c2 % 2 == 0, "c1 and c2 must be even (CCA splits each into two halves)");
  check(hta_depth >= 0, "hta_depth must be non-negative");
  check(num_classes > 0, "num_classes must be positive");
  check(cnn_width > 0, "cnn_width must be positive");
  check(vit_layers >= 0, "vit_layers must be non-negative");
  check(vit_mlp_mult > 0 && ffn_mult > 0, "feed-forward multipliers must be positive");
  check(cca_dim > 0, "cca_dim must be positive");
  check(hint_dim > 0, "hint_dim must be positive");
}

ModelConfig ModelConfig::from_ini(const IniDocument& doc) {
  ModelConfig c;
  IniSection s(doc, "model");
  s.read("frames_T", c.frames_T);
  s.read("image_h", c.image_h);
  s.read("image_w", c.image_w);
  s.read("map_h", c.map_h);
  s.read("map_w", c.map_w);
  s.read("c1", c.c1);
  s.read("c2", c.c2);
  s.read("num_heads", c.num_heads);
  s.read("hta_depth", c.hta_depth);
  s.read("num_classes", c.num_classes);
  s.read("seed", c.seed);
  s.read("cnn_width", c.cnn_width);
  s.read("vit_layers", c.vit_layers);
  s.read("vit_mlp_mult", c.vit_mlp_mult);
  s.read("cca_dim", c.cca_dim);
  std::string act = activation_name(c.psi_activation);
  s.read("psi_activation", act);
  c.psi_activation = parse_activation(act);
  s.read("ablate_self_head", c.ablate_self_head);
  s.read("ablate_cross_head", c.ablate_cross_head);
  s.read("ffn_mult", c.ffn_mult);
  s.read("use_temporal_transformer", c.use_temporal_transformer);
  s.read("use_aggregated_transformer", c.use_aggregated_transformer);
  s.read("use_gated_attention", c.use_gated_attention);
  s.read("hint_dim", c.hint_dim);
  std::string retrieval = c.retrieval == RetrievalFeature::AggregatedOnly ? "s3" : "s3_frames";
  s.read("retrieval_feature", retrieval);
  if (retrieval == "s3") {
    c.retrieval = RetrievalFeature::AggregatedOnly;
  } else if (retrieval == "s3_frames") {
    c.retrieval = RetrievalFeature::AggregatedWithFrames;
  } else {
    throw ConfigError("retrieval_feature must be s3|s3_frames, got '" + retrieval + "'");
  }
  s.reject_unknown();
  c.validate();
  return c;
}

std::string ModelConfig::to_ini() const {
  std::ostringstream os;
  os << "[model]\n"
     << "frames_T = " << frames_T << '\n'
     << "image_h = " << image_h << '\n'
     << "image_w = " << image_w << '\n'
     << "map_h = " << map_h << '\n'
     << "map_w = " << map_w << '\n'
     << "c1 = " << c1 << '\n'
     << "c2 = " << c2 << '\n'
     << "num_heads = " << num_heads << '\n'
     << "hta_depth = " << hta_depth << '\n'
     << "num_classes = " << num_classes << '\n'
     << "seed = " << seed << '\n'
     << "cnn_width = " << cnn_width << '\n'
     << "vit_layers = " << vit_layers << '\n'
     << "vit_mlp_mult = " << vit_mlp_mult << '\n'
     << "cca_dim = " << cca_dim << '\n'
     << "psi_activation = " << activation_name(psi_activation) << '\n'
     << "ablate_self_head = " << (ablate_self_head ? "true" : "false") << '\n'
     << "ablate_cross_head = " << (ablate_cross_head ? "true" : "false") << '\n'
     << "ffn_mult = " << ffn_mult << '\n'
     << "use_temporal_transformer = " << (use_temporal_transformer ? "true" : "false") << '\n'
     << "use_aggregated_transformer = " << (use_aggregated_transformer ? "true" : "false") << '\n'
     << "use_gated_attention = " << (use_gated_attention ? "true" : "false") << '\n'
     << "hint_dim = " << hint_dim << '\n'
     << "retrieval_feature = " << (retrieval == RetrievalFeature::AggregatedOnly ? "s3" : "s3_frames") << '\n';
  return os.str();
}

ModelConfig tiny_model_config() {
  ModelConfig c;
  c.frames_T = 2;
  c.image_h = 8;
  c.image_w = 4;
  c.map_h = 2;
  c.map_w = 1;
  c.c1 = 8;
  c.c2 = 4;
  c.num_heads = 2;
  c.hta_depth = 2;
  c.num_classes = 3;
  c.seed = 7;
  c.cnn_width = 4;
  c.vit_layers = 1;
  c.cca_dim = 4;
  c.hint_dim = 5;
  return c;
}

}  // namespace dcct
