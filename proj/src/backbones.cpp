#include "dcct/backbones.hpp"

#include <cmath>
#include <numeric>

#include "dcct/errors.hpp"
#include "dcct/ops.hpp"

namespace dcct {

namespace {

void require_frames(const Tensor& frames, int h, int w, const char* who) {
  if (frames.rank() != 4 || frames.dim(1) != 3 || frames.dim(2) != h || frames.dim(3) != w) {
    throw ShapeError(std::string(who) + ": expected frames [N,3," + std::to_string(h) + "," + std::to_string(w) + "], got " +
                     shape_str(frames.shape));
  }
}

}  // namespace

CnnBackbone CnnBackbone::create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng) {
  CnnBackbone net;
  net.image_h_ = config.image_h;
  net.image_w_ = config.image_w;
  const int strided = config.cnn_stride2_blocks();
  int in = 3;
  for (int b = 0; b < 3; ++b) {
    const int out = config.cnn_width << b;
    const std::string name = "cnn.block" + std::to_string(b);
    ConvBlock block;
    block.weight = store.create_weight(name + ".conv.weight", {out, in, 3, 3}, in * 9, rng);
    block.gamma = store.create_constant(name + ".norm.gamma", {out}, 1.0);
    block.beta = store.create_constant(name + ".norm.beta", {out}, 0.0);
    block.stride = b < strided ? 2 : 1;
    block.groups = std::gcd(4, out);
    net.blocks_.push_back(block);
    in = out;
  }
  net.projection_ = store.create_weight("cnn.proj.weight", {config.c1, in, 1, 1}, in, rng);
  return net;
}

Var CnnBackbone::forward(const Tensor& frames) const {
  require_frames(frames, image_h_, image_w_, "cnn_backbone_forward");
  Var x = ops::constant(frames);
  for (const auto& block : blocks_) {
    x = ops::conv2d(x, block.weight, block.stride, 1);
    x = ops::group_norm(x, block.gamma, block.beta, block.groups);
    x = ops::gelu(x);
  }
  x = ops::conv2d(x, projection_, 1, 0);
  return ops::nchw_to_rows(x);
}

Tensor patchify(const Tensor& frames, int patch) {
  if (frames.rank() != 4) throw ShapeError("patchify: expected [N,C,H,W], got " + shape_str(frames.shape));
  const int n = frames.dim(0);
  const int channels = frames.dim(1);
  const int h = frames.dim(2);
  const int w = frames.dim(3);
  if (patch <= 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("patchify: " + std::to_string(h) + "x" + std::to_string(w) + " image does not tile into " +
                     std::to_string(patch) + "x" + std::to_string(patch) + " patches");
  }
  const int gh = h / patch;
  const int gw = w / patch;
  const int width = channels * patch * patch;
  Tensor out({n * gh * gw, width});
  for (int b = 0; b < n; ++b) {
    for (int py = 0; py < gh; ++py) {
      for (int px = 0; px < gw; ++px) {
        double* row = &out.at((b * gh + py) * gw + px, 0);
        int k = 0;
        for (int c = 0; c < channels; ++c) {
          const double* plane = frames.data.data() + (static_cast<std::size_t>(b) * channels + c) * h * w;
          for (int y = 0; y < patch; ++y) {
            for (int x = 0; x < patch; ++x) row[k++] = plane[(py * patch + y) * w + px * patch + x];
          }
        }
      }
    }
  }
  return out;
}

VitBackbone VitBackbone::create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng) {
  VitBackbone net;
  net.patch_ = config.downsample();
  net.heads_ = config.num_heads;
  net.image_h_ = config.image_h;
  net.image_w_ = config.image_w;
  const int c = config.c2;
  net.patch_embed_ = Linear::create(store, "vit.patch_embed", 3 * net.patch_ * net.patch_, c, true, rng);
  net.position_ = store.create_normal("vit.pos_embed", {config.positions(), c}, 0.02, rng);
  for (int l = 0; l < config.vit_layers; ++l) {
    const std::string name = "vit.layer" + std::to_string(l);
    VitEncoderLayer layer;
    layer.attn_norm = LayerNorm::create(store, name + ".attn_norm", c);
    layer.query = Linear::create(store, name + ".query", c, c, true, rng);
    layer.key = Linear::create(store, name + ".key", c, c, true, rng);
    layer.value = Linear::create(store, name + ".value", c, c, true, rng);
    layer.out = Linear::create(store, name + ".out", c, c, true, rng);
    layer.mlp_norm = LayerNorm::create(store, name + ".mlp_norm", c);
    layer.fc1 = Linear::create(store, name + ".fc1", c, c * config.vit_mlp_mult, true, rng);
    layer.fc2 = Linear::create(store, name + ".fc2", c * config.vit_mlp_mult, c, true, rng);
    net.layers_.push_back(layer);
  }
  net.final_norm_ = LayerNorm::create(store, "vit.final_norm", c);
  return net;
}

Var VitBackbone::forward(const Tensor& frames) const {
  require_frames(frames, image_h_, image_w_, "vit_backbone_forward");
  const int tokens = (image_h_ / patch_) * (image_w_ / patch_);
  Var x = patch_embed_(ops::constant(patchify(frames, patch_)));
  x = ops::add_tiled(x, position_);
  const int width = x.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(width / heads_));
  for (const auto& layer : layers_) {
    Var h = layer.attn_norm(x);
    Var z = ops::multi_head_attention(layer.query(h), layer.key(h), layer.value(h), tokens, heads_, scale);
    x = ops::add(x, layer.out(z));
    h = layer.mlp_norm(x);
    x = ops::add(x, layer.fc2(ops::gelu(layer.fc1(h))));
  }
  return final_norm_(x);
}

}  // namespace dcct
