#include "dcct/model.hpp"

#include <random>

#include "dcct/errors.hpp"
#include "dcct/ops.hpp"

namespace dcct {

DcctModel DcctModel::build(const ModelConfig& config) {
  config.validate();
  DcctModel m;
  m.config_ = config;
  std::mt19937_64 rng(config.seed);
  m.cnn_ = CnnBackbone::create(m.store_, config, rng);
  m.vit_ = VitBackbone::create(m.store_, config, rng);
  if (config.hta_depth > 0) {
    m.cca_ = Cca::create(m.store_, config, rng);
    m.hta_ = Hta::create(m.store_, config, rng);
  }
  m.heads_ = LossHeads::create(m.store_, config, rng);
  return m;
}

ForwardOutput DcctModel::forward_backbones(const Tensor& frames, int clips) const {
  if (frames.rank() != 4 || clips <= 0 || frames.dim(0) != clips * config_.frames_T) {
    throw ShapeError("model forward: expected " + std::to_string(clips) + " clips of " + std::to_string(config_.frames_T) +
                     " frames, got input " + shape_str(frames.shape));
  }
  ForwardOutput out;
  out.clips = clips;
  out.frames = config_.frames_T;
  out.x1_rows = cnn_.forward(frames);
  out.x2_rows = vit_.forward(frames);
  out.x1_pooled = ops::group_mean_rows(out.x1_rows, config_.positions());
  out.x2_pooled = ops::group_mean_rows(out.x2_rows, config_.positions());
  return out;
}

ForwardOutput DcctModel::forward(const Tensor& frames, int clips, ForwardTrace* trace) const {
  ForwardOutput out = forward_backbones(frames, clips);
  if (!has_temporal_modules()) return out;
  counters_->cca.fetch_add(1);
  auto [f1, f2] = cca_.forward(out.x1_rows, out.x2_rows, config_.positions(), trace ? &trace->cca : nullptr);
  out.f1 = f1;
  out.f2 = f2;
  counters_->hta.fetch_add(1);
  out.hta = hta_.forward(f1, f2, config_.hta_depth, trace ? &trace->hta : nullptr);
  return out;
}

Var DcctModel::backbone_feature(const ForwardOutput& out) {
  return ops::concat_cols(ops::group_mean_rows(out.x1_pooled, out.frames), ops::group_mean_rows(out.x2_pooled, out.frames));
}

Var DcctModel::retrieval_feature(const ForwardOutput& out) const {
  if (!out.hta.s3.defined()) throw ConfigError("retrieval_feature: model has no HTA output (hta_depth = 0)");
  if (config_.retrieval == RetrievalFeature::AggregatedOnly) return out.hta.s3;
  Var frames = ops::concat_cols(ops::group_mean_rows(out.hta.m1, out.frames), ops::group_mean_rows(out.hta.m2, out.frames));
  return ops::concat_cols(out.hta.s3, frames);
}

namespace {

std::vector<SpatialFeatureMap> split_maps(const Tensor& rows, int frames, int h, int w, Branch branch) {
  std::vector<SpatialFeatureMap> maps;
  const int p = h * w;
  for (int t = 0; t < frames; ++t) {
    SpatialFeatureMap m(h, w, rows.cols(), branch);
    std::copy(rows.data.begin() + static_cast<std::ptrdiff_t>(t) * p * rows.cols(),
              rows.data.begin() + static_cast<std::ptrdiff_t>(t + 1) * p * rows.cols(), m.grid.begin());
    maps.push_back(std::move(m));
  }
  return maps;
}

Tensor clip_frames(const VideoClip& clip, const ModelConfig& config) {
  if (clip.frames.empty()) throw ShapeError("clip has no frames");
  return clips_to_tensor(std::span<const VideoClip>(&clip, 1), static_cast<int>(clip.frames.size()), config.image_h,
                         config.image_w);
}

}  // namespace

std::vector<SpatialFeatureMap> DcctModel::cnn_backbone_forward(const VideoClip& clip) const {
  NoGradGuard no_grad;
  const Tensor rows = cnn_.forward(clip_frames(clip, config_)).value();
  return split_maps(rows, static_cast<int>(clip.frames.size()), config_.map_h, config_.map_w, Branch::Cnn);
}

std::vector<SpatialFeatureMap> DcctModel::vit_backbone_forward(const VideoClip& clip) const {
  NoGradGuard no_grad;
  const Tensor rows = vit_.forward(clip_frames(clip, config_)).value();
  return split_maps(rows, static_cast<int>(clip.frames.size()), config_.map_h, config_.map_w, Branch::Transformer);
}

}  // namespace dcct
