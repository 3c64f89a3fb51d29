#pragma once

#include <span>
#include <vector>

#include "dcct/tensor.hpp"

namespace dcct {

enum class Branch { Cnn, Transformer };
enum class FeatureStage { Pooled, CcaFused, TtEncoded, Gated };

// RGB image, row-major (y, x, channel), values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}
  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

struct VideoClip {
  std::vector<Image> frames;
  int identity = -1;
  int camera = -1;
};

// One frame's H x W x C feature grid, row-major (h, w, c).
struct SpatialFeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  Branch branch = Branch::Cnn;
  std::vector<double> grid;

  SpatialFeatureMap() = default;
  SpatialFeatureMap(int h, int w, int c, Branch b)
      : height(h), width(w), channels(c), branch(b), grid(static_cast<std::size_t>(h) * w * c, 0.0) {}
  int positions() const { return height * width; }
  double& at(int y, int x, int c) { return grid[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const { return grid[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

  // [H*W, C] matrix in the same order.
  Tensor as_rows() const;
  static SpatialFeatureMap from_rows(const Tensor& rows, int height, int width, Branch branch);
};

struct FrameFeatureVector {
  std::vector<double> values;
  FeatureStage stage = FeatureStage::Pooled;
};

// Channel-wise mean over the grid.
FrameFeatureVector spatial_mean_pool(const SpatialFeatureMap& map);
// Element-wise mean over frames; throws ArgumentError on empty input.
FrameFeatureVector temporal_mean_pool(std::span<const FrameFeatureVector> frames);

// Packs clips into [N*T, 3, H, W]; all clips must share T and frame size.
Tensor clips_to_tensor(std::span<const VideoClip> clips, int frames, int height, int width);

}  // namespace dcct
