#include "dcct/features.hpp"

#include <cmath>

#include "dcct/errors.hpp"

namespace dcct {

Tensor SpatialFeatureMap::as_rows() const {
  return Tensor({positions(), channels}, grid);
}

SpatialFeatureMap SpatialFeatureMap::from_rows(const Tensor& rows, int height, int width, Branch branch) {
  if (rows.rank() != 2 || rows.rows() != height * width) {
    throw ShapeError("feature rows " + shape_str(rows.shape) + " do not form a " + std::to_string(height) + "x" +
                     std::to_string(width) + " grid");
  }
  SpatialFeatureMap m(height, width, rows.cols(), branch);
  m.grid = rows.data;
  return m;
}

FrameFeatureVector spatial_mean_pool(const SpatialFeatureMap& map) {
  if (map.positions() <= 0 || map.channels <= 0 ||
      map.grid.size() != static_cast<std::size_t>(map.positions()) * map.channels) {
    throw ShapeError("spatial_mean_pool: malformed feature map");
  }
  FrameFeatureVector out;
  out.values.assign(map.channels, 0.0);
  for (int p = 0; p < map.positions(); ++p) {
    for (int c = 0; c < map.channels; ++c) out.values[c] += map.grid[static_cast<std::size_t>(p) * map.channels + c];
  }
  for (double& v : out.values) v /= map.positions();
  out.stage = FeatureStage::Pooled;
  return out;
}

FrameFeatureVector temporal_mean_pool(std::span<const FrameFeatureVector> frames) {
  if (frames.empty()) throw ArgumentError("temporal_mean_pool: empty frame sequence");
  const std::size_t dim = frames.front().values.size();
  FrameFeatureVector out;
  out.values.assign(dim, 0.0);
  for (const auto& f : frames) {
    if (f.values.size() != dim) throw ShapeError("temporal_mean_pool: frames have different lengths");
    for (std::size_t i = 0; i < dim; ++i) out.values[i] += f.values[i];
  }
  for (double& v : out.values) v /= static_cast<double>(frames.size());
  out.stage = frames.front().stage;
  return out;
}

Tensor clips_to_tensor(std::span<const VideoClip> clips, int frames, int height, int width) {
  Tensor out({static_cast<int>(clips.size()) * frames, 3, height, width});
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::size_t index = 0;
  for (const auto& clip : clips) {
    if (static_cast<int>(clip.frames.size()) != frames) {
      throw ShapeError("clip has " + std::to_string(clip.frames.size()) + " frames, model expects " + std::to_string(frames));
    }
    for (const auto& img : clip.frames) {
      if (img.height != height || img.width != width) {
        throw ShapeError("frame is " + std::to_string(img.height) + "x" + std::to_string(img.width) + ", model expects " +
                         std::to_string(height) + "x" + std::to_string(width));
      }
      double* base = out.data.data() + index * 3 * plane;
      for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
          for (int c = 0; c < 3; ++c) base[c * plane + static_cast<std::size_t>(y) * width + x] = img.at(y, x, c);
        }
      }
      ++index;
    }
  }
  return out;
}

}  // namespace dcct
