#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "dcct/features.hpp"
#include "dcct/ini.hpp"

namespace dcct {

// 8-bit RGB raster, row-major (y, x, channel). Frames are stored losslessly.
struct Raster {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;

  Image to_image() const;
  bool operator==(const Raster&) const = default;
};

struct Tracklet {
  std::vector<Raster> frames;
  int identity = 0;
  int camera = 0;
  int tracklet_id = 0;

  int length() const { return static_cast<int>(frames.size()); }
  bool operator==(const Tracklet&) const = default;
};

enum class Split { Train, Query, Gallery };
const char* split_name(Split split);

struct DatasetIndex {
  std::vector<Tracklet> train;
  std::vector<Tracklet> query;
  std::vector<Tracklet> gallery;
  int num_identities = 0;
  int num_cameras = 0;
  int image_h = 0;
  int image_w = 0;

  const std::vector<Tracklet>& split(Split s) const;
  std::vector<Tracklet>& split(Split s);

  // Throws IngestionError when ids are not dense, splits share a tracklet, or
  // a query identity is missing from the gallery.
  void validate() const;
  bool operator==(const DatasetIndex&) const = default;
};

struct SyntheticSpec {
  int num_identities = 10;
  int cameras = 2;
  int tracklets_per_identity_per_camera = 2;
  int tracklet_length = 8;
  int frames_T = 4;
  int image_h = 64;
  int image_w = 32;
  double noise = 0.05;  // per-pixel Gaussian sigma, in [0, 1)
  int jitter = 2;       // max per-frame translation in pixels; 0 disables
  std::uint64_t seed = 0;

  void validate() const;
  static SyntheticSpec from_ini(const IniDocument& doc);
  std::string to_ini() const;
};

// Each identity gets a body of colored bands (with an optional torso stripe),
// each camera a photometric tint and background, each frame seeded noise and
// jitter. Per identity, the last tracklet of camera 0 is a query, the last
// tracklet of every other camera a gallery item, and the rest train.
DatasetIndex generate_synthetic_dataset(const SyntheticSpec& spec);

// Restricted random sampling: split [0, L) into T chunks
// [floor(kL/T), floor((k+1)L/T)) and draw one index per chunk. Tracklets
// shorter than T are repeated cyclically first, so indices may repeat.
std::vector<int> rrs_sample(int length, int frames, std::mt19937_64& rng);
// Deterministic variant taking each chunk's midpoint; used at evaluation.
std::vector<int> rrs_midpoints(int length, int frames);

struct AugmentConfig {
  bool flip = true;
  bool crop = true;
  int crop_pad = 2;
  bool erase = false;
  double erase_prob = 0.5;
};

// One clip's augmentation parameters, shared by all its frames.
struct AugmentDraw {
  bool flip = false;
  int dx = 0;
  int dy = 0;
  bool erase = false;
  int ex = 0, ey = 0, ew = 0, eh = 0;
  std::vector<double> erase_fill;  // per-pixel fill for the erased box
};

AugmentDraw draw_augmentation(const AugmentConfig& config, int height, int width, std::mt19937_64& rng);
Image apply_augmentation(const Image& img, const AugmentDraw& draw);

VideoClip make_clip(const Tracklet& tracklet, const std::vector<int>& indices);

struct BatchSpec {
  int identities = 8;  // P
  int tracklets = 2;   // K
  int frames = 4;      // T
};

struct Batch {
  std::vector<VideoClip> clips;
  std::vector<int> labels;
  std::vector<int> tracklet_indices;  // into DatasetIndex::train
};

// One epoch of P x K batches. Identities are shuffled and chunked into groups
// of P (the last group is topped up with other identities), so every identity
// appears at least once. Throws ConfigError with fewer than P identities.
std::vector<Batch> pk_batches(const DatasetIndex& index, const BatchSpec& spec, std::mt19937_64& rng,
                              const AugmentConfig* augment = nullptr);

// root/{train|query|gallery}/<identity>/<camera>_<tracklet>/frame_%05d.ppm
// plus root/manifest.json.
void write_dataset_dir(const DatasetIndex& index, const std::filesystem::path& root);
DatasetIndex load_dataset_dir(const std::filesystem::path& root);

// Binary PPM (P6).
void write_ppm(const Raster& raster, const std::filesystem::path& path);
Raster read_ppm(const std::filesystem::path& path);

}  // namespace dcct
