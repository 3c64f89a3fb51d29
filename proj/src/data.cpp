#include "dcct/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>

#include "dcct/errors.hpp"
#include "json.hpp"

namespace dcct {

namespace fs = std::filesystem;

Image Raster::to_image() const {
  Image img(height, width);
  for (std::size_t i = 0; i < rgb.size(); ++i) img.pixels[i] = rgb[i] / 255.0;
  return img;
}

const char* split_name(Split split) {
  switch (split) {
    case Split::Train:
      return "train";
    case Split::Query:
      return "query";
    case Split::Gallery:
      return "gallery";
  }
  return "?";
}

const std::vector<Tracklet>& DatasetIndex::split(Split s) const {
  return s == Split::Train ? train : s == Split::Query ? query : gallery;
}

std::vector<Tracklet>& DatasetIndex::split(Split s) {
  return s == Split::Train ? train : s == Split::Query ? query : gallery;
}

void DatasetIndex::validate() const {
  std::set<int> ids;
  std::set<std::tuple<int, int, int>> seen;
  for (Split s : {Split::Train, Split::Query, Split::Gallery}) {
    for (const auto& t : split(s)) {
      if (t.length() < 1) throw IngestionError(std::string(split_name(s)) + ": tracklet without frames");
      if (t.identity < 0 || t.camera < 0) throw IngestionError(std::string(split_name(s)) + ": negative identity or camera id");
      if (!seen.insert({t.identity, t.camera, t.tracklet_id}).second) {
        throw IngestionError("tracklet " + std::to_string(t.identity) + "/" + std::to_string(t.camera) + "_" +
                             std::to_string(t.tracklet_id) + " appears in more than one place");
      }
      for (const auto& f : t.frames) {
        if (f.height != image_h || f.width != image_w) throw IngestionError("frame size differs from the dataset image size");
      }
      ids.insert(t.identity);
    }
  }
  if (!ids.empty() && (*ids.begin() != 0 || *ids.rbegin() != static_cast<int>(ids.size()) - 1)) {
    throw IngestionError("identity ids are not dense in [0, " + std::to_string(ids.size()) + ")");
  }
  if (static_cast<int>(ids.size()) != num_identities) {
    throw IngestionError("dataset declares " + std::to_string(num_identities) + " identities but contains " +
                         std::to_string(ids.size()));
  }
  for (const auto& q : query) {
    const bool ok = std::any_of(gallery.begin(), gallery.end(),
                                [&](const Tracklet& g) { return g.identity == q.identity && g.camera != q.camera; });
    if (!ok) throw IngestionError("query identity " + std::to_string(q.identity) + " has no cross-camera gallery tracklet");
  }
}

void SyntheticSpec::validate() const {
  auto check = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("synthetic spec: " + msg);
  };
  check(num_identities >= 2, "need at least 2 identities");
  check(cameras >= 2, "need at least 2 cameras");
  check(tracklets_per_identity_per_camera >= 2, "need at least 2 tracklets per identity per camera (one is held out)");
  check(frames_T >= 1, "frames_T must be positive");
  check(tracklet_length >= frames_T, "tracklet_length must be >= frames_T");
  check(image_h >= 8 && image_w >= 4, "image must be at least 8x4");
  check(noise >= 0.0 && noise < 1.0, "noise must lie in [0, 1)");
  check(jitter >= 0, "jitter must be non-negative");
}

SyntheticSpec SyntheticSpec::from_ini(const IniDocument& doc) {
  SyntheticSpec s;
  IniSection sec(doc, "synthetic");
  sec.read("num_identities", s.num_identities);
  sec.read("cameras", s.cameras);
  sec.read("tracklets_per_identity_per_camera", s.tracklets_per_identity_per_camera);
  sec.read("tracklet_length", s.tracklet_length);
  sec.read("frames_T", s.frames_T);
  sec.read("image_h", s.image_h);
  sec.read("image_w", s.image_w);
  sec.read("noise", s.noise);
  sec.read("jitter", s.jitter);
  sec.read("seed", s.seed);
  sec.reject_unknown();
  reject_unknown_sections(doc, {"synthetic"});
  s.validate();
  return s;
}

std::string SyntheticSpec::to_ini() const {
  std::ostringstream os;
  os.precision(17);
  os << "[synthetic]\n"
     << "num_identities = " << num_identities << '\n'
     << "cameras = " << cameras << '\n'
     << "tracklets_per_identity_per_camera = " << tracklets_per_identity_per_camera << '\n'
     << "tracklet_length = " << tracklet_length << '\n'
     << "frames_T = " << frames_T << '\n'
     << "image_h = " << image_h << '\n'
     << "image_w = " << image_w << '\n'
     << "noise = " << noise << '\n'
     << "jitter = " << jitter << '\n'
     << "seed = " << seed << '\n';
  return os.str();
}

namespace {

struct Appearance {
  std::array<std::array<double, 3>, 4> bands;  // head, torso, legs, feet
  bool stripe = false;
  std::array<double, 3> stripe_color{};
  int stripe_period = 2;
  double body_width = 0.5;
};

struct CameraLook {
  std::array<double, 3> tint{};
  std::array<double, 3> background{};
};

double signature_distance(const Appearance& a, const Appearance& b) {
  double s = 0.0;
  for (int k = 0; k < 4; ++k) {
    for (int c = 0; c < 3; ++c) s += (a.bands[k][c] - b.bands[k][c]) * (a.bands[k][c] - b.bands[k][c]);
  }
  return std::sqrt(s);
}

std::vector<Appearance> draw_identities(int count, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> color(0.05, 0.95);
  std::uniform_real_distribution<double> width(0.4, 0.6);
  std::uniform_int_distribution<int> period(2, 4);
  std::bernoulli_distribution coin(0.5);
  std::vector<Appearance> out;
  double min_gap = 0.6;
  int attempts = 0;
  while (static_cast<int>(out.size()) < count) {
    Appearance a;
    for (auto& band : a.bands) {
      for (double& v : band) v = color(rng);
    }
    a.stripe = coin(rng);
    for (double& v : a.stripe_color) v = color(rng);
    a.stripe_period = period(rng);
    a.body_width = width(rng);
    const bool separated = std::all_of(out.begin(), out.end(), [&](const Appearance& b) { return signature_distance(a, b) >= min_gap; });
    if (separated) {
      out.push_back(a);
      attempts = 0;
    } else if (++attempts > 2000) {
      min_gap *= 0.9;
      attempts = 0;
    }
  }
  return out;
}

Raster render_frame(const Appearance& who, const CameraLook& cam, int h, int w, int dx, int dy, double noise,
                    std::mt19937_64& rng) {
  static constexpr double kBandEdges[5] = {0.0, 0.18, 0.5, 0.85, 1.0};
  Image img(h, w);
  const int top = static_cast<int>(std::lround(0.06 * h)) + dy;
  const int body_h = static_cast<int>(std::lround(0.88 * h));
  const double center = 0.5 * w + dx;
  std::normal_distribution<double> gauss(0.0, noise > 0.0 ? noise : 1.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::array<double, 3> px = cam.background;
      const double rel = (static_cast<double>(y) - top) / body_h;
      if (rel >= 0.0 && rel < 1.0) {
        int band = 0;
        while (band < 3 && rel >= kBandEdges[band + 1]) ++band;
        const double half = 0.5 * who.body_width * w * (band == 0 ? 0.55 : 1.0);
        if (std::abs(x + 0.5 - center) < half) {
          px = who.bands[band];
          if (band == 1 && who.stripe) {
            const int row = y - top - static_cast<int>(kBandEdges[1] * body_h);
            if ((row / who.stripe_period) % 2 == 1) px = who.stripe_color;
          }
        }
      }
      for (int c = 0; c < 3; ++c) {
        double v = px[c] * cam.tint[c];
        if (noise > 0.0) v += gauss(rng);
        img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  Raster r{h, w, std::vector<std::uint8_t>(img.pixels.size())};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) r.rgb[i] = static_cast<std::uint8_t>(std::lround(img.pixels[i] * 255.0));
  return r;
}

}  // namespace

DatasetIndex generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const auto identities = draw_identities(spec.num_identities, rng);
  std::vector<CameraLook> cameras(spec.cameras);
  std::uniform_real_distribution<double> tint(0.85, 1.15);
  std::uniform_real_distribution<double> gray(0.3, 0.7);
  std::uniform_real_distribution<double> hue(-0.08, 0.08);
  for (auto& cam : cameras) {
    for (double& v : cam.tint) v = tint(rng);
    const double base = gray(rng);
    for (double& v : cam.background) v = std::clamp(base + hue(rng), 0.0, 1.0);
  }

  DatasetIndex index;
  index.num_identities = spec.num_identities;
  index.num_cameras = spec.cameras;
  index.image_h = spec.image_h;
  index.image_w = spec.image_w;
  std::uniform_int_distribution<int> shift(-spec.jitter, spec.jitter);
  const int last = spec.tracklets_per_identity_per_camera - 1;
  for (int id = 0; id < spec.num_identities; ++id) {
    for (int cam = 0; cam < spec.cameras; ++cam) {
      for (int j = 0; j <= last; ++j) {
        Tracklet t;
        t.identity = id;
        t.camera = cam;
        t.tracklet_id = j;
        for (int f = 0; f < spec.tracklet_length; ++f) {
          const int dx = spec.jitter > 0 ? shift(rng) : 0;
          const int dy = spec.jitter > 0 ? shift(rng) : 0;
          t.frames.push_back(render_frame(identities[id], cameras[cam], spec.image_h, spec.image_w, dx, dy, spec.noise, rng));
        }
        if (j == last) {
          (cam == 0 ? index.query : index.gallery).push_back(std::move(t));
        } else {
          index.train.push_back(std::move(t));
        }
      }
    }
  }
  index.validate();
  return index;
}

std::vector<int> rrs_sample(int length, int frames, std::mt19937_64& rng) {
  if (length < 1) throw ArgumentError("rrs_sample: tracklet must have at least one frame");
  if (frames < 1) throw ArgumentError("rrs_sample: T must be positive");
  std::vector<int> out(frames);
  if (length < frames) {
    for (int k = 0; k < frames; ++k) out[k] = k % length;
    return out;
  }
  for (int k = 0; k < frames; ++k) {
    const int lo = static_cast<int>(static_cast<long long>(k) * length / frames);
    const int hi = static_cast<int>(static_cast<long long>(k + 1) * length / frames);
    std::uniform_int_distribution<int> pick(lo, hi - 1);
    out[k] = pick(rng);
  }
  return out;
}

std::vector<int> rrs_midpoints(int length, int frames) {
  if (length < 1) throw ArgumentError("rrs_midpoints: tracklet must have at least one frame");
  if (frames < 1) throw ArgumentError("rrs_midpoints: T must be positive");
  std::vector<int> out(frames);
  if (length < frames) {
    for (int k = 0; k < frames; ++k) out[k] = k % length;
    return out;
  }
  for (int k = 0; k < frames; ++k) {
    const int lo = static_cast<int>(static_cast<long long>(k) * length / frames);
    const int hi = static_cast<int>(static_cast<long long>(k + 1) * length / frames);
    out[k] = lo + (hi - 1 - lo) / 2;
  }
  return out;
}

AugmentDraw draw_augmentation(const AugmentConfig& config, int height, int width, std::mt19937_64& rng) {
  AugmentDraw d;
  if (config.flip) d.flip = std::bernoulli_distribution(0.5)(rng);
  if (config.crop && config.crop_pad > 0) {
    std::uniform_int_distribution<int> off(-config.crop_pad, config.crop_pad);
    d.dx = off(rng);
    d.dy = off(rng);
  }
  if (config.erase && std::bernoulli_distribution(config.erase_prob)(rng)) {
    const double area = std::uniform_real_distribution<double>(0.02, 0.2)(rng) * height * width;
    const double aspect = std::exp(std::uniform_real_distribution<double>(std::log(0.3), std::log(3.3))(rng));
    d.eh = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, height);
    d.ew = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, width);
    d.ey = std::uniform_int_distribution<int>(0, height - d.eh)(rng);
    d.ex = std::uniform_int_distribution<int>(0, width - d.ew)(rng);
    d.erase = true;
    d.erase_fill.resize(static_cast<std::size_t>(d.eh) * d.ew * 3);
    std::uniform_real_distribution<double> fill(0.0, 1.0);
    for (double& v : d.erase_fill) v = fill(rng);
  }
  return d;
}

Image apply_augmentation(const Image& img, const AugmentDraw& d) {
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      // Pad-and-crop is a translation with zero fill.
      const int sy = y + d.dy;
      int sx = x + d.dx;
      if (sy < 0 || sy >= img.height || sx < 0 || sx >= img.width) continue;
      if (d.flip) sx = img.width - 1 - sx;
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(sy, sx, c);
    }
  }
  if (d.erase) {
    std::size_t k = 0;
    for (int y = d.ey; y < d.ey + d.eh; ++y) {
      for (int x = d.ex; x < d.ex + d.ew; ++x) {
        for (int c = 0; c < 3; ++c) out.at(y, x, c) = d.erase_fill[k++];
      }
    }
  }
  return out;
}

VideoClip make_clip(const Tracklet& tracklet, const std::vector<int>& indices) {
  VideoClip clip;
  clip.identity = tracklet.identity;
  clip.camera = tracklet.camera;
  for (int i : indices) {
    if (i < 0 || i >= tracklet.length()) throw ArgumentError("make_clip: frame index out of range");
    clip.frames.push_back(tracklet.frames[i].to_image());
  }
  return clip;
}

std::vector<Batch> pk_batches(const DatasetIndex& index, const BatchSpec& spec, std::mt19937_64& rng,
                              const AugmentConfig* augment) {
  if (spec.identities < 1 || spec.tracklets < 1 || spec.frames < 1) throw ConfigError("batch spec: P, K and T must be positive");
  std::map<int, std::vector<int>> by_identity;
  for (std::size_t i = 0; i < index.train.size(); ++i) by_identity[index.train[i].identity].push_back(static_cast<int>(i));
  if (static_cast<int>(by_identity.size()) < spec.identities) {
    throw ConfigError("PK sampling needs " + std::to_string(spec.identities) + " training identities, dataset has " +
                      std::to_string(by_identity.size()));
  }
  std::vector<int> order;
  for (const auto& [id, list] : by_identity) order.push_back(id);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += spec.identities) {
    std::vector<int> group(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + spec.identities)));
    if (static_cast<int>(group.size()) < spec.identities) {
      std::vector<int> rest;
      for (int id : order) {
        if (std::find(group.begin(), group.end(), id) == group.end()) rest.push_back(id);
      }
      std::shuffle(rest.begin(), rest.end(), rng);
      group.insert(group.end(), rest.begin(), rest.begin() + (spec.identities - static_cast<int>(group.size())));
    }
    Batch batch;
    for (int id : group) {
      std::vector<int> pool = by_identity[id];
      std::vector<int> chosen;
      if (static_cast<int>(pool.size()) >= spec.tracklets) {
        std::shuffle(pool.begin(), pool.end(), rng);
        chosen.assign(pool.begin(), pool.begin() + spec.tracklets);
      } else {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        for (int k = 0; k < spec.tracklets; ++k) chosen.push_back(pool[pick(rng)]);
      }
      for (int ti : chosen) {
        const Tracklet& t = index.train[ti];
        VideoClip clip = make_clip(t, rrs_sample(t.length(), spec.frames, rng));
        if (augment) {
          const AugmentDraw draw = draw_augmentation(*augment, index.image_h, index.image_w, rng);
          for (auto& f : clip.frames) f = apply_augmentation(f, draw);
        }
        batch.clips.push_back(std::move(clip));
        batch.labels.push_back(id);
        batch.tracklet_indices.push_back(ti);
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

void write_ppm(const Raster& raster, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "P6\n" << raster.width << ' ' << raster.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(raster.rgb.data()), static_cast<std::streamsize>(raster.rgb.size()));
  if (!out) throw IngestionError("failed writing " + path.string());
}

Raster read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw IngestionError("not an 8-bit binary PPM: " + path.string());
  in.get();
  Raster r{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3)};
  in.read(reinterpret_cast<char*>(r.rgb.data()), static_cast<std::streamsize>(r.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(r.rgb.size())) throw IngestionError("truncated PPM: " + path.string());
  return r;
}

namespace {

std::string pad(int value, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*d", width, value);
  return buf;
}

int parse_id(const std::string& text, const fs::path& where) {
  if (text.empty() || !std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isdigit(c); }) ||
      text.size() > 9) {
    throw IngestionError("expected a non-negative integer id: " + where.string());
  }
  return std::stoi(text);
}

std::vector<fs::path> sorted_entries(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path());
  std::sort(out.begin(), out.end(), [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  return out;
}

}  // namespace

void write_dataset_dir(const DatasetIndex& index, const fs::path& root) {
  fs::create_directories(root);
  nlohmann::ordered_json manifest;
  manifest["format"] = "dcct-dataset";
  manifest["version"] = 1;
  manifest["image_h"] = index.image_h;
  manifest["image_w"] = index.image_w;
  manifest["num_identities"] = index.num_identities;
  manifest["num_cameras"] = index.num_cameras;
  for (Split s : {Split::Train, Split::Query, Split::Gallery}) {
    const auto& tracklets = index.split(s);
    std::size_t frames = 0;
    for (const auto& t : tracklets) {
      const fs::path dir = root / split_name(s) / pad(t.identity, 4) / (pad(t.camera, 2) + "_" + pad(t.tracklet_id, 4));
      fs::create_directories(dir);
      for (int f = 0; f < t.length(); ++f) write_ppm(t.frames[f], dir / ("frame_" + pad(f, 5) + ".ppm"));
      frames += t.frames.size();
    }
    manifest["splits"][split_name(s)] = {{"tracklets", tracklets.size()}, {"frames", frames}};
  }
  std::ofstream out(root / "manifest.json");
  out << manifest.dump(2) << '\n';
}

DatasetIndex load_dataset_dir(const fs::path& root) {
  const fs::path manifest_path = root / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw IngestionError("missing manifest: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const std::exception& e) {
    throw IngestionError("unreadable manifest " + manifest_path.string() + ": " + e.what());
  }
  DatasetIndex index;
  try {
    index.image_h = manifest.at("image_h").get<int>();
    index.image_w = manifest.at("image_w").get<int>();
    index.num_identities = manifest.at("num_identities").get<int>();
    index.num_cameras = manifest.at("num_cameras").get<int>();
  } catch (const std::exception& e) {
    throw IngestionError("manifest " + manifest_path.string() + " is missing a field: " + e.what());
  }

  for (Split s : {Split::Train, Split::Query, Split::Gallery}) {
    const fs::path split_dir = root / split_name(s);
    auto& tracklets = index.split(s);
    if (fs::is_directory(split_dir)) {
      for (const auto& id_dir : sorted_entries(split_dir)) {
        if (!fs::is_directory(id_dir)) throw IngestionError("unexpected file in split directory: " + id_dir.string());
        const int identity = parse_id(id_dir.filename().string(), id_dir);
        for (const auto& t_dir : sorted_entries(id_dir)) {
          const std::string name = t_dir.filename().string();
          const auto sep = name.find('_');
          if (!fs::is_directory(t_dir) || sep == std::string::npos) {
            throw IngestionError("expected a <camera>_<tracklet> directory: " + t_dir.string());
          }
          Tracklet t;
          t.identity = identity;
          t.camera = parse_id(name.substr(0, sep), t_dir);
          t.tracklet_id = parse_id(name.substr(sep + 1), t_dir);
          const auto frames = sorted_entries(t_dir);
          for (std::size_t f = 0; f < frames.size(); ++f) {
            const std::string expected = "frame_" + pad(static_cast<int>(f), 5) + ".ppm";
            if (frames[f].filename().string() != expected) {
              throw IngestionError("expected " + expected + ", found " + frames[f].string());
            }
            Raster r = read_ppm(frames[f]);
            if (r.height != index.image_h || r.width != index.image_w) {
              throw IngestionError("frame size does not match the manifest: " + frames[f].string());
            }
            t.frames.push_back(std::move(r));
          }
          if (t.frames.empty()) throw IngestionError("tracklet directory has no frames: " + t_dir.string());
          tracklets.push_back(std::move(t));
        }
      }
    }
    const auto declared = manifest.contains("splits") && manifest["splits"].contains(split_name(s))
                              ? manifest["splits"][split_name(s)].value("tracklets", std::size_t{0})
                              : std::size_t{0};
    if (declared != tracklets.size()) {
      throw IngestionError("manifest declares " + std::to_string(declared) + " " + split_name(s) + " tracklets, found " +
                           std::to_string(tracklets.size()) + " under " + split_dir.string());
    }
  }
  if (index.query.empty()) throw IngestionError("query split is empty: " + (root / "query").string());
  if (index.gallery.empty()) throw IngestionError("gallery split is empty: " + (root / "gallery").string());

  std::set<int> ids;
  for (Split s : {Split::Train, Split::Query, Split::Gallery}) {
    for (const auto& t : index.split(s)) ids.insert(t.identity);
  }
  int expected = 0;
  for (int id : ids) {
    if (id != expected) {
      throw IngestionError("identity ids are not contiguous: missing " + pad(expected, 4) + " (next is " +
                           (root / "*" / pad(id, 4)).string() + ")");
    }
    ++expected;
  }
  index.validate();
  return index;
}

}  // namespace dcct
