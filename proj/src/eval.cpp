#include "dcct/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dcct/autograd.hpp"
#include "dcct/errors.hpp"

namespace dcct {

const char* feature_mode_name(FeatureMode mode) { return mode == FeatureMode::Full ? "full" : "backbone_only"; }

FeatureMode parse_feature_mode(const std::string& text) {
  if (text == "full") return FeatureMode::Full;
  if (text == "backbone" || text == "backbone_only") return FeatureMode::BackboneOnly;
  throw ArgumentError("unknown feature mode '" + text + "' (expected full or backbone)");
}

void FeatureDB::validate() const {
  if (features.shape.size() != 2) throw ShapeError("FeatureDB: features must be a matrix, got " + shape_str(features.shape));
  if (features.rows() != size() || cameras.size() != identities.size()) {
    throw ShapeError("FeatureDB: " + std::to_string(features.rows()) + " features for " + std::to_string(identities.size()) +
                     " identities and " + std::to_string(cameras.size()) + " cameras");
  }
}

FeatureDB extract_features(const DcctModel& model, std::span<const Tracklet> tracklets, FeatureMode mode, int batch_clips) {
  const ModelConfig& cfg = model.config();
  if (mode == FeatureMode::Full && !model.has_temporal_modules()) {
    throw ConfigError("full-mode features need CCA and HTA, but hta_depth = 0; use backbone_only");
  }
  if (batch_clips < 1) throw ArgumentError("extract_features: batch_clips must be positive");
  NoGradGuard no_grad;
  FeatureDB db;
  db.mode = mode;
  std::vector<double> rows;
  int dim = 0;
  for (std::size_t start = 0; start < tracklets.size(); start += batch_clips) {
    const std::size_t stop = std::min(tracklets.size(), start + static_cast<std::size_t>(batch_clips));
    std::vector<VideoClip> clips;
    for (std::size_t i = start; i < stop; ++i) {
      const Tracklet& t = tracklets[i];
      clips.push_back(make_clip(t, rrs_midpoints(t.length(), cfg.frames_T)));
      db.identities.push_back(t.identity);
      db.cameras.push_back(t.camera);
    }
    const Tensor input = clips_to_tensor(clips, cfg.frames_T, cfg.image_h, cfg.image_w);
    const int n = static_cast<int>(clips.size());
    Var feat;
    if (mode == FeatureMode::Full) {
      feat = model.retrieval_feature(model.forward(input, n));
    } else {
      feat = DcctModel::backbone_feature(model.forward_backbones(input, n));
    }
    dim = feat.value().cols();
    rows.insert(rows.end(), feat.value().data.begin(), feat.value().data.end());
  }
  db.features = Tensor({static_cast<int>(db.identities.size()), dim}, std::move(rows));
  return db;
}

FeatureDB extract_features(const DcctModel& model, const DatasetIndex& index, Split split, FeatureMode mode) {
  const auto& tracklets = index.split(split);
  if (tracklets.empty()) throw EvaluationError(std::string("dataset has no ") + split_name(split) + " split");
  return extract_features(model, tracklets, mode);
}

Tensor distance_matrix(const FeatureDB& query, const FeatureDB& gallery, DistanceMetric metric) {
  query.validate();
  gallery.validate();
  if (query.dim() != gallery.dim()) {
    throw ShapeError("distance_matrix: query dim " + std::to_string(query.dim()) + " != gallery dim " +
                     std::to_string(gallery.dim()));
  }
  const int nq = query.size(), ng = gallery.size(), d = query.dim();
  Tensor out({nq, ng});
  std::vector<double> gnorm(ng, 0.0);
  if (metric == DistanceMetric::Cosine) {
    for (int j = 0; j < ng; ++j) {
      for (double v : gallery.features.row(j)) gnorm[j] += v * v;
      gnorm[j] = std::sqrt(gnorm[j]);
    }
  }
  for (int i = 0; i < nq; ++i) {
    const auto q = query.features.row(i);
    double qnorm = 0.0;
    for (double v : q) qnorm += v * v;
    qnorm = std::sqrt(qnorm);
    for (int j = 0; j < ng; ++j) {
      const auto g = gallery.features.row(j);
      if (metric == DistanceMetric::Euclidean) {
        double s = 0.0;
        for (int k = 0; k < d; ++k) s += (q[k] - g[k]) * (q[k] - g[k]);
        out.at(i, j) = std::sqrt(s);
      } else {
        double dot = 0.0;
        for (int k = 0; k < d; ++k) dot += q[k] * g[k];
        const double denom = qnorm * gnorm[j];
        out.at(i, j) = denom > 0.0 ? std::max(0.0, 1.0 - dot / denom) : 1.0;
      }
    }
  }
  return out;
}

double RetrievalMetrics::cmc_at(int rank) const {
  if (cmc.empty() || rank < 1) return 0.0;
  return cmc[std::min<std::size_t>(rank, cmc.size()) - 1];
}

RetrievalMetrics cmc_map(const Tensor& dist, std::span<const int> q_ids, std::span<const int> g_ids,
                         std::span<const int> q_cams, std::span<const int> g_cams) {
  if (dist.shape.size() != 2) throw ShapeError("cmc_map: distance must be a matrix");
  const int nq = dist.rows(), ng = dist.cols();
  if (static_cast<int>(q_ids.size()) != nq || static_cast<int>(q_cams.size()) != nq ||
      static_cast<int>(g_ids.size()) != ng || static_cast<int>(g_cams.size()) != ng) {
    throw ShapeError("cmc_map: label arrays do not match distance matrix " + shape_str(dist.shape));
  }
  RetrievalMetrics m;
  std::vector<long> hits(ng, 0);  // queries whose first match sits at filtered rank k+1
  double ap_sum = 0.0;
  std::vector<int> order(ng);
  for (int i = 0; i < nq; ++i) {
    order.clear();
    for (int j = 0; j < ng; ++j) {
      if (!(g_ids[j] == q_ids[i] && g_cams[j] == q_cams[i])) order.push_back(j);
    }
    const auto row = dist.row(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return row[a] < row[b]; });
    int found = 0;
    int first = -1;
    double precision_sum = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (g_ids[order[r]] != q_ids[i]) continue;
      ++found;
      if (first < 0) first = static_cast<int>(r);
      precision_sum += static_cast<double>(found) / static_cast<double>(r + 1);
    }
    if (found == 0) {
      ++m.skipped;
      continue;
    }
    ++m.evaluated;
    ++hits[first];
    ap_sum += precision_sum / found;
  }
  if (m.evaluated == 0) throw EvaluationError("cmc_map: every query was skipped (no valid gallery match)");
  m.mAP = ap_sum / m.evaluated;
  m.cmc.resize(ng);
  long cumulative = 0;
  for (int k = 0; k < ng; ++k) {
    cumulative += hits[k];
    m.cmc[k] = static_cast<double>(cumulative) / m.evaluated;
  }
  return m;
}

std::string format_metrics(const RetrievalMetrics& m) {
  char buf[96];
  std::string out;
  std::snprintf(buf, sizeof buf, "mAP      %.4f\n", m.mAP);
  out += buf;
  for (int k : kReportRanks) {
    std::snprintf(buf, sizeof buf, "Rank-%-3d %.4f\n", k, m.cmc_at(k));
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "queries  %d evaluated, %d skipped\n", m.evaluated, m.skipped);
  out += buf;
  return out;
}

nlohmann::ordered_json metrics_json(const RetrievalMetrics& m) {
  nlohmann::ordered_json j;
  j["mAP"] = m.mAP;
  for (int k : kReportRanks) j["rank" + std::to_string(k)] = m.cmc_at(k);
  j["evaluated"] = m.evaluated;
  j["skipped"] = m.skipped;
  return j;
}

}  // namespace dcct
