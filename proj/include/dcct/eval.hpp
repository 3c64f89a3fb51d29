#pragma once

#include <span>
#include <string>
#include <vector>

#include "dcct/data.hpp"
#include "dcct/model.hpp"
#include "dcct/tensor.hpp"
#include "json.hpp"

namespace dcct {

enum class FeatureMode { Full, BackboneOnly };

const char* feature_mode_name(FeatureMode mode);
// Accepts "full", "backbone" and "backbone_only".
FeatureMode parse_feature_mode(const std::string& text);

struct FeatureDB {
  Tensor features;  // [n, D]
  std::vector<int> identities;
  std::vector<int> cameras;
  FeatureMode mode = FeatureMode::Full;

  int size() const { return static_cast<int>(identities.size()); }
  int dim() const { return features.cols(); }
  // ShapeError when counts or dims disagree.
  void validate() const;
};

// One feature per tracklet from `frames` evenly spaced frames (chunk
// midpoints). Full mode needs hta_depth > 0; backbone_only skips CCA and HTA.
FeatureDB extract_features(const DcctModel& model, std::span<const Tracklet> tracklets, FeatureMode mode,
                           int batch_clips = 16);
FeatureDB extract_features(const DcctModel& model, const DatasetIndex& index, Split split, FeatureMode mode);

enum class DistanceMetric { Euclidean, Cosine };

// [|Q|, |G|] non-negative distances.
Tensor distance_matrix(const FeatureDB& query, const FeatureDB& gallery, DistanceMetric metric = DistanceMetric::Euclidean);

struct RetrievalMetrics {
  double mAP = 0.0;
  std::vector<double> cmc;  // cmc[k-1] = CMC(k), k = 1..|G|
  int evaluated = 0;
  int skipped = 0;

  // Saturates past the end of the curve.
  double cmc_at(int rank) const;
};

// Same identity and same camera gallery entries are dropped per query; ties
// in distance keep ascending gallery order. EvaluationError if every query
// is skipped.
RetrievalMetrics cmc_map(const Tensor& dist, std::span<const int> q_ids, std::span<const int> g_ids,
                         std::span<const int> q_cams, std::span<const int> g_cams);

std::string format_metrics(const RetrievalMetrics& m);
nlohmann::ordered_json metrics_json(const RetrievalMetrics& m);

inline constexpr int kReportRanks[] = {1, 5, 10, 20};

}  // namespace dcct
