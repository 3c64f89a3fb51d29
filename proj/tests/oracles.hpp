#pragma once

// Independent reference implementations used by unit and acceptance tests.
// They favour the most literal loop over speed and share no code with the
// library paths they check.

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "dcct/tensor.hpp"

namespace oracle {

struct Metrics {
  double mAP = 0.0;
  std::vector<double> cmc;
  int evaluated = 0;
  int skipped = 0;
};

// Sort every query's valid gallery list by (distance, index), then read
// precision at each relevant rank by recounting the prefix.
inline Metrics cmc_map(const dcct::Tensor& dist, const std::vector<int>& qid, const std::vector<int>& gid,
                       const std::vector<int>& qcam, const std::vector<int>& gcam) {
  const int nq = dist.rows(), ng = dist.cols();
  Metrics m;
  std::vector<int> first_hit_rank;  // 1-based
  double ap_total = 0.0;
  for (int i = 0; i < nq; ++i) {
    std::vector<std::pair<double, int>> ranked;
    for (int j = 0; j < ng; ++j) {
      if (gid[j] == qid[i] && gcam[j] == qcam[i]) continue;
      ranked.push_back({dist.at(i, j), j});
    }
    std::sort(ranked.begin(), ranked.end());
    std::vector<double> precisions;
    int first = 0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      if (gid[ranked[r].second] != qid[i]) continue;
      int correct = 0;
      for (std::size_t s = 0; s <= r; ++s) correct += gid[ranked[s].second] == qid[i] ? 1 : 0;
      precisions.push_back(static_cast<double>(correct) / static_cast<double>(r + 1));
      if (first == 0) first = static_cast<int>(r) + 1;
    }
    if (precisions.empty()) {
      ++m.skipped;
      continue;
    }
    double ap = 0.0;
    for (double p : precisions) ap += p;
    ap_total += ap / static_cast<double>(precisions.size());
    first_hit_rank.push_back(first);
    ++m.evaluated;
  }
  if (m.evaluated == 0) return m;
  m.mAP = ap_total / m.evaluated;
  for (int k = 1; k <= ng; ++k) {
    int hits = 0;
    for (int f : first_hit_rank) hits += f <= k ? 1 : 0;
    m.cmc.push_back(static_cast<double>(hits) / m.evaluated);
  }
  return m;
}

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(s);
}

// Every (anchor, positive) and (anchor, negative) pair enumerated explicitly.
inline double batch_hard_triplet(const std::vector<std::vector<double>>& x, const std::vector<int>& labels, double margin) {
  const std::size_t n = x.size();
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double hardest_pos = -1.0;
    double hardest_neg = INFINITY;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      hardest_pos = std::max(hardest_pos, euclidean(x[a], x[p]));
    }
    for (std::size_t q = 0; q < n; ++q) {
      if (labels[q] == labels[a]) continue;
      hardest_neg = std::min(hardest_neg, euclidean(x[a], x[q]));
    }
    total += std::max(0.0, hardest_pos - hardest_neg + margin);
  }
  return total / static_cast<double>(n);
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  double hi = logits[0];
  for (double v : logits) hi = std::max(hi, v);
  std::vector<double> out;
  double z = 0.0;
  for (double v : logits) {
    out.push_back(std::exp(v - hi));
    z += out.back();
  }
  for (double& v : out) v /= z;
  return out;
}

inline dcct::Tensor random_tensor(dcct::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  dcct::Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data) v = n(rng);
  return t;
}

}  // namespace oracle
