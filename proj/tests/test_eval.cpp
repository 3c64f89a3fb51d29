#include <cmath>
#include <random>

#include "doctest.h"
#include "dcct/data.hpp"
#include "dcct/errors.hpp"
#include "dcct/eval.hpp"
#include "oracles.hpp"

using namespace dcct;

namespace {

FeatureDB db_from(std::vector<std::vector<double>> rows, std::vector<int> ids, std::vector<int> cams) {
  FeatureDB db;
  const int d = static_cast<int>(rows[0].size());
  db.features = Tensor({static_cast<int>(rows.size()), d});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), db.features.row(static_cast<int>(i)).begin());
  db.identities = std::move(ids);
  db.cameras = std::move(cams);
  return db;
}

RetrievalMetrics metrics_of(const Tensor& dist, const std::vector<int>& qid, const std::vector<int>& gid,
                            const std::vector<int>& qcam, const std::vector<int>& gcam) {
  return cmc_map(dist, qid, gid, qcam, gcam);
}

// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
std::vector<std::vector<double>> random_rotation(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<double>> q;
  while (static_cast<int>(q.size()) < d) {
    std::vector<double> v(d);
    for (double& x : v) x = n(rng);
    for (const auto& u : q) {
      double dot = 0.0;
      for (int k = 0; k < d; ++k) dot += v[k] * u[k];
      for (int k = 0; k < d; ++k) v[k] -= dot * u[k];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    q.push_back(v);
  }
  return q;
}

struct Instance {
  Tensor dist;
  std::vector<int> qid, gid, qcam, gcam;
};

Instance random_instance(std::mt19937_64& rng, bool quantize) {
  Instance in;
  const int nq = 1 + static_cast<int>(rng() % 10), ng = 1 + static_cast<int>(rng() % 50);
  const int ids = 1 + static_cast<int>(rng() % 6), cams = 1 + static_cast<int>(rng() % 3);
  for (int i = 0; i < nq; ++i) {
    in.qid.push_back(static_cast<int>(rng() % ids));
    in.qcam.push_back(static_cast<int>(rng() % cams));
  }
  for (int j = 0; j < ng; ++j) {
    in.gid.push_back(static_cast<int>(rng() % ids));
    in.gcam.push_back(static_cast<int>(rng() % cams));
  }
  in.dist = Tensor({nq, ng});
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (double& v : in.dist.data) v = quantize ? std::round(u(rng) * 5.0) / 5.0 : u(rng);
  return in;
}

}  // namespace

TEST_CASE("distance examples") {
  const auto a = db_from({{1.0, 2.0}}, {0}, {0});
  const Tensor zero = distance_matrix(a, a);
  CHECK(zero.shape == Shape{1, 1});
  CHECK(zero.data[0] == 0.0);
  CHECK(distance_matrix(db_from({{0.0, 0.0}}, {0}, {0}), db_from({{3.0, 4.0}}, {0}, {1})).data[0] == 5.0);
  CHECK_THROWS_AS(distance_matrix(a, db_from({{1.0, 2.0, 3.0}}, {0}, {0})), ShapeError);

  std::mt19937_64 rng(1);
  FeatureDB set;
  set.features = oracle::random_tensor({7, 5}, rng);
  set.identities.assign(7, 0);
  set.cameras.assign(7, 0);
  const Tensor d = distance_matrix(set, set);
  for (int i = 0; i < 7; ++i) {
    CHECK(d.at(i, i) == 0.0);
    for (int j = 0; j < 7; ++j) {
      CHECK(d.at(i, j) == d.at(j, i));
      CHECK(d.at(i, j) >= 0.0);
    }
  }
  const Tensor c = distance_matrix(set, set, DistanceMetric::Cosine);
  for (int i = 0; i < 7; ++i) CHECK(c.at(i, i) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("average precision with matches at ranks one and three") {
  const Tensor dist({1, 4}, {0.1, 0.2, 0.3, 0.4});
  const auto m = metrics_of(dist, {7}, {7, 1, 7, 2}, {0}, {1, 1, 1, 1});
  CHECK(m.mAP == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  CHECK(m.mAP == doctest::Approx(0.8333).epsilon(1e-4));
  CHECK(m.cmc == std::vector<double>{1.0, 1.0, 1.0, 1.0});
}

TEST_CASE("same-camera true match is excluded") {
  const Tensor dist({1, 3}, {0.1, 0.2, 0.3});
  const auto m = metrics_of(dist, {3}, {3, 3, 5}, {0}, {0, 1, 1});
  CHECK(m.cmc_at(1) == 1.0);
  CHECK(m.mAP == 1.0);
  // Same camera but different identity stays in the list.
  const auto n = metrics_of(dist, {3}, {5, 3, 3}, {0}, {0, 1, 0});
  CHECK(n.cmc_at(1) == 0.0);
  CHECK(n.cmc_at(2) == 1.0);
  CHECK(n.mAP == 0.5);
}

TEST_CASE("perfect single-match retrieval") {
  const Tensor dist({3, 3}, {0.1, 0.5, 0.9, 0.7, 0.2, 0.8, 0.6, 0.4, 0.3});
  const auto m = metrics_of(dist, {0, 1, 2}, {0, 1, 2}, {0, 0, 0}, {1, 1, 1});
  CHECK(m.mAP == 1.0);
  CHECK(m.cmc_at(1) == 1.0);
  CHECK(m.cmc_at(50) == 1.0);
  CHECK(m.evaluated == 3);
}

TEST_CASE("ties keep ascending gallery order") {
  const Tensor dist({1, 3}, {0.5, 0.5, 0.5});
  CHECK(metrics_of(dist, {1}, {0, 1, 1}, {0}, {1, 1, 1}).cmc_at(1) == 0.0);
  CHECK(metrics_of(dist, {1}, {1, 0, 0}, {0}, {1, 1, 1}).cmc_at(1) == 1.0);
}

TEST_CASE("cmc_map matches the brute-force oracle") {
  std::mt19937_64 rng(2);
  int compared = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const auto in = random_instance(rng, trial % 2 == 0);
    const auto want = oracle::cmc_map(in.dist, in.qid, in.gid, in.qcam, in.gcam);
    if (want.evaluated == 0) {
      CHECK_THROWS_AS(metrics_of(in.dist, in.qid, in.gid, in.qcam, in.gcam), EvaluationError);
      continue;
    }
    const auto got = metrics_of(in.dist, in.qid, in.gid, in.qcam, in.gcam);
    CHECK(got.mAP == want.mAP);
    CHECK(got.cmc == want.cmc);
    CHECK(got.evaluated == want.evaluated);
    CHECK(got.skipped == want.skipped);
    for (std::size_t k = 1; k < got.cmc.size(); ++k) CHECK(got.cmc[k] >= got.cmc[k - 1]);
    CHECK(got.mAP <= got.cmc.back());
    ++compared;
  }
  CHECK(compared > 150);
}

TEST_CASE("rotation leaves distances and metrics unchanged") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const int d = 6;
    FeatureDB qdb, gdb;
    qdb.features = oracle::random_tensor({5, d}, rng);
    gdb.features = oracle::random_tensor({20, d}, rng);
    for (int i = 0; i < 5; ++i) {
      qdb.identities.push_back(i);
      qdb.cameras.push_back(0);
    }
    for (int j = 0; j < 20; ++j) {
      gdb.identities.push_back(j % 5);
      gdb.cameras.push_back(1 + j % 2);
    }
    const auto rot = random_rotation(d, rng);
    auto rotate = [&](FeatureDB db) {
      Tensor out(db.features.shape);
      for (int r = 0; r < out.rows(); ++r) {
        for (int a = 0; a < d; ++a) {
          for (int b = 0; b < d; ++b) out.at(r, a) += rot[a][b] * db.features.at(r, b);
        }
      }
      db.features = out;
      return db;
    };
    const Tensor d0 = distance_matrix(qdb, gdb), d1 = distance_matrix(rotate(qdb), rotate(gdb));
    double worst = 0.0;
    for (std::size_t i = 0; i < d0.data.size(); ++i) worst = std::max(worst, std::abs(d0.data[i] - d1.data[i]));
    CHECK(worst <= 1e-9);
    const auto m0 = metrics_of(d0, qdb.identities, gdb.identities, qdb.cameras, gdb.cameras);
    const auto m1 = metrics_of(d1, qdb.identities, gdb.identities, qdb.cameras, gdb.cameras);
    CHECK(std::abs(m0.mAP - m1.mAP) <= 1e-9);
    CHECK(m0.cmc == m1.cmc);
  }
}

TEST_CASE("positive scaling leaves metrics exactly unchanged") {
  std::mt19937_64 rng(4);
  for (double s : {2.0, 0.25, 3.7, 1e3}) {
    FeatureDB qdb, gdb;
    qdb.features = oracle::random_tensor({6, 4}, rng);
    gdb.features = oracle::random_tensor({30, 4}, rng);
    for (int i = 0; i < 6; ++i) {
      qdb.identities.push_back(i % 3);
      qdb.cameras.push_back(0);
    }
    for (int j = 0; j < 30; ++j) {
      gdb.identities.push_back(j % 4);
      gdb.cameras.push_back(j % 2);
    }
    auto scaled = [s](FeatureDB db) {
      for (double& v : db.features.data) v *= s;
      return db;
    };
    const auto m0 = metrics_of(distance_matrix(qdb, gdb), qdb.identities, gdb.identities, qdb.cameras, gdb.cameras);
    const auto m1 = metrics_of(distance_matrix(scaled(qdb), scaled(gdb)), qdb.identities, gdb.identities, qdb.cameras,
                               gdb.cameras);
    CHECK(m0.mAP == m1.mAP);
    CHECK(m0.cmc == m1.cmc);
  }
}

TEST_CASE("queries without a valid match are tallied") {
  const Tensor dist({3, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  // Query 1 only matches itself on its own camera; query 2 has no identity in the gallery.
  const auto m = metrics_of(dist, {0, 1, 9}, {0, 1}, {0, 1, 0}, {1, 1});
  CHECK(m.evaluated == 1);
  CHECK(m.skipped == 2);
  CHECK(m.mAP == 1.0);
  CHECK_THROWS_AS(metrics_of(dist, {9, 9, 9}, {0, 1}, {0, 0, 0}, {1, 1}), EvaluationError);
  CHECK_THROWS_AS(metrics_of(dist, {0, 1}, {0, 1}, {0, 1}, {1, 1}), ShapeError);
}

TEST_CASE("metric report formats") {
  const Tensor dist({1, 4}, {0.1, 0.2, 0.3, 0.4});
  const auto m = metrics_of(dist, {7}, {7, 1, 7, 2}, {0}, {1, 1, 1, 1});
  const auto j = metrics_json(m);
  CHECK(j["rank1"] == 1.0);
  CHECK(j["rank20"] == 1.0);
  CHECK(j["skipped"] == 0);
  CHECK(format_metrics(m).find("mAP      0.8333") != std::string::npos);
  CHECK(parse_feature_mode("backbone") == FeatureMode::BackboneOnly);
  CHECK(parse_feature_mode("full") == FeatureMode::Full);
  CHECK_THROWS_AS(parse_feature_mode("s3"), ArgumentError);
}

namespace {

DatasetIndex small_dataset() {
  SyntheticSpec s;
  s.num_identities = 3;
  s.tracklet_length = 6;
  return generate_synthetic_dataset(s);
}

}  // namespace

TEST_CASE("feature extraction under the default config") {
  const auto data = small_dataset();
  const auto model = DcctModel::build(ModelConfig{});
  const auto full = extract_features(model, data, Split::Query, FeatureMode::Full);
  CHECK(full.dim() == 192);
  CHECK(full.size() == 3);
  CHECK(full.identities == std::vector<int>{0, 1, 2});
  CHECK(model.cca_calls() > 0);
  CHECK(model.hta_calls() > 0);

  const auto again = extract_features(model, data, Split::Query, FeatureMode::Full);
  CHECK(again.features.data == full.features.data);

  const auto fresh = DcctModel::build(ModelConfig{});
  const auto backbone = extract_features(fresh, data, Split::Gallery, FeatureMode::BackboneOnly);
  CHECK(backbone.dim() == 192);
  CHECK(fresh.cca_calls() == 0);
  CHECK(fresh.hta_calls() == 0);
  CHECK(backbone.mode == FeatureMode::BackboneOnly);

  // Batching does not change the features.
  const auto one_by_one = extract_features(fresh, std::span<const Tracklet>(data.gallery), FeatureMode::BackboneOnly, 1);
  for (std::size_t i = 0; i < backbone.features.data.size(); ++i) {
    CHECK(one_by_one.features.data[i] == doctest::Approx(backbone.features.data[i]).epsilon(1e-12));
  }
}

TEST_CASE("full mode needs temporal modules") {
  auto cfg = tiny_model_config();
  cfg.hta_depth = 0;
  cfg.image_h = 64;
  cfg.image_w = 32;
  cfg.map_h = 8;
  cfg.map_w = 4;
  const auto model = DcctModel::build(cfg);
  const auto data = small_dataset();
  CHECK_THROWS_AS(extract_features(model, data, Split::Query, FeatureMode::Full), ConfigError);
  CHECK(extract_features(model, data, Split::Query, FeatureMode::BackboneOnly).dim() == cfg.c1 + cfg.c2);

  auto no_train = data;
  no_train.train.clear();
  CHECK_THROWS_AS(extract_features(model, no_train, Split::Train, FeatureMode::BackboneOnly), EvaluationError);
}
