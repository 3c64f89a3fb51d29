#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "dcct/cca.hpp"
#include "dcct/errors.hpp"
#include "dcct/gradcheck.hpp"
#include "oracles.hpp"

using namespace dcct;

namespace {

Linear fixed_linear(int in, int out, std::vector<double> w) {
  Linear l;
  l.weight = Var(Tensor({out, in}, std::move(w)), true);
  l.in_features = in;
  l.out_features = out;
  return l;
}

SpatialFeatureMap random_map(int h, int w, int c, Branch b, std::mt19937_64& rng) {
  SpatialFeatureMap m(h, w, c, b);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : m.grid) v = n(rng);
  return m;
}

FrameFeatureVector random_vector(int c, std::mt19937_64& rng) {
  FrameFeatureVector v;
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < c; ++i) v.values.push_back(n(rng));
  return v;
}

std::vector<double> affine(const Linear& l, const std::vector<double>& x) {
  const Tensor& w = l.weight.value();
  std::vector<double> y(l.out_features, 0.0);
  for (int o = 0; o < l.out_features; ++o) {
    for (int i = 0; i < l.in_features; ++i) y[o] += w.at(o, i) * x[i];
    if (l.bias.defined()) y[o] += l.bias.value().data[o];
  }
  return y;
}

std::vector<double> cell(const SpatialFeatureMap& m, int p) {
  return {m.grid.begin() + static_cast<std::ptrdiff_t>(p) * m.channels,
          m.grid.begin() + static_cast<std::ptrdiff_t>(p + 1) * m.channels};
}

// Position loop: weighted sums of the value projections, residual, fuse, norm.
std::vector<double> fuse_oracle(const SpatialFeatureMap& local, const std::vector<double>& a_self,
                                const std::vector<double>& a_cross, const std::vector<double>& global,
                                const CcaBranch& branch) {
  const int c = local.channels, half = c / 2;
  std::vector<double> joined(c, 0.0);
  for (int p = 0; p < local.positions(); ++p) {
    const auto vs = affine(branch.value_self, cell(local, p));
    const auto vc = affine(branch.value_cross, cell(local, p));
    for (int k = 0; k < half; ++k) {
      joined[k] += a_self[p] * vs[k];
      joined[half + k] += a_cross[p] * vc[k];
    }
  }
  for (int k = 0; k < c; ++k) joined[k] += global[k];
  const auto z = affine(branch.fuse, joined);
  const double mean = std::accumulate(z.begin(), z.end(), 0.0) / c;
  double var = 0.0;
  for (double v : z) var += (v - mean) * (v - mean);
  var /= c;
  std::vector<double> out(c);
  for (int k = 0; k < c; ++k) {
    out[k] = (z[k] - mean) / std::sqrt(var + 1e-5) * branch.fuse_norm.gamma.value().data[k] +
             branch.fuse_norm.beta.value().data[k];
  }
  return out;
}

struct Fixture {
  ModelConfig cfg = tiny_model_config();
  ParameterStore store;
  std::mt19937_64 rng{21};
  Cca cca;
  Fixture() {
    cfg.map_h = 2;
    cfg.map_w = 2;
    cfg.image_h = 4;
    cfg.image_w = 4;
    cca = Cca::create(store, cfg, rng);
  }
};

}  // namespace

TEST_CASE("constant keys give a uniform map") {
  Fixture f;
  SpatialFeatureMap local(2, 3, f.cfg.c1, Branch::Cnn);
  for (int p = 0; p < 6; ++p) {
    for (int k = 0; k < f.cfg.c1; ++k) local.grid[p * f.cfg.c1 + k] = 0.1 * k - 0.3;
  }
  const auto map = attention_map(local, random_vector(f.cfg.c1, f.rng), f.cca.cnn_branch().self_head, AttentionKind::Self);
  for (double w : map.weights) CHECK(w == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("single-cell grid gives weight one") {
  Fixture f;
  const auto local = random_map(1, 1, f.cfg.c1, Branch::Cnn, f.rng);
  const auto map = attention_map(local, random_vector(f.cfg.c2, f.rng), f.cca.cnn_branch().cross_head, AttentionKind::Cross);
  REQUIRE(map.weights.size() == 1);
  CHECK(map.weights[0] == 1.0);
}

TEST_CASE("two-cell grid with logits ln3 and 0") {
  CcaHead head{fixed_linear(1, 1, {1.0}), fixed_linear(1, 1, {1.0})};
  SpatialFeatureMap local(1, 2, 1, Branch::Cnn);
  local.grid = {std::log(3.0), 0.0};
  const auto map = attention_map(local, FrameFeatureVector{{1.0}}, head, AttentionKind::Self);
  CHECK(map.weights[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(map.weights[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("projected width mismatch is a shape error") {
  CcaHead head{fixed_linear(1, 2, {1.0, 1.0}), fixed_linear(1, 1, {1.0})};
  SpatialFeatureMap local(1, 2, 1, Branch::Cnn);
  CHECK_THROWS_AS(attention_map(local, FrameFeatureVector{{1.0}}, head, AttentionKind::Self), ShapeError);
  Fixture f;
  CHECK_THROWS_AS(attention_map(local, FrameFeatureVector{{1.0}}, f.cca.cnn_branch().self_head, AttentionKind::Self),
                  ShapeError);
}

TEST_CASE("shifting every logit by a constant leaves the map unchanged") {
  Fixture f;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto local = random_map(2, 2, f.cfg.c1, Branch::Cnn, rng);
    const auto query = random_vector(f.cfg.c1, rng);
    // Channel 0 is made constant over positions, then moved: every logit shifts equally.
    for (int p = 0; p < 4; ++p) local.grid[p * f.cfg.c1] = 0.7;
    const auto a = attention_map(local, query, f.cca.cnn_branch().self_head, AttentionKind::Self);
    for (int p = 0; p < 4; ++p) local.grid[p * f.cfg.c1] = 0.7 + 3.0 * (trial + 1);
    const auto b = attention_map(local, query, f.cca.cnn_branch().self_head, AttentionKind::Self);
    for (int p = 0; p < 4; ++p) CHECK(std::abs(a.weights[p] - b.weights[p]) <= 1e-9);
  }
}

TEST_CASE("attention maps are distributions on random inputs") {
  Fixture f;
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto local = random_map(2, 2, f.cfg.c2, Branch::Transformer, rng);
    const auto map = attention_map(local, random_vector(f.cfg.c1, rng), f.cca.transformer_branch().cross_head,
                                   AttentionKind::Cross);
    double s = 0.0;
    for (double w : map.weights) {
      CHECK(w >= 0.0);
      s += w;
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("attend_and_fuse matches a position loop") {
  Fixture f;
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto local = random_map(2, 2, f.cfg.c1, Branch::Cnn, rng);
    const auto global = random_vector(f.cfg.c1, rng);
    AttentionMap a_self{2, 2, oracle::softmax({0.1, -1.0, 2.0, 0.3 * trial}), AttentionKind::Self, Branch::Cnn};
    AttentionMap a_cross{2, 2, oracle::softmax({1.0, 0.5, -0.2, 0.0}), AttentionKind::Cross, Branch::Cnn};
    const auto got = attend_and_fuse(local, a_self, a_cross, global, f.cca.cnn_branch());
    const auto want = fuse_oracle(local, a_self.weights, a_cross.weights, global.values, f.cca.cnn_branch());
    REQUIRE(got.values.size() == want.size());
    for (std::size_t k = 0; k < want.size(); ++k) CHECK(got.values[k] == doctest::Approx(want[k]).epsilon(1e-10));
  }
}

TEST_CASE("one-hot attention selects the value projection at that position") {
  Fixture f;
  std::mt19937_64 rng(8);
  const auto local = random_map(2, 2, f.cfg.c1, Branch::Cnn, rng);
  const auto global = random_vector(f.cfg.c1, rng);
  for (int p = 0; p < 4; ++p) {
    std::vector<double> onehot(4, 0.0);
    onehot[p] = 1.0;
    const auto got = attend_and_fuse(local, {2, 2, onehot, AttentionKind::Self, Branch::Cnn},
                                     {2, 2, onehot, AttentionKind::Cross, Branch::Cnn}, global, f.cca.cnn_branch());
    // A one-cell map holding position p: both attentive features are eta(local[p]) exactly.
    SpatialFeatureMap single(1, 1, f.cfg.c1, Branch::Cnn);
    single.grid = cell(local, p);
    const auto want = attend_and_fuse(single, {1, 1, {1.0}, AttentionKind::Self, Branch::Cnn},
                                      {1, 1, {1.0}, AttentionKind::Cross, Branch::Cnn}, global, f.cca.cnn_branch());
    CHECK(got.values == want.values);
  }
}

TEST_CASE("uniform maps on a constant grid reduce to the projected mean") {
  Fixture f;
  SpatialFeatureMap local(2, 2, f.cfg.c1, Branch::Cnn);
  for (int p = 0; p < 4; ++p) {
    for (int k = 0; k < f.cfg.c1; ++k) local.grid[p * f.cfg.c1 + k] = 0.2 * k;
  }
  const auto global = spatial_mean_pool(local);
  const std::vector<double> uniform(4, 0.25);
  const auto got = attend_and_fuse(local, {2, 2, uniform, AttentionKind::Self, Branch::Cnn},
                                   {2, 2, uniform, AttentionKind::Cross, Branch::Cnn}, global, f.cca.cnn_branch());
  const auto& br = f.cca.cnn_branch();
  // Equivalent: one cell holding the mean, attended with weight one.
  SpatialFeatureMap single(1, 1, f.cfg.c1, Branch::Cnn);
  single.grid = global.values;
  const auto want = fuse_oracle(single, {1.0}, {1.0}, global.values, br);
  for (std::size_t k = 0; k < want.size(); ++k) CHECK(got.values[k] == doctest::Approx(want[k]).epsilon(1e-10));
}

TEST_CASE("attention grid mismatch is a shape error") {
  Fixture f;
  std::mt19937_64 rng(9);
  const auto local = random_map(2, 2, f.cfg.c1, Branch::Cnn, rng);
  const AttentionMap wrong{1, 3, {0.2, 0.3, 0.5}, AttentionKind::Self, Branch::Cnn};
  const AttentionMap ok{2, 2, {0.25, 0.25, 0.25, 0.25}, AttentionKind::Cross, Branch::Cnn};
  CHECK_THROWS_AS(attend_and_fuse(local, wrong, ok, random_vector(f.cfg.c1, rng), f.cca.cnn_branch()), ShapeError);
}

TEST_CASE("cca output widths under the default config") {
  const ModelConfig cfg;
  ParameterStore store;
  std::mt19937_64 rng(1);
  const Cca cca = Cca::create(store, cfg, rng);
  const auto x1 = random_map(8, 4, 128, Branch::Cnn, rng);
  const auto x2 = random_map(8, 4, 64, Branch::Transformer, rng);
  const auto [f1, f2] = cca_forward(cca, x1, x2);
  CHECK(f1.values.size() == 128);
  CHECK(f2.values.size() == 64);
  CHECK_THROWS_AS(cca_forward(cca, x1, random_map(4, 8, 64, Branch::Transformer, rng)), ShapeError);
}

TEST_CASE("with both heads ablated the output is the fusion of mean-pooled features") {
  Fixture f;
  f.cca.ablate_self_head = true;
  f.cca.ablate_cross_head = true;
  std::mt19937_64 rng(10);
  const auto x1 = random_map(2, 2, f.cfg.c1, Branch::Cnn, rng);
  const auto x2 = random_map(2, 2, f.cfg.c2, Branch::Transformer, rng);
  const auto [f1, f2] = cca_forward(f.cca, x1, x2);
  const std::vector<double> uniform(4, 0.25);
  const auto w1 = fuse_oracle(x1, uniform, uniform, spatial_mean_pool(x1).values, f.cca.cnn_branch());
  const auto w2 = fuse_oracle(x2, uniform, uniform, spatial_mean_pool(x2).values, f.cca.transformer_branch());
  for (std::size_t k = 0; k < w1.size(); ++k) CHECK(f1.values[k] == doctest::Approx(w1[k]).epsilon(1e-10));
  for (std::size_t k = 0; k < w2.size(); ++k) CHECK(f2.values[k] == doctest::Approx(w2[k]).epsilon(1e-10));
}

TEST_CASE("cross-branch coupling") {
  Fixture f;
  std::mt19937_64 rng(11);
  const auto x1 = random_map(2, 2, f.cfg.c1, Branch::Cnn, rng);
  const auto x2 = random_map(2, 2, f.cfg.c2, Branch::Transformer, rng);
  auto x2b = x2;
  for (double& v : x2b.grid) v += 1e-3 * (static_cast<double>(rng() % 100) / 100.0 - 0.5);

  const auto base = cca_forward(f.cca, x1, x2).first.values;
  const auto moved = cca_forward(f.cca, x1, x2b).first.values;
  double diff = 0.0;
  for (std::size_t k = 0; k < base.size(); ++k) diff = std::max(diff, std::abs(base[k] - moved[k]));
  CHECK(diff > 1e-8);

  f.cca.ablate_cross_head = true;
  CHECK(cca_forward(f.cca, x1, x2).first.values == cca_forward(f.cca, x1, x2b).first.values);
}

TEST_CASE("ablating either head changes the output") {
  Fixture f;
  std::mt19937_64 rng(12);
  const auto x1 = random_map(2, 2, f.cfg.c1, Branch::Cnn, rng);
  const auto x2 = random_map(2, 2, f.cfg.c2, Branch::Transformer, rng);
  const auto full = cca_forward(f.cca, x1, x2);
  f.cca.ablate_self_head = true;
  const auto no_sh = cca_forward(f.cca, x1, x2);
  f.cca.ablate_self_head = false;
  f.cca.ablate_cross_head = true;
  const auto no_ch = cca_forward(f.cca, x1, x2);
  CHECK(full.first.values != no_sh.first.values);
  CHECK(full.first.values != no_ch.first.values);
  CHECK(full.second.values != no_sh.second.values);
  CHECK(full.second.values != no_ch.second.values);
}

TEST_CASE("cca gradients match finite differences") {
  GradCheckOptions opts;
  const auto report = run_grad_check(GradTarget::Cca, opts);
  CAPTURE(report.format());
  CHECK(report.passed());
  CHECK(report.max_rel_error() <= 1e-4);
}
