#include <cmath>
#include <random>

#include "doctest.h"
#include "dcct/errors.hpp"
#include "dcct/gradcheck.hpp"
#include "dcct/losses.hpp"
#include "oracles.hpp"

using namespace dcct;

namespace {

ClassifierHead fixed_head(int in, int out, std::vector<double> w) {
  ClassifierHead h;
  h.weight.weight = Var(Tensor({out, in}, std::move(w)), true);
  h.weight.in_features = in;
  h.weight.out_features = out;
  return h;
}

std::vector<std::vector<double>> random_rows(int n, int d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<std::vector<double>> r(n, std::vector<double>(d));
  for (auto& row : r) {
    for (double& v : row) v = g(rng);
  }
  return r;
}

ProbabilityVector random_distribution(int k, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 2.0);
  std::vector<double> logits(k);
  for (double& v : logits) v = g(rng);
  return {oracle::softmax(logits)};
}

double kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

struct Heads {
  ModelConfig cfg = tiny_model_config();
  ParameterStore store;
  LossHeads heads;
  Heads() {
    std::mt19937_64 rng(cfg.seed);
    heads = LossHeads::create(store, cfg, rng);
  }
};

}  // namespace

TEST_CASE("zero feature gives uniform class probabilities") {
  Heads h;
  const auto p = class_probabilities(std::vector<double>(h.cfg.c1, 0.0), h.heads.cnn);
  REQUIRE(p.probs.size() == static_cast<std::size_t>(h.cfg.num_classes));
  for (double v : p.probs) CHECK(v == doctest::Approx(1.0 / h.cfg.num_classes).epsilon(1e-12));
  CHECK_THROWS_AS(class_probabilities(std::vector<double>(h.cfg.c1 + 1, 0.0), h.heads.cnn), ShapeError);
}

TEST_CASE("two-class probabilities from logits [2, 0]") {
  const auto head = fixed_head(1, 2, {2.0, 0.0});
  const auto p = class_probabilities({1.0}, head);
  const double e2 = std::exp(2.0);
  CHECK(p.probs[0] == doctest::Approx(e2 / (e2 + 1.0)).epsilon(1e-12));
  CHECK(p.probs[1] == doctest::Approx(1.0 / (e2 + 1.0)).epsilon(1e-12));
  CHECK(p.probs[0] == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(p.probs[1] == doctest::Approx(0.1192).epsilon(1e-3));
  CHECK(cross_entropy_loss(p, 0) == doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-12));
  CHECK(cross_entropy_loss(p, 0) == doctest::Approx(0.12693).epsilon(1e-4));
}

TEST_CASE("class probabilities sum to one") {
  Heads h;
  std::mt19937_64 rng(1);
  for (const auto& f : random_rows(50, h.cfg.video_dim(), rng, 3.0)) {
    const auto p = class_probabilities(f, h.heads.video);
    double s = 0.0;
    for (double v : p.probs) s += v;
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("cross entropy examples") {
  for (int classes : {2, 5, 10}) {
    const ProbabilityVector uniform{std::vector<double>(classes, 1.0 / classes)};
    CHECK(cross_entropy_loss(uniform, classes - 1) == doctest::Approx(std::log(classes)).epsilon(1e-12));
  }
  const ProbabilityVector sure{{0.0, 1.0, 0.0}};
  CHECK(cross_entropy_loss(sure, 1) == 0.0);
  CHECK_THROWS_AS(cross_entropy_loss(sure, 3), ArgumentError);
  CHECK_THROWS_AS(cross_entropy_loss(sure, -1), ArgumentError);
}

TEST_CASE("identical features give a triplet loss equal to the margin") {
  const std::vector<std::vector<double>> x(4, {0.3, -1.0});
  CHECK(batch_hard_triplet_loss(x, {0, 0, 1, 1}, 0.3) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(batch_hard_triplet_loss(x, {0, 0, 1, 1}, 0.7) == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("one-dimensional triplet examples") {
  CHECK(batch_hard_triplet_loss({{0.0}, {0.1}, {1.0}, {1.1}}, {0, 0, 1, 1}, 0.3) == 0.0);
  // Hinges per anchor: 0.1, 0.2, 0.2, 0.1.
  const std::vector<std::vector<double>> close{{0.0}, {0.1}, {0.3}, {0.4}};
  const double got = batch_hard_triplet_loss(close, {0, 0, 1, 1}, 0.3);
  CHECK(got == doctest::Approx(oracle::batch_hard_triplet(close, {0, 0, 1, 1}, 0.3)).epsilon(1e-12));
  CHECK(got == doctest::Approx(0.15).epsilon(1e-12));
}

TEST_CASE("degenerate triplet batches") {
  CHECK_THROWS_AS(batch_hard_triplet_loss({{0.0}, {1.0}, {2.0}}, {0, 0, 1}, 0.3), ArgumentError);
  CHECK_THROWS_AS(batch_hard_triplet_loss({{0.0}, {1.0}}, {4, 4}, 0.3), ArgumentError);
  CHECK_THROWS_AS(batch_hard_triplet_loss({}, {}, 0.3), ArgumentError);
  CHECK_THROWS_AS(batch_hard_triplet_loss({{0.0}, {1.0}}, {0, 0, 1}, 0.3), ShapeError);
}

TEST_CASE("triplet loss matches exhaustive pair enumeration") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int p = 2 + static_cast<int>(rng() % 3), k = 2 + static_cast<int>(rng() % 3);
    std::vector<int> labels;
    for (int i = 0; i < p; ++i) labels.insert(labels.end(), k, i * 7);
    const auto x = random_rows(p * k, 1 + static_cast<int>(rng() % 6), rng);
    const double margin = 0.1 + 0.1 * static_cast<double>(rng() % 5);
    const double want = oracle::batch_hard_triplet(x, labels, margin);
    const double got = batch_hard_triplet_loss(x, labels, margin);
    CHECK(std::abs(got - want) <= 1e-9 * std::max(1.0, std::abs(want)));
  }
}

TEST_CASE("logistic distillation examples") {
  const ProbabilityVector student{{0.5, 0.5}}, teacher{{0.75, 0.25}};
  CHECK(logistic_distillation_loss({student}, {}, teacher) == doctest::Approx(0.5 * std::log(2.0 / 3.0) + 0.5 * std::log(2.0)).epsilon(1e-12));
  CHECK(logistic_distillation_loss({student}, {}, teacher) == doctest::Approx(0.14384).epsilon(1e-4));
  CHECK(logistic_distillation_loss({student, student}, {student}, teacher) ==
        doctest::Approx(3.0 * kl(student.probs, teacher.probs)).epsilon(1e-12));
  CHECK(logistic_distillation_loss({student}, {}, teacher, KlDirection::TeacherStudent) ==
        doctest::Approx(kl(teacher.probs, student.probs)).epsilon(1e-12));
  CHECK(std::abs(logistic_distillation_loss({teacher, teacher}, {teacher}, teacher)) <= 1e-12);
  CHECK_THROWS_AS(logistic_distillation_loss({ProbabilityVector{{0.2, 0.3, 0.5}}}, {}, teacher), ShapeError);
}

TEST_CASE("logistic distillation is non-negative") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 6);
    const auto teacher = random_distribution(k, rng);
    std::vector<ProbabilityVector> a{random_distribution(k, rng), random_distribution(k, rng)};
    std::vector<ProbabilityVector> b{random_distribution(k, rng)};
    const double got = logistic_distillation_loss(a, b, teacher);
    CHECK(got >= 0.0);
    const double want = kl(a[0].probs, teacher.probs) + kl(a[1].probs, teacher.probs) + kl(b[0].probs, teacher.probs);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
  }
}

namespace {

// Hint network with zero weights: the output is the up-projection bias.
HintNetwork constant_hint(int in, int hidden, std::vector<double> out) {
  const int width = static_cast<int>(out.size());
  HintNetwork h;
  h.down.weight = Var(Tensor({hidden, in}, 0.0), true);
  h.down.bias = Var(Tensor({hidden}, 0.0), true);
  h.down.in_features = in;
  h.down.out_features = hidden;
  h.up.weight = Var(Tensor({width, hidden}, 0.0), true);
  h.up.bias = Var(Tensor({width}, std::move(out)), true);
  h.up.in_features = hidden;
  h.up.out_features = width;
  return h;
}

std::vector<double> hint_oracle(const HintNetwork& h, const std::vector<double>& x) {
  auto affine = [](const Linear& l, const std::vector<double>& v) {
    std::vector<double> y(l.out_features);
    for (int o = 0; o < l.out_features; ++o) {
      y[o] = l.bias.value().data[o];
      for (int i = 0; i < l.in_features; ++i) y[o] += l.weight.value().at(o, i) * v[i];
    }
    return y;
  };
  auto mid = affine(h.down, x);
  for (double& v : mid) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return affine(h.up, mid);
}

}  // namespace

TEST_CASE("feature distillation examples") {
  const auto h1 = constant_hint(2, 3, {1.0, 2.0}), h2 = constant_hint(1, 3, {0.0, 0.0});
  CHECK(feature_distillation_loss({{5.0, -1.0}}, {}, {0.0, 0.0}, h1, h2) == 5.0);
  CHECK(feature_distillation_loss({{5.0, -1.0}}, {{3.0}}, {0.0, 0.0}, h1, h2) == 5.0);
  CHECK(feature_distillation_loss({{0.5, 0.25}, {0.1, 0.2}}, {}, {1.0, 2.0}, h1, h2) == 0.0);
  CHECK(feature_distillation_loss({{0.5, 0.25}}, {{3.0}, {4.0}}, {1.0, 2.0}, h1, h2) == 10.0);
  CHECK_THROWS_AS(feature_distillation_loss({{1.0, 2.0}}, {}, {0.0, 0.0, 0.0}, h1, h2), ShapeError);
  CHECK_THROWS_AS(feature_distillation_loss({{1.0}}, {}, {0.0, 0.0}, h1, h2), ShapeError);
}

TEST_CASE("feature distillation matches a per-frame loop") {
  Heads h;
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x1 = random_rows(3, h.cfg.c1, rng), x2 = random_rows(3, h.cfg.c2, rng);
    const auto s3 = random_rows(1, h.cfg.video_dim(), rng)[0];
    double want = 0.0;
    for (const auto* frames : {&x1, &x2}) {
      const HintNetwork& hint = frames == &x1 ? h.heads.hint_cnn : h.heads.hint_vit;
      for (const auto& x : *frames) {
        const auto y = hint_oracle(hint, x);
        for (std::size_t c = 0; c < y.size(); ++c) want += (y[c] - s3[c]) * (y[c] - s3[c]);
      }
    }
    CHECK(feature_distillation_loss(x1, x2, s3, h.heads.hint_cnn, h.heads.hint_vit) == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("total loss weighting") {
  const LossComponents c{0.5, 0.5, 1.5, 0.5, 3.0, 4.0};
  const auto r = total_loss(c, LossWeights{});
  CHECK(r.ce == 1.0);
  CHECK(r.triplet == 2.0);
  CHECK(r.total == doctest::Approx(3.7).epsilon(1e-12));
  CHECK(total_loss(LossComponents{}, LossWeights{}).total == 0.0);
  CHECK(total_loss(c, LossWeights{1.0, 1.0, 0.0, 0.0}).total == 3.0);
  CHECK_THROWS_AS(total_loss(c, LossWeights{1.0, -1.0, 0.1, 0.1}), ConfigError);
  CHECK_THROWS_AS(total_loss(c, LossWeights{1.0, 1.0, NAN, 0.1}), ConfigError);
}

namespace {

ObjectiveInputs random_inputs(const ModelConfig& cfg, std::mt19937_64& rng) {
  ObjectiveInputs in;
  in.frames = cfg.frames_T;
  in.labels = {0, 0, 1, 1};
  in.x1_pooled = Var(oracle::random_tensor({4 * cfg.frames_T, cfg.c1}, rng), true);
  in.x2_pooled = Var(oracle::random_tensor({4 * cfg.frames_T, cfg.c2}, rng), true);
  in.s3 = Var(oracle::random_tensor({4, cfg.video_dim()}, rng), true);
  return in;
}

}  // namespace

TEST_CASE("objective report agrees with the per-sample value functions") {
  Heads h;
  std::mt19937_64 rng(5);
  const auto in = random_inputs(h.cfg, rng);
  const auto obj = training_objective(h.heads, in, LossOptions{});
  const int t = h.cfg.frames_T;

  auto row = [](const Tensor& x, int r) { return std::vector<double>(x.row(r).begin(), x.row(r).end()); };
  double ld = 0.0, fd = 0.0, ce_final = 0.0, ce_backbone = 0.0;
  std::vector<std::vector<double>> pooled, s3_rows;
  for (int n = 0; n < 4; ++n) {
    const auto s3 = row(in.s3.value(), n);
    s3_rows.push_back(s3);
    const auto p3 = class_probabilities(s3, h.heads.video);
    ce_final += cross_entropy_loss(p3, in.labels[n]) / 4.0;
    std::vector<ProbabilityVector> p1, p2;
    std::vector<std::vector<double>> x1, x2;
    std::vector<double> mean(h.cfg.video_dim(), 0.0);
    for (int f = 0; f < t; ++f) {
      x1.push_back(row(in.x1_pooled.value(), n * t + f));
      x2.push_back(row(in.x2_pooled.value(), n * t + f));
      p1.push_back(class_probabilities(x1.back(), h.heads.cnn));
      p2.push_back(class_probabilities(x2.back(), h.heads.vit));
      ce_backbone += (cross_entropy_loss(p1.back(), in.labels[n]) + cross_entropy_loss(p2.back(), in.labels[n])) / (4.0 * t);
      for (int c = 0; c < h.cfg.c1; ++c) mean[c] += x1.back()[c] / t;
      for (int c = 0; c < h.cfg.c2; ++c) mean[h.cfg.c1 + c] += x2.back()[c] / t;
    }
    pooled.push_back(mean);
    ld += logistic_distillation_loss(p1, p2, p3) / 4.0;
    fd += feature_distillation_loss(x1, x2, s3, h.heads.hint_cnn, h.heads.hint_vit) / 4.0;
  }
  const auto& s = obj.report.stages;
  CHECK(s.ce_backbone == doctest::Approx(ce_backbone).epsilon(1e-10));
  CHECK(s.ce_final == doctest::Approx(ce_final).epsilon(1e-10));
  CHECK(s.triplet_backbone == doctest::Approx(oracle::batch_hard_triplet(pooled, in.labels, 0.3)).epsilon(1e-10));
  CHECK(s.triplet_final == doctest::Approx(oracle::batch_hard_triplet(s3_rows, in.labels, 0.3)).epsilon(1e-10));
  CHECK(s.ld == doctest::Approx(ld).epsilon(1e-10));
  CHECK(s.fd == doctest::Approx(fd).epsilon(1e-10));

  const auto& r = obj.report;
  CHECK(std::abs(r.total - (r.ce + r.triplet + 0.1 * r.ld + 0.1 * r.fd)) <= 1e-9);
  CHECK(obj.total.value()[0] == doctest::Approx(r.total).epsilon(1e-12));
}

TEST_CASE("zero distillation weights give the baseline objective") {
  Heads h;
  std::mt19937_64 rng(6);
  const auto in = random_inputs(h.cfg, rng);
  LossOptions opts;
  opts.weights.ld = 0.0;
  opts.weights.fd = 0.0;
  const auto obj = training_objective(h.heads, in, opts);
  CHECK(obj.report.ld == 0.0);
  CHECK(obj.report.fd == 0.0);
  CHECK_FALSE(obj.distillation.defined());
  CHECK(obj.report.total == doctest::Approx(obj.report.ce + obj.report.triplet).epsilon(1e-12));
}

TEST_CASE("distillation does not reach the teacher") {
  const auto report = check_teacher_detachment(0);
  REQUIRE_FALSE(report.teacher_max_abs.empty());
  for (const auto& [name, g] : report.teacher_max_abs) {
    CAPTURE(name);
    CHECK(g == 0.0);
  }
  CHECK(report.student_max_abs > 0.0);
}

TEST_CASE("loss gradients match finite differences") {
  const auto report = run_grad_check(GradTarget::Losses, GradCheckOptions{});
  CAPTURE(report.format());
  CHECK(report.passed());
  CHECK(report.max_rel_error() <= 1e-4);
}
