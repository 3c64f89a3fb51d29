#include "dcct/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "dcct/cca.hpp"
#include "dcct/errors.hpp"
#include "dcct/hta.hpp"
#include "dcct/losses.hpp"
#include "dcct/model.hpp"
#include "dcct/ops.hpp"

namespace dcct {

const char* grad_target_name(GradTarget target) {
  switch (target) {
    case GradTarget::Cca:
      return "cca";
    case GradTarget::Hta:
      return "hta";
    case GradTarget::Losses:
      return "losses";
    case GradTarget::Full:
      return "full";
  }
  return "?";
}

GradTarget parse_grad_target(const std::string& text) {
  for (GradTarget t : {GradTarget::Cca, GradTarget::Hta, GradTarget::Losses, GradTarget::Full}) {
    if (text == grad_target_name(t)) return t;
  }
  throw ArgumentError("unknown gradcheck target '" + text + "' (expected cca, hta, losses or full)");
}

bool GradCheckReport::passed() const {
  return !groups.empty() && std::all_of(groups.begin(), groups.end(), [](const GroupResult& g) { return g.pass; });
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& g : groups) worst = std::max(worst, g.finite ? g.max_rel_error : INFINITY);
  return worst;
}

std::string GradCheckReport::format() const {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "gradcheck %s  eps=%g  tol=%g\n", target.c_str(), eps, tolerance);
  out += buf;
  for (const auto& g : groups) {
    if (!g.finite) {
      std::snprintf(buf, sizeof buf, "  FAIL %-44s non-finite gradient\n", g.name.c_str());
    } else {
      std::snprintf(buf, sizeof buf, "  %s %-44s max_rel=%.3e  checked=%d  kink_skips=%d\n", g.pass ? "ok  " : "FAIL",
                    g.name.c_str(), g.max_rel_error, g.checked, g.skipped_kinks);
    }
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "%s: worst relative error %.3e over %zu groups\n", passed() ? "PASS" : "FAIL",
                max_rel_error(), groups.size());
  out += buf;
  return out;
}

GradCheckReport check_gradients(const std::string& target, const std::vector<GradGroup>& groups,
                                const std::function<Var()>& probe, const GradCheckOptions& options) {
  GradCheckReport report;
  report.target = target;
  report.eps = options.eps;
  report.tolerance = options.tolerance;

  for (const auto& g : groups) {
    if (!g.leaf.requires_grad()) throw ArgumentError("gradcheck: group '" + g.name + "' does not require gradients");
    Var(g.leaf).zero_grad();
  }
  std::uint64_t base_signature = 0;
  {
    KinkScope scope;
    Var out = probe();
    if (out.numel() != 1) throw ShapeError("gradcheck: probe must be a scalar");
    base_signature = scope.signature();
    backward(out);
  }
  std::vector<Tensor> analytic;
  for (const auto& g : groups) analytic.push_back(g.leaf.grad());

  auto evaluate = [&](std::uint64_t& signature) {
    NoGradGuard no_grad;
    KinkScope scope;
    const double v = probe().value().data[0];
    signature = scope.signature();
    return v;
  };

  std::mt19937_64 pick(options.seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    GroupResult res;
    res.name = groups[gi].name;
    Var leaf = groups[gi].leaf;
    Tensor& value = leaf.mutable_value();
    const Tensor& a = analytic[gi];
    res.finite = a.all_finite();
    std::vector<std::size_t> entries(value.data.size());
    std::iota(entries.begin(), entries.end(), std::size_t{0});
    if (options.max_entries > 0 && entries.size() > static_cast<std::size_t>(options.max_entries)) {
      std::shuffle(entries.begin(), entries.end(), pick);
      entries.resize(options.max_entries);
      std::sort(entries.begin(), entries.end());
    }
    for (std::size_t k : entries) {
      if (!res.finite) break;
      const double saved = value.data[k];
      std::uint64_t sig_plus = 0, sig_minus = 0;
      value.data[k] = saved + options.eps;
      const double f_plus = evaluate(sig_plus);
      value.data[k] = saved - options.eps;
      const double f_minus = evaluate(sig_minus);
      value.data[k] = saved;
      if (sig_plus != base_signature || sig_minus != base_signature) {
        ++res.skipped_kinks;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * options.eps);
      if (!std::isfinite(numeric)) {
        res.finite = false;
        break;
      }
      const double denom = std::max({std::abs(a.data[k]), std::abs(numeric), options.floor});
      const double rel = std::abs(a.data[k] - numeric) / denom;
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_analytic = a.data[k];
        res.worst_numeric = numeric;
      }
    }
    res.pass = res.finite && res.max_rel_error <= options.tolerance;
    report.groups.push_back(res);
  }
  return report;
}

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : t.data) v = n(rng);
  return t;
}

// Weighted sum with fixed random weights: a plain sum of a normalised
// output is constant and would hide every gradient.
Var probe_sum(const Var& x, const Tensor& weights) { return ops::weighted_sum(x, weights); }

std::vector<GradGroup> parameter_groups(const ParameterStore& store) {
  std::vector<GradGroup> out;
  for (const auto& e : store.entries()) out.push_back({e.name, e.var});
  return out;
}

// P=2 identities x K=2 clips.
std::vector<int> pk_labels() { return {0, 0, 1, 1}; }

}  // namespace

GradCheckReport run_grad_check(GradTarget target, const GradCheckOptions& options) {
  const ModelConfig cfg = tiny_model_config();
  std::mt19937_64 rng(options.seed);
  const int T = cfg.frames_T;
  const int P = cfg.positions();

  switch (target) {
    case GradTarget::Cca: {
      ParameterStore store;
      const Cca cca = Cca::create(store, cfg, rng);
      const int n = 2;
      Var x1(random_tensor({n * T * P, cfg.c1}, rng), true);
      Var x2(random_tensor({n * T * P, cfg.c2}, rng), true);
      const Tensor w1 = random_tensor({n * T, cfg.c1}, rng);
      const Tensor w2 = random_tensor({n * T, cfg.c2}, rng);
      auto groups = parameter_groups(store);
      groups.push_back({"input.x1", x1});
      groups.push_back({"input.x2", x2});
      return check_gradients("cca", groups, [&] {
        auto [f1, f2] = cca.forward(x1, x2, P);
        return ops::add(probe_sum(f1, w1), probe_sum(f2, w2));
      }, options);
    }
    case GradTarget::Hta: {
      ParameterStore store;
      const Hta hta = Hta::create(store, cfg, rng);
      const int n = 2;
      Var f1(random_tensor({n * T, cfg.c1}, rng), true);
      Var f2(random_tensor({n * T, cfg.c2}, rng), true);
      const Tensor w1 = random_tensor({n * T, cfg.c1}, rng);
      const Tensor w2 = random_tensor({n * T, cfg.c2}, rng);
      const Tensor w3 = random_tensor({n, cfg.video_dim()}, rng);
      auto groups = parameter_groups(store);
      groups.push_back({"input.f1", f1});
      groups.push_back({"input.f2", f2});
      return check_gradients("hta", groups, [&] {
        const HtaOutput out = hta.forward(f1, f2, cfg.hta_depth);
        return ops::add(ops::add(probe_sum(out.m1, w1), probe_sum(out.m2, w2)), probe_sum(out.s3, w3));
      }, options);
    }
    case GradTarget::Losses: {
      ParameterStore store;
      const LossHeads heads = LossHeads::create(store, cfg, rng);
      const std::vector<int> labels = pk_labels();
      const int n = static_cast<int>(labels.size());
      Var x1(random_tensor({n * T, cfg.c1}, rng), true);
      Var x2(random_tensor({n * T, cfg.c2}, rng), true);
      Var s3(random_tensor({n, cfg.video_dim()}, rng), true);
      auto groups = parameter_groups(store);
      groups.push_back({"input.x1_pooled", x1});
      groups.push_back({"input.x2_pooled", x2});
      groups.push_back({"input.s3", s3});
      LossOptions lo;
      const TeacherTargets teacher = teacher_targets(heads, s3.value(), T);
      return check_gradients("losses", groups, [&] {
        return training_objective(heads, {x1, x2, s3, labels, T, &teacher}, lo).total;
      }, options);
    }
    case GradTarget::Full: {
      DcctModel model = DcctModel::build(cfg);
      const std::vector<int> labels = pk_labels();
      const int n = static_cast<int>(labels.size());
      std::uniform_real_distribution<double> pixel(0.0, 1.0);
      Tensor frames({n * T, 3, cfg.image_h, cfg.image_w});
      for (double& v : frames.data) v = pixel(rng);
      LossOptions lo;
      TeacherTargets teacher;
      {
        NoGradGuard no_grad;
        teacher = teacher_targets(model.heads(), model.forward(frames, n).hta.s3.value(), T);
      }
      return check_gradients("full", parameter_groups(model.parameters()), [&] {
        const ForwardOutput out = model.forward(frames, n);
        return training_objective(model.heads(), {out.x1_pooled, out.x2_pooled, out.hta.s3, labels, T, &teacher}, lo).total;
      }, options);
    }
  }
  throw ArgumentError("unknown gradcheck target");
}

TeacherPathReport check_teacher_detachment(std::uint64_t seed) {
  const ModelConfig cfg = tiny_model_config();
  ModelConfig c = cfg;
  c.seed = seed;
  DcctModel model = DcctModel::build(c);
  std::mt19937_64 rng(seed);
  const std::vector<int> labels = pk_labels();
  const int n = static_cast<int>(labels.size());
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  Tensor frames({n * c.frames_T, 3, c.image_h, c.image_w});
  for (double& v : frames.data) v = pixel(rng);
  LossOptions lo;
  lo.weights = {0.0, 0.0, 1.0, 1.0};
  model.parameters().zero_grad();
  const ForwardOutput out = model.forward(frames, n);
  backward(training_objective(model.heads(), {out.x1_pooled, out.x2_pooled, out.hta.s3, labels, c.frames_T}, lo).total);

  TeacherPathReport report;
  for (const auto& e : model.parameters().entries()) {
    double m = 0.0;
    for (double g : e.var.grad().data) m = std::max(m, std::abs(g));
    const bool teacher = e.name.rfind("cca.", 0) == 0 || e.name.rfind("hta.", 0) == 0 || e.name.rfind("heads.w3", 0) == 0;
    if (teacher) {
      report.teacher_max_abs.emplace_back(e.name, m);
    } else {
      report.student_max_abs = std::max(report.student_max_abs, m);
    }
  }
  return report;
}

}  // namespace dcct
