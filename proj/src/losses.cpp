#include "dcct/losses.hpp"

#include <cmath>

#include "dcct/errors.hpp"

namespace dcct {

ClassifierHead ClassifierHead::create(ParameterStore& store, const std::string& name, int in, int classes,
                                      std::mt19937_64& rng) {
  return {Linear::create(store, name, in, classes, false, rng)};
}

HintNetwork HintNetwork::create(ParameterStore& store, const std::string& name, int in, int hidden, int out,
                                std::mt19937_64& rng) {
  return {Linear::create(store, name + ".down", in, hidden, true, rng), Linear::create(store, name + ".up", hidden, out, true, rng)};
}

Var HintNetwork::forward(const Var& x) const { return up(ops::gelu(down(x))); }

LossHeads LossHeads::create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng) {
  LossHeads h;
  h.cnn = ClassifierHead::create(store, "heads.w1", config.c1, config.num_classes, rng);
  h.vit = ClassifierHead::create(store, "heads.w2", config.c2, config.num_classes, rng);
  if (config.hta_depth > 0) {
    const int video = config.video_dim();
    h.video = ClassifierHead::create(store, "heads.w3", video, config.num_classes, rng);
    h.hint_cnn = HintNetwork::create(store, "hints.h1", config.c1, config.hint_dim, video, rng);
    h.hint_vit = HintNetwork::create(store, "hints.h2", config.c2, config.hint_dim, video, rng);
  }
  return h;
}

void LossWeights::validate() const {
  for (double w : {ce, triplet, ld, fd}) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
  }
}

LossReport total_loss(const LossComponents& c, const LossWeights& w) {
  w.validate();
  LossReport r;
  r.stages = c;
  r.ce = c.ce_backbone + c.ce_final;
  r.triplet = c.triplet_backbone + c.triplet_final;
  r.ld = c.ld;
  r.fd = c.fd;
  r.total = w.ce * r.ce + w.triplet * r.triplet + w.ld * r.ld + w.fd * r.fd;
  return r;
}

namespace {

Var row_var(const std::vector<double>& v) { return ops::constant(Tensor({1, static_cast<int>(v.size())}, v)); }

Var rows_var(const std::vector<std::vector<double>>& rows, const char* who) {
  if (rows.empty()) throw ArgumentError(std::string(who) + ": empty input");
  const int width = static_cast<int>(rows.front().size());
  Tensor t({static_cast<int>(rows.size()), width});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<int>(rows[r].size()) != width) throw ShapeError(std::string(who) + ": rows have different lengths");
    std::copy(rows[r].begin(), rows[r].end(), t.row(static_cast<int>(r)).begin());
  }
  return ops::constant(std::move(t));
}

Tensor softmax_values(const Var& logits) {
  NoGradGuard no_grad;
  return ops::softmax_rows(logits).value();
}

// Row r of the result is row r / frames of `probs`.
Tensor repeat_tensor_rows(const Tensor& probs, int frames) {
  Tensor out({probs.rows() * frames, probs.cols()});
  for (int r = 0; r < out.rows(); ++r) {
    for (int c = 0; c < out.cols(); ++c) out.at(r, c) = probs.at(r / frames, c);
  }
  return out;
}

}  // namespace

ProbabilityVector class_probabilities(const std::vector<double>& feature, const ClassifierHead& head) {
  if (static_cast<int>(feature.size()) != head.weight.in_features) {
    throw ShapeError("class_probabilities: feature has " + std::to_string(feature.size()) + " values, classifier expects " +
                     std::to_string(head.weight.in_features));
  }
  NoGradGuard no_grad;
  return {ops::softmax_rows(head.logits(row_var(feature))).value().data};
}

double cross_entropy_loss(const ProbabilityVector& probs, int label) {
  if (label < 0 || label >= static_cast<int>(probs.probs.size())) {
    throw ArgumentError("cross_entropy_loss: label " + std::to_string(label) + " outside [0, " +
                        std::to_string(probs.probs.size()) + ")");
  }
  return -std::log(probs.probs[label]);
}

double batch_hard_triplet_loss(const std::vector<std::vector<double>>& features, const std::vector<int>& labels, double margin) {
  NoGradGuard no_grad;
  return ops::batch_hard_triplet(rows_var(features, "batch_hard_triplet_loss"), labels, margin).value()[0];
}

double logistic_distillation_loss(const std::vector<ProbabilityVector>& p1_frames, const std::vector<ProbabilityVector>& p2_frames,
                                  const ProbabilityVector& p3, KlDirection direction) {
  const std::size_t classes = p3.probs.size();
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto* frames : {&p1_frames, &p2_frames}) {
    for (const auto& p : *frames) {
      if (p.probs.size() != classes) throw ShapeError("logistic_distillation_loss: class counts differ");
      std::vector<double> logits(classes);
      for (std::size_t c = 0; c < classes; ++c) logits[c] = std::log(p.probs[c]);
      total += ops::kl_divergence(row_var(logits), Tensor({1, static_cast<int>(classes)}, p3.probs), direction).value()[0];
    }
  }
  return total;
}

double feature_distillation_loss(const std::vector<std::vector<double>>& x1_frames, const std::vector<std::vector<double>>& x2_frames,
                                 const std::vector<double>& s3, const HintNetwork& hint_cnn, const HintNetwork& hint_vit) {
  if (hint_cnn.up.out_features != static_cast<int>(s3.size()) || hint_vit.up.out_features != static_cast<int>(s3.size())) {
    throw ShapeError("feature_distillation_loss: hint outputs do not match the teacher width");
  }
  NoGradGuard no_grad;
  double total = 0.0;
  const std::pair<const std::vector<std::vector<double>>*, const HintNetwork*> branches[] = {{&x1_frames, &hint_cnn},
                                                                                          {&x2_frames, &hint_vit}};
  for (const auto& [frames, hint] : branches) {
    if (frames->empty()) continue;
    if (static_cast<int>(frames->front().size()) != hint->down.in_features) {
      throw ShapeError("feature_distillation_loss: frame features do not match the hint network input");
    }
    const Tensor out = hint->forward(rows_var(*frames, "feature_distillation_loss")).value();
    for (int r = 0; r < out.rows(); ++r) {
      for (int c = 0; c < out.cols(); ++c) {
        const double d = out.at(r, c) - s3[c];
        total += d * d;
      }
    }
  }
  return total;
}

TeacherTargets teacher_targets(const LossHeads& heads, const Tensor& s3, int frames) {
  NoGradGuard no_grad;
  const Var logits = heads.video.logits(Var(s3));
  return {repeat_tensor_rows(softmax_values(logits), frames), repeat_tensor_rows(s3, frames)};
}

Objective training_objective(const LossHeads& heads, const ObjectiveInputs& in, const LossOptions& options) {
  options.weights.validate();
  const int clips = static_cast<int>(in.labels.size());
  const int frames = in.frames;
  if (frames <= 0 || in.x1_pooled.rows() != clips * frames || in.x2_pooled.rows() != clips * frames) {
    throw ShapeError("training_objective: pooled features do not match labels x frames");
  }
  std::vector<int> frame_labels;
  frame_labels.reserve(static_cast<std::size_t>(clips) * frames);
  for (int label : in.labels) frame_labels.insert(frame_labels.end(), frames, label);
  const double frame_scale = options.ce_frames == FrameReduction::Sum ? frames : 1.0;

  LossComponents parts;
  Var ce_b = ops::scale(ops::add(ops::cross_entropy(heads.cnn.logits(in.x1_pooled), frame_labels, options.label_smoothing),
                                 ops::cross_entropy(heads.vit.logits(in.x2_pooled), frame_labels, options.label_smoothing)),
                        frame_scale);
  Var backbone_video = ops::concat_cols(ops::group_mean_rows(in.x1_pooled, frames), ops::group_mean_rows(in.x2_pooled, frames));
  Var tri_b = ops::batch_hard_triplet(backbone_video, in.labels, options.margin);
  parts.ce_backbone = ce_b.value()[0];
  parts.triplet_backbone = tri_b.value()[0];

  Var total = ops::add(ops::scale(ce_b, options.weights.ce), ops::scale(tri_b, options.weights.triplet));
  Objective obj;

  if (in.s3.defined()) {
    Var video_logits = heads.video.logits(in.s3);
    Var ce_f = ops::cross_entropy(video_logits, in.labels, options.label_smoothing);
    Var tri_f = ops::batch_hard_triplet(in.s3, in.labels, options.margin);
    parts.ce_final = ce_f.value()[0];
    parts.triplet_final = tri_f.value()[0];
    total = ops::add(total, ops::add(ops::scale(ce_f, options.weights.ce), ops::scale(tri_f, options.weights.triplet)));

    Var distill;
    if (options.weights.ld > 0.0) {
      // Teacher distribution is a constant target.
      const Tensor teacher =
          in.frozen_teacher ? in.frozen_teacher->probs : repeat_tensor_rows(softmax_values(video_logits), frames);
      Var ld = ops::add(ops::kl_divergence(heads.cnn.logits(in.x1_pooled), teacher, options.kl_direction),
                        ops::kl_divergence(heads.vit.logits(in.x2_pooled), teacher, options.kl_direction));
      ld = ops::scale(ld, 1.0 / clips);
      parts.ld = ld.value()[0];
      distill = ops::scale(ld, options.weights.ld);
    }
    if (options.weights.fd > 0.0) {
      Var target = in.frozen_teacher ? ops::constant(in.frozen_teacher->features) : ops::repeat_rows(ops::detach(in.s3), frames);
      Var d1 = ops::sub(heads.hint_cnn.forward(in.x1_pooled), target);
      Var d2 = ops::sub(heads.hint_vit.forward(in.x2_pooled), target);
      Var fd = ops::scale(ops::add(ops::sum(ops::mul(d1, d1)), ops::sum(ops::mul(d2, d2))), 1.0 / clips);
      parts.fd = fd.value()[0];
      Var weighted = ops::scale(fd, options.weights.fd);
      distill = distill.defined() ? ops::add(distill, weighted) : weighted;
    }
    if (distill.defined()) {
      total = ops::add(total, distill);
      obj.distillation = distill;
    }
  }

  obj.total = total;
  obj.report = total_loss(parts, options.weights);
  return obj;
}

}  // namespace dcct
