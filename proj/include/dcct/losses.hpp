#pragma once

#include <random>
#include <string>
#include <vector>

#include "dcct/layers.hpp"
#include "dcct/model_config.hpp"
#include "dcct/ops.hpp"

namespace dcct {

using ops::KlDirection;

// Bias-free linear classifier: logits = W * feature.
struct ClassifierHead {
  Linear weight;

  static ClassifierHead create(ParameterStore& store, const std::string& name, int in, int classes, std::mt19937_64& rng);
  Var logits(const Var& x) const { return weight(x); }
  int classes() const { return weight.out_features; }
};

// Bottleneck C -> hint_dim -> c1+c2 aligning a backbone feature to S3.
struct HintNetwork {
  Linear down;
  Linear up;

  static HintNetwork create(ParameterStore& store, const std::string& name, int in, int hidden, int out, std::mt19937_64& rng);
  Var forward(const Var& x) const;
};

struct LossHeads {
  ClassifierHead cnn;    // W1, per-frame CNN features
  ClassifierHead vit;    // W2, per-frame Transformer features
  ClassifierHead video;  // W3, on S3
  HintNetwork hint_cnn;
  HintNetwork hint_vit;

  // Video head and hints only exist when HTA produces S3 (hta_depth > 0).
  static LossHeads create(ParameterStore& store, const ModelConfig& config, std::mt19937_64& rng);
};

struct LossWeights {
  double ce = 1.0;       // lambda1
  double triplet = 1.0;  // lambda2
  double ld = 0.1;       // lambda3
  double fd = 0.1;       // lambda4

  void validate() const;
};

enum class FrameReduction { Mean, Sum };

struct LossOptions {
  LossWeights weights;
  double margin = 0.3;
  double label_smoothing = 0.0;
  KlDirection kl_direction = KlDirection::StudentTeacher;
  FrameReduction ce_frames = FrameReduction::Mean;
};

// Unweighted loss terms, split by supervision stage.
struct LossComponents {
  double ce_backbone = 0.0;
  double ce_final = 0.0;
  double triplet_backbone = 0.0;
  double triplet_final = 0.0;
  double ld = 0.0;
  double fd = 0.0;
};

struct LossReport {
  double ce = 0.0;
  double triplet = 0.0;
  double ld = 0.0;
  double fd = 0.0;
  double total = 0.0;
  LossComponents stages;
};

LossReport total_loss(const LossComponents& components, const LossWeights& weights);

struct ProbabilityVector {
  std::vector<double> probs;
};

ProbabilityVector class_probabilities(const std::vector<double>& feature, const ClassifierHead& head);
double cross_entropy_loss(const ProbabilityVector& probs, int label);
double batch_hard_triplet_loss(const std::vector<std::vector<double>>& features, const std::vector<int>& labels, double margin);
double logistic_distillation_loss(const std::vector<ProbabilityVector>& p1_frames, const std::vector<ProbabilityVector>& p2_frames,
                                  const ProbabilityVector& p3, KlDirection direction = KlDirection::StudentTeacher);
double feature_distillation_loss(const std::vector<std::vector<double>>& x1_frames, const std::vector<std::vector<double>>& x2_frames,
                                 const std::vector<double>& s3, const HintNetwork& hint_cnn, const HintNetwork& hint_vit);

// Fixed distillation targets. Detaching the teacher makes the training
// gradient differ from the derivative of the loss value; freezing the targets
// gives finite differences the same stop-gradient function.
struct TeacherTargets {
  Tensor probs;     // [N*T, classes] softmax(W3 S3), repeated per frame
  Tensor features;  // [N*T, c1+c2] S3, repeated per frame
};

TeacherTargets teacher_targets(const LossHeads& heads, const Tensor& s3, int frames);

// Batched inputs of the training objective for N clips of T frames.
struct ObjectiveInputs {
  Var x1_pooled;  // [N*T, c1] spatially pooled CNN features
  Var x2_pooled;  // [N*T, c2]
  Var s3;         // [N, c1+c2]; undefined when the model has no HTA
  std::vector<int> labels;  // N identities
  int frames = 0;
  const TeacherTargets* frozen_teacher = nullptr;  // defaults to the detached live S3
};

struct Objective {
  Var total;
  Var distillation;  // lambda3*LD + lambda4*FD, undefined when both are off
  LossReport report;
};

// Backbone supervision (CE per frame on W1/W2, triplet on the temporally
// pooled backbone features) plus final supervision (CE and triplet on S3),
// plus distillation from a detached S3 teacher.
Objective training_objective(const LossHeads& heads, const ObjectiveInputs& in, const LossOptions& options);

}  // namespace dcct
