#include "dcct/trainer.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dcct/errors.hpp"
#include "dcct/ops.hpp"

namespace dcct {

namespace fs = std::filesystem;

void OptimizerSchedule::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (!(decay_factor > 1.0)) throw ConfigError("decay_factor must be > 1");
  if (decay_every < 1) throw ConfigError("decay_every must be >= 1");
  if (max_epochs < 1) throw ConfigError("epochs must be >= 1");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
}

double OptimizerSchedule::lr_at(int epoch) const {
  return base_lr / std::pow(decay_factor, static_cast<double>(epoch / decay_every));
}

void TrainConfig::validate() const {
  model.validate();
  schedule.validate();
  loss.weights.validate();
  if (loss.margin < 0.0) throw ConfigError("margin must be non-negative");
  if (loss.label_smoothing < 0.0 || loss.label_smoothing >= 1.0) throw ConfigError("label_smoothing must lie in [0, 1)");
  if (identities_per_batch < 2) throw ConfigError("identities_per_batch must be >= 2 for triplet mining");
  if (tracklets_per_identity < 2) throw ConfigError("tracklets_per_identity must be >= 2 for triplet mining");
  if (eval_every < 0) throw ConfigError("eval_every must be non-negative");
  if (augment.crop_pad < 0) throw ConfigError("crop_pad must be non-negative");
  if (augment.erase_prob < 0.0 || augment.erase_prob > 1.0) throw ConfigError("erase_prob must lie in [0, 1]");
  if (model.hta_depth == 0 && (loss.weights.ld > 0.0 || loss.weights.fd > 0.0)) {
    throw ConfigError("distillation needs the S3 teacher; set lambda_ld = lambda_fd = 0 when hta_depth = 0");
  }
}

TrainConfig TrainConfig::from_ini(const IniDocument& doc) {
  reject_unknown_sections(doc, {"model", "train", "loss", "augment"});
  TrainConfig c;
  c.model = ModelConfig::from_ini(doc);

  IniSection t(doc, "train");
  t.read("base_lr", c.schedule.base_lr);
  t.read("weight_decay", c.schedule.weight_decay);
  t.read("momentum", c.schedule.momentum);
  t.read("nesterov", c.schedule.nesterov);
  t.read("decay_factor", c.schedule.decay_factor);
  t.read("decay_every", c.schedule.decay_every);
  t.read("epochs", c.schedule.max_epochs);
  t.read("grad_clip", c.schedule.grad_clip);
  t.read("identities_per_batch", c.identities_per_batch);
  t.read("tracklets_per_identity", c.tracklets_per_identity);
  t.read("eval_every", c.eval_every);
  t.read("eval_backbone", c.eval_backbone);
  t.reject_unknown();

  IniSection l(doc, "loss");
  l.read("lambda_ce", c.loss.weights.ce);
  l.read("lambda_triplet", c.loss.weights.triplet);
  l.read("lambda_ld", c.loss.weights.ld);
  l.read("lambda_fd", c.loss.weights.fd);
  l.read("margin", c.loss.margin);
  l.read("label_smoothing", c.loss.label_smoothing);
  std::string direction = c.loss.kl_direction == KlDirection::StudentTeacher ? "student_teacher" : "teacher_student";
  l.read("kl_direction", direction);
  if (direction == "student_teacher") {
    c.loss.kl_direction = KlDirection::StudentTeacher;
  } else if (direction == "teacher_student") {
    c.loss.kl_direction = KlDirection::TeacherStudent;
  } else {
    throw ConfigError("kl_direction must be student_teacher|teacher_student, got '" + direction + "'");
  }
  std::string frames = c.loss.ce_frames == FrameReduction::Mean ? "mean" : "sum";
  l.read("ce_frames", frames);
  if (frames == "mean") {
    c.loss.ce_frames = FrameReduction::Mean;
  } else if (frames == "sum") {
    c.loss.ce_frames = FrameReduction::Sum;
  } else {
    throw ConfigError("ce_frames must be mean|sum, got '" + frames + "'");
  }
  l.reject_unknown();

  IniSection a(doc, "augment");
  a.read("flip", c.augment.flip);
  a.read("crop", c.augment.crop);
  a.read("crop_pad", c.augment.crop_pad);
  a.read("erase", c.augment.erase);
  a.read("erase_prob", c.augment.erase_prob);
  a.reject_unknown();

  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const fs::path& path) { return from_ini(IniDocument::load(path.string())); }

std::string TrainConfig::to_ini() const {
  auto b = [](bool v) { return v ? "true" : "false"; };
  std::ostringstream os;
  os.precision(17);
  os << model.to_ini() << '\n'
     << "[train]\n"
     << "base_lr = " << schedule.base_lr << '\n'
     << "weight_decay = " << schedule.weight_decay << '\n'
     << "momentum = " << schedule.momentum << '\n'
     << "nesterov = " << b(schedule.nesterov) << '\n'
     << "decay_factor = " << schedule.decay_factor << '\n'
     << "decay_every = " << schedule.decay_every << '\n'
     << "epochs = " << schedule.max_epochs << '\n'
     << "grad_clip = " << schedule.grad_clip << '\n'
     << "identities_per_batch = " << identities_per_batch << '\n'
     << "tracklets_per_identity = " << tracklets_per_identity << '\n'
     << "eval_every = " << eval_every << '\n'
     << "eval_backbone = " << b(eval_backbone) << '\n'
     << '\n'
     << "[loss]\n"
     << "lambda_ce = " << loss.weights.ce << '\n'
     << "lambda_triplet = " << loss.weights.triplet << '\n'
     << "lambda_ld = " << loss.weights.ld << '\n'
     << "lambda_fd = " << loss.weights.fd << '\n'
     << "margin = " << loss.margin << '\n'
     << "label_smoothing = " << loss.label_smoothing << '\n'
     << "kl_direction = " << (loss.kl_direction == KlDirection::StudentTeacher ? "student_teacher" : "teacher_student") << '\n'
     << "ce_frames = " << (loss.ce_frames == FrameReduction::Mean ? "mean" : "sum") << '\n'
     << '\n'
     << "[augment]\n"
     << "flip = " << b(augment.flip) << '\n'
     << "crop = " << b(augment.crop) << '\n'
     << "crop_pad = " << augment.crop_pad << '\n'
     << "erase = " << b(augment.erase) << '\n'
     << "erase_prob = " << augment.erase_prob << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

Sgd::Sgd(const ParameterStore& store) { buffers_.resize(store.entries().size()); }

void Sgd::step(ParameterStore& store, double lr, const OptimizerSchedule& schedule) {
  auto& entries = store.entries();
  if (buffers_.size() != entries.size()) throw ConfigError("optimizer state does not match the parameter list");
  double clip_scale = 1.0;
  if (schedule.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& e : entries) {
      for (double g : e.var.grad().data) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > schedule.grad_clip) clip_scale = schedule.grad_clip / norm;
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var p = entries[i].var;
    const Tensor& grad = p.grad();
    Tensor& value = p.mutable_value();
    Tensor& buf = buffers_[i];
    const bool first = buf.data.empty();
    if (first) buf = Tensor(value.shape, 0.0);
    for (std::size_t k = 0; k < value.data.size(); ++k) {
      double g = grad.data[k] * clip_scale + schedule.weight_decay * value.data[k];
      buf.data[k] = first ? g : schedule.momentum * buf.data[k] + g;
      const double d = schedule.nesterov ? g + schedule.momentum * buf.data[k] : buf.data[k];
      value.data[k] -= lr * d;
    }
  }
}

// ---------------------------------------------------------------------------

MetricLog::MetricLog(fs::path path, bool append) : path_(std::move(path)) {
  if (!append) std::ofstream(*path_, std::ios::trunc);
}

void MetricLog::append(nlohmann::ordered_json record) {
  const long step = record.at("step").get<long>();
  const bool is_step = record.value("kind", std::string()) == "step";
  if (is_step ? step <= last_step_ : step < last_step_) {
    throw ArgumentError("MetricLog: step " + std::to_string(step) + " after " + std::to_string(last_step_));
  }
  last_step_ = step;
  if (path_) {
    std::ofstream out(*path_, std::ios::app);
    out << record.dump() << '\n';
  }
  records_.push_back(std::move(record));
}

std::vector<nlohmann::ordered_json> MetricLog::step_records() const {
  std::vector<nlohmann::ordered_json> out;
  for (const auto& r : records_) {
    if (r.value("kind", std::string()) == "step") out.push_back(r);
  }
  return out;
}

std::string MetricLog::to_ndjson() const {
  std::string out;
  for (const auto& r : records_) out += r.dump() + '\n';
  return out;
}

MetricLog MetricLog::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open metric log " + path.string());
  MetricLog log;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) log.append(nlohmann::ordered_json::parse(line));
  }
  return log;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'C', 'C', 'T', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  template <class T>
  void pod(T v) {
    const char* p = reinterpret_cast<const char*>(&v);
    out_.append(p, sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    out_ += s;
  }
  void tensor(const Tensor& t) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) pod<std::int64_t>(d);
    pod<std::uint64_t>(t.data.size());
    out_.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  }
  std::string take() { return std::move(out_); }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  template <class T>
  T pod() {
    T v;
    need(sizeof v);
    std::memcpy(&v, in_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) throw IngestionError("checkpoint: implausible tensor rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<int>(pod<std::int64_t>()));
    const auto n = pod<std::uint64_t>();
    if (n != shape_numel(shape)) throw IngestionError("checkpoint: tensor size does not match its shape");
    need(n * sizeof(double));
    Tensor t(shape);
    std::memcpy(t.data.data(), in_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return t;
  }
  bool done() const { return pos_ == in_.size(); }
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw IngestionError("checkpoint is truncated");
  }
  std::size_t pos_ = 0;

 private:
  const std::string& in_;
};

}  // namespace

std::string Checkpoint::serialize() const {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.pod<std::uint32_t>(kVersion);
  w.str(config.to_ini());
  w.pod<std::int64_t>(epoch);
  w.pod<std::int64_t>(step);
  w.str(rng_state);
  w.pod<std::uint64_t>(parameters.size());
  for (const auto& [name, t] : parameters) {
    w.str(name);
    w.tensor(t);
  }
  w.pod<std::uint64_t>(momentum.size());
  for (const auto& t : momentum) w.tensor(t);
  return w.take();
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  Reader r(bytes);
  r.need(sizeof kMagic);
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw IngestionError("not a checkpoint file (bad magic)");
  r.pos_ = sizeof kMagic;
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) throw IngestionError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config = TrainConfig::from_ini(IniDocument::parse(r.str()));
  c.epoch = static_cast<int>(r.pod<std::int64_t>());
  c.step = static_cast<long>(r.pod<std::int64_t>());
  c.rng_state = r.str();
  const auto n = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    c.parameters.emplace_back(std::move(name), r.tensor());
  }
  const auto m = r.pod<std::uint64_t>();
  if (m != 0 && m != n) throw IngestionError("checkpoint: optimizer state does not match the parameter list");
  for (std::uint64_t i = 0; i < m; ++i) c.momentum.push_back(r.tensor());
  if (!r.done()) throw IngestionError("checkpoint has trailing bytes");
  return c;
}

void Checkpoint::save(const fs::path& path) const {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + tmp.string());
    const std::string bytes = serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestionError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint Checkpoint::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const IngestionError& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
}

DcctModel model_from_checkpoint(const Checkpoint& ckpt) {
  DcctModel model = DcctModel::build(ckpt.config.model);
  auto& entries = model.parameters().entries();
  if (entries.size() != ckpt.parameters.size()) {
    throw IngestionError("checkpoint has " + std::to_string(ckpt.parameters.size()) + " parameters, model expects " +
                         std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = ckpt.parameters[i];
    Var p = entries[i].var;
    if (name != entries[i].name || t.shape != p.shape()) {
      throw IngestionError("checkpoint parameter '" + name + "' " + shape_str(t.shape) + " does not match model parameter '" +
                           entries[i].name + "' " + shape_str(p.shape()));
    }
    p.mutable_value() = t;
  }
  return model;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& config, const DatasetIndex& data)
    : config_(config), data_(&data), model_(DcctModel::build(config.model)), sgd_(model_.parameters()) {
  config_.validate();
  if (data.train.empty()) throw ConfigError("training needs a non-empty train split");
  if (data.image_h != config.model.image_h || data.image_w != config.model.image_w) {
    throw ConfigError("dataset images are " + std::to_string(data.image_h) + "x" + std::to_string(data.image_w) +
                      " but the model expects " + std::to_string(config.model.image_h) + "x" +
                      std::to_string(config.model.image_w));
  }
  if (data.num_identities > config.model.num_classes) {
    throw ConfigError("dataset has " + std::to_string(data.num_identities) + " identities but num_classes = " +
                      std::to_string(config.model.num_classes));
  }
  // The data stream is seeded apart from the weight initialisation stream.
  std::seed_seq seq{config.model.seed, std::uint64_t{0x747261696e}};
  rng_.seed(seq);
}

Trainer Trainer::resume(const Checkpoint& ckpt, const DatasetIndex& data) {
  Trainer t(ckpt.config, data);
  t.model_ = model_from_checkpoint(ckpt);
  t.sgd_ = Sgd(t.model_.parameters());
  if (!ckpt.momentum.empty()) t.sgd_.buffers() = ckpt.momentum;
  std::istringstream is(ckpt.rng_state);
  is >> t.rng_;
  if (!is) throw IngestionError("checkpoint rng state is unreadable");
  t.epoch_ = ckpt.epoch;
  t.step_ = ckpt.step;
  return t;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config = config_;
  c.epoch = epoch_;
  c.step = step_;
  std::ostringstream os;
  os << rng_;
  c.rng_state = os.str();
  for (const auto& e : model_.parameters().entries()) c.parameters.emplace_back(e.name, e.var.value());
  if (!sgd_.buffers().empty() && !sgd_.buffers().front().data.empty()) c.momentum = sgd_.buffers();
  return c;
}

namespace {

void check_finite(const LossReport& r, long step, int epoch) {
  const std::pair<const char*, double> terms[] = {
      {"ce_backbone", r.stages.ce_backbone}, {"ce_final", r.stages.ce_final}, {"triplet_backbone", r.stages.triplet_backbone},
      {"triplet_final", r.stages.triplet_final}, {"ld", r.stages.ld}, {"fd", r.stages.fd}, {"total", r.total}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      throw DivergenceError("non-finite loss term '" + std::string(name) + "' (" + std::to_string(v) + ") at step " +
                            std::to_string(step) + ", epoch " + std::to_string(epoch));
    }
  }
}

}  // namespace

void Trainer::run_epoch(MetricLog& log) {
  const double lr = config_.schedule.lr_at(epoch_);
  const auto batches = pk_batches(*data_, config_.batch_spec(), rng_, &config_.augment);
  const int T = config_.model.frames_T;
  for (const Batch& batch : batches) {
    const int n = static_cast<int>(batch.clips.size());
    const Tensor input = clips_to_tensor(batch.clips, T, config_.model.image_h, config_.model.image_w);
    const ForwardOutput out = model_.forward(input, n);
    ObjectiveInputs in;
    in.x1_pooled = out.x1_pooled;
    in.x2_pooled = out.x2_pooled;
    in.s3 = out.hta.s3;
    in.labels = batch.labels;
    in.frames = T;
    const Objective obj = training_objective(model_.heads(), in, config_.loss);
    check_finite(obj.report, step_, epoch_);
    model_.parameters().zero_grad();
    backward(obj.total);
    sgd_.step(model_.parameters(), lr, config_.schedule);
    ++step_;

    const LossReport& r = obj.report;
    nlohmann::ordered_json rec;
    rec["kind"] = "step";
    rec["step"] = step_;
    rec["epoch"] = epoch_;
    rec["lr"] = lr;
    rec["ce"] = r.ce;
    rec["triplet"] = r.triplet;
    rec["ld"] = r.ld;
    rec["fd"] = r.fd;
    rec["total"] = r.total;
    rec["ce_backbone"] = r.stages.ce_backbone;
    rec["ce_final"] = r.stages.ce_final;
    rec["triplet_backbone"] = r.stages.triplet_backbone;
    rec["triplet_final"] = r.stages.triplet_final;
    log.append(std::move(rec));
  }
  ++epoch_;
}

RetrievalMetrics Trainer::evaluate(FeatureMode mode) const {
  const FeatureDB q = extract_features(model_, *data_, Split::Query, mode);
  const FeatureDB g = extract_features(model_, *data_, Split::Gallery, mode);
  return cmc_map(distance_matrix(q, g), q.identities, g.identities, q.cameras, g.cameras);
}

std::vector<std::pair<FeatureMode, RetrievalMetrics>> Trainer::log_evaluation(MetricLog& log) const {
  std::vector<std::pair<FeatureMode, RetrievalMetrics>> results;
  std::vector<FeatureMode> modes;
  if (model_.has_temporal_modules()) modes.push_back(FeatureMode::Full);
  if (config_.eval_backbone || modes.empty()) modes.push_back(FeatureMode::BackboneOnly);
  for (FeatureMode mode : modes) {
    nlohmann::ordered_json rec;
    rec["kind"] = "eval";
    rec["step"] = step_;
    rec["epoch"] = epoch_;
    rec["mode"] = feature_mode_name(mode);
    const RetrievalMetrics m = evaluate(mode);
    const auto fields = metrics_json(m);
    for (auto it = fields.begin(); it != fields.end(); ++it) rec[it.key()] = it.value();
    log.append(std::move(rec));
    results.emplace_back(mode, m);
  }
  return results;
}

namespace {

TrainResult run(Trainer& trainer, const TrainOptions& options, bool resumed) {
  const TrainConfig& cfg = trainer.config();
  TrainResult result;
  if (options.out_dir) {
    fs::create_directories(*options.out_dir);
    std::ofstream(*options.out_dir / "config.ini") << cfg.to_ini();
  }
  MetricLog log = options.out_dir ? MetricLog(*options.out_dir / "metrics.ndjson", resumed) : MetricLog();
  const int last = options.stop_after_epoch >= 0 ? std::min(options.stop_after_epoch, cfg.schedule.max_epochs)
                                                 : cfg.schedule.max_epochs;
  while (trainer.epoch() < last) {
    trainer.run_epoch(log);
    if (options.verbose) {
      const auto& rec = log.records().back();
      std::cerr << "epoch " << trainer.epoch() << " step " << trainer.step() << " lr " << rec["lr"].get<double>()
                << " total " << rec["total"].get<double>() << '\n';
    }
    const bool final_epoch = trainer.epoch() == cfg.schedule.max_epochs;
    if (options.evaluate && !final_epoch && cfg.eval_every > 0 && trainer.epoch() % cfg.eval_every == 0) {
      trainer.log_evaluation(log);
    }
    if (options.out_dir) trainer.checkpoint().save(*options.out_dir / "last.ckpt");
  }
  if (options.evaluate && trainer.epoch() == cfg.schedule.max_epochs) {
    for (const auto& [mode, m] : trainer.log_evaluation(log)) {
      (mode == FeatureMode::Full ? result.final_full : result.final_backbone) = m;
    }
  }
  result.checkpoint = trainer.checkpoint();
  result.log = std::move(log);
  return result;
}

}  // namespace

TrainResult train(const TrainConfig& config, const DatasetIndex& data, const TrainOptions& options) {
  Trainer trainer(config, data);
  return run(trainer, options, false);
}

TrainResult resume_training(const Checkpoint& ckpt, const DatasetIndex& data, const TrainOptions& options) {
  Trainer trainer = Trainer::resume(ckpt, data);
  return run(trainer, options, true);
}

RetrievalMetrics evaluate(const Checkpoint& ckpt, const DatasetIndex& data, FeatureMode mode) {
  if (data.query.empty()) throw EvaluationError("dataset has no query split");
  if (data.gallery.empty()) throw EvaluationError("dataset has no gallery split");
  const DcctModel model = model_from_checkpoint(ckpt);
  const FeatureDB q = extract_features(model, data, Split::Query, mode);
  const FeatureDB g = extract_features(model, data, Split::Gallery, mode);
  return cmc_map(distance_matrix(q, g), q.identities, g.identities, q.cameras, g.cameras);
}

}  // namespace dcct
