#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "doctest.h"
#include "dcct/errors.hpp"
#include "dcct/ops.hpp"
#include "dcct/trainer.hpp"

using namespace dcct;
namespace fs = std::filesystem;

namespace {

SyntheticSpec small_data_spec(int identities = 4) {
  SyntheticSpec s;
  s.num_identities = identities;
  s.tracklet_length = 4;
  s.frames_T = 2;
  s.image_h = 16;
  s.image_w = 8;
  return s;
}

TrainConfig small_config(int classes = 4) {
  TrainConfig c;
  c.model = tiny_model_config();
  c.model.image_h = 16;
  c.model.image_w = 8;
  c.model.num_classes = classes;
  c.model.seed = 3;
  c.identities_per_batch = 2;
  c.tracklets_per_identity = 2;
  c.schedule.max_epochs = 4;
  c.schedule.base_lr = 1e-2;
  c.eval_every = 2;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dcct_trainer_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("learning rate schedule") {
  OptimizerSchedule s;
  for (int e = 0; e < 15; ++e) CHECK(s.lr_at(e) == 1e-3);
  CHECK(s.lr_at(15) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.lr_at(29) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.lr_at(30) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(s.lr_at(49) == doctest::Approx(1e-6).epsilon(1e-12));
  s.decay_factor = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = OptimizerSchedule{};
  s.base_lr = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("nesterov step matches a hand computation") {
  ParameterStore store;
  Var p = store.create_constant("p", {2}, 0.0);
  p.mutable_value().data = {1.0, -2.0};
  Sgd sgd(store);
  OptimizerSchedule s;
  s.weight_decay = 0.1;
  s.momentum = 0.5;
  const Tensor c({2}, {3.0, 4.0});
  auto grad_step = [&](double lr) {
    store.zero_grad();
    backward(ops::sum(ops::mul(p, ops::constant(c))));
    sgd.step(store, lr, s);
  };
  // Step 1: g = c + wd*p = (3.1, 3.8); b = g; p -= lr*(g + mu*b) = lr*1.5*g.
  grad_step(0.1);
  CHECK(p.value().data[0] == doctest::Approx(1.0 - 0.1 * 1.5 * 3.1).epsilon(1e-14));
  CHECK(p.value().data[1] == doctest::Approx(-2.0 - 0.1 * 1.5 * 3.8).epsilon(1e-14));
  // Step 2: b = mu*b + g'; p -= lr*(g' + mu*b).
  const double p0 = 1.0 - 0.1 * 1.5 * 3.1, b0 = 3.1;
  const double g1 = 3.0 + 0.1 * p0, b1 = 0.5 * b0 + g1;
  grad_step(0.1);
  CHECK(p.value().data[0] == doctest::Approx(p0 - 0.1 * (g1 + 0.5 * b1)).epsilon(1e-14));
  CHECK(sgd.buffers()[0].data[0] == doctest::Approx(b1).epsilon(1e-14));

  s.nesterov = false;
  ParameterStore plain;
  Var q = plain.create_constant("q", {1}, 2.0);
  Sgd sgd2(plain);
  backward(ops::sum(ops::mul(q, ops::constant(Tensor({1}, 1.0)))));
  sgd2.step(plain, 0.5, s);
  CHECK(q.value().data[0] == doctest::Approx(2.0 - 0.5 * 1.2).epsilon(1e-14));
}

TEST_CASE("gradient clipping bounds the step") {
  ParameterStore store;
  Var p = store.create_constant("p", {2}, 0.0);
  Sgd sgd(store);
  OptimizerSchedule s;
  s.weight_decay = 0.0;
  s.nesterov = false;
  s.grad_clip = 1.0;
  backward(ops::sum(ops::mul(p, ops::constant(Tensor({2}, {30.0, 40.0})))));
  sgd.step(store, 1.0, s);
  CHECK(p.value().data[0] == doctest::Approx(-0.6).epsilon(1e-14));
  CHECK(p.value().data[1] == doctest::Approx(-0.8).epsilon(1e-14));
}

TEST_CASE("train config ini round trip and validation") {
  auto c = small_config();
  c.loss.kl_direction = KlDirection::TeacherStudent;
  c.loss.weights.ld = 0.25;
  c.augment.erase = true;
  c.schedule.base_lr = 0.0123456789012345;
  const auto back = TrainConfig::from_ini(IniDocument::parse(c.to_ini()));
  CHECK(back.to_ini() == c.to_ini());
  CHECK(back.schedule.base_lr == c.schedule.base_lr);
  CHECK(back.loss.kl_direction == KlDirection::TeacherStudent);

  auto baseline = small_config();
  baseline.model.hta_depth = 0;
  CHECK_THROWS_AS(baseline.validate(), ConfigError);
  baseline.loss.weights.ld = baseline.loss.weights.fd = 0.0;
  CHECK_NOTHROW(baseline.validate());

  auto single = small_config();
  single.tracklets_per_identity = 1;
  CHECK_THROWS_AS(single.validate(), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_ini(IniDocument::parse("[train]\nlearning_rate = 0.1\n")), ConfigError);
}

TEST_CASE("zero distillation weights log zero ld and fd") {
  const auto data = generate_synthetic_dataset(small_data_spec());
  auto cfg = small_config();
  cfg.loss.weights.ld = 0.0;
  cfg.loss.weights.fd = 0.0;
  cfg.schedule.max_epochs = 2;
  TrainOptions opts;
  opts.evaluate = false;
  const auto r = train(cfg, data, opts);
  const auto steps = r.log.step_records();
  REQUIRE(steps.size() == 4);
  for (const auto& rec : steps) {
    CHECK(rec["ld"].get<double>() == 0.0);
    CHECK(rec["fd"].get<double>() == 0.0);
    CHECK(rec["total"].get<double>() == doctest::Approx(rec["ce"].get<double>() + rec["triplet"].get<double>()).epsilon(1e-12));
  }
}

TEST_CASE("logged totals are the weighted sum of the components") {
  const auto data = generate_synthetic_dataset(small_data_spec());
  auto cfg = small_config();
  cfg.schedule.max_epochs = 2;
  TrainOptions opts;
  opts.evaluate = false;
  const auto r = train(cfg, data, opts);
  for (const auto& rec : r.log.step_records()) {
    const double ce = rec["ce"], tri = rec["triplet"], ld = rec["ld"], fd = rec["fd"], total = rec["total"];
    CHECK(std::abs(total - (ce + tri + 0.1 * ld + 0.1 * fd)) <= 1e-9);
    CHECK(ce == doctest::Approx(rec["ce_backbone"].get<double>() + rec["ce_final"].get<double>()).epsilon(1e-12));
    CHECK(ld > 0.0);
    CHECK(fd > 0.0);
  }
}

TEST_CASE("same seed gives identical runs") {
  const auto data = generate_synthetic_dataset(small_data_spec());
  const auto cfg = small_config();
  const auto a = train(cfg, data);
  const auto b = train(cfg, data);
  CHECK(a.log.to_ndjson() == b.log.to_ndjson());
  CHECK(a.checkpoint.serialize() == b.checkpoint.serialize());
  auto other = cfg;
  other.model.seed = 4;
  CHECK(train(other, data).log.to_ndjson() != a.log.to_ndjson());
}

TEST_CASE("checkpoint round trip is byte-identical") {
  TempDir dir("ckpt");
  fs::create_directories(dir.path);
  const auto data = generate_synthetic_dataset(small_data_spec());
  auto cfg = small_config();
  cfg.schedule.max_epochs = 1;
  TrainOptions opts;
  opts.evaluate = false;
  const auto r = train(cfg, data, opts);
  const std::string bytes = r.checkpoint.serialize();
  CHECK(Checkpoint::deserialize(bytes).serialize() == bytes);
  r.checkpoint.save(dir.path / "a.ckpt");
  const auto loaded = Checkpoint::load(dir.path / "a.ckpt");
  CHECK(loaded.serialize() == bytes);
  CHECK(loaded.epoch == 1);
  CHECK(loaded.step == 2);
  CHECK(loaded.momentum.size() == loaded.parameters.size());

  CHECK_THROWS_AS(Checkpoint::deserialize(bytes + "x"), IngestionError);
  CHECK_THROWS_AS(Checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), IngestionError);
  CHECK_THROWS_AS(Checkpoint::deserialize("NOTACKPT" + bytes.substr(8)), IngestionError);
  CHECK_THROWS_AS(Checkpoint::load(dir.path / "missing.ckpt"), IngestionError);

  auto wrong = loaded;
  wrong.parameters[0].second = Tensor({1}, 0.0);
  CHECK_THROWS_AS(model_from_checkpoint(wrong), IngestionError);
}

TEST_CASE("resume continues exactly") {
  const auto data = generate_synthetic_dataset(small_data_spec());
  const auto cfg = small_config();
  const auto straight = train(cfg, data);

  TempDir dir("resume");
  TrainOptions first;
  first.out_dir = dir.path;
  first.stop_after_epoch = 2;
  const auto half = train(cfg, data, first);
  CHECK(half.checkpoint.epoch == 2);
  const auto from_disk = Checkpoint::load(dir.path / "last.ckpt");
  CHECK(from_disk.serialize() == half.checkpoint.serialize());

  TrainOptions second;
  second.out_dir = dir.path;
  const auto rest = resume_training(from_disk, data, second);
  CHECK(rest.checkpoint.serialize() == straight.checkpoint.serialize());
  CHECK(half.log.to_ndjson() + rest.log.to_ndjson() == straight.log.to_ndjson());
  CHECK(MetricLog::read(dir.path / "metrics.ndjson").to_ndjson() == straight.log.to_ndjson());
  REQUIRE(rest.final_full.has_value());
  CHECK(rest.final_full->mAP == straight.final_full->mAP);
}

TEST_CASE("metric log ordering") {
  MetricLog log;
  log.append({{"kind", "step"}, {"step", 1}});
  log.append({{"kind", "eval"}, {"step", 1}});
  CHECK_THROWS_AS(log.append({{"kind", "step"}, {"step", 1}}), ArgumentError);
  log.append({{"kind", "step"}, {"step", 2}});
  CHECK(log.step_records().size() == 2);
  CHECK(log.records().size() == 3);
}

TEST_CASE("non-finite loss is reported with the offending term") {
  const auto data = generate_synthetic_dataset(small_data_spec());
  Trainer t(small_config(), data);
  Var w = t.model().parameters().find("heads.w3.weight");
  w.mutable_value().data[0] = std::numeric_limits<double>::quiet_NaN();
  MetricLog log;
  try {
    t.run_epoch(log);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("ce_final") != std::string::npos);
  }
}

TEST_CASE("trainer rejects mismatched data") {
  const auto data = generate_synthetic_dataset(small_data_spec());
  CHECK_THROWS_AS(Trainer(small_config(3), data), ConfigError);
  auto big = small_config();
  big.model.image_h = 32;
  big.model.map_h = 4;
  CHECK_THROWS_AS(Trainer(big, data), ConfigError);
  auto empty = data;
  empty.train.clear();
  CHECK_THROWS_AS(Trainer(small_config(), empty), ConfigError);
}

TEST_CASE("evaluation of a checkpoint") {
  const auto data = generate_synthetic_dataset(small_data_spec());
  auto cfg = small_config();
  cfg.schedule.max_epochs = 2;
  const auto r = train(cfg, data);
  const auto full = evaluate(r.checkpoint, data, FeatureMode::Full);
  const auto backbone = evaluate(r.checkpoint, data, FeatureMode::BackboneOnly);
  CHECK(full.evaluated == 4);
  CHECK(backbone.evaluated == 4);
  CHECK(full.mAP == r.final_full->mAP);
  CHECK(backbone.cmc == r.final_backbone->cmc);
  CHECK(evaluate(r.checkpoint, data, FeatureMode::Full).cmc == full.cmc);

  auto no_gallery = data;
  no_gallery.gallery.clear();
  CHECK_THROWS_AS(evaluate(r.checkpoint, no_gallery, FeatureMode::Full), EvaluationError);
}

TEST_CASE("an untrained model does not retrieve perfectly on a larger gallery") {
  const auto data = generate_synthetic_dataset(small_data_spec(30));
  auto cfg = small_config(30);
  cfg.schedule.max_epochs = 1;
  const Trainer t(cfg, data);
  const auto m = t.evaluate(FeatureMode::Full);
  CHECK(m.evaluated == 30);
  CHECK(m.cmc_at(1) < 1.0);
  CHECK(m.mAP < 1.0);
}
