// dcct: train, evaluate, gradient-check, synthesize data, inspect checkpoints.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "dcct/data.hpp"
#include "dcct/errors.hpp"
#include "dcct/eval.hpp"
#include "dcct/gradcheck.hpp"
#include "dcct/trainer.hpp"

namespace fs = std::filesystem;
using namespace dcct;

namespace {

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir, int epochs,
              long long seed, bool quiet) {
  TrainConfig cfg = TrainConfig::load(config_path);
  if (epochs > 0) cfg.schedule.max_epochs = epochs;
  if (seed >= 0) cfg.model.seed = static_cast<std::uint64_t>(seed);
  cfg.validate();
  const DatasetIndex data = load_dataset_dir(data_dir);
  TrainOptions opts;
  opts.out_dir = out_dir;
  opts.verbose = !quiet;
  const auto start = std::chrono::steady_clock::now();
  const TrainResult result = train(cfg, data, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (result.final_full) std::cout << "final (full)\n" << format_metrics(*result.final_full);
  if (result.final_backbone) std::cout << "final (backbone_only)\n" << format_metrics(*result.final_backbone);
  std::printf("trained %d epochs, %ld steps in %.1fs; checkpoint %s\n", result.checkpoint.epoch, result.checkpoint.step, secs,
              (fs::path(out_dir) / "last.ckpt").c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir, const std::string& mode_text,
             const std::string& json_out) {
  const FeatureMode mode = parse_feature_mode(mode_text);
  const Checkpoint ckpt = Checkpoint::load(ckpt_path);
  const DatasetIndex data = load_dataset_dir(data_dir);
  const RetrievalMetrics m = evaluate(ckpt, data, mode);
  std::cout << "mode     " << feature_mode_name(mode) << '\n' << format_metrics(m);
  auto rec = metrics_json(m);
  rec["kind"] = "eval";
  rec["mode"] = feature_mode_name(mode);
  rec["checkpoint"] = ckpt_path;
  rec["epoch"] = ckpt.epoch;
  if (!json_out.empty()) {
    std::ofstream(json_out, std::ios::app) << rec.dump() << '\n';
  } else {
    std::cout << rec.dump() << '\n';
  }
  return 0;
}

int cmd_gradcheck(const std::string& target, double eps, std::uint64_t seed, double tol, int max_entries) {
  GradCheckOptions opts;
  opts.eps = eps;
  opts.seed = seed;
  opts.tolerance = tol;
  opts.max_entries = max_entries;
  std::vector<GradTarget> targets;
  if (target == "all") {
    targets = {GradTarget::Cca, GradTarget::Hta, GradTarget::Losses, GradTarget::Full};
  } else {
    targets = {parse_grad_target(target)};
  }
  bool ok = true;
  for (GradTarget t : targets) {
    const GradCheckReport report = run_grad_check(t, opts);
    std::cout << report.format();
    ok = ok && report.passed();
  }
  return ok ? 0 : 1;
}

int cmd_inspect(const std::string& ckpt_path) {
  const Checkpoint ckpt = Checkpoint::load(ckpt_path);
  std::size_t scalars = 0;
  for (const auto& [name, t] : ckpt.parameters) scalars += t.numel();
  std::printf("checkpoint  %s\nversion     %u\nepoch       %d\nstep        %ld\nparameters  %zu tensors, %zu scalars\n"
              "momentum    %s\nlr (next)   %g\n",
              ckpt_path.c_str(), Checkpoint::kVersion, ckpt.epoch, ckpt.step, ckpt.parameters.size(), scalars,
              ckpt.momentum.empty() ? "none" : "present", ckpt.config.schedule.lr_at(ckpt.epoch));
  std::cout << "\n" << ckpt.config.to_ini();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DCCT video re-identification: training, evaluation and verification"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir;
  int epochs = 0;
  long long seed_override = -1;
  bool quiet = false;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write last.ckpt, metrics.ndjson, config.ini");
  train_cmd->add_option("--config", config_path, "Training config (ini)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--data", data_dir, "Dataset root")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", out_dir, "Output directory")->required();
  train_cmd->add_option("--epochs", epochs, "Override the number of epochs");
  train_cmd->add_option("--seed", seed_override, "Override the model seed");
  train_cmd->add_flag("--quiet", quiet, "No per-epoch progress on stderr");

  std::string ckpt_path, mode = "full", json_out;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on the query/gallery splits");
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", data_dir, "Dataset root")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--mode", mode, "full | backbone")->check(CLI::IsMember({"full", "backbone", "backbone_only"}));
  eval_cmd->add_option("--json", json_out, "Append the eval record to this file instead of stdout");

  std::string target;
  double eps = 1e-5, tol = 1e-4;
  std::uint64_t gc_seed = 0;
  int max_entries = 0;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient check; exits 1 if any group fails");
  gc_cmd->add_option("--target", target, "cca | hta | losses | full | all")->required();
  gc_cmd->add_option("--eps", eps, "Central-difference step");
  gc_cmd->add_option("--seed", gc_seed, "Seed for parameters and inputs");
  gc_cmd->add_option("--tol", tol, "Max relative error");
  gc_cmd->add_option("--max-entries", max_entries, "Entries sampled per tensor (0 = all)");

  SyntheticSpec spec;
  std::string spec_path;
  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic tracklet dataset");
  synth_cmd->add_option("--spec", spec_path, "Spec file with a [synthetic] section")->check(CLI::ExistingFile);
  synth_cmd->add_option("--out", out_dir, "Output dataset root")->required();
  synth_cmd->add_option("--num-identities", spec.num_identities);
  synth_cmd->add_option("--cameras", spec.cameras);
  synth_cmd->add_option("--tracklets-per-identity-per-camera", spec.tracklets_per_identity_per_camera);
  synth_cmd->add_option("--tracklet-length", spec.tracklet_length);
  synth_cmd->add_option("--frames-T", spec.frames_T);
  synth_cmd->add_option("--image-h", spec.image_h);
  synth_cmd->add_option("--image-w", spec.image_w);
  synth_cmd->add_option("--noise", spec.noise);
  synth_cmd->add_option("--jitter", spec.jitter);
  synth_cmd->add_option("--seed", spec.seed);

  auto* inspect_cmd = app.add_subcommand("inspect", "Summarize a checkpoint");
  inspect_cmd->add_option("ckpt", ckpt_path, "Checkpoint file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(config_path, data_dir, out_dir, epochs, seed_override, quiet);
    if (*eval_cmd) return cmd_eval(ckpt_path, data_dir, mode, json_out);
    if (*gc_cmd) return cmd_gradcheck(target, eps, gc_seed, tol, max_entries);
    if (*inspect_cmd) return cmd_inspect(ckpt_path);
    if (*synth_cmd) {
      if (!spec_path.empty()) {
        // Flags given on the command line win over the file.
        SyntheticSpec from_file = SyntheticSpec::from_ini(IniDocument::load(spec_path));
        for (const auto* opt : synth_cmd->get_options()) {
          if (opt->count() > 0) continue;
          const std::string n = opt->get_name();
          if (n == "--num-identities") spec.num_identities = from_file.num_identities;
          else if (n == "--cameras") spec.cameras = from_file.cameras;
          else if (n == "--tracklets-per-identity-per-camera") spec.tracklets_per_identity_per_camera = from_file.tracklets_per_identity_per_camera;
          else if (n == "--tracklet-length") spec.tracklet_length = from_file.tracklet_length;
          else if (n == "--frames-T") spec.frames_T = from_file.frames_T;
          else if (n == "--image-h") spec.image_h = from_file.image_h;
          else if (n == "--image-w") spec.image_w = from_file.image_w;
          else if (n == "--noise") spec.noise = from_file.noise;
          else if (n == "--jitter") spec.jitter = from_file.jitter;
          else if (n == "--seed") spec.seed = from_file.seed;
        }
      }
      const DatasetIndex index = generate_synthetic_dataset(spec);
      write_dataset_dir(index, out_dir);
      std::printf("wrote %zu train, %zu query, %zu gallery tracklets (%d identities) to %s\n", index.train.size(),
                  index.query.size(), index.gallery.size(), index.num_identities, out_dir.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
