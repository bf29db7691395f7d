#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fpnet/errors.hpp"
#include "fpnet/metrics.hpp"
#include "fpnet/synth.hpp"
#include "fpnet/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace fpnet;

namespace {

struct ModelFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> ablation;
  std::optional<std::string> freq;
  std::optional<std::size_t> epochs, batch, size, steps;
  std::optional<double> lr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "seed for initialization and batching");
    cmd->add_option("--ablation", ablation, "module switch, fpm|hrp|cfm=on|off (repeatable)");
    cmd->add_option("--freq", freq, "frequency branches: high, low or both");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--batch", batch, "mini-batch size");
    cmd->add_option("--size", size, "input extent (multiple of 32)");
    cmd->add_option("--steps", steps, "optimizer steps, overrides --epochs when positive");
    cmd->add_option("--lr", lr, "learning rate");
  }

  FPNetConfig resolve() const {
    FPNetConfig cfg = config.empty() ? FPNetConfig{} : FPNetConfig::load(config);
    if (seed) cfg.seed = *seed;
    for (const std::string& a : ablation) {
      const auto eq = a.find('=');
      if (eq == std::string::npos) throw UsageError("--ablation expects name=on|off, got '" + a + "'");
      const std::string key = a.substr(0, eq);
      if (key != "fpm" && key != "hrp" && key != "cfm") {
        throw UsageError("--ablation switch must be fpm, hrp or cfm, got '" + key + "'");
      }
      cfg.set("use_" + key, a.substr(eq + 1));
    }
    if (freq) cfg.freq_mode = parse_freq_mode(*freq);
    if (epochs) cfg.epochs = *epochs;
    if (batch) cfg.batch = *batch;
    if (size) cfg.input_size = *size;
    if (steps) cfg.steps = *steps;
    if (lr) cfg.lr = *lr;
    cfg.validate();
    return cfg;
  }
};

void require(bool ok, const std::string& message) {
  if (!ok) throw UsageError(message);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::numeric: return 4;
    case ErrorKind::data:
    case ErrorKind::format:
    case ErrorKind::dimension: return 3;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FPNet camouflaged object detection toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // train
  ModelFlags train_flags;
  std::string train_data, train_out = "run", train_resume;
  auto* train_cmd = app.add_subcommand("train", "train on <data>/train (or <data>) and write loss.csv and a checkpoint");
  train_flags.attach(train_cmd);
  train_cmd->add_option("--data", train_data, "dataset root")->required();
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--checkpoint", train_resume, "resume from this checkpoint");

  // infer
  ModelFlags infer_flags;
  std::string infer_data, infer_out = "pred", infer_ckpt, infer_split = "test";
  auto* infer_cmd = app.add_subcommand("infer", "write 8-bit probability masks for every image");
  infer_flags.attach(infer_cmd);
  infer_cmd->add_option("--data", infer_data, "dataset root")->required();
  infer_cmd->add_option("--split", infer_split, "split under the dataset root (train or test)");
  infer_cmd->add_option("--out", infer_out, "directory for predicted masks");
  infer_cmd->add_option("--checkpoint", infer_ckpt, "trained checkpoint")->required();

  // eval
  std::string eval_pred, eval_gt, eval_data, eval_out;
  auto* eval_cmd = app.add_subcommand("eval", "score predicted masks against ground truth");
  eval_cmd->add_option("--pred", eval_pred, "directory of predicted masks")->required();
  eval_cmd->add_option("--gt", eval_gt, "directory of ground-truth masks");
  eval_cmd->add_option("--data", eval_data, "dataset root; gt defaults to <data>/test/masks");
  eval_cmd->add_option("--out", eval_out, "write metrics.json into this directory");

  // gen-data
  SynthSpec spec;
  std::string gen_out = "data";
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic camouflage dataset");
  gen_cmd->add_option("--out", gen_out, "output directory");
  gen_cmd->add_option("--seed", spec.seed, "dataset seed");
  gen_cmd->add_option("--size", spec.size, "image extent (multiple of 32)");
  gen_cmd->add_option("--lambda", spec.lambda, "camouflage strength in [0,1]");
  gen_cmd->add_option("--train-count", spec.train_count, "training images");
  gen_cmd->add_option("--test-count", spec.test_count, "test images");

  // ablate
  ModelFlags ablate_flags;
  std::string ablate_data, ablate_out = "ablation";
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate the module and frequency-branch variants");
  ablate_flags.attach(ablate_cmd);
  ablate_cmd->add_option("--data", ablate_data, "dataset root with train/ and test/")->required();
  ablate_cmd->add_option("--out", ablate_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) {
      const FPNetConfig cfg = train_flags.resolve();
      if (!train_resume.empty()) require(fs::exists(train_resume), "checkpoint '" + train_resume + "' does not exist");
      const Dataset data = load_dataset(split_dir(train_data, "train"), cfg.input_size);
      TrainOptions opts;
      opts.out_dir = train_out;
      opts.resume_from = train_resume;
      const std::size_t total = total_steps(cfg, data.samples.size());
      opts.on_step = [total](const LossRecord& r) {
        if (r.step % 10 == 0 || r.step + 1 == total) {
          std::fprintf(stderr, "step %zu/%zu  l1 %.5f  l2 %.5f  l_out %.5f  total %.5f\n", r.step + 1, total, r.l1, r.l2,
                       r.l_output, r.total);
        }
      };
      const TrainResult res = train(cfg, data, opts);
      for (const auto& w : res.warnings) std::fprintf(stderr, "warning: ignored checkpoint entry '%s'\n", w.c_str());
      write_text(fs::path(train_out) / "provenance.json", provenance_json(cfg, "checkpoint", res.checkpoint));
      std::printf("loss trace: %s\ncheckpoint: %s\n", res.loss_csv.c_str(), res.checkpoint.c_str());
    } else if (*infer_cmd) {
      const FPNetConfig cfg = infer_flags.resolve();
      require(fs::exists(infer_ckpt), "checkpoint '" + infer_ckpt + "' does not exist; run `train` first");
      const Dataset data = load_dataset(split_dir(infer_data, infer_split), cfg.input_size);
      const InferResult res = infer(cfg, infer_ckpt, data, infer_out);
      for (const auto& w : res.warnings) std::fprintf(stderr, "warning: ignored checkpoint entry '%s'\n", w.c_str());
      std::printf("wrote %zu masks to %s\n", res.written.size(), infer_out.c_str());
    } else if (*eval_cmd) {
      if (eval_gt.empty()) {
        require(!eval_data.empty(), "eval needs --gt or --data");
        eval_gt = (fs::path(split_dir(eval_data, "test")) / "masks").string();
      }
      const MetricReport report = evaluate_dataset(eval_pred, eval_gt);
      nlohmann::ordered_json j;
      j["provenance"] = {{"tool", "fpnet"}, {"version", kVersion}, {"pred", eval_pred}, {"gt", eval_gt}};
      j["report"] = nlohmann::ordered_json::parse(report_json(report));
      if (!eval_out.empty()) {
        fs::create_directories(eval_out);
        write_text(fs::path(eval_out) / "metrics.json", j.dump(2) + "\n");
      }
      std::printf("%s", report_table({{"dataset", report}}).c_str());
    } else if (*gen_cmd) {
      gen_dataset(spec, gen_out);
      std::printf("wrote %zu train and %zu test samples to %s\n", spec.train_count, spec.test_count, gen_out.c_str());
    } else if (*ablate_cmd) {
      const FPNetConfig base = ablate_flags.resolve();
      const Dataset train_set = load_dataset(split_dir(ablate_data, "train"), base.input_size);
      const Dataset test_set = load_dataset(split_dir(ablate_data, "test"), base.input_size);
      const AblationResult res = ablate(base, train_set, test_set, ablate_out);
      std::printf("%s", res.table.c_str());
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "fpnet: %s\n", e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fpnet: %s\n", e.what());
    return 1;
  }
  return 0;
}
