// aimlab: train/evaluate balanced multimodal models and generate synthetic
// multimodal datasets. Exit codes: 0 success, 1 usage error, 2 runtime
// failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "aim/trainer.hpp"

namespace fs = std::filesystem;

namespace {

int cmd_train(const std::string& config_path) {
  const aim::ExperimentConfig cfg = aim::parse_config_file(config_path);
  const aim::TrainResult result = aim::train(cfg);
  std::printf("run %s finished: %d epochs in %.1f s\n", cfg.run_name().c_str(),
              cfg.total_epochs, result.total_seconds);
  std::printf("  train acc %.4f  test acc %.4f\n", result.final_train_acc, result.final_test_acc);
  for (std::size_t m = 0; m < result.final_probe_acc.size(); ++m) {
    std::printf("  probe acc m%zu %.4f\n", m, result.final_probe_acc[m]);
  }
  std::printf("  outputs: %s\n", result.out_dir.c_str());
  return 0;
}

int cmd_suite(const std::string& configs_dir, const std::string& out_root, int jobs) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(configs_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".cfg") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) {
    throw aim::ValueError("suite: no .cfg files in " + configs_dir);
  }
  std::vector<aim::ExperimentConfig> configs;
  for (const fs::path& f : files) {
    aim::ExperimentConfig cfg = aim::parse_config_file(f.string());
    if (cfg.name.empty()) cfg.name = f.stem().string();
    configs.push_back(std::move(cfg));
  }
  const aim::SuiteResult suite = aim::run_suite(configs, out_root, jobs);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (!suite.errors[i].empty()) {
      std::fprintf(stderr, "run %s failed: %s\n", configs[i].run_name().c_str(),
                   suite.errors[i].c_str());
    }
  }
  std::printf("%-16s %5s %8s %12s %12s\n", "mode", "runs", "failures", "test_mean", "test_std");
  for (const aim::SuiteRow& row : suite.rows) {
    std::printf("%-16s %5d %8d %12.4f %12.4f\n", row.mode.c_str(), row.runs, row.failures,
                row.test_acc_mean, row.test_acc_std);
  }
  std::printf("wrote %s\n", suite.csv_path.c_str());
  return 0;
}

int cmd_generate(const std::string& spec_path, const std::string& out_dir) {
  const aim::DatasetSpec spec = aim::parse_dataset_spec(spec_path);
  const auto [train, test] = aim::generate(spec);
  fs::create_directories(out_dir);
  aim::save(train, (fs::path(out_dir) / "train.mmds").string());
  aim::save(test, (fs::path(out_dir) / "test.mmds").string());
  std::printf("wrote %d train / %d test samples to %s\n", train.size(), test.size(),
              out_dir.c_str());
  return 0;
}

int cmd_evaluate(const std::string& checkpoint_path, const std::string& data_path) {
  aim::Checkpoint ckpt = aim::load_checkpoint(checkpoint_path);
  const fs::path p(data_path);
  const aim::Dataset test =
      fs::is_directory(p) ? aim::load((p / "test.mmds").string()) : aim::load(data_path);
  aim::PrototypeBank bank;
  bank.num_classes = ckpt.net.num_classes;
  bank.roots = ckpt.prototype_roots;
  bank.depth.assign(ckpt.prototype_roots.size(), {});
  const aim::EvalResult result = aim::evaluate(ckpt.net, bank, test);
  std::printf("multimodal accuracy %.4f\n", result.multimodal_accuracy);
  for (std::size_t m = 0; m < result.probe_accuracy.size(); ++m) {
    std::printf("probe accuracy m%zu %.4f\n", m, result.probe_accuracy[m]);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"balanced multimodal training lab"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train_cmd = app.add_subcommand("train", "run one training configuration");
  train_cmd->add_option("--config", config_path, "key=value config file")->required();

  std::string configs_dir, out_root = "suite_out";
  int jobs = 1;
  auto* suite_cmd = app.add_subcommand("suite", "run every .cfg in a directory and aggregate");
  suite_cmd->add_option("--configs", configs_dir, "directory of .cfg files")->required();
  suite_cmd->add_option("--out", out_root, "output root (default suite_out)");
  suite_cmd->add_option("--jobs", jobs, "concurrent runs (default 1)");

  std::string spec_path, gen_out;
  auto* gen_cmd = app.add_subcommand("generate-data", "generate a synthetic multimodal dataset");
  gen_cmd->add_option("--spec", spec_path, "dataset spec file")->required();
  gen_cmd->add_option("--out", gen_out, "output directory for train.mmds/test.mmds")->required();

  std::string ckpt_path, data_path;
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  eval_cmd->add_option("--data", data_path, "dataset file or directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train_cmd) return cmd_train(config_path);
    if (*suite_cmd) return cmd_suite(configs_dir, out_root, jobs);
    if (*gen_cmd) return cmd_generate(spec_path, gen_out);
    if (*eval_cmd) return cmd_evaluate(ckpt_path, data_path);
  } catch (const aim::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const aim::ValueError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
