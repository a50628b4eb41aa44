#include "aim/config.hpp"

#include <fstream>
#include <sstream>

namespace aim {

TrainMode mode_from_string(const std::string& s) {
  if (s == "joint_baseline") return TrainMode::joint_baseline;
  if (s == "aim") return TrainMode::aim;
  if (s == "aim_label") return TrainMode::aim_label;
  if (s == "aim_wo_pa") return TrainMode::aim_wo_pa;
  if (s == "aim_wo_da") return TrainMode::aim_wo_da;
  throw ValueError("unknown mode: '" + s + "'");
}

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::joint_baseline: return "joint_baseline";
    case TrainMode::aim: return "aim";
    case TrainMode::aim_label: return "aim_label";
    case TrainMode::aim_wo_pa: return "aim_wo_pa";
    case TrainMode::aim_wo_da: return "aim_wo_da";
  }
  return "?";
}

void ExperimentConfig::validate() const {
  if (modulation_start < 0) throw ValueError("config: E must be >= 0");
  if (total_epochs <= modulation_start) throw ValueError("config: E_T must exceed E");
  if (batch_size <= 0) throw ValueError("config: batch_size must be positive");
  if (lr <= 0.0) throw ValueError("config: lr must be positive");
  if (lr_roots < 0.0) throw ValueError("config: lr_roots must be nonnegative");
  if (momentum < 0.0 || momentum >= 1.0) throw ValueError("config: momentum must be in [0,1)");
  if (ema_momentum < 0.0 || ema_momentum >= 1.0) {
    throw ValueError("config: ema_momentum must be in [0,1)");
  }
  if (latent_dim <= 0) throw ValueError("config: latent_dim must be positive");
  if (hidden_dim <= 0) throw ValueError("config: hidden_dim must be positive");
  if (depth <= 0) throw ValueError("config: depth must be positive");
  if (lambda_task < 0.0) throw ValueError("config: lambda_task must be nonnegative");
  if (gram_every < 0) throw ValueError("config: gram_every must be >= 0");
  if (dataset.empty()) throw ValueError("config: dataset must be set");
  if (out_dir.empty()) throw ValueError("config: out_dir must be set");
}

std::string ExperimentConfig::run_name() const {
  if (!name.empty()) return name;
  return to_string(mode) + "_seed" + std::to_string(seed);
}

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ValueError("config: bad boolean for '" + key + "': '" + v + "'");
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(origin + ": line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    try {
      if (key == "mode") cfg.mode = mode_from_string(val);
      else if (key == "fusion") cfg.fusion = fusion_from_string(val);
      else if (key == "metric") cfg.metric = metric_from_string(val);
      else if (key == "E") cfg.modulation_start = std::stoi(val);
      else if (key == "E_T") cfg.total_epochs = std::stoi(val);
      else if (key == "batch_size") cfg.batch_size = std::stoi(val);
      else if (key == "lr") cfg.lr = parse_double(val);
      else if (key == "lr_roots") cfg.lr_roots = parse_double(val);
      else if (key == "momentum") cfg.momentum = parse_double(val);
      else if (key == "ema_momentum") cfg.ema_momentum = parse_double(val);
      else if (key == "latent_dim") cfg.latent_dim = std::stoi(val);
      else if (key == "hidden_dim") cfg.hidden_dim = std::stoi(val);
      else if (key == "depth") cfg.depth = std::stoi(val);
      else if (key == "dataset") cfg.dataset = val;
      else if (key == "seed") cfg.seed = std::stoull(val);
      else if (key == "lambda_task") cfg.lambda_task = parse_double(val);
      else if (key == "out_dir") cfg.out_dir = val;
      else if (key == "name") cfg.name = val;
      else if (key == "pdm_in_phase2") cfg.pdm_in_phase2 = parse_bool(val, key);
      else if (key == "pdm_train_backbone") cfg.pdm_train_backbone = parse_bool(val, key);
      else if (key == "detach_block_inputs") cfg.detach_block_inputs = parse_bool(val, key);
      else if (key == "detach_protos") cfg.detach_protos = parse_bool(val, key);
      else if (key == "aux_detach_decoupler") cfg.aux_detach_decoupler = parse_bool(val, key);
      else if (key == "zero_block_weight_modality") cfg.zero_block_weight_modality = std::stoi(val);
      else if (key == "gram_every") cfg.gram_every = std::stoi(val);
      else {
        throw ValueError("config: unknown key '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw ParseError(origin + ": line " + std::to_string(lineno) + ": bad value for '" + key +
                       "'");
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot read " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_config_text(buf.str(), path);
}

}  // namespace aim
