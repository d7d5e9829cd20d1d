#pragma once

// Experiment configuration, stage orchestration, run manifests, and
// report/plot-data emission. A pipeline is a fixed stage sequence; every
// stage can also be rerun on its own against an existing artifact tree,
// reading its inputs from the run directory and rewriting its outputs.

#include <cstdint>
#include <string>
#include <vector>

#include "core/config.hpp"

namespace al {

// --- configuration -----------------------------------------------------------

struct DataSection {
  int difficulty = 4;
  int n_pretrain_only = 256;
  int n_eval_contaminated = 64;
  int n_eval_clean = 64;
  int corpus_docs = 64;
  int items_per_doc = 16;
  double contamination_rate = 1.0;
  int contamination_copies = 8;
  bool contamination_jitter = false;

  bool operator==(const DataSection&) const = default;
};

struct PretrainSection {
  int steps = 700;
  int batch_size = 8;
  int seq_len = 24;
  bool align_windows = true;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;

  bool operator==(const PretrainSection&) const = default;
};

struct RlvrSection {
  int steps = 150;
  int batch_size = 8;
  double learning_rate = 0.02;
  std::string reward_mode = "random";
  double rollout_temperature = 1.0;
  double kl_coeff = 0.0;
  int max_new = 6;
  std::vector<int> checkpoint_steps = {0, 50, 100, 150};
  double baseline_ema = 0.9;
  double sigma_floor = 0.25;
  double momentum = 0.9;
  double clip_norm = 1.0;

  bool operator==(const RlvrSection&) const = default;
};

struct ProbeSection {
  std::vector<double> partial_ratios = {0.25, 0.5, 0.75, 1.0};
  int partial_max_items = 48;
  int jsd_max_items = 32;
  bool jsd_per_column = false;
  std::vector<double> steering_alphas = {0.2, 1.0, 3.0};
  double lambda = 1.0;
  int top_k = 10;
  int nde_width = 256;
  int nde_epochs = 200;
  double nde_learning_rate = 0.05;
  int band_radius = 1;
  int pca_components = 2;

  bool operator==(const ProbeSection&) const = default;
};

struct ExperimentConfig {
  int config_version = 1;
  uint64_t root_seed = 0;
  std::string out_dir = "run";
  ModelConfig model;
  DataSection data;
  PretrainSection pretrain;
  RlvrSection rlvr;
  ProbeSection probes;

  bool operator==(const ExperimentConfig&) const = default;
  void validate() const;
};

// Strict parse: unknown fields and a missing root_seed are config errors
// naming the offending field. Round-trips losslessly through config_to_json.
ExperimentConfig parse_config_json(const std::string& text);
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::string& path);

// --- run manifest ---------------------------------------------------------------

struct StageRecord {
  std::string name;
  double wall_ms = 0.0;
  std::vector<std::pair<std::string, std::string>> outputs;  // (relative path, fnv64 hex)
};

struct RunManifest {
  std::string tool_version;
  std::string config_hash;  // fnv64 hex of the canonical config JSON
  std::vector<StageRecord> stages;
  std::string failed_stage;  // empty when healthy
  std::string error;
};

RunManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const RunManifest& m);

// --- stages -----------------------------------------------------------------------

// Pipeline order: data, pretrain, rlvr, classify, ppl, partial, patch, jsd,
// nde, auc, ablate, grid, report.
const std::vector<std::string>& pipeline_stage_names();

// Runs one stage against cfg.out_dir, updating manifest.json there (on
// failure the manifest records the stage name and error before rethrowing).
// extra_json carries per-invocation overrides for single-probe CLI runs
// (documented per stage in the CLI help); empty means none.
void run_stage(const ExperimentConfig& cfg, const std::string& stage,
               const std::string& extra_json = "");

// Fresh manifest, then every stage in order.
void run_pipeline(const ExperimentConfig& cfg);

// Shared numeric formatting for all CSV emission ("%.12g"), so equal doubles
// are byte-identical across files.
std::string format_double(double v);

std::string tool_version();

}  // namespace al
