// anchorlens command-line driver. Thin shell over the C API: every command
// parses flags into a stage invocation; the library owns all behavior.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include <anchorlens/anchorlens.h>

namespace {

using nlohmann::json;

int finish(al_status st) {
  if (st != AL_OK) std::fprintf(stderr, "anchorlens: %s\n", al_last_error());
  return int(st);
}

int run_stage(const std::string& config, const char* stage, const json& extra = {}) {
  std::string ex = extra.empty() ? "" : extra.dump();
  return finish(al_run_stage(config.c_str(), stage, ex.empty() ? nullptr : ex.c_str()));
}

// Peek at the config's out_dir without invoking the library (used only for
// the corpus-existence check in `train pretrain`).
std::string peek_out_dir(const std::string& config_path) {
  std::ifstream in(config_path, std::ios::binary);
  if (!in.good()) return "";
  json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object()) return "";
  return j.value("out_dir", std::string("run"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anchorlens: data-contamination analysis lab for toy transformers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", []() { return std::string(al_version()); });

  std::string config;
  int ret = 0;

  // --- pipeline --------------------------------------------------------------
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage end to end");
  pipeline->add_option("config", config, "experiment config JSON")->required();
  pipeline->callback([&] {
    for (int i = 0;; ++i) {
      const char* stage = al_pipeline_stage(i);
      if (!stage) break;
      std::fprintf(stderr, "[stage] %s\n", stage);
      ret = run_stage(config, stage);
      if (ret != 0) return;
    }
  });

  // --- train -------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Data, pretraining, and reward fine-tuning");
  train->require_subcommand(1);
  auto* tr_pre = train->add_subcommand(
      "pretrain", "Pretrain on the corpus (generates the data stage first when absent)");
  tr_pre->add_option("config", config, "experiment config JSON")->required();
  tr_pre->callback([&] {
    std::string dir = peek_out_dir(config);
    if (dir.empty() || !std::filesystem::exists(std::filesystem::path(dir) / "corpus.jsonl")) {
      ret = run_stage(config, "data");
      if (ret != 0) return;
    }
    ret = run_stage(config, "pretrain");
  });
  auto* tr_rlvr = train->add_subcommand("rlvr", "Reward fine-tune the pretrained checkpoint");
  tr_rlvr->add_option("config", config, "experiment config JSON")->required();
  tr_rlvr->callback([&] { ret = run_stage(config, "rlvr"); });

  // --- probe -------------------------------------------------------------------
  auto* probe = app.add_subcommand("probe", "Run one analysis probe against a run directory");
  probe->require_subcommand(1);

  auto* p_ppl = probe->add_subcommand("ppl", "Perplexity scan across the checkpoint series");
  p_ppl->add_option("config", config)->required();
  p_ppl->callback([&] { ret = run_stage(config, "ppl"); });

  auto* p_partial = probe->add_subcommand("partial", "Partial-prompt completion scan");
  p_partial->add_option("config", config)->required();
  p_partial->callback([&] { ret = run_stage(config, "partial"); });

  int layer = 0;
  std::string component = "mlp";
  auto* p_patch = probe->add_subcommand("patch", "Path patching between base and tuned");
  p_patch->add_option("config", config)->required();
  auto* patch_layer = p_patch->add_option("--layer", layer, "single layer (default: sweep)");
  p_patch->add_option("--component", component, "mlp or attn")
      ->check(CLI::IsMember({"mlp", "attn"}));
  p_patch->callback([&] {
    json extra;
    if (patch_layer->count()) {
      extra["layer"] = layer;
      extra["component"] = component;
    }
    ret = run_stage(config, "patch", extra);
  });

  std::string target;
  uint64_t seed = 0;
  auto* p_jsd = probe->add_subcommand("jsd", "Counterfactual weight-replacement divergence");
  p_jsd->add_option("config", config)->required();
  auto* jsd_target = p_jsd->add_option("--target", target, "up_mean, gate_mean, or down_random")
                         ->check(CLI::IsMember({"up_mean", "gate_mean", "down_random"}));
  auto* jsd_seed = p_jsd->add_option("--seed", seed, "replacement seed override");
  p_jsd->callback([&] {
    json extra;
    if (jsd_target->count()) extra["target"] = target;
    if (jsd_seed->count()) extra["seed"] = seed;
    ret = run_stage(config, "jsd", extra);
  });

  int item = 0;
  std::string ckpt_rel;
  auto* p_lens = probe->add_subcommand("lens", "Per-layer top-10 token table for one item");
  p_lens->add_option("config", config)->required();
  p_lens->add_option("--item", item, "eval item id")->required();
  auto* lens_ckpt = p_lens->add_option("--ckpt", ckpt_rel,
                                       "checkpoint path relative to the run directory");
  p_lens->callback([&] {
    json extra;
    extra["item"] = item;
    if (lens_ckpt->count()) extra["ckpt"] = ckpt_rel;
    ret = run_stage(config, "lens", extra);
  });

  auto* p_auc = probe->add_subcommand("auc", "Linear-probe AUC by residual depth");
  p_auc->add_option("config", config)->required();
  p_auc->callback([&] { ret = run_stage(config, "auc"); });

  auto* p_nde = probe->add_subcommand("nde", "Trajectory vector-field fit and class separation");
  p_nde->add_option("config", config)->required();
  p_nde->callback([&] { ret = run_stage(config, "nde"); });

  // --- surgery --------------------------------------------------------------------
  auto* surgery = app.add_subcommand("surgery", "Weight ablations and key steering");
  surgery->require_subcommand(1);

  std::string plan;
  auto* s_ablate = surgery->add_subcommand("ablate", "Reset/keep MLP bands between checkpoints");
  s_ablate->add_option("config", config)->required();
  auto* ablate_plan = s_ablate->add_option(
      "--plan", plan,
      "anchor_reset, adapter_reset, random_reset, keep_only_anchor, keep_only_adapter, "
      "keep_both (default: all)");
  s_ablate->callback([&] {
    json extra;
    if (ablate_plan->count()) extra["plan"] = plan;
    ret = run_stage(config, "ablate", extra);
  });

  double lambda = 1.0;
  int top_k = 10;
  auto* s_neurons = surgery->add_subcommand("neurons", "Identify high-relevance MLP neurons");
  s_neurons->add_option("config", config)->required();
  auto* n_layer = s_neurons->add_option("--layer", layer, "single layer (default: all)");
  auto* n_lambda = s_neurons->add_option("--lambda", lambda, "overlap weight");
  auto* n_k = s_neurons->add_option("--k", top_k, "neurons per layer");
  s_neurons->callback([&] {
    json extra;
    if (n_layer->count()) extra["layer"] = layer;
    if (n_lambda->count()) extra["lambda"] = lambda;
    if (n_k->count()) extra["k"] = top_k;
    ret = run_stage(config, "neurons", extra);
  });

  double alpha = 1.0;
  auto* s_steer = surgery->add_subcommand("steer", "Scale selected key activations at inference");
  s_steer->add_option("config", config)->required();
  s_steer->add_option("--layer", layer, "layer to steer")->required();
  s_steer->add_option("--alpha", alpha, "key scale factor")->required();
  auto* st_lambda = s_steer->add_option("--lambda", lambda, "overlap weight");
  auto* st_k = s_steer->add_option("--k", top_k, "neurons per layer");
  s_steer->callback([&] {
    json extra;
    extra["layer"] = layer;
    extra["alpha"] = alpha;
    if (st_lambda->count()) extra["lambda"] = lambda;
    if (st_k->count()) extra["k"] = top_k;
    ret = run_stage(config, "steer", extra);
  });

  auto* s_grid = surgery->add_subcommand("grid", "Full layer-by-factor steering grid");
  s_grid->add_option("config", config)->required();
  s_grid->callback([&] { ret = run_stage(config, "grid"); });

  // --- report ----------------------------------------------------------------------
  auto* report = app.add_subcommand("report", "Summarize a run directory into report.md");
  report->add_option("config", config)->required();
  report->callback([&] { ret = run_stage(config, "report"); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // bad usage is a config error
  }
  return ret;
}
