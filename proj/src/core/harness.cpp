#include "core/harness.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "core/container.hpp"
#include "core/dynamics.hpp"
#include "core/model.hpp"
#include "core/probes.hpp"
#include "core/surgery.hpp"
#include "core/tasks.hpp"
#include "core/train.hpp"

namespace al {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string tool_version() { return "1.0.0"; }

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

// --- config parsing -----------------------------------------------------------

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void expect_keys(const json& obj, const std::string& where,
                 std::initializer_list<const char*> allowed) {
  check(obj.is_object(), "config: '" + where + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    check(known, "config: unknown field '" + where + "." + it.key() + "'", ErrKind::config);
  }
}

template <typename T>
void grab(const json& obj, const std::string& where, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    obj.at(key).get_to(out);
  } catch (const json::exception&) {
    fail_config("config: field '" + where + "." + key + "' has the wrong type");
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  check(config_version == 1, "config: unsupported config_version");
  check(!out_dir.empty(), "config: out_dir must be nonempty");
  model.validate();

  check(data.difficulty >= 0, "config: data.difficulty must be >= 0");
  check(data.n_pretrain_only > 0, "config: data.n_pretrain_only must be positive");
  check(data.n_eval_contaminated > 0, "config: data.n_eval_contaminated must be positive");
  check(data.n_eval_clean > 0, "config: data.n_eval_clean must be positive");
  check(data.corpus_docs > 0 && data.items_per_doc > 0, "config: corpus shape must be positive");
  check(data.contamination_rate >= 0.0 && data.contamination_rate <= 1.0,
        "config: data.contamination_rate must lie in [0,1]");
  check(data.contamination_copies >= 0, "config: data.contamination_copies must be >= 0");

  check(pretrain.steps >= 0, "config: pretrain.steps must be >= 0");
  check(pretrain.batch_size > 0, "config: pretrain.batch_size must be positive");
  check(pretrain.seq_len >= 2, "config: pretrain.seq_len must be >= 2");
  check(pretrain.learning_rate > 0.0, "config: pretrain.learning_rate must be positive");

  check(rlvr.steps >= 0, "config: rlvr.steps must be >= 0");
  check(rlvr.batch_size > 0, "config: rlvr.batch_size must be positive");
  check(rlvr.learning_rate > 0.0, "config: rlvr.learning_rate must be positive");
  reward_kind_from_string(rlvr.reward_mode);
  check(rlvr.max_new >= 1, "config: rlvr.max_new must be >= 1");
  for (size_t i = 0; i < rlvr.checkpoint_steps.size(); ++i) {
    check(rlvr.checkpoint_steps[i] >= 0 && rlvr.checkpoint_steps[i] <= rlvr.steps,
          "config: rlvr.checkpoint_steps outside [0, steps]");
    if (i) check(rlvr.checkpoint_steps[i] > rlvr.checkpoint_steps[i - 1],
                 "config: rlvr.checkpoint_steps must be strictly increasing");
  }

  check(!probes.partial_ratios.empty(), "config: probes.partial_ratios must be nonempty");
  for (double r : probes.partial_ratios)
    check(r > 0.0 && r <= 1.0, "config: probes.partial_ratios must lie in (0,1]");
  check(probes.jsd_max_items >= 0, "config: probes.jsd_max_items must be >= 0");
  bool has_one = false;
  for (double a : probes.steering_alphas) {
    check(std::isfinite(a) && a >= 0.0, "config: probes.steering_alphas must be >= 0");
    if (a == 1.0) has_one = true;
  }
  check(has_one, "config: probes.steering_alphas must include 1.0");
  check(probes.lambda >= 0.0, "config: probes.lambda must be >= 0");
  check(probes.top_k >= 1 && probes.top_k <= model.d_mlp, "config: probes.top_k out of range");
  check(probes.nde_width >= 1, "config: probes.nde_width must be positive");
  check(probes.nde_epochs >= 1, "config: probes.nde_epochs must be positive");
  check(probes.nde_learning_rate > 0.0, "config: probes.nde_learning_rate must be positive");
  check(probes.band_radius >= 0, "config: probes.band_radius must be >= 0");
  check(probes.pca_components >= 1, "config: probes.pca_components must be positive");
}

ExperimentConfig parse_config_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail_config(std::string("config: invalid JSON: ") + e.what());
  }
  expect_keys(j, "<root>",
              {"config_version", "root_seed", "out_dir", "model", "data", "pretrain", "rlvr",
               "probes"});
  check(j.contains("root_seed"), "config missing required field 'root_seed'");

  ExperimentConfig c;
  grab(j, "<root>", "config_version", c.config_version);
  grab(j, "<root>", "root_seed", c.root_seed);
  grab(j, "<root>", "out_dir", c.out_dir);

  if (j.contains("model")) {
    const json& m = j["model"];
    expect_keys(m, "model",
                {"n_layers", "d_hidden", "d_mlp", "n_heads", "vocab_size", "max_seq_len",
                 "norm_eps"});
    grab(m, "model", "n_layers", c.model.n_layers);
    grab(m, "model", "d_hidden", c.model.d_hidden);
    grab(m, "model", "d_mlp", c.model.d_mlp);
    grab(m, "model", "n_heads", c.model.n_heads);
    grab(m, "model", "vocab_size", c.model.vocab_size);
    grab(m, "model", "max_seq_len", c.model.max_seq_len);
    grab(m, "model", "norm_eps", c.model.norm_eps);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    expect_keys(d, "data",
                {"difficulty", "n_pretrain_only", "n_eval_contaminated", "n_eval_clean",
                 "corpus_docs", "items_per_doc", "contamination_rate", "contamination_copies",
                 "contamination_jitter"});
    grab(d, "data", "difficulty", c.data.difficulty);
    grab(d, "data", "n_pretrain_only", c.data.n_pretrain_only);
    grab(d, "data", "n_eval_contaminated", c.data.n_eval_contaminated);
    grab(d, "data", "n_eval_clean", c.data.n_eval_clean);
    grab(d, "data", "corpus_docs", c.data.corpus_docs);
    grab(d, "data", "items_per_doc", c.data.items_per_doc);
    grab(d, "data", "contamination_rate", c.data.contamination_rate);
    grab(d, "data", "contamination_copies", c.data.contamination_copies);
    grab(d, "data", "contamination_jitter", c.data.contamination_jitter);
  }
  if (j.contains("pretrain")) {
    const json& p = j["pretrain"];
    expect_keys(p, "pretrain",
                {"steps", "batch_size", "seq_len", "align_windows", "learning_rate", "momentum",
                 "clip_norm"});
    grab(p, "pretrain", "steps", c.pretrain.steps);
    grab(p, "pretrain", "batch_size", c.pretrain.batch_size);
    grab(p, "pretrain", "seq_len", c.pretrain.seq_len);
    grab(p, "pretrain", "align_windows", c.pretrain.align_windows);
    grab(p, "pretrain", "learning_rate", c.pretrain.learning_rate);
    grab(p, "pretrain", "momentum", c.pretrain.momentum);
    grab(p, "pretrain", "clip_norm", c.pretrain.clip_norm);
  }
  if (j.contains("rlvr")) {
    const json& r = j["rlvr"];
    expect_keys(r, "rlvr",
                {"steps", "batch_size", "learning_rate", "reward_mode", "rollout_temperature",
                 "kl_coeff", "max_new", "checkpoint_steps", "baseline_ema", "sigma_floor",
                 "momentum", "clip_norm"});
    grab(r, "rlvr", "steps", c.rlvr.steps);
    grab(r, "rlvr", "batch_size", c.rlvr.batch_size);
    grab(r, "rlvr", "learning_rate", c.rlvr.learning_rate);
    grab(r, "rlvr", "reward_mode", c.rlvr.reward_mode);
    grab(r, "rlvr", "rollout_temperature", c.rlvr.rollout_temperature);
    grab(r, "rlvr", "kl_coeff", c.rlvr.kl_coeff);
    grab(r, "rlvr", "max_new", c.rlvr.max_new);
    grab(r, "rlvr", "checkpoint_steps", c.rlvr.checkpoint_steps);
    grab(r, "rlvr", "baseline_ema", c.rlvr.baseline_ema);
    grab(r, "rlvr", "sigma_floor", c.rlvr.sigma_floor);
    grab(r, "rlvr", "momentum", c.rlvr.momentum);
    grab(r, "rlvr", "clip_norm", c.rlvr.clip_norm);
  }
  if (j.contains("probes")) {
    const json& p = j["probes"];
    expect_keys(p, "probes",
                {"partial_ratios", "partial_max_items", "jsd_max_items", "jsd_per_column",
                 "steering_alphas", "lambda", "top_k", "nde_width", "nde_epochs",
                 "nde_learning_rate", "band_radius", "pca_components"});
    grab(p, "probes", "partial_ratios", c.probes.partial_ratios);
    grab(p, "probes", "partial_max_items", c.probes.partial_max_items);
    grab(p, "probes", "jsd_max_items", c.probes.jsd_max_items);
    grab(p, "probes", "jsd_per_column", c.probes.jsd_per_column);
    grab(p, "probes", "steering_alphas", c.probes.steering_alphas);
    grab(p, "probes", "lambda", c.probes.lambda);
    grab(p, "probes", "top_k", c.probes.top_k);
    grab(p, "probes", "nde_width", c.probes.nde_width);
    grab(p, "probes", "nde_epochs", c.probes.nde_epochs);
    grab(p, "probes", "nde_learning_rate", c.probes.nde_learning_rate);
    grab(p, "probes", "band_radius", c.probes.band_radius);
    grab(p, "probes", "pca_components", c.probes.pca_components);
  }
  c.validate();
  return c;
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["config_version"] = c.config_version;
  j["root_seed"] = c.root_seed;
  j["out_dir"] = c.out_dir;
  j["model"] = {{"n_layers", c.model.n_layers},       {"d_hidden", c.model.d_hidden},
                {"d_mlp", c.model.d_mlp},             {"n_heads", c.model.n_heads},
                {"vocab_size", c.model.vocab_size},   {"max_seq_len", c.model.max_seq_len},
                {"norm_eps", c.model.norm_eps}};
  j["data"] = {{"difficulty", c.data.difficulty},
               {"n_pretrain_only", c.data.n_pretrain_only},
               {"n_eval_contaminated", c.data.n_eval_contaminated},
               {"n_eval_clean", c.data.n_eval_clean},
               {"corpus_docs", c.data.corpus_docs},
               {"items_per_doc", c.data.items_per_doc},
               {"contamination_rate", c.data.contamination_rate},
               {"contamination_copies", c.data.contamination_copies},
               {"contamination_jitter", c.data.contamination_jitter}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"seq_len", c.pretrain.seq_len},
                   {"align_windows", c.pretrain.align_windows},
                   {"learning_rate", c.pretrain.learning_rate},
                   {"momentum", c.pretrain.momentum},
                   {"clip_norm", c.pretrain.clip_norm}};
  j["rlvr"] = {{"steps", c.rlvr.steps},
               {"batch_size", c.rlvr.batch_size},
               {"learning_rate", c.rlvr.learning_rate},
               {"reward_mode", c.rlvr.reward_mode},
               {"rollout_temperature", c.rlvr.rollout_temperature},
               {"kl_coeff", c.rlvr.kl_coeff},
               {"max_new", c.rlvr.max_new},
               {"checkpoint_steps", c.rlvr.checkpoint_steps},
               {"baseline_ema", c.rlvr.baseline_ema},
               {"sigma_floor", c.rlvr.sigma_floor},
               {"momentum", c.rlvr.momentum},
               {"clip_norm", c.rlvr.clip_norm}};
  j["probes"] = {{"partial_ratios", c.probes.partial_ratios},
                 {"partial_max_items", c.probes.partial_max_items},
                 {"jsd_max_items", c.probes.jsd_max_items},
                 {"jsd_per_column", c.probes.jsd_per_column},
                 {"steering_alphas", c.probes.steering_alphas},
                 {"lambda", c.probes.lambda},
                 {"top_k", c.probes.top_k},
                 {"nde_width", c.probes.nde_width},
                 {"nde_epochs", c.probes.nde_epochs},
                 {"nde_learning_rate", c.probes.nde_learning_rate},
                 {"band_radius", c.probes.band_radius},
                 {"pca_components", c.probes.pca_components}};
  return j.dump(2) + "\n";
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "config: cannot open '" + path + "'", ErrKind::config);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_json(ss.str());
}

// --- manifest -----------------------------------------------------------------

RunManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "manifest: cannot open '" + path + "'", ErrKind::io);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail_io(std::string("manifest: invalid JSON: ") + e.what());
  }
  RunManifest m;
  m.tool_version = j.value("tool_version", "");
  m.config_hash = j.value("config_hash", "");
  m.failed_stage = j.value("failed_stage", "");
  m.error = j.value("error", "");
  for (const json& s : j.value("stages", json::array())) {
    StageRecord r;
    r.name = s.value("name", "");
    r.wall_ms = s.value("wall_ms", 0.0);
    for (const json& o : s.value("outputs", json::array()))
      r.outputs.emplace_back(o.value("path", ""), o.value("hash", ""));
    m.stages.push_back(std::move(r));
  }
  return m;
}

void save_manifest(const std::string& path, const RunManifest& m) {
  json j;
  j["tool_version"] = m.tool_version;
  j["config_hash"] = m.config_hash;
  j["failed_stage"] = m.failed_stage;
  j["error"] = m.error;
  json stages = json::array();
  for (const StageRecord& r : m.stages) {
    json outputs = json::array();
    for (const auto& [p, h] : r.outputs) outputs.push_back({{"path", p}, {"hash", h}});
    stages.push_back({{"name", r.name}, {"wall_ms", r.wall_ms}, {"outputs", outputs}});
  }
  j["stages"] = stages;
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "manifest: cannot write '" + path + "'", ErrKind::io);
  out << j.dump(2) << "\n";
  check(out.good(), "manifest: write failed for '" + path + "'", ErrKind::io);
}

// --- stage plumbing ------------------------------------------------------------

namespace {

struct StageCtx {
  const ExperimentConfig& cfg;
  fs::path dir;
  json extra;
  std::vector<std::pair<std::string, std::string>> outputs;

  void write_text(const std::string& rel, const std::string& content) {
    fs::path p = dir / rel;
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    check(out.good(), "cannot write '" + p.string() + "'", ErrKind::io);
    out << content;
    out.flush();
    check(out.good(), "write failed for '" + p.string() + "'", ErrKind::io);
  }

  // Write + record in the stage's manifest entry.
  void emit(const std::string& rel, const std::string& content) {
    write_text(rel, content);
    outputs.emplace_back(rel, hex64(fnv1a64(content)));
  }

  // Record a file a module serializer already wrote.
  void record_file(const std::string& rel) {
    outputs.emplace_back(rel, hex64(hash_file((dir / rel).string())));
  }

  std::string path(const std::string& rel) const { return (dir / rel).string(); }

  void require_file(const std::string& rel, const std::string& produced_by) const {
    if (!fs::exists(dir / rel))
      fail_stage("missing '" + rel + "' in " + dir.string() + "; run the " + produced_by +
                 " stage first");
  }

  Checkpoint ckpt(const std::string& rel, const std::string& produced_by) const {
    require_file(rel, produced_by);
    return load_checkpoint(path(rel));
  }

  EvalSet eval(const std::string& produced_by = "data") const {
    require_file("eval_set.jsonl", produced_by);
    return load_eval_set(path("eval_set.jsonl"));
  }
};

std::string comp_name(Component c) { return c == Component::mlp ? "mlp" : "attn"; }

Component comp_from_string(const std::string& s) {
  if (s == "mlp") return Component::mlp;
  if (s == "attn") return Component::attn;
  fail_config("unknown component '" + s + "' (expected mlp or attn)");
}

std::string join_layers(const std::vector<int>& layers) {
  std::string out;
  for (size_t i = 0; i < layers.size(); ++i) {
    if (i) out += "+";
    out += std::to_string(layers[i]);
  }
  return out.empty() ? "-" : out;
}

void emit_plot_spec(StageCtx& ctx, const std::string& figure, json spec) {
  spec["figure"] = figure;
  spec["data"] = figure + ".csv";
  ctx.emit(figure + ".plot.json", spec.dump(2) + "\n");
}

// Split one line of our own CSV emission (no quoting anywhere in the tree).
std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

std::vector<std::vector<std::string>> read_csv(const std::string& path,
                                               const std::string& expect_header) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot open '" + path + "'", ErrKind::io);
  std::string line;
  check(bool(std::getline(in, line)), "empty CSV '" + path + "'", ErrKind::io);
  check(line == expect_header, "unexpected header in '" + path + "'", ErrKind::io);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(split_csv(line));
  return rows;
}

// Items of a split in id order (the stored order).
std::vector<const TaskItem*> split_items(const EvalSet& s, Split sp, int cap = 0) {
  std::vector<const TaskItem*> items = s.in_split(sp);
  if (cap > 0 && int(items.size()) > cap) items.resize(cap);
  return items;
}

// Labeled Leakage/Stable items within the contaminated split, id order.
std::vector<const TaskItem*> labeled_items(const EvalSet& s, int* n_leak = nullptr,
                                           int* n_stable = nullptr) {
  std::vector<const TaskItem*> out;
  int leak = 0, stable = 0;
  for (const TaskItem* it : s.in_split(Split::eval_contaminated)) {
    auto f = s.class_labels.find(it->id);
    if (f == s.class_labels.end()) continue;
    if (f->second == ClassLabel::Leakage) {
      out.push_back(it);
      ++leak;
    } else if (f->second == ClassLabel::Stable) {
      out.push_back(it);
      ++stable;
    }
  }
  if (n_leak) *n_leak = leak;
  if (n_stable) *n_stable = stable;
  return out;
}

// --- individual stages ----------------------------------------------------------

void stage_data(StageCtx& ctx) {
  const auto& d = ctx.cfg.data;
  const uint64_t root = ctx.cfg.root_seed;
  int n_total = d.n_pretrain_only + d.n_eval_contaminated + d.n_eval_clean;
  EvalSet s = gen_tasks(derive_seed(root, "gen_tasks"), n_total, d.difficulty);
  assign_splits(s, d.n_pretrain_only, d.n_eval_contaminated, d.n_eval_clean,
                derive_seed(root, "assign_splits"));
  Corpus c = build_corpus(s, d.corpus_docs, d.items_per_doc, derive_seed(root, "build_corpus"));
  if (d.contamination_rate > 0.0) {
    uint64_t plant_seed = derive_seed(root, "plant");
    for (int copy = 0; copy < d.contamination_copies; ++copy)
      plant_contamination(c, s, d.contamination_rate,
                          derive_seed(plant_seed, std::to_string(copy)), d.contamination_jitter);
  }
  verify_corpus_hygiene(c, s);
  save_eval_set(ctx.path("eval_set.jsonl"), s);
  ctx.record_file("eval_set.jsonl");
  save_corpus(ctx.path("corpus.jsonl"), ctx.path("corpus_manifest.jsonl"), c);
  ctx.record_file("corpus.jsonl");
  ctx.record_file("corpus_manifest.jsonl");
}

void stage_pretrain(StageCtx& ctx) {
  ctx.require_file("corpus.jsonl", "data");
  Corpus c = load_corpus(ctx.path("corpus.jsonl"), ctx.path("corpus_manifest.jsonl"));
  const auto& p = ctx.cfg.pretrain;
  TrainConfig tc;
  tc.steps = p.steps;
  tc.batch_size = p.batch_size;
  tc.seq_len = p.seq_len;
  tc.align_windows = p.align_windows;
  tc.learning_rate = p.learning_rate;
  tc.momentum = p.momentum;
  tc.clip_norm = p.clip_norm;
  tc.seed = derive_seed(ctx.cfg.root_seed, "pretrain");
  std::string log_csv = "step,loss\n";
  Checkpoint ck = pretrain(c, ctx.cfg.model, tc, [&](int step, double loss) {
    log_csv += std::to_string(step) + "," + format_double(loss) + "\n";
  });
  fs::create_directories(ctx.dir / "checkpoints");
  save_checkpoint(ctx.path("checkpoints/base.alck"), ck);
  ctx.record_file("checkpoints/base.alck");
  ctx.emit("logs/pretrain_log.csv", log_csv);
}

void stage_rlvr(StageCtx& ctx) {
  Checkpoint base = ctx.ckpt("checkpoints/base.alck", "pretrain");
  EvalSet s = ctx.eval();
  const auto& r = ctx.cfg.rlvr;
  TrainConfig tc;
  tc.steps = r.steps;
  tc.batch_size = r.batch_size;
  tc.learning_rate = r.learning_rate;
  tc.momentum = r.momentum;
  tc.clip_norm = r.clip_norm;
  tc.max_new = r.max_new;
  tc.rollout_temperature = r.rollout_temperature;
  tc.kl_coeff = r.kl_coeff;
  tc.baseline_ema = r.baseline_ema;
  tc.sigma_floor = r.sigma_floor;
  tc.checkpoint_steps = r.checkpoint_steps;
  tc.seed = derive_seed(ctx.cfg.root_seed, "rlvr");
  RewardMode mode;
  mode.kind = reward_kind_from_string(r.reward_mode);
  mode.seed = derive_seed(ctx.cfg.root_seed, "reward_random");
  std::string log_csv = "step,mean_reward\n";
  auto series = spurious_rlvr(base, s, mode, tc, [&](int step, double reward) {
    log_csv += std::to_string(step) + "," + format_double(reward) + "\n";
  });
  fs::create_directories(ctx.dir / "checkpoints");
  for (const auto& [step, ck] : series) {
    std::string rel = "checkpoints/rlvr-step-" + std::to_string(step) + ".alck";
    save_checkpoint(ctx.path(rel), ck);
    ctx.record_file(rel);
  }
  save_checkpoint(ctx.path("checkpoints/tuned.alck"), series.back().second);
  ctx.record_file("checkpoints/tuned.alck");
  ctx.emit("logs/rlvr_log.csv", log_csv);
}

void stage_classify(StageCtx& ctx) {
  Checkpoint base = ctx.ckpt("checkpoints/base.alck", "pretrain");
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  std::vector<const TaskItem*> items;
  for (Split sp : {Split::eval_contaminated, Split::eval_clean})
    for (const TaskItem* it : s.in_split(sp)) items.push_back(it);
  check(!items.empty(), "classify: no eval items");
  std::map<int, bool> base_ok = correctness_map(base, items);
  std::map<int, bool> tuned_ok = correctness_map(tuned, items);
  s.class_labels = classify_samples(base_ok, tuned_ok);
  save_eval_set(ctx.path("eval_set.jsonl"), s);
  ctx.record_file("eval_set.jsonl");

  std::map<std::pair<std::string, std::string>, int> counts;
  for (const TaskItem* it : items)
    counts[{to_string(it->split), to_string(s.class_labels.at(it->id))}]++;
  std::string csv = "split,label,count\n";
  for (const auto& [key, n] : counts)
    csv += key.first + "," + key.second + "," + std::to_string(n) + "\n";
  ctx.emit("classes.csv", csv);
}

void stage_ppl(StageCtx& ctx) {
  EvalSet s = ctx.eval();
  std::vector<std::pair<int, std::string>> found;
  if (fs::exists(ctx.dir / "checkpoints"))
    for (const auto& entry : fs::directory_iterator(ctx.dir / "checkpoints")) {
      std::string name = entry.path().filename().string();
      const std::string prefix = "rlvr-step-", suffix = ".alck";
      if (name.size() > prefix.size() + suffix.size() && name.rfind(prefix, 0) == 0 &&
          name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
        found.emplace_back(
            std::stoi(name.substr(prefix.size(), name.size() - prefix.size() - suffix.size())),
            name);
    }
  if (found.empty()) fail_stage("ppl: no rlvr checkpoints found; run the rlvr stage first");
  std::sort(found.begin(), found.end());
  std::vector<Checkpoint> series;
  series.reserve(found.size());
  std::vector<CheckpointRef> refs;
  for (const auto& [step, name] : found)
    series.push_back(load_checkpoint(ctx.path("checkpoints/" + name)));
  for (size_t i = 0; i < found.size(); ++i) refs.push_back({found[i].first, &series[i]});

  ParadoxScan scan = paradox_scan(refs, s);

  std::string means = "step,label,split,mode,mean_ppl,n_items\n";
  for (const auto& r : scan.means)
    means += std::to_string(r.step) + "," + r.label + "," + r.split + "," + r.mode + "," +
             format_double(r.mean_ppl) + "," + std::to_string(r.n_items) + "\n";
  ctx.emit("fig5_ppx.csv", means);

  std::string records = "item_id,split,mode,ckpt_label,step,ppl\n";
  for (const auto& r : scan.records)
    records += std::to_string(r.item_id) + "," + r.split + "," + r.mode + "," + r.ckpt_label +
               "," + std::to_string(r.step) + "," + format_double(r.value) + "\n";
  ctx.emit("ppx_records.csv", records);

  std::string summary = "split,answer_first,answer_last,full_first,full_last,divergence\n";
  for (const auto& [split, e] : scan.summary)
    summary += split + "," + format_double(e.answer_first) + "," + format_double(e.answer_last) +
               "," + format_double(e.full_first) + "," + format_double(e.full_last) + "," +
               (e.divergence ? "1" : "0") + "\n";
  ctx.emit("ppx_summary.csv", summary);

  emit_plot_spec(ctx, "fig5_ppx",
                 {{"title", "Mean perplexity across fine-tuning checkpoints"},
                  {"kind", "line"},
                  {"x", "step"},
                  {"y", json::array({"mean_ppl"})},
                  {"series", json::array({"split", "mode"})},
                  {"log_y", true}});
}

void stage_partial(StageCtx& ctx) {
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  auto rows = partial_prompt_eval(tuned, s, ctx.cfg.probes.partial_ratios,
                                  ctx.cfg.probes.partial_max_items);
  std::string csv = "ratio,group,mean_rouge,completion_accuracy,n_items\n";
  for (const auto& r : rows)
    csv += format_double(r.ratio) + "," + r.group + "," + format_double(r.mean_rouge) + "," +
           format_double(r.completion_accuracy) + "," + std::to_string(r.n_items) + "\n";
  ctx.emit("partial.csv", csv);
}

void stage_patch(StageCtx& ctx) {
  Checkpoint base = ctx.ckpt("checkpoints/base.alck", "pretrain");
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  std::vector<const TaskItem*> items = split_items(s, Split::eval_contaminated);
  check(!items.empty(), "patch: no eval_contaminated items");

  auto row_csv = [](const PatchResult& r) {
    return std::to_string(r.layer) + "," + comp_name(r.component) + "," +
           format_double(r.recovery_accuracy) + "," + format_double(r.tuned_match_rate) + "," +
           format_double(r.tuned_accuracy) + "," + format_double(r.base_accuracy) + "," +
           std::to_string(r.n_items) + "\n";
  };
  const std::string header =
      "layer,component,recovery_accuracy,tuned_match_rate,tuned_accuracy,base_accuracy,n_items\n";

  if (ctx.extra.contains("layer")) {
    int layer = ctx.extra.at("layer").get<int>();
    Component comp = comp_from_string(ctx.extra.value("component", "mlp"));
    PatchResult r = path_patch(base, tuned, layer, comp, items);
    ctx.emit("patch_single.csv", header + row_csv(r));
    return;
  }

  std::string csv = header;
  for (const PatchResult& r : path_patch_sweep(base, tuned, items)) csv += row_csv(r);
  ctx.emit("fig6_patch.csv", csv);
  emit_plot_spec(ctx, "fig6_patch",
                 {{"title", "Path-patch recovery by layer"},
                  {"kind", "line"},
                  {"x", "layer"},
                  {"y", json::array({"recovery_accuracy"})},
                  {"series", json::array({"component"})}});
}

void stage_jsd(StageCtx& ctx) {
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  std::vector<const TaskItem*> items =
      split_items(s, Split::eval_contaminated, ctx.cfg.probes.jsd_max_items);
  check(!items.empty(), "jsd: no eval_contaminated items");

  std::vector<CfTarget> targets;
  if (ctx.extra.contains("target"))
    targets.push_back(cf_target_from_string(ctx.extra.at("target").get<std::string>()));
  else
    targets = {CfTarget::up_mean, CfTarget::gate_mean, CfTarget::down_random};
  uint64_t seed = ctx.extra.contains("seed") ? ctx.extra.at("seed").get<uint64_t>()
                                             : derive_seed(ctx.cfg.root_seed, "cf_jsd");

  auto records =
      counterfactual_jsd_sweep(tuned, targets, items, seed, ctx.cfg.probes.jsd_per_column);
  std::string csv = "layer,target,mean_jsd,n_items,rng_seed\n";
  for (const auto& r : records)
    csv += std::to_string(r.layer) + "," + r.target + "," + format_double(r.mean_jsd) + "," +
           std::to_string(r.n_items) + "," + std::to_string(r.rng_seed) + "\n";
  ctx.emit("fig7_jsd.csv", csv);
  emit_plot_spec(ctx, "fig7_jsd",
                 {{"title", "Counterfactual weight-replacement divergence by layer"},
                  {"kind", "line"},
                  {"x", "layer"},
                  {"y", json::array({"mean_jsd"})},
                  {"series", json::array({"target"})}});
}

void stage_lens(StageCtx& ctx) {
  check(ctx.extra.contains("item"), "lens: --item is required", ErrKind::config);
  int item_id = ctx.extra.at("item").get<int>();
  std::string ckpt_rel = ctx.extra.value("ckpt", std::string("checkpoints/tuned.alck"));
  Checkpoint ck = ctx.ckpt(ckpt_rel, "rlvr");
  EvalSet s = ctx.eval();
  const TaskItem* it = s.find(item_id);
  check(it != nullptr, "lens: item " + std::to_string(item_id) + " not in the eval set");

  std::vector<int> seq;
  seq.push_back(tok::BOS);
  for (int t : tok::encode(it->question + it->answer)) seq.push_back(t);
  ActivationTrace tr;
  forward(ck, seq, nullptr, &tr, {/*logits_last_only=*/true});

  auto token_text = [&](int t) -> std::string {
    if (t == tok::PAD) return "PAD";
    if (t == tok::BOS) return "BOS";
    if (t <= tok::SENTINEL) return std::string(1, tok::decode_char(t));
    return "id" + std::to_string(t);
  };

  const int first_pred = int(it->question.size());
  const int n_pred = int(it->answer.size());
  const int V = ck.config.vocab_size;
  std::string csv = "state_idx,position,rank,token_id,token,prob\n";
  for (int state = 0; state <= ck.config.n_layers; ++state) {
    for (int p = 0; p < n_pred; ++p) {
      std::vector<double> probs =
          logit_lens_probs(ck, tr.residual_pre[state][first_pred + p]);
      std::vector<int> order(V);
      for (int t = 0; t < V; ++t) order[t] = t;
      int top = std::min(10, V);
      std::partial_sort(order.begin(), order.begin() + top, order.end(), [&](int a, int b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;
      });
      for (int r = 0; r < top; ++r)
        csv += std::to_string(state) + "," + std::to_string(first_pred + p) + "," +
               std::to_string(r + 1) + "," + std::to_string(order[r]) + "," +
               token_text(order[r]) + "," + format_double(probs[order[r]]) + "\n";
    }
  }
  ctx.emit("lens_item_" + std::to_string(item_id) + ".csv", csv);
}

// Shared by nde/auc: trajectories of the labeled contaminated items.
bool try_trajectories(const Checkpoint& tuned, const EvalSet& s, int min_total,
                      int min_per_class, TrajectorySet* out) {
  int n_leak = 0, n_stable = 0;
  std::vector<const TaskItem*> items = labeled_items(s, &n_leak, &n_stable);
  if (int(items.size()) < min_total || n_leak < min_per_class || n_stable < min_per_class)
    return false;
  *out = extract_trajectories(tuned, items, s.class_labels);
  return true;
}

void stage_nde(StageCtx& ctx) {
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  check(!s.class_labels.empty(), "nde: eval set has no class labels; run the classify stage first",
        ErrKind::stage);

  const std::string traj_header = [&] {
    std::string h = "item_id,cls,state_idx";
    for (int c = 0; c < ctx.cfg.probes.pca_components; ++c) h += ",pc" + std::to_string(c + 1);
    return h + "\n";
  }();
  const std::string nde_header = "state_idx,t,separation_force,velocity_difference\n";

  TrajectorySet traj;
  if (!try_trajectories(tuned, s, 10, 1, &traj)) {
    ctx.emit("fig8_traj.csv", traj_header);
    ctx.emit("fig9_nde.csv", nde_header);
    emit_plot_spec(ctx, "fig8_traj", {{"kind", "path"}, {"insufficient_data", true}});
    emit_plot_spec(ctx, "fig9_nde", {{"kind", "line"}, {"insufficient_data", true}});
    return;
  }

  std::string log_csv = "epoch,mse\n";
  VectorField field = fit_field(traj, ctx.cfg.probes.nde_width, ctx.cfg.probes.nde_epochs,
                                ctx.cfg.probes.nde_learning_rate,
                                derive_seed(ctx.cfg.root_seed, "nde"),
                                [&](int epoch, double mse) {
                                  log_csv += std::to_string(epoch) + "," + format_double(mse) +
                                             "\n";
                                });
  ctx.emit("logs/nde_log.csv", log_csv);
  save_field(ctx.path("field.alck"), field);
  ctx.record_file("field.alck");

  auto leak_mean = class_mean_trajectory(traj, 1);
  auto stable_mean = class_mean_trajectory(traj, 0);
  auto force = separation_force(field, leak_mean, stable_mean);
  auto vel = velocity_difference(field, leak_mean, stable_mean);
  const int L = traj.n_states - 1;
  std::string nde_csv = nde_header;
  for (int i = 0; i < traj.n_states; ++i) {
    double t = L > 0 ? double(i) / double(L) : 0.0;
    nde_csv += std::to_string(i) + "," + format_double(t) + "," + format_double(force[i]) + "," +
               format_double(vel[i]) + "\n";
  }
  ctx.emit("fig9_nde.csv", nde_csv);
  emit_plot_spec(ctx, "fig9_nde",
                 {{"title", "Field separation between classes"},
                  {"kind", "line"},
                  {"x", "t"},
                  {"y", json::array({"separation_force", "velocity_difference"})},
                  {"final_loss", field.final_loss}});

  PcaResult pca = pca_project(traj, ctx.cfg.probes.pca_components);
  std::string traj_csv = traj_header;
  for (size_t i = 0; i < pca.item_paths.size(); ++i)
    for (int state = 0; state < pca.item_paths[i].rows; ++state) {
      traj_csv += std::to_string(pca.item_ids[i]) + "," + std::to_string(pca.item_cls[i]) + "," +
                  std::to_string(state);
      for (int c = 0; c < pca.item_paths[i].cols; ++c)
        traj_csv += "," + format_double(pca.item_paths[i][state][c]);
      traj_csv += "\n";
    }
  ctx.emit("fig8_traj.csv", traj_csv);
  json explained = json::array();
  for (double e : pca.explained_ratio) explained.push_back(e);
  emit_plot_spec(ctx, "fig8_traj",
                 {{"title", "Residual trajectories, pooled principal components"},
                  {"kind", "path"},
                  {"x", "pc1"},
                  {"y", json::array({"pc2"})},
                  {"series", json::array({"cls"})},
                  {"group", "item_id"},
                  {"explained_ratio", explained}});
}

void stage_auc(StageCtx& ctx) {
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  check(!s.class_labels.empty(), "auc: eval set has no class labels; run the classify stage first",
        ErrKind::stage);
  const std::string header = "state_idx,auc,n_items\n";
  TrajectorySet traj;
  if (!try_trajectories(tuned, s, 4, 2, &traj)) {
    ctx.emit("fig10_auc.csv", header);
    emit_plot_spec(ctx, "fig10_auc", {{"kind", "line"}, {"insufficient_data", true}});
    return;
  }
  std::vector<double> aucs = linear_probe(traj);
  std::string csv = header;
  for (size_t i = 0; i < aucs.size(); ++i)
    csv += std::to_string(i) + "," + format_double(aucs[i]) + "," +
           std::to_string(int(traj.items.size())) + "\n";
  ctx.emit("fig10_auc.csv", csv);
  emit_plot_spec(ctx, "fig10_auc",
                 {{"title", "Class separability by residual depth"},
                  {"kind", "line"},
                  {"x", "state_idx"},
                  {"y", json::array({"auc"})}});
}

std::vector<int> band_around(int center, int radius, int n_layers) {
  std::vector<int> band;
  for (int l = std::max(0, center - radius); l <= std::min(n_layers - 1, center + radius); ++l)
    band.push_back(l);
  return band;
}

void stage_ablate(StageCtx& ctx) {
  Checkpoint base = ctx.ckpt("checkpoints/base.alck", "pretrain");
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  const int L = ctx.cfg.model.n_layers;
  const int radius = ctx.cfg.probes.band_radius;

  // Anchor band: argmax of MLP path-patch recovery.
  ctx.require_file("fig6_patch.csv", "patch");
  auto patch_rows = read_csv(
      ctx.path("fig6_patch.csv"),
      "layer,component,recovery_accuracy,tuned_match_rate,tuned_accuracy,base_accuracy,n_items");
  int anchor_center = -1;
  double best_rec = -1.0;
  for (const auto& r : patch_rows) {
    if (r.at(1) != "mlp") continue;
    double rec = std::stod(r.at(2));
    int layer = std::stoi(r.at(0));
    if (rec > best_rec || (rec == best_rec && layer < anchor_center)) {
      best_rec = rec;
      anchor_center = layer;
    }
  }
  check(anchor_center >= 0, "ablate: no mlp rows in fig6_patch.csv", ErrKind::stage);

  // Adapter band: argmax of the mean up/gate counterfactual divergence.
  ctx.require_file("fig7_jsd.csv", "jsd");
  auto jsd_rows = read_csv(ctx.path("fig7_jsd.csv"), "layer,target,mean_jsd,n_items,rng_seed");
  std::map<int, std::pair<double, int>> by_layer;  // sum, count
  for (const auto& r : jsd_rows) {
    if (r.at(1) != "up_mean" && r.at(1) != "gate_mean") continue;
    auto& acc = by_layer[std::stoi(r.at(0))];
    acc.first += std::stod(r.at(2));
    acc.second += 1;
  }
  check(!by_layer.empty(), "ablate: no up_mean/gate_mean rows in fig7_jsd.csv", ErrKind::stage);
  int adapter_center = -1;
  double best_jsd = -1.0;
  for (const auto& [layer, acc] : by_layer) {
    double mean = acc.first / acc.second;
    if (mean > best_jsd) {
      best_jsd = mean;
      adapter_center = layer;
    }
  }

  std::vector<int> anchor_band = band_around(anchor_center, radius, L);
  std::vector<int> adapter_band = band_around(adapter_center, radius, L);

  // Random contiguous band of the anchor band's size for the asymmetry control.
  const int band_size = int(anchor_band.size());
  Rng rng(derive_seed(ctx.cfg.root_seed, "random_band"));
  int start = int(rng.below(uint64_t(L - band_size + 1)));
  for (int tries = 0; tries < 16 && L - band_size + 1 > 1 && start == anchor_band.front();
       ++tries)
    start = int(rng.below(uint64_t(L - band_size + 1)));
  std::vector<int> random_band;
  for (int l = start; l < start + band_size; ++l) random_band.push_back(l);

  json bands = {{"anchor_center", anchor_center},
                {"anchor_band", anchor_band},
                {"adapter_center", adapter_center},
                {"adapter_band", adapter_band},
                {"random_band", random_band},
                {"band_radius", radius}};
  ctx.emit("bands.json", bands.dump(2) + "\n");

  struct NamedPlan {
    std::string name;
    AblationPlan plan;
  };
  std::vector<NamedPlan> plans;
  for (const char* name :
       {"anchor_reset", "adapter_reset", "keep_only_anchor", "keep_only_adapter", "keep_both"})
    plans.push_back({name, make_plan(name, anchor_band, adapter_band)});
  AblationPlan random_reset;
  random_reset.name = "random_reset";
  random_reset.family = AblationPlan::Family::reset;
  random_reset.reset_layers = random_band;
  plans.push_back({"random_reset", random_reset});

  if (ctx.extra.contains("plan")) {
    std::string only = ctx.extra.at("plan").get<std::string>();
    std::vector<NamedPlan> filtered;
    for (auto& p : plans)
      if (p.name == only) filtered.push_back(std::move(p));
    check(!filtered.empty(), "ablate: unknown plan '" + only + "'", ErrKind::config);
    plans = std::move(filtered);
  }

  auto groups = eval_groups(s);
  std::map<std::string, double> baseline;
  {
    std::map<int, bool> ok;
    for (auto& [name, items] : groups) {
      int hit = 0;
      for (const TaskItem* it : items) {
        auto f = ok.find(it->id);
        if (f == ok.end()) f = ok.emplace(it->id, greedy_answer(tuned, *it) == it->answer).first;
        if (f->second) ++hit;
      }
      baseline[name] = double(hit) / double(items.size());
    }
  }

  std::string csv = "plan,layers,group,accuracy,delta,n_items\n";
  for (const auto& np : plans) {
    Checkpoint ablated = apply_ablation(tuned, base, np.plan);
    const std::vector<int>& touched = np.plan.family == AblationPlan::Family::reset
                                          ? np.plan.reset_layers
                                          : np.plan.keep_layers;
    std::map<int, bool> ok;
    for (auto& [name, items] : groups) {
      int hit = 0;
      for (const TaskItem* it : items) {
        auto f = ok.find(it->id);
        if (f == ok.end())
          f = ok.emplace(it->id, greedy_answer(ablated, *it) == it->answer).first;
        if (f->second) ++hit;
      }
      double acc = double(hit) / double(items.size());
      csv += np.name + "," + join_layers(touched) + "," + name + "," + format_double(acc) + "," +
             format_double(acc - baseline[name]) + "," + std::to_string(int(items.size())) + "\n";
    }
  }
  ctx.emit("ablation.csv", csv);
  emit_plot_spec(ctx, "ablation",
                 {{"title", "Accuracy change under weight ablations"},
                  {"kind", "bar"},
                  {"x", "plan"},
                  {"y", json::array({"delta"})},
                  {"series", json::array({"group"})}});
}

void stage_grid(StageCtx& ctx) {
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  std::vector<const TaskItem*> sel_items = split_items(s, Split::eval_contaminated);
  check(!sel_items.empty(), "grid: no eval_contaminated items");

  auto sels = identify_all_layers(tuned, sel_items, ctx.cfg.probes.lambda, ctx.cfg.probes.top_k);

  std::string neurons;
  for (const auto& sel : sels)
    for (size_t i = 0; i < sel.indices.size(); ++i)
      neurons += "{\"layer\":" + std::to_string(sel.layer) +
                 ",\"index\":" + std::to_string(sel.indices[i]) +
                 ",\"score\":" + format_double(sel.scores[i]) + "}\n";
  ctx.emit("neurons.jsonl", neurons);

  std::vector<double> mk = mean_key_activation(tuned, sels, sel_items);
  std::string mk_csv = "layer,mean_abs_key,n_items\n";
  for (size_t l = 0; l < mk.size(); ++l)
    mk_csv += std::to_string(l) + "," + format_double(mk[l]) + "," +
              std::to_string(int(sel_items.size())) + "\n";
  ctx.emit("mean_keys.csv", mk_csv);

  auto rows = steering_grid(tuned, s, ctx.cfg.probes.steering_alphas, ctx.cfg.probes.lambda,
                            ctx.cfg.probes.top_k, &sels);
  std::string csv = "layer,alpha,split,accuracy,delta,n_items\n";
  for (const auto& r : rows)
    csv += std::to_string(r.layer) + "," + format_double(r.alpha) + "," + r.split + "," +
           format_double(r.accuracy) + "," + format_double(r.delta) + "," +
           std::to_string(r.n_items) + "\n";
  ctx.emit("steering_grid.csv", csv);
  emit_plot_spec(ctx, "steering_grid",
                 {{"title", "Key-scaling accuracy change by layer and factor"},
                  {"kind", "heatmap"},
                  {"x", "alpha"},
                  {"rows", "layer"},
                  {"y", json::array({"delta"})},
                  {"series", json::array({"split"})}});
}

void stage_steer(StageCtx& ctx) {
  check(ctx.extra.contains("layer"), "steer: --layer is required", ErrKind::config);
  check(ctx.extra.contains("alpha"), "steer: --alpha is required", ErrKind::config);
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  std::vector<const TaskItem*> sel_items = split_items(s, Split::eval_contaminated);
  check(!sel_items.empty(), "steer: no eval_contaminated items");

  SteeringSpec spec;
  spec.selection =
      identify_neurons(tuned, ctx.extra.at("layer").get<int>(), sel_items,
                       ctx.extra.value("lambda", ctx.cfg.probes.lambda),
                       ctx.extra.value("k", ctx.cfg.probes.top_k));
  spec.alpha = ctx.extra.at("alpha").get<double>();
  SteerOutcome out = steer(tuned, spec, s);

  std::string csv = "group,accuracy,delta,n_items\n";
  for (const auto& r : out.rows)
    csv += r.group + "," + format_double(r.accuracy) + "," + format_double(r.delta) + "," +
           std::to_string(r.n_items) + "\n";
  ctx.emit("steer.csv", csv);
  std::string items_csv = "item_id,output\n";
  for (const auto& [id, text] : out.outputs)
    items_csv += std::to_string(id) + "," + text + "\n";
  ctx.emit("steer_outputs.csv", items_csv);
}

void stage_neurons(StageCtx& ctx) {
  Checkpoint tuned = ctx.ckpt("checkpoints/tuned.alck", "rlvr");
  EvalSet s = ctx.eval();
  std::vector<const TaskItem*> sel_items = split_items(s, Split::eval_contaminated);
  check(!sel_items.empty(), "neurons: no eval_contaminated items");
  double lambda = ctx.extra.value("lambda", ctx.cfg.probes.lambda);
  int k = ctx.extra.value("k", ctx.cfg.probes.top_k);

  std::vector<NeuronSelection> sels;
  if (ctx.extra.contains("layer"))
    sels.push_back(identify_neurons(tuned, ctx.extra.at("layer").get<int>(), sel_items, lambda, k));
  else
    sels = identify_all_layers(tuned, sel_items, lambda, k);

  std::string neurons;
  for (const auto& sel : sels)
    for (size_t i = 0; i < sel.indices.size(); ++i)
      neurons += "{\"layer\":" + std::to_string(sel.layer) +
                 ",\"index\":" + std::to_string(sel.indices[i]) +
                 ",\"score\":" + format_double(sel.scores[i]) + "}\n";
  ctx.emit("neurons.jsonl", neurons);
}

// --- report -----------------------------------------------------------------------

void stage_report(StageCtx& ctx) {
  std::ostringstream md;
  md << "# Run report\n\n";
  md << "- tool version: " << tool_version() << "\n";
  md << "- config hash: " << hex64(fnv1a64(config_to_json(ctx.cfg))) << "\n";
  md << "- root seed: " << ctx.cfg.root_seed << "\n";
  md << "- reward mode: " << ctx.cfg.rlvr.reward_mode << "\n\n";

  auto missing = [&](const std::string& rel) { return !fs::exists(ctx.dir / rel); };

  md << "## Class labels\n\n";
  if (missing("classes.csv")) {
    md << "not available (classify stage not run)\n\n";
  } else {
    auto rows = read_csv(ctx.path("classes.csv"), "split,label,count");
    md << "| split | label | count |\n|---|---|---|\n";
    for (const auto& r : rows) md << "| " << r[0] << " | " << r[1] << " | " << r[2] << " |\n";
    md << "\n";
  }

  md << "## Perplexity divergence\n\n";
  if (missing("ppx_summary.csv")) {
    md << "not available (ppl stage not run)\n\n";
  } else {
    auto rows = read_csv(ctx.path("ppx_summary.csv"),
                         "split,answer_first,answer_last,full_first,full_last,divergence");
    md << "| split | answer ppl first→last | full-text ppl first→last | divergence |\n"
       << "|---|---|---|---|\n";
    for (const auto& r : rows)
      md << "| " << r[0] << " | " << r[1] << " → " << r[2] << " | " << r[3] << " → " << r[4]
         << " | " << (r[5] == "1" ? "yes" : "no") << " |\n";
    md << "\n";
  }

  md << "## Localization\n\n";
  if (missing("bands.json")) {
    md << "not available (ablate stage not run)\n\n";
  } else {
    std::ifstream in(ctx.path("bands.json"), std::ios::binary);
    json bands;
    in >> bands;
    md << "- anchor band (path-patch argmax ± radius): "
       << join_layers(bands["anchor_band"].get<std::vector<int>>()) << "\n";
    md << "- adapter band (counterfactual-divergence argmax ± radius): "
       << join_layers(bands["adapter_band"].get<std::vector<int>>()) << "\n";
    md << "- random control band: " << join_layers(bands["random_band"].get<std::vector<int>>())
       << "\n\n";
  }
  if (!missing("fig9_nde.csv")) {
    auto rows =
        read_csv(ctx.path("fig9_nde.csv"), "state_idx,t,separation_force,velocity_difference");
    if (!rows.empty()) {
      int best = 0;
      double best_v = -1.0;
      for (const auto& r : rows) {
        double v = std::stod(r[2]);
        if (v > best_v) {
          best_v = v;
          best = std::stoi(r[0]);
        }
      }
      md << "- separation-force argmax state: " << best << "\n";
    }
  }
  if (!missing("fig10_auc.csv")) {
    auto rows = read_csv(ctx.path("fig10_auc.csv"), "state_idx,auc,n_items");
    if (!rows.empty()) {
      int best = 0;
      double best_v = -1.0;
      for (const auto& r : rows) {
        double v = std::stod(r[1]);
        if (v > best_v) {
          best_v = v;
          best = std::stoi(r[0]);
        }
      }
      md << "- probe-AUC argmax state: " << best << "\n";
    }
  }
  md << "\n## Ablations\n\n";
  if (missing("ablation.csv")) {
    md << "not available (ablate stage not run)\n\n";
  } else {
    auto rows = read_csv(ctx.path("ablation.csv"), "plan,layers,group,accuracy,delta,n_items");
    md << "| plan | layers | group | accuracy | delta |\n|---|---|---|---|---|\n";
    for (const auto& r : rows)
      md << "| " << r[0] << " | " << r[1] << " | " << r[2] << " | " << r[3] << " | " << r[4]
         << " |\n";
    md << "\n";
  }

  md << "## Steering\n\n";
  if (missing("steering_grid.csv")) {
    md << "not available (grid stage not run)\n";
  } else {
    auto rows = read_csv(ctx.path("steering_grid.csv"),
                         "layer,alpha,split,accuracy,delta,n_items");
    // Show the Leakage rows of the anchor layer when bands are known,
    // otherwise the full grid is in the CSV.
    int anchor = -1;
    if (!missing("bands.json")) {
      std::ifstream in(ctx.path("bands.json"), std::ios::binary);
      json bands;
      in >> bands;
      anchor = bands.value("anchor_center", -1);
    }
    if (anchor >= 0) {
      md << "Anchor layer " << anchor << ", Leakage split:\n\n";
      md << "| alpha | accuracy | delta |\n|---|---|---|\n";
      for (const auto& r : rows)
        if (std::stoi(r[0]) == anchor && r[2] == "Leakage")
          md << "| " << r[1] << " | " << r[3] << " | " << r[4] << " |\n";
    } else {
      md << "full grid in steering_grid.csv\n";
    }
  }
  md << "\n";
  ctx.emit("report.md", md.str());
}

using StageFn = void (*)(StageCtx&);

const std::vector<std::pair<std::string, StageFn>>& stage_table() {
  static const std::vector<std::pair<std::string, StageFn>> table = {
      {"data", stage_data},       {"pretrain", stage_pretrain},
      {"rlvr", stage_rlvr},       {"classify", stage_classify},
      {"ppl", stage_ppl},         {"partial", stage_partial},
      {"patch", stage_patch},     {"jsd", stage_jsd},
      {"nde", stage_nde},         {"auc", stage_auc},
      {"ablate", stage_ablate},   {"grid", stage_grid},
      {"report", stage_report},   {"lens", stage_lens},
      {"steer", stage_steer},     {"neurons", stage_neurons},
  };
  return table;
}

}  // namespace

const std::vector<std::string>& pipeline_stage_names() {
  static const std::vector<std::string> names = {"data", "pretrain", "rlvr", "classify", "ppl",
                                                 "partial", "patch", "jsd", "nde", "auc",
                                                 "ablate", "grid", "report"};
  return names;
}

void run_stage(const ExperimentConfig& cfg, const std::string& stage,
               const std::string& extra_json) {
  cfg.validate();
  StageFn fn = nullptr;
  for (const auto& [name, f] : stage_table())
    if (name == stage) fn = f;
  if (!fn) fail_config("unknown stage '" + stage + "'");

  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);

  StageCtx ctx{cfg, dir, json::object(), {}};
  if (!extra_json.empty()) {
    try {
      ctx.extra = json::parse(extra_json);
    } catch (const json::exception& e) {
      fail_config(std::string("invalid stage arguments: ") + e.what());
    }
  }

  const std::string config_text = config_to_json(cfg);
  const std::string config_hash = hex64(fnv1a64(config_text));
  ctx.write_text("config.json", config_text);

  RunManifest manifest;
  fs::path manifest_path = dir / "manifest.json";
  if (fs::exists(manifest_path)) {
    manifest = load_manifest(manifest_path.string());
    if (manifest.config_hash != config_hash) manifest = RunManifest{};  // config changed
  }
  manifest.tool_version = tool_version();
  manifest.config_hash = config_hash;

  auto t0 = std::chrono::steady_clock::now();
  try {
    fn(ctx);
  } catch (const std::exception& e) {
    manifest.failed_stage = stage;
    manifest.error = e.what();
    save_manifest(manifest_path.string(), manifest);
    throw;
  }
  double wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

  StageRecord rec{stage, wall_ms, ctx.outputs};
  bool replaced = false;
  for (StageRecord& r : manifest.stages)
    if (r.name == stage) {
      r = rec;
      replaced = true;
    }
  if (!replaced) manifest.stages.push_back(std::move(rec));
  if (manifest.failed_stage == stage) {
    manifest.failed_stage.clear();
    manifest.error.clear();
  }
  save_manifest(manifest_path.string(), manifest);
}

void run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  fs::path manifest_path = fs::path(cfg.out_dir) / "manifest.json";
  std::error_code ec;
  fs::remove(manifest_path, ec);
  for (const std::string& stage : pipeline_stage_names()) run_stage(cfg, stage);
}

}  // namespace al
