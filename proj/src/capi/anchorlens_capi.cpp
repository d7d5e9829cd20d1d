#include "anchorlens/anchorlens.h"

#include <cstring>
#include <string>

#include <json.hpp>

#include "core/container.hpp"
#include "core/harness.hpp"
#include "core/model.hpp"
#include "core/probes.hpp"
#include "core/tasks.hpp"

struct al_checkpoint {
  al::Checkpoint v;
};
struct al_evalset {
  al::EvalSet v;
};

namespace {

thread_local std::string g_error;

al_status record_error(const std::exception& e) {
  g_error = e.what();
  const auto* ae = dynamic_cast<const al::Error*>(&e);
  if (ae && ae->kind == al::ErrKind::config) return AL_ERR_CONFIG;
  return AL_ERR_STAGE;
}

al_status record_error(const char* msg, al_status code = AL_ERR_STAGE) {
  g_error = msg;
  return code;
}

template <typename F>
al_status guarded(F&& f) {
  try {
    f();
    g_error.clear();
    return AL_OK;
  } catch (const std::exception& e) {
    return record_error(e);
  } catch (...) {
    return record_error("unknown error");
  }
}

al_status copy_string(const std::string& s, char* buf, size_t cap) {
  if (!buf || cap == 0) return record_error("output buffer is null or empty");
  if (s.size() + 1 > cap) return record_error("output buffer too small");
  std::memcpy(buf, s.c_str(), s.size() + 1);
  return AL_OK;
}

}  // namespace

extern "C" {

const char* al_version(void) {
  static const std::string v = al::tool_version();
  return v.c_str();
}

int al_abi_version(void) { return 1; }

const char* al_last_error(void) { return g_error.c_str(); }

al_status al_pipeline(const char* config_path) {
  if (!config_path) return record_error("config_path is null", AL_ERR_CONFIG);
  return guarded([&] { al::run_pipeline(al::load_config(config_path)); });
}

al_status al_run_stage(const char* config_path, const char* stage, const char* extra_json) {
  if (!config_path) return record_error("config_path is null", AL_ERR_CONFIG);
  if (!stage) return record_error("stage is null", AL_ERR_CONFIG);
  return guarded([&] {
    al::run_stage(al::load_config(config_path), stage, extra_json ? extra_json : "");
  });
}

const char* al_pipeline_stage(int idx) {
  const auto& names = al::pipeline_stage_names();
  if (idx < 0 || idx >= int(names.size())) return nullptr;
  return names[size_t(idx)].c_str();
}

al_status al_checkpoint_load(const char* path, al_checkpoint** out) {
  if (!path || !out) return record_error("null argument", AL_ERR_CONFIG);
  *out = nullptr;
  return guarded([&] { *out = new al_checkpoint{al::load_checkpoint(path)}; });
}

al_status al_checkpoint_init(const char* model_json, uint64_t seed, const char* label,
                             al_checkpoint** out) {
  if (!out) return record_error("null argument", AL_ERR_CONFIG);
  *out = nullptr;
  return guarded([&] {
    al::ModelConfig mc;
    if (model_json && *model_json) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(model_json);
      } catch (const nlohmann::json::exception& e) {
        al::fail_config(std::string("model_json: ") + e.what());
      }
      al::check(j.is_object(), "model_json must be a JSON object", al::ErrKind::config);
      for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "n_layers")
          mc.n_layers = it.value().get<int>();
        else if (k == "d_hidden")
          mc.d_hidden = it.value().get<int>();
        else if (k == "d_mlp")
          mc.d_mlp = it.value().get<int>();
        else if (k == "n_heads")
          mc.n_heads = it.value().get<int>();
        else if (k == "vocab_size")
          mc.vocab_size = it.value().get<int>();
        else if (k == "max_seq_len")
          mc.max_seq_len = it.value().get<int>();
        else if (k == "norm_eps")
          mc.norm_eps = it.value().get<double>();
        else
          al::fail_config("model_json: unknown field '" + k + "'");
      }
    }
    *out = new al_checkpoint{al::init_checkpoint(mc, seed, label ? label : "init")};
  });
}

al_status al_checkpoint_save(const al_checkpoint* ckpt, const char* path) {
  if (!ckpt || !path) return record_error("null argument", AL_ERR_CONFIG);
  return guarded([&] { al::save_checkpoint(path, ckpt->v); });
}

void al_checkpoint_free(al_checkpoint* ckpt) { delete ckpt; }

al_status al_checkpoint_info(const al_checkpoint* ckpt, char* buf, size_t cap) {
  if (!ckpt) return record_error("null argument", AL_ERR_CONFIG);
  nlohmann::json j;
  const al::ModelConfig& c = ckpt->v.config;
  j["label"] = ckpt->v.label;
  j["seed"] = ckpt->v.seed;
  j["param_count"] = ckpt->v.w.param_count();
  j["model"] = {{"n_layers", c.n_layers},       {"d_hidden", c.d_hidden},
                {"d_mlp", c.d_mlp},             {"n_heads", c.n_heads},
                {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                {"norm_eps", c.norm_eps}};
  return copy_string(j.dump(), buf, cap);
}

al_status al_evalset_load(const char* path, al_evalset** out) {
  if (!path || !out) return record_error("null argument", AL_ERR_CONFIG);
  *out = nullptr;
  return guarded([&] { *out = new al_evalset{al::load_eval_set(path)}; });
}

al_status al_evalset_save(const al_evalset* s, const char* path) {
  if (!s || !path) return record_error("null argument", AL_ERR_CONFIG);
  return guarded([&] { al::save_eval_set(path, s->v); });
}

void al_evalset_free(al_evalset* s) { delete s; }

int al_evalset_size(const al_evalset* s) {
  if (!s) {
    record_error("null argument", AL_ERR_CONFIG);
    return -1;
  }
  return static_cast<int>(s->v.items.size());
}

al_status al_generate(const al_checkpoint* ckpt, const int* prompt, int prompt_len, int max_new,
                      double temperature, uint64_t seed, int stop_token, int* out_tokens,
                      int out_cap, int* out_len) {
  if (!ckpt || !prompt || !out_tokens || !out_len)
    return record_error("null argument", AL_ERR_CONFIG);
  if (prompt_len <= 0) return record_error("prompt_len must be positive", AL_ERR_CONFIG);
  return guarded([&] {
    al::GenerateOptions go;
    go.max_new = max_new;
    go.temperature = temperature;
    go.seed = seed;
    go.stop_token = stop_token;
    std::vector<int> completion =
        al::generate(ckpt->v, std::span<const int>(prompt, size_t(prompt_len)), go);
    al::check(int(completion.size()) <= out_cap, "output buffer too small");
    std::copy(completion.begin(), completion.end(), out_tokens);
    *out_len = int(completion.size());
  });
}

al_status al_greedy_answer(const al_checkpoint* ckpt, const al_evalset* s, int item_id,
                           char* buf, size_t cap) {
  if (!ckpt || !s) return record_error("null argument", AL_ERR_CONFIG);
  std::string ans;
  al_status st = guarded([&] {
    const al::TaskItem* it = s->v.find(item_id);
    al::check(it != nullptr, "item " + std::to_string(item_id) + " not in the eval set");
    ans = al::greedy_answer(ckpt->v, *it);
  });
  if (st != AL_OK) return st;
  return copy_string(ans, buf, cap);
}

al_status al_accuracy(const al_checkpoint* ckpt, const al_evalset* s, const char* split,
                      double* out) {
  if (!ckpt || !s || !split || !out) return record_error("null argument", AL_ERR_CONFIG);
  return guarded([&] {
    std::vector<const al::TaskItem*> items = s->v.in_split(al::split_from_string(split));
    *out = al::accuracy(ckpt->v, items);
  });
}

al_status al_perplexity(const al_checkpoint* ckpt, const int* prompt, int prompt_len,
                        const int* answer, int answer_len, int full_text, double* out) {
  if (!ckpt || !answer || !out) return record_error("null argument", AL_ERR_CONFIG);
  if (prompt_len < 0 || answer_len <= 0)
    return record_error("bad prompt/answer length", AL_ERR_CONFIG);
  if (prompt_len > 0 && !prompt) return record_error("null argument", AL_ERR_CONFIG);
  return guarded([&] {
    std::vector<int> p(prompt, prompt + prompt_len);
    std::vector<int> a(answer, answer + answer_len);
    *out = al::perplexity(ckpt->v, p, a,
                          full_text ? al::PplMode::full_text : al::PplMode::answer_only);
  });
}

al_status al_jsd(const double* p, const double* q, int n, double* out) {
  if (!p || !q || !out) return record_error("null argument", AL_ERR_CONFIG);
  if (n <= 0) return record_error("n must be positive", AL_ERR_CONFIG);
  return guarded([&] {
    *out = al::jsd(std::span<const double>(p, size_t(n)), std::span<const double>(q, size_t(n)));
  });
}

al_status al_rouge_l(const int* candidate, int cand_len, const int* reference, int ref_len,
                     double* f, double* precision, double* recall) {
  if ((!candidate && cand_len > 0) || !reference)
    return record_error("null argument", AL_ERR_CONFIG);
  if (cand_len < 0 || ref_len <= 0) return record_error("bad lengths", AL_ERR_CONFIG);
  return guarded([&] {
    al::Rouge r = al::rouge_l(std::span<const int>(candidate, size_t(cand_len)),
                              std::span<const int>(reference, size_t(ref_len)));
    if (f) *f = r.f;
    if (precision) *precision = r.p;
    if (recall) *recall = r.r;
  });
}

}  // extern "C"
