#include "core/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace al {

using nlohmann::json;

namespace tok {

int encode_char(char c) {
  if (c >= '0' && c <= '9') return 2 + (c - '0');
  switch (c) {
    case '(': return 12;
    case ')': return 13;
    case '*': return 14;
    case '+': return 15;
    case '%': return 16;
    case '=': return 17;
    case ';': return 18;
    default: fail_invalid(std::string("tokenizer: unmapped character '") + c + "'");
  }
}

char decode_char(int t) {
  if (t == PAD || t == BOS) return '\0';
  if (t >= 2 && t <= 11) return char('0' + (t - 2));
  switch (t) {
    case 12: return '(';
    case 13: return ')';
    case 14: return '*';
    case 15: return '+';
    case 16: return '%';
    case 17: return '=';
    case 18: return ';';
    default: fail_invalid("tokenizer: unknown token id " + std::to_string(t));
  }
}

std::vector<int> encode(std::string_view s) {
  std::vector<int> out;
  out.reserve(s.size());
  for (char c : s) out.push_back(encode_char(c));
  return out;
}

std::string decode(const std::vector<int>& ts) {
  std::string out;
  out.reserve(ts.size());
  for (int t : ts) {
    char c = decode_char(t);
    if (c) out.push_back(c);
  }
  return out;
}

char decode_char_lossy(int t) {
  return (t >= 2 && t <= SENTINEL) ? decode_char(t) : '?';
}

std::string decode_lossy(const std::vector<int>& ts) {
  std::string out;
  out.reserve(ts.size());
  for (int t : ts) out.push_back(decode_char_lossy(t));
  return out;
}

}  // namespace tok

std::string to_string(Split s) {
  switch (s) {
    case Split::pretrain_only: return "pretrain_only";
    case Split::eval_contaminated: return "eval_contaminated";
    case Split::eval_clean: return "eval_clean";
  }
  fail_invalid("bad split enum");
}

std::string to_string(ClassLabel c) {
  switch (c) {
    case ClassLabel::Leakage: return "Leakage";
    case ClassLabel::Stable: return "Stable";
    case ClassLabel::WrongBoth: return "WrongBoth";
    case ClassLabel::RightThenWrong: return "RightThenWrong";
  }
  fail_invalid("bad class enum");
}

Split split_from_string(const std::string& s) {
  if (s == "pretrain_only") return Split::pretrain_only;
  if (s == "eval_contaminated") return Split::eval_contaminated;
  if (s == "eval_clean") return Split::eval_clean;
  fail_invalid("unknown split '" + s + "'");
}

ClassLabel class_from_string(const std::string& s) {
  if (s == "Leakage") return ClassLabel::Leakage;
  if (s == "Stable") return ClassLabel::Stable;
  if (s == "WrongBoth") return ClassLabel::WrongBoth;
  if (s == "RightThenWrong") return ClassLabel::RightThenWrong;
  fail_invalid("unknown class label '" + s + "'");
}

const TaskItem* EvalSet::find(int id) const {
  for (const auto& it : items)
    if (it.id == id) return &it;
  return nullptr;
}

std::vector<const TaskItem*> EvalSet::in_split(Split s) const {
  std::vector<const TaskItem*> out;
  for (const auto& it : items)
    if (it.split == s) out.push_back(&it);
  return out;
}

std::string task_oracle(const std::string& q) {
  // Grammar: "(a)=" or "(a*b+c)%p=".
  size_t i = 0;
  auto expect = [&](char c) {
    check(i < q.size() && q[i] == c, "oracle: malformed question '" + q + "'");
    ++i;
  };
  auto number = [&]() {
    check(i < q.size() && std::isdigit((unsigned char)q[i]), "oracle: expected digit in '" + q + "'");
    long v = 0;
    while (i < q.size() && std::isdigit((unsigned char)q[i])) {
      v = v * 10 + (q[i] - '0');
      check(v < 1000000, "oracle: operand too large");
      ++i;
    }
    return v;
  };
  expect('(');
  long a = number();
  if (i < q.size() && q[i] == ')') {
    ++i;
    expect('=');
    check(i == q.size(), "oracle: trailing characters in '" + q + "'");
    return std::to_string(a);
  }
  expect('*');
  long b = number();
  expect('+');
  long c = number();
  expect(')');
  expect('%');
  long p = number();
  expect('=');
  check(i == q.size(), "oracle: trailing characters in '" + q + "'");
  check(p > 0, "oracle: modulus must be positive");
  return std::to_string((a * b + c) % p);
}

namespace {

struct Family {
  std::vector<int> primes;
  int operand_max;  // operands in [0, operand_max]
};

Family family_for(int difficulty) {
  switch (difficulty) {
    case 0: return {{}, 99};
    case 1: return {{5, 7}, 9};
    case 2: return {{11, 13, 17, 19}, 19};
    case 3: return {{23, 29, 31, 37, 41, 43}, 49};
    default: return {{53, 59, 61, 67, 71, 73, 79, 83, 89, 97}, 99};
  }
}

uint64_t family_capacity(const Family& f) {
  uint64_t ops = uint64_t(f.operand_max) + 1;
  if (f.primes.empty()) return ops;
  return ops * ops * ops * f.primes.size();
}

}  // namespace

EvalSet gen_tasks(uint64_t seed, int n, int difficulty) {
  check(n >= 1, "gen_tasks: n must be >= 1", ErrKind::config);
  Family fam = family_for(difficulty);
  check(uint64_t(n) <= family_capacity(fam),
        "gen_tasks: n exceeds the task family's distinct-question capacity",
        ErrKind::config);

  Rng rng(derive_seed(seed, "gen_tasks"));
  EvalSet s;
  std::set<std::string> seen;
  int id = 0;
  while (int(s.items.size()) < n) {
    TaskItem it;
    if (fam.primes.empty()) {
      int a = rng.range(0, fam.operand_max);
      it.question = "(" + std::to_string(a) + ")=";
    } else {
      int a = rng.range(0, fam.operand_max);
      int b = rng.range(0, fam.operand_max);
      int c = rng.range(0, fam.operand_max);
      int p = fam.primes[rng.below(fam.primes.size())];
      it.question = "(" + std::to_string(a) + "*" + std::to_string(b) + "+" +
                    std::to_string(c) + ")%" + std::to_string(p) + "=";
    }
    if (!seen.insert(it.question).second) continue;
    it.id = id++;
    it.answer = task_oracle(it.question);
    s.items.push_back(std::move(it));
  }
  return s;
}

void assign_splits(EvalSet& s, int n_pre, int n_cont, int n_clean, uint64_t seed) {
  check(n_pre >= 0 && n_cont >= 0 && n_clean >= 0 &&
            size_t(n_pre) + size_t(n_cont) + size_t(n_clean) == s.items.size(),
        "assign_splits: counts must sum to the item count", ErrKind::config);
  std::vector<int> order(s.items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  Rng rng(derive_seed(seed, "assign_splits"));
  rng.shuffle(order);
  for (size_t i = 0; i < order.size(); ++i) {
    Split sp = i < size_t(n_pre)              ? Split::pretrain_only
               : i < size_t(n_pre) + size_t(n_cont) ? Split::eval_contaminated
                                                    : Split::eval_clean;
    s.items[order[i]].split = sp;
  }
}

Corpus build_corpus(const EvalSet& s, int n_docs, int items_per_doc, uint64_t seed) {
  check(n_docs >= 1 && items_per_doc >= 1, "build_corpus: sizes must be >= 1", ErrKind::config);
  auto pool = s.in_split(Split::pretrain_only);
  check(!pool.empty(), "build_corpus: no pretrain_only items", ErrKind::config);
  Rng rng(derive_seed(seed, "build_corpus"));
  Corpus c;
  c.documents.reserve(n_docs);
  std::vector<int> order;
  size_t cursor = 0;
  auto next_idx = [&]() {
    if (cursor == order.size()) {
      order.resize(pool.size());
      for (size_t i = 0; i < pool.size(); ++i) order[i] = int(i);
      rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };
  for (int dco = 0; dco < n_docs; ++dco) {
    std::string doc;
    for (int k = 0; k < items_per_doc; ++k) doc += pool[next_idx()]->rendering();
    c.documents.push_back(std::move(doc));
  }
  return c;
}

void plant_contamination(Corpus& corpus, EvalSet& eval_set, double rate,
                         uint64_t jitter_seed, bool jitter) {
  check(rate >= 0.0 && rate <= 1.0, "plant_contamination: rate outside [0,1]", ErrKind::config);
  std::vector<TaskItem*> cont;
  for (auto& it : eval_set.items)
    if (it.split == Split::eval_contaminated) cont.push_back(&it);
  int n_insert = int(std::ceil(rate * double(cont.size())));
  if (n_insert == 0) return;
  check(!corpus.documents.empty(), "plant_contamination: corpus too small to host insertions",
        ErrKind::config);

  Rng rng(derive_seed(jitter_seed, "plant"));
  std::vector<int> order(cont.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
  rng.shuffle(order);

  for (int k = 0; k < n_insert; ++k) {
    TaskItem* it = cont[order[k]];
    std::string text = it->rendering();
    if (jitter) {
      // Redundant parentheses around the first operand; a weak, non-verbatim leak.
      size_t close = text.find_first_of("*)");
      text = "((" + text.substr(1, close - 1) + ")" + text.substr(close);
    } else {
      it->contaminated = true;
    }
    int doc_idx = int(rng.below(corpus.documents.size()));
    std::string& doc = corpus.documents[doc_idx];
    // Insert at a rendering boundary (after a sentinel) so documents stay
    // well-formed streams of renderings.
    std::vector<int> boundaries{0};
    for (size_t p = 0; p < doc.size(); ++p)
      if (doc[p] == ';') boundaries.push_back(int(p) + 1);
    int off = boundaries[rng.below(boundaries.size())];
    doc.insert(size_t(off), text);
    // Earlier manifest offsets into the same document may shift.
    for (auto& e : corpus.contamination_manifest)
      if (e.doc_index == doc_idx && e.offset >= off) e.offset += int(text.size());
    corpus.contamination_manifest.push_back({it->id, doc_idx, off, text});
  }
}

int count_occurrences(const Corpus& corpus, const std::string& needle) {
  int n = 0;
  for (const auto& doc : corpus.documents) {
    size_t pos = 0;
    while ((pos = doc.find(needle, pos)) != std::string::npos) {
      ++n;
      ++pos;
    }
  }
  return n;
}

void verify_corpus_hygiene(const Corpus& corpus, const EvalSet& eval_set) {
  for (const auto& e : corpus.contamination_manifest) {
    check(e.doc_index >= 0 && size_t(e.doc_index) < corpus.documents.size(),
          "manifest entry points outside the corpus");
    const std::string& doc = corpus.documents[e.doc_index];
    check(e.offset >= 0 && size_t(e.offset) + e.text.size() <= doc.size() &&
              doc.compare(e.offset, e.text.size(), e.text) == 0,
          "manifest entry does not match document content at offset");
  }
  for (const auto& it : eval_set.items) {
    if (it.split == Split::eval_clean)
      check(count_occurrences(corpus, it.rendering()) == 0,
            "clean-split item '" + it.question + "' leaked into the corpus");
    if (it.split == Split::eval_contaminated && it.contaminated)
      check(count_occurrences(corpus, it.rendering()) >= 1,
            "item marked contaminated but absent from the corpus");
  }
}

std::map<int, ClassLabel> classify_samples(const std::map<int, bool>& base_correct,
                                           const std::map<int, bool>& tuned_correct) {
  check(base_correct.size() == tuned_correct.size(),
        "classify_samples: id mismatch between maps");
  std::map<int, ClassLabel> out;
  for (const auto& [id, before] : base_correct) {
    auto it = tuned_correct.find(id);
    check(it != tuned_correct.end(), "classify_samples: id mismatch between maps");
    bool after = it->second;
    ClassLabel c = before ? (after ? ClassLabel::Stable : ClassLabel::RightThenWrong)
                          : (after ? ClassLabel::Leakage : ClassLabel::WrongBoth);
    out[id] = c;
  }
  return out;
}

// --- serialization -------------------------------------------------------

void save_eval_set(const std::string& path, const EvalSet& s) {
  std::ofstream f(path);
  if (!f) fail_io("cannot open for writing: " + path);
  for (const auto& it : s.items) {
    json j;
    j["id"] = it.id;
    j["question"] = it.question;
    j["answer"] = it.answer;
    j["split"] = to_string(it.split);
    j["contaminated"] = it.contaminated;
    auto lbl = s.class_labels.find(it.id);
    if (lbl != s.class_labels.end())
      j["label"] = to_string(lbl->second);
    else
      j["label"] = nullptr;
    f << j.dump() << "\n";
  }
  if (!f) fail_io("write failed: " + path);
}

EvalSet load_eval_set(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail_io("cannot open: " + path);
  EvalSet s;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    check(!j.is_discarded(), path + ":" + std::to_string(lineno) + ": bad JSON", ErrKind::io);
    TaskItem it;
    it.id = j.at("id").get<int>();
    it.question = j.at("question").get<std::string>();
    it.answer = j.at("answer").get<std::string>();
    it.split = split_from_string(j.at("split").get<std::string>());
    it.contaminated = j.value("contaminated", false);
    if (j.contains("label") && !j["label"].is_null())
      s.class_labels[it.id] = class_from_string(j["label"].get<std::string>());
    s.items.push_back(std::move(it));
  }
  return s;
}

void save_corpus(const std::string& path, const std::string& manifest_path, const Corpus& c) {
  {
    std::ofstream f(path);
    if (!f) fail_io("cannot open for writing: " + path);
    for (size_t i = 0; i < c.documents.size(); ++i) {
      json j;
      j["doc_id"] = int(i);
      j["text"] = c.documents[i];
      f << j.dump() << "\n";
    }
    if (!f) fail_io("write failed: " + path);
  }
  std::ofstream f(manifest_path);
  if (!f) fail_io("cannot open for writing: " + manifest_path);
  for (const auto& e : c.contamination_manifest) {
    json j;
    j["item_id"] = e.item_id;
    j["doc_index"] = e.doc_index;
    j["offset"] = e.offset;
    j["text"] = e.text;
    f << j.dump() << "\n";
  }
  if (!f) fail_io("write failed: " + manifest_path);
}

Corpus load_corpus(const std::string& path, const std::string& manifest_path) {
  Corpus c;
  {
    std::ifstream f(path);
    if (!f) fail_io("cannot open: " + path);
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      c.documents.push_back(j.at("text").get<std::string>());
    }
  }
  std::ifstream f(manifest_path);
  if (!f) fail_io("cannot open: " + manifest_path);
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    c.contamination_manifest.push_back({j.at("item_id").get<int>(),
                                        j.at("doc_index").get<int>(),
                                        j.at("offset").get<int>(),
                                        j.at("text").get<std::string>()});
  }
  return c;
}

}  // namespace al
