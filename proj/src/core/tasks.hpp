#pragma once

// Synthetic verifiable tasks: modular arithmetic rendered in a fixed
// character-level template, corpus construction, contamination planting,
// and post-training Leakage/Stable classification.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "core/common.hpp"

namespace al {

// --- tokenizer -----------------------------------------------------------
// Fixed character vocabulary; ids are stable across the whole artifact.
//   0 PAD, 1 BOS, 2..11 digits '0'..'9', 12 '(', 13 ')', 14 '*', 15 '+',
//   16 '%', 17 '=', 18 ';' (end-of-answer sentinel).
namespace tok {
constexpr int PAD = 0;
constexpr int BOS = 1;
constexpr int SENTINEL = 18;

int encode_char(char c);              // throws on unmapped char
char decode_char(int t);              // '\0' for PAD/BOS, throws on unknown id
std::vector<int> encode(std::string_view s);
std::string decode(const std::vector<int>& ts);  // skips PAD/BOS

// Lossy variants for model-emitted tokens: sampling can produce ids with no
// character (PAD/BOS mid-sequence, ids past the table); those become '?' so
// the result never equals a well-formed rendering.
char decode_char_lossy(int t);
std::string decode_lossy(const std::vector<int>& ts);
}  // namespace tok

// --- task domain ---------------------------------------------------------

enum class Split { pretrain_only, eval_contaminated, eval_clean };
enum class ClassLabel { Leakage, Stable, WrongBoth, RightThenWrong };

std::string to_string(Split s);
std::string to_string(ClassLabel c);
Split split_from_string(const std::string& s);
ClassLabel class_from_string(const std::string& s);

struct TaskItem {
  int id = 0;
  std::string question;  // e.g. "(12*7+45)%83="
  std::string answer;    // digits only, e.g. "53"
  Split split = Split::eval_clean;
  bool contaminated = false;

  std::string rendering() const { return question + answer + ";"; }
};

struct EvalSet {
  std::vector<TaskItem> items;
  std::map<int, ClassLabel> class_labels;  // optional; empty = absent

  const TaskItem* find(int id) const;
  std::vector<const TaskItem*> in_split(Split s) const;
};

struct ManifestEntry {
  int item_id = 0;
  int doc_index = 0;
  int offset = 0;       // character/token offset into the document
  std::string text;     // the planted string
};

struct Corpus {
  std::vector<std::string> documents;  // char-level; 1 char = 1 token
  std::vector<ManifestEntry> contamination_manifest;
};

// Recompute the answer from a rendered question ("(a*b+c)%p=" or "(a)=").
// Errors on malformed questions.
std::string task_oracle(const std::string& question);

// Deterministic task generation. Difficulty selects the operand/prime
// ranges; 0 is the degenerate identity family "(a)=" with answer a.
// Errors when n exceeds the family's distinct-question capacity.
EvalSet gen_tasks(uint64_t seed, int n, int difficulty);

// Assign splits to a freshly generated set: first n_pre items (after a
// seeded shuffle) become pretrain_only, then n_cont eval_contaminated,
// then n_clean eval_clean. Counts must sum to |items|.
void assign_splits(EvalSet& s, int n_pre, int n_cont, int n_clean, uint64_t seed);

// Background corpus: documents built from shuffled renderings of the
// pretrain_only items, repeated until n_docs documents of
// items_per_doc renderings each are filled.
Corpus build_corpus(const EvalSet& s, int n_docs, int items_per_doc, uint64_t seed);

// Insert ceil(rate * |eval_contaminated|) items (one copy each) into the
// corpus at seeded positions; marks planted items contaminated and extends
// the manifest. With jitter, the planted string wraps the first operand in
// redundant parentheses (a weaker, non-verbatim leak; contaminated stays
// tied to exact-rendering presence).
void plant_contamination(Corpus& corpus, EvalSet& eval_set, double rate,
                         uint64_t jitter_seed, bool jitter = false);

// Count exact occurrences of `needle` across corpus documents.
int count_occurrences(const Corpus& corpus, const std::string& needle);

// Postcondition scan: every manifest entry points at an exact copy; every
// eval_clean rendering is absent. Throws on violation.
void verify_corpus_hygiene(const Corpus& corpus, const EvalSet& eval_set);

// Leakage/Stable partition from before/after correctness bits.
std::map<int, ClassLabel> classify_samples(const std::map<int, bool>& base_correct,
                                           const std::map<int, bool>& tuned_correct);

// --- serialization -------------------------------------------------------

void save_eval_set(const std::string& path, const EvalSet& s);
EvalSet load_eval_set(const std::string& path);
void save_corpus(const std::string& path, const std::string& manifest_path, const Corpus& c);
Corpus load_corpus(const std::string& path, const std::string& manifest_path);

}  // namespace al
