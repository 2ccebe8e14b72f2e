#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace raglab {

/// One knowledge-base passage: a stable id plus a token sequence over the
/// shared vocabulary.
struct Passage {
  int id = 0;
  std::vector<int> tokens;
};

struct KnowledgeBase {
  std::vector<Passage> passages;
  int vocab_size = 0;

  int size() const { return static_cast<int>(passages.size()); }

  /// Reserved sequence terminator used by decoding. Synthetic data never
  /// emits it inside passages or examples.
  int eos_id() const { return vocab_size - 1; }

  /// Checks ids are exactly 0..N-1, N >= 2, tokens non-empty and in range.
  void validate() const;
};

enum class Split { train, dev, test };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct Example {
  std::vector<int> context;   // x
  std::vector<int> response;  // y
  std::optional<int> gold_passage_id;
};

struct Dataset {
  std::vector<Example> examples;
  Split split = Split::train;
};

/// Validates token and gold-id bounds against the KB; throws on violation.
void validate_example(const Example& ex, const KnowledgeBase& kb);
void validate_dataset(const Dataset& ds, const KnowledgeBase& kb);

/// Knobs for the synthetic retrieve-then-generate task. Each passage is a
/// noisy repetition of a per-passage theme token; contexts subsample the
/// gold passage with noise; responses repeat the gold theme except for a
/// bounded-noise fraction drawn from a passage/context token mixture.
struct SynthConfig {
  int passage_len = 12;
  int context_len = 6;
  int response_len = 4;
  double theme_rate = 0.5;          // fraction of passage tokens equal to its theme
  double context_noise = 0.1;       // context token drawn uniformly instead of from the passage
  double response_noise = 0.05;     // response token drawn from the mixture instead of the theme
  double response_passage_mix = 0.7;  // noise draws favor passage tokens at this weight

  void validate() const;
};

struct SyntheticTask {
  KnowledgeBase kb;
  Dataset train;
  Dataset dev;
  Dataset test;
};

/// Pure function of its arguments: same inputs, byte-identical task.
/// split_sizes is {train, dev, test}.
SyntheticTask generate_synthetic_task(int num_passages, int vocab_size, std::array<int, 3> split_sizes,
                                      uint64_t seed, const SynthConfig& cfg = {});

// ---- persistence ----
//
// Line-delimited records, one JSON object per line. KB files start with a
// {"vocab_size": V} header, dataset files with {"split": "train"}. Record
// fields: passages {"id", "tokens"}, examples {"context", "response", "gold"}.

void save_kb(const KnowledgeBase& kb, const std::string& path);
KnowledgeBase load_kb(const std::string& path);

void save_dataset(const Dataset& ds, const std::string& path);
/// Loads and validates against the KB (token bounds, gold-id bounds);
/// errors cite the offending line.
Dataset load_dataset(const std::string& path, const KnowledgeBase& kb);

std::string kb_to_string(const KnowledgeBase& kb);
std::string dataset_to_string(const Dataset& ds);

}  // namespace raglab
