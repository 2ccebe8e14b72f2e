#include "raglab/kbstore.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "raglab/io.hpp"
#include "raglab/rng.hpp"

namespace raglab {

using nlohmann::json;

void KnowledgeBase::validate() const {
  if (size() < 2) throw std::invalid_argument("knowledge base needs at least 2 passages");
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be at least 2");
  for (int i = 0; i < size(); ++i) {
    const Passage& p = passages[i];
    if (p.id != i) throw std::invalid_argument("passage ids must be exactly 0..N-1 in order");
    if (p.tokens.empty()) throw std::invalid_argument("passage " + std::to_string(i) + " has no tokens");
    for (int t : p.tokens)
      if (t < 0 || t >= vocab_size)
        throw std::invalid_argument("passage " + std::to_string(i) + " has out-of-range token");
  }
}

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  throw std::logic_error("bad split");
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "dev") return Split::dev;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split: " + name);
}

void validate_example(const Example& ex, const KnowledgeBase& kb) {
  if (ex.context.empty()) throw std::invalid_argument("example has empty context");
  if (ex.response.empty()) throw std::invalid_argument("example has empty response");
  for (int t : ex.context)
    if (t < 0 || t >= kb.vocab_size) throw std::invalid_argument("context token out of range");
  for (int t : ex.response)
    if (t < 0 || t >= kb.vocab_size) throw std::invalid_argument("response token out of range");
  if (ex.gold_passage_id && (*ex.gold_passage_id < 0 || *ex.gold_passage_id >= kb.size()))
    throw std::invalid_argument("gold passage id out of range");
}

void validate_dataset(const Dataset& ds, const KnowledgeBase& kb) {
  if (ds.examples.empty()) throw std::invalid_argument("empty dataset");
  for (const Example& ex : ds.examples) validate_example(ex, kb);
}

void SynthConfig::validate() const {
  if (passage_len < 3) throw std::invalid_argument("passage_len must be at least 3");
  if (context_len < 1) throw std::invalid_argument("context length would be zero");
  if (response_len < 1) throw std::invalid_argument("response_len must be positive");
  if (theme_rate < 0 || theme_rate > 1 || context_noise < 0 || context_noise > 1 ||
      response_noise < 0 || response_noise > 1 || response_passage_mix < 0 || response_passage_mix > 1)
    throw std::invalid_argument("synthetic rates must lie in [0, 1]");
}

namespace {

// The usable vocabulary (eos excluded) is split into two bands: a theme
// band, holding one designated token per passage which the response
// repeats, and a cue band, from which passages draw their remaining
// tokens. Contexts sample only cue tokens of the gold passage, so the
// theme is reachable from x only through retrieval; the generator's easy
// path is to copy the theme out of h rather than to memorize cue
// combinations.
struct Bands {
  int usable;      // tokens 0..usable-1 are generatable; usable == eos
  int theme_size;  // theme band is [0, theme_size)
};

// Themes stay distinct per passage as long as the vocabulary allows, with
// at least two cue tokens left over.
Bands bands_of(int vocab_size, int num_passages) {
  const int usable = vocab_size - 1;
  const int theme = std::min(std::max(usable / 2, num_passages), usable - 2);
  return {usable, theme};
}

int theme_token(int passage_id, const Bands& bands) { return passage_id % bands.theme_size; }

std::vector<int> cue_tokens(const std::vector<int>& passage_tokens, const Bands& bands) {
  std::vector<int> out;
  for (int t : passage_tokens)
    if (t >= bands.theme_size) out.push_back(t);
  return out;
}

Dataset make_split(Split split, int n, const KnowledgeBase& kb, const SynthConfig& cfg, Rng rng) {
  const Bands bands = bands_of(kb.vocab_size, kb.size());
  Dataset ds;
  ds.split = split;
  ds.examples.reserve(n);
  for (int i = 0; i < n; ++i) {
    Example ex;
    const int gold = rng.next_int(kb.size());
    const std::vector<int>& ptoks = kb.passages[gold].tokens;
    const int theme = theme_token(gold, bands);
    ex.gold_passage_id = gold;

    const std::vector<int> cues = cue_tokens(ptoks, bands);
    ex.context.reserve(cfg.context_len);
    for (int j = 0; j < cfg.context_len; ++j) {
      if (rng.next_double() < cfg.context_noise)
        ex.context.push_back(rng.next_int(bands.usable));
      else
        ex.context.push_back(cues[rng.next_int(static_cast<int>(cues.size()))]);
    }

    // Deterministic theme backbone plus bounded noise mixing passage and
    // context tokens, so y pins down h while staying predictable.
    ex.response.reserve(cfg.response_len);
    for (int j = 0; j < cfg.response_len; ++j) {
      if (rng.next_double() < cfg.response_noise) {
        if (rng.next_double() < cfg.response_passage_mix)
          ex.response.push_back(ptoks[rng.next_int(static_cast<int>(ptoks.size()))]);
        else
          ex.response.push_back(ex.context[rng.next_int(static_cast<int>(ex.context.size()))]);
      } else {
        ex.response.push_back(theme);
      }
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace

SyntheticTask generate_synthetic_task(int num_passages, int vocab_size, std::array<int, 3> split_sizes,
                                      uint64_t seed, const SynthConfig& cfg) {
  if (num_passages < 2) throw std::invalid_argument("num_passages must be at least 2");
  if (vocab_size < 8) throw std::invalid_argument("vocab_size must be at least 8");
  for (int n : split_sizes)
    if (n < 1) throw std::invalid_argument("split sizes must be positive");
  cfg.validate();

  Rng master(seed);
  Rng kb_rng = master.fork(1);

  SyntheticTask task;
  task.kb.vocab_size = vocab_size;
  const Bands bands = bands_of(vocab_size, num_passages);
  const int cue_band = bands.usable - bands.theme_size;
  const int paired = num_passages / 2 - (num_passages / 2) % 2;  // even count in the paired half

  // Passages in the paired half come in pairs with identical cue content
  // and distinct themes: their contexts stay ambiguous by construction and
  // only the response side (through the retrieved passage) can tell the
  // members apart. The remaining passages carry unique designated cues.
  task.kb.passages.reserve(num_passages);
  const int theme_marker = -1;
  std::vector<int> template_tokens;
  for (int i = 0; i < num_passages; ++i) {
    const bool is_paired = i < paired;
    const bool fresh_template = !is_paired || i % 2 == 0;
    if (fresh_template) {
      const int group = is_paired ? i / 2 : paired / 2 + (i - paired);
      const int cue = bands.theme_size + group % cue_band;
      template_tokens.clear();
      template_tokens.push_back(theme_marker);
      template_tokens.push_back(cue);
      for (int j = 2; j < cfg.passage_len; ++j) {
        const double u = kb_rng.next_double();
        if (u < cfg.theme_rate && j + 2 < cfg.passage_len)
          template_tokens.push_back(theme_marker);
        else if (u < cfg.theme_rate + (1.0 - cfg.theme_rate) / 2.0)
          template_tokens.push_back(cue);
        else
          template_tokens.push_back(bands.theme_size + kb_rng.next_int(cue_band));
      }
    }
    const int theme = theme_token(i, bands);
    Passage p;
    p.id = i;
    p.tokens = template_tokens;
    for (int& t : p.tokens)
      if (t == theme_marker) t = theme;
    task.kb.passages.push_back(std::move(p));
  }
  task.kb.validate();

  task.train = make_split(Split::train, split_sizes[0], task.kb, cfg, master.fork(2));
  task.dev = make_split(Split::dev, split_sizes[1], task.kb, cfg, master.fork(3));
  task.test = make_split(Split::test, split_sizes[2], task.kb, cfg, master.fork(4));
  return task;
}

// ---- persistence ----

namespace {

json parse_line(const std::string& line, const std::string& path, int lineno) {
  try {
    return json::parse(line);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
  }
}

const json& require_field(const json& rec, const char* field, const std::string& path, int lineno) {
  auto it = rec.find(field);
  if (it == rec.end())
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": missing field '" + field + "'");
  return *it;
}

std::vector<int> int_array(const json& v, const char* field, const std::string& path, int lineno) {
  if (!v.is_array())
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": field '" + field + "' must be an array");
  std::vector<int> out;
  out.reserve(v.size());
  for (const auto& e : v) {
    if (!e.is_number_integer())
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": field '" + field +
                               "' must hold integers");
    out.push_back(e.get<int>());
  }
  return out;
}

}  // namespace

std::string kb_to_string(const KnowledgeBase& kb) {
  std::string out = json{{"vocab_size", kb.vocab_size}}.dump() + "\n";
  for (const Passage& p : kb.passages) out += json{{"id", p.id}, {"tokens", p.tokens}}.dump() + "\n";
  return out;
}

void save_kb(const KnowledgeBase& kb, const std::string& path) { write_file_atomic(path, kb_to_string(kb)); }

KnowledgeBase load_kb(const std::string& path) {
  std::istringstream in(read_file(path));
  std::string line;
  int lineno = 0;
  KnowledgeBase kb;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec = parse_line(line, path, lineno);
    if (!have_header) {
      kb.vocab_size = require_field(rec, "vocab_size", path, lineno).get<int>();
      have_header = true;
      continue;
    }
    Passage p;
    p.id = require_field(rec, "id", path, lineno).get<int>();
    p.tokens = int_array(require_field(rec, "tokens", path, lineno), "tokens", path, lineno);
    kb.passages.push_back(std::move(p));
  }
  if (!have_header || kb.passages.empty()) throw std::runtime_error(path + ": empty knowledge base");
  try {
    kb.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return kb;
}

std::string dataset_to_string(const Dataset& ds) {
  std::string out = json{{"split", split_name(ds.split)}}.dump() + "\n";
  for (const Example& ex : ds.examples) {
    json rec{{"context", ex.context}, {"response", ex.response}};
    if (ex.gold_passage_id) rec["gold"] = *ex.gold_passage_id;
    out += rec.dump() + "\n";
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  write_file_atomic(path, dataset_to_string(ds));
}

Dataset load_dataset(const std::string& path, const KnowledgeBase& kb) {
  std::istringstream in(read_file(path));
  std::string line;
  int lineno = 0;
  Dataset ds;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec = parse_line(line, path, lineno);
    if (!have_header) {
      ds.split = split_from_name(require_field(rec, "split", path, lineno).get<std::string>());
      have_header = true;
      continue;
    }
    Example ex;
    ex.context = int_array(require_field(rec, "context", path, lineno), "context", path, lineno);
    ex.response = int_array(require_field(rec, "response", path, lineno), "response", path, lineno);
    if (rec.contains("gold") && !rec["gold"].is_null()) ex.gold_passage_id = rec["gold"].get<int>();
    try {
      validate_example(ex, kb);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    ds.examples.push_back(std::move(ex));
  }
  if (ds.examples.empty()) throw std::runtime_error(path + ": empty dataset");
  return ds;
}

}  // namespace raglab
