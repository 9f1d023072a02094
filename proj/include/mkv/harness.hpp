#pragma once

// End-to-end plumbing: byte-level corpus handling, the hermetic reference-text
// generator, evaluation (perplexity / next-token accuracy / divergence from
// the uncompressed model), flat key = value config files, and the CSV report
// formats (step metrics, sweep rows, allocation heatmaps).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mkv/errors.hpp"
#include "mkv/model.hpp"
#include "mkv/projections.hpp"
#include "mkv/rng.hpp"
#include "mkv/search.hpp"
#include "mkv/training.hpp"

namespace mkv {

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

// Raw bytes with a train/eval split by byte offset (default 90/10).  Tokens
// are the bytes themselves, so any text file works and the vocabulary is
// always 256.
struct Corpus {
  std::vector<uint8_t> bytes;
  size_t split = 0;  // train = [0, split), eval = [split, size)

  static Corpus from_bytes(std::vector<uint8_t> data, double train_fraction = 0.9) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw ConfigError("corpus: train fraction must lie strictly inside (0, 1)");
    Corpus c;
    c.bytes = std::move(data);
    c.split = size_t(double(c.bytes.size()) * train_fraction);
    return c;
  }

  static Corpus load(const std::string& path, double train_fraction = 0.9) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("corpus not found: " + path);
    std::vector<uint8_t> data((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    return from_bytes(std::move(data), train_fraction);
  }

  size_t train_size() const { return split; }
  size_t eval_size() const { return bytes.size() - split; }

  // One training sequence: `len` consecutive bytes starting at a random
  // offset, drawn entirely from the train region.
  std::vector<int> train_chunk(Rng& rng, int len) const {
    if (len < 2) throw InsufficientTokens("corpus: chunks need at least 2 tokens");
    if (train_size() < size_t(len))
      throw InsufficientTokens("corpus: train split smaller than one chunk");
    const size_t start = rng.bounded(uint64_t(train_size() - len + 1));
    std::vector<int> chunk(len);
    for (int i = 0; i < len; ++i) chunk[i] = bytes[start + i];
    return chunk;
  }

  std::vector<std::vector<int>> train_batch(Rng& rng, int batch_size, int len) const {
    std::vector<std::vector<int>> batch(batch_size);
    for (auto& seq : batch) seq = train_chunk(rng, len);
    return batch;
  }

  // Sequential, non-overlapping chunks covering the eval region in order; a
  // final partial chunk is kept when it still has at least two tokens.
  // max_chunks = 0 means no cap.
  std::vector<std::vector<int>> eval_chunks(int len, int max_chunks = 0) const {
    if (len < 2) throw InsufficientTokens("corpus: chunks need at least 2 tokens");
    std::vector<std::vector<int>> chunks;
    size_t start = split;
    while (start < bytes.size()) {
      const size_t take = std::min(size_t(len), bytes.size() - start);
      if (take < 2) break;
      std::vector<int> chunk(take);
      for (size_t i = 0; i < take; ++i) chunk[i] = bytes[start + i];
      chunks.push_back(std::move(chunk));
      start += take;
      if (max_chunks > 0 && int(chunks.size()) >= max_chunks) break;
    }
    if (chunks.empty()) throw InsufficientTokens("corpus: eval split has no usable chunk");
    return chunks;
  }
};

// ---------------------------------------------------------------------------
// Reference text
// ---------------------------------------------------------------------------

// Deterministic synthetic corpus: short declarative sentences whose second
// clause repeats the subject and object of the first, so predicting the
// repeats requires attending tens of bytes back — the cache has to carry real
// information.  All bytes are lowercase ASCII, space, period, or newline.
inline std::string make_reference_text(size_t min_bytes, uint64_t seed) {
  static const char* const kNames[] = {"alice", "brandon", "carol",  "devin",
                                       "elena", "felix",   "grace",  "henry"};
  static const char* const kObjects[] = {"apple", "book",   "coin",  "drum",
                                         "easel", "fiddle", "globe", "harp"};
  static const char* const kPlaces[] = {"attic", "barn",  "cave",   "dock",
                                        "eyrie", "forge", "garden", "harbor"};
  Rng rng(seed);
  std::string text;
  text.reserve(min_bytes + 128);
  while (text.size() < min_bytes) {
    const char* name = kNames[rng.bounded(8)];
    const char* obj = kObjects[rng.bounded(8)];
    const char* place = kPlaces[rng.bounded(8)];
    switch (rng.bounded(4)) {
      case 0:
        text += std::string(name) + " keeps a " + obj + " in the " + place + ". " + name +
                " loves that " + obj + ".\n";
        break;
      case 1:
        text += std::string("the ") + obj + " belongs to " + name + ". " + name +
                " stores the " + obj + " near the " + place + ".\n";
        break;
      case 2: {
        const char* other = kNames[rng.bounded(8)];
        text += std::string(name) + " walked to the " + place + " with " + other + ". at the " +
                place + " they found a " + obj + ".\n";
        break;
      }
      default:
        text += std::string("a ") + obj + " sat in the " + place + ". " + name + " took the " +
                obj + " home.\n";
        break;
    }
  }
  return text;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  double budget = 1.0;
  std::string mode = "baseline";  // baseline | uniform | searched
  double perplexity = 0.0;
  double accuracy = 0.0;  // next-token top-1, ties to the lowest index
  double mean_kd = 0.0;   // mean divergence from the uncompressed model
  long positions = 0;     // next-token prediction sites pooled over chunks
};

namespace detail {

inline int argmax_row(const double* row, int n) {
  int best = 0;
  for (int j = 1; j < n; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

// Cross-entropy -log softmax(row)[target], computed stably.
inline double ce_row(const double* row, int n, int target) {
  double mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  double sum = 0.0;
  for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
  return std::log(sum) + mx - row[target];
}

}  // namespace detail

// Perplexity, next-token accuracy, and mean divergence from the uncompressed
// model, over the corpus eval split.  bank == nullptr evaluates the plain
// model (mean_kd is then exactly zero).  Perplexity is exp of the
// position-pooled mean cross-entropy.
inline EvalReport evaluate(const TransformerWeights& w, const ProjectionBank* bank,
                           const RankAllocation* alloc, const Corpus& corpus,
                           int max_chunks = 0) {
  if ((bank == nullptr) != (alloc == nullptr))
    throw ConfigError("evaluate: bank and allocation must be given together");
  const auto chunks = corpus.eval_chunks(w.config.context, max_chunks);
  double ce_sum = 0.0, kd_sum = 0.0;
  long positions = 0, correct = 0, kd_rows = 0;
  for (const auto& chunk : chunks) {
    Mat student;
    if (bank) {
      const Mat teacher = forward_baseline(w, chunk);
      student = forward_projected(w, *bank, *alloc, chunk);
      kd_sum += mean_kl_logits(teacher, student) * double(teacher.rows());
      kd_rows += teacher.rows();
    } else {
      student = forward_baseline(w, chunk);
      kd_rows += student.rows();
    }
    for (size_t i = 0; i + 1 < chunk.size(); ++i) {
      const double* row = student.row_ptr(int(i));
      const int target = chunk[i + 1];
      ce_sum += detail::ce_row(row, student.cols(), target);
      correct += detail::argmax_row(row, student.cols()) == target;
      ++positions;
    }
  }
  EvalReport rep;
  rep.budget = alloc ? alloc->budget_fraction() : 1.0;
  rep.mode = bank ? "uniform" : "baseline";
  rep.perplexity = std::exp(ce_sum / double(positions));
  rep.accuracy = double(correct) / double(positions);
  rep.mean_kd = kd_rows > 0 ? kd_sum / double(kd_rows) : 0.0;
  rep.positions = positions;
  return rep;
}

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

// Flat `key = value` lines; `#` starts a comment anywhere; unknown keys are
// errors.  Keys: n_layers, n_heads, n_kv_heads, head_dim, vocab, context,
// rope_base, steps, batch_size, lr.
struct HarnessConfig {
  ModelConfig model;
  int steps = 2000;
  int batch_size = 4;
  double lr = 1e-3;
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(uint8_t(s[a]))) ++a;
  while (b > a && std::isspace(uint8_t(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

inline long parse_int(const std::string& key, const std::string& value) {
  size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for " + key + ": '" + value + "'");
  }
  if (pos != value.size())
    throw ConfigError("config: bad integer for " + key + ": '" + value + "'");
  return v;
}

inline double parse_real(const std::string& key, const std::string& value) {
  size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config: bad number for " + key + ": '" + value + "'");
  }
  if (pos != value.size()) throw ConfigError("config: bad number for " + key + ": '" + value + "'");
  return v;
}

}  // namespace detail

inline HarnessConfig parse_config_text(const std::string& text) {
  HarnessConfig hc;
  std::istringstream lines(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(lines, raw)) {
    ++line_no;
    const size_t hash = raw.find('#');
    if (hash != std::string::npos) raw.erase(hash);
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(line_no) + " is not 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("config: line " + std::to_string(line_no) + " is not 'key = value'");
    if (key == "n_layers")
      hc.model.n_layers = int(detail::parse_int(key, value));
    else if (key == "n_heads")
      hc.model.n_heads = int(detail::parse_int(key, value));
    else if (key == "n_kv_heads")
      hc.model.n_kv_heads = int(detail::parse_int(key, value));
    else if (key == "head_dim")
      hc.model.head_dim = int(detail::parse_int(key, value));
    else if (key == "vocab")
      hc.model.vocab = int(detail::parse_int(key, value));
    else if (key == "context")
      hc.model.context = int(detail::parse_int(key, value));
    else if (key == "rope_base")
      hc.model.rope_base = detail::parse_real(key, value);
    else if (key == "steps")
      hc.steps = int(detail::parse_int(key, value));
    else if (key == "batch_size")
      hc.batch_size = int(detail::parse_int(key, value));
    else if (key == "lr")
      hc.lr = detail::parse_real(key, value);
    else
      throw ConfigError("config: unknown key '" + key + "'");
  }
  hc.model.validate();
  if (hc.steps < 0 || hc.batch_size < 1)
    throw ConfigError("config: steps must be >= 0 and batch_size >= 1");
  return hc;
}

inline HarnessConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("config not found: " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

// ---------------------------------------------------------------------------
// Report formats
// ---------------------------------------------------------------------------

// All CSVs: header row, comma separators, LF endings, 9 significant digits.
inline std::string format_g9(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// wallclock_ms is deliberately not serialized: rerunning a stage with the
// same inputs and seed must reproduce every output file byte for byte.
inline void write_metrics_csv(const std::string& path, const std::vector<StepMetrics>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "step,kd,lm,total\n";
  for (const StepMetrics& m : rows)
    out << m.step << ',' << format_g9(m.kd) << ',' << format_g9(m.lm) << ','
        << format_g9(m.total) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

inline std::string sweep_header() { return "budget,mode,perplexity,accuracy,mean_kd"; }

inline std::string sweep_row_csv(const EvalReport& r) {
  return format_g9(r.budget) + "," + r.mode + "," + format_g9(r.perplexity) + "," +
         format_g9(r.accuracy) + "," + format_g9(r.mean_kd);
}

inline void write_sweep_csv(const std::string& path, const std::vector<EvalReport>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << sweep_header() << "\n";
  for (const EvalReport& r : rows) out << sweep_row_csv(r) << "\n";
  if (!out) throw IoError("write failed: " + path);
}

// Layer x head grid of retained-rank fractions, one row block per kind.
// Values are rank / head_dim in [0, 1]; when plotted as a heatmap, lighter
// cells (smaller fractions) mark slots that tolerate more compression.
inline void write_heatmap_csv(const std::string& path, const RankAllocation& alloc) {
  alloc.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "# rank fraction rank/head_dim per slot; lighter = lower rank\n";
  out << "kind,layer";
  for (int h = 0; h < alloc.kv_heads; ++h) out << ",h" << h;
  out << "\n";
  for (int kind_i = 0; kind_i < 2; ++kind_i) {
    for (int l = 0; l < alloc.layers; ++l) {
      out << (kind_i == 0 ? 'K' : 'V') << ',' << l;
      for (int h = 0; h < alloc.kv_heads; ++h) {
        const int r = kind_i == 0 ? alloc.k_rank(l, h) : alloc.v_rank(l, h);
        out << ',' << format_g9(double(r) / double(alloc.head_dim));
      }
      out << "\n";
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace mkv
