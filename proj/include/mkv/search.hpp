#pragma once

// Greedy per-slot budget search: starting from full rank everywhere, repeatedly
// find the single (layer, head, K/V) decrement that hurts calibration KL the
// least and apply it, until the cache budget drops below the target fraction.
// Also provides the uniform-allocation baseline and CSV import/export for
// allocations.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mkv/errors.hpp"
#include "mkv/model.hpp"
#include "mkv/projections.hpp"

namespace mkv {

// ---------------------------------------------------------------------------
// Search configuration
// ---------------------------------------------------------------------------

struct SearchConfig {
  // Target budget fraction in (0, 1]; the loop stops once the allocation's
  // budget_fraction() is strictly below this.
  double gamma = 0.5;
  // Rank decrement per accepted move; 0 means head_dim / 8.
  int delta_rank = 0;
  // Minimum rank any slot may reach; 0 means head_dim / 4.
  int floor_rank = 0;
  // Number of best-scoring decrements accepted per outer iteration.  1 gives
  // the classic one-move-per-iteration loop; larger values accept the k
  // lowest-KL proposals of each round in one go (budget is re-checked after
  // every single decrement, so the stop condition is unaffected).
  int parallel_accept = 1;
};

struct SearchResult {
  RankAllocation allocation;
  double achieved_budget = 0.0;
  // Calibration KL of the final allocation (computed with one extra
  // evaluation after the loop; not included in kl_evaluations).
  double calib_kl = 0.0;
  int iterations = 0;
  // Tentative-decrement evaluations performed inside the loop.  At most
  // 2 * layers * kv_heads per iteration.
  long kl_evaluations = 0;
  // Diagnostic: keys usually tolerate more compression than values.
  double mean_k_rank = 0.0;
  double mean_v_rank = 0.0;
};

// ---------------------------------------------------------------------------
// Calibration KL
// ---------------------------------------------------------------------------

// Mean KL(teacher || student) over every prompt and token position, where the
// teacher runs the uncompressed model and the student runs with the bank
// truncated to `alloc`.  Positions are pooled across prompts (weighted by
// prompt length), so prompts of different lengths contribute per-token.
inline double calib_kl(const TransformerWeights& w, const ProjectionBank& bank,
                       const RankAllocation& alloc,
                       const std::vector<std::vector<int>>& prompts) {
  if (prompts.empty()) throw InsufficientTokens("calib_kl: need at least one prompt");
  double weighted_sum = 0.0;
  long total_rows = 0;
  for (const std::vector<int>& p : prompts) {
    if (p.empty()) throw InsufficientTokens("calib_kl: prompt with zero tokens");
    const Mat teacher = forward_baseline(w, p);
    const Mat student = forward_projected(w, bank, alloc, p);
    weighted_sum += mean_kl_logits(teacher, student) * double(teacher.rows());
    total_rows += teacher.rows();
  }
  return weighted_sum / double(total_rows);
}

// ---------------------------------------------------------------------------
// Uniform baseline
// ---------------------------------------------------------------------------

// Every slot gets round(fraction * d / delta) * delta, which must reproduce
// fraction * d exactly (no silent rounding) and respect the floor.
inline RankAllocation uniform_allocation(const ModelConfig& cfg, double fraction,
                                         int delta_rank = 0, int floor_rank = 0) {
  const int d = cfg.head_dim;
  const int delta = delta_rank > 0 ? delta_rank : d / 8;
  const int floor_r = floor_rank > 0 ? floor_rank : d / 4;
  if (delta < 1 || d % delta != 0)
    throw ConfigError("uniform_allocation: delta_rank " + std::to_string(delta) +
                      " must divide head_dim " + std::to_string(d));
  const double target = fraction * d;
  const long steps = std::lround(target / delta);
  const double rounded = double(steps) * delta;
  if (std::fabs(rounded - target) > 1e-9)
    throw NotRepresentable("uniform_allocation: fraction " + std::to_string(fraction) +
                           " gives rank " + std::to_string(target) +
                           ", not a multiple of delta_rank " + std::to_string(delta));
  const int r = int(rounded);
  if (r < floor_r)
    throw NotRepresentable("uniform_allocation: rank " + std::to_string(r) +
                           " below floor " + std::to_string(floor_r));
  if (r > d)
    throw NotRepresentable("uniform_allocation: rank " + std::to_string(r) +
                           " exceeds head_dim " + std::to_string(d));
  return RankAllocation(cfg.n_layers, cfg.n_kv_heads, d, r);
}

// ---------------------------------------------------------------------------
// Greedy search
// ---------------------------------------------------------------------------

inline SearchResult greedy_search(const TransformerWeights& w, const ProjectionBank& bank,
                                  const std::vector<std::vector<int>>& prompts,
                                  const SearchConfig& sc) {
  const ModelConfig& cfg = w.config;
  const int d = cfg.head_dim;
  const int delta = sc.delta_rank > 0 ? sc.delta_rank : d / 8;
  const int floor_r = sc.floor_rank > 0 ? sc.floor_rank : d / 4;
  if (delta < 1 || d % delta != 0)
    throw ConfigError("greedy_search: delta_rank " + std::to_string(delta) +
                      " must divide head_dim " + std::to_string(d));
  if (floor_r < delta)
    throw ConfigError("greedy_search: floor " + std::to_string(floor_r) +
                      " must be at least delta_rank " + std::to_string(delta));
  if ((d - floor_r) % delta != 0)
    throw ConfigError("greedy_search: floor " + std::to_string(floor_r) +
                      " is not reachable from head_dim " + std::to_string(d) +
                      " in steps of " + std::to_string(delta));
  if (!(sc.gamma > 0.0 && sc.gamma <= 1.0))
    throw ConfigError("greedy_search: gamma must lie in (0, 1]");
  if (sc.parallel_accept < 1)
    throw ConfigError("greedy_search: parallel_accept must be >= 1");
  const double floor_budget = double(floor_r) / double(d);
  if (floor_budget > sc.gamma)
    throw InfeasibleBudget("greedy_search: gamma " + std::to_string(sc.gamma) +
                           " below the floor budget " + std::to_string(floor_budget));

  SearchResult res;
  res.allocation = RankAllocation::full(cfg.n_layers, cfg.n_kv_heads, d);
  RankAllocation& alloc = res.allocation;

  struct Candidate {
    SlotKind kind;
    int layer;
    int head;
    double eps;
  };

  // Repeat-until loop: the body always runs once (gamma = 1.0 therefore
  // applies exactly one decrement, since the initial budget 1.0 is not < 1.0).
  for (;;) {
    // Tentative single decrements, scored in the fixed tie-break order
    // (K before V, then layer, then head); slots at the floor are skipped.
    std::vector<Candidate> cands;
    for (int kind_i = 0; kind_i < 2; ++kind_i) {
      const SlotKind kind = kind_i == 0 ? SlotKind::key : SlotKind::value;
      for (int l = 0; l < cfg.n_layers; ++l) {
        for (int h = 0; h < cfg.n_kv_heads; ++h) {
          int& r = kind == SlotKind::key ? alloc.k_rank(l, h) : alloc.v_rank(l, h);
          if (r - delta < floor_r) continue;
          r -= delta;
          const double eps = calib_kl(w, bank, alloc, prompts);
          r += delta;
          ++res.kl_evaluations;
          cands.push_back({kind, l, h, eps});
        }
      }
    }
    if (cands.empty()) break;  // every slot at the floor; nothing left to shrink
    ++res.iterations;

    // Stable sort keeps the tie-break order among equal scores, so the first
    // element is the deterministic argmin.
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.eps < b.eps; });
    const int accepts = std::min<int>(sc.parallel_accept, int(cands.size()));
    bool below_target = false;
    for (int i = 0; i < accepts && !below_target; ++i) {
      const Candidate& c = cands[i];
      int& r = c.kind == SlotKind::key ? alloc.k_rank(c.layer, c.head)
                                       : alloc.v_rank(c.layer, c.head);
      r -= delta;
      below_target = alloc.budget_fraction() < sc.gamma;
    }
    if (below_target) break;
  }

  res.achieved_budget = alloc.budget_fraction();
  res.calib_kl = calib_kl(w, bank, alloc, prompts);
  double k_sum = 0.0, v_sum = 0.0;
  for (int r : alloc.k_ranks) k_sum += r;
  for (int r : alloc.v_ranks) v_sum += r;
  res.mean_k_rank = k_sum / double(alloc.k_ranks.size());
  res.mean_v_rank = v_sum / double(alloc.v_ranks.size());
  return res;
}

// ---------------------------------------------------------------------------
// Allocation CSV
// ---------------------------------------------------------------------------

// Format:
//   # head_dim = <d>
//   layer,head,kind,rank
//   0,0,K,16
//   0,0,V,16
//   ...
// One K row and one V row per (layer, head), layer-major.

inline void save_allocation_csv(const std::string& path, const RankAllocation& alloc) {
  alloc.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "# head_dim = " << alloc.head_dim << "\n";
  out << "layer,head,kind,rank\n";
  for (int l = 0; l < alloc.layers; ++l) {
    for (int h = 0; h < alloc.kv_heads; ++h) {
      out << l << ',' << h << ",K," << alloc.k_rank(l, h) << "\n";
      out << l << ',' << h << ",V," << alloc.v_rank(l, h) << "\n";
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

inline RankAllocation load_allocation_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  int head_dim = 0;
  bool header_seen = false;
  struct Row {
    int layer, head, rank;
    SlotKind kind;
  };
  std::vector<Row> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream cs(line.substr(1));
      std::string key, eq;
      int value = 0;
      if (cs >> key >> eq >> value && key == "head_dim" && eq == "=") head_dim = value;
      continue;
    }
    if (!header_seen) {
      if (line != "layer,head,kind,rank")
        throw IoError("allocation csv: expected header 'layer,head,kind,rank', got '" + line +
                      "'");
      header_seen = true;
      continue;
    }
    std::istringstream fs(line);
    std::string f0, f1, f2, f3;
    if (!std::getline(fs, f0, ',') || !std::getline(fs, f1, ',') || !std::getline(fs, f2, ',') ||
        !std::getline(fs, f3))
      throw IoError("allocation csv: bad row at line " + std::to_string(line_no));
    Row r{};
    try {
      r.layer = std::stoi(f0);
      r.head = std::stoi(f1);
      r.rank = std::stoi(f3);
    } catch (const std::exception&) {
      throw IoError("allocation csv: non-numeric field at line " + std::to_string(line_no));
    }
    if (f2 == "K" || f2 == "k")
      r.kind = SlotKind::key;
    else if (f2 == "V" || f2 == "v")
      r.kind = SlotKind::value;
    else
      throw IoError("allocation csv: kind must be K or V at line " + std::to_string(line_no));
    if (r.layer < 0 || r.head < 0)
      throw IoError("allocation csv: negative index at line " + std::to_string(line_no));
    rows.push_back(r);
  }
  if (head_dim < 1) throw IoError("allocation csv: missing '# head_dim = N' comment");
  if (rows.empty()) throw IoError("allocation csv: no data rows");
  int layers = 0, kv_heads = 0;
  for (const Row& r : rows) {
    layers = std::max(layers, r.layer + 1);
    kv_heads = std::max(kv_heads, r.head + 1);
  }
  RankAllocation alloc(layers, kv_heads, head_dim, 0);
  std::vector<char> seen(size_t(layers) * kv_heads * 2, 0);
  for (const Row& r : rows) {
    const size_t slot = (size_t(r.layer) * kv_heads + r.head) * 2 +
                        (r.kind == SlotKind::value ? 1 : 0);
    if (seen[slot])
      throw IoError("allocation csv: duplicate entry for layer " + std::to_string(r.layer) +
                    " head " + std::to_string(r.head));
    seen[slot] = 1;
    if (r.kind == SlotKind::key)
      alloc.k_rank(r.layer, r.head) = r.rank;
    else
      alloc.v_rank(r.layer, r.head) = r.rank;
  }
  for (char s : seen)
    if (!s) throw IoError("allocation csv: missing entries (expected one K and one V row per slot)");
  alloc.validate();
  return alloc;
}

}  // namespace mkv
