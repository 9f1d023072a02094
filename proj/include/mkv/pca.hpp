#pragma once

#include <span>
#include <string>
#include <vector>

#include "mkv/model.hpp"
#include "mkv/projections.hpp"

namespace mkv {

// Post-rotary keys and raw values gathered from baseline forward passes, one
// row per (prompt, position), one matrix per cache slot.
struct StateSamples {
  int layers = 0, kv_heads = 0, head_dim = 0;
  std::vector<Mat> keys;    // layer * kv_heads + g, each total_rows x d
  std::vector<Mat> values;

  const Mat& key_rows(int l, int g) const { return keys[size_t(l) * kv_heads + g]; }
  const Mat& value_rows(int l, int g) const { return values[size_t(l) * kv_heads + g]; }
};

inline StateSamples collect_states(const TransformerWeights& w,
                                   std::span<const std::vector<int>> prompts) {
  const ModelConfig& cfg = w.config;
  StateSamples out;
  out.layers = cfg.n_layers;
  out.kv_heads = cfg.n_kv_heads;
  out.head_dim = cfg.head_dim;
  size_t total = 0;
  for (const auto& p : prompts) total += p.size();
  const int slots = cfg.n_layers * cfg.n_kv_heads;
  out.keys.assign(slots, Mat(int(total), cfg.head_dim));
  out.values.assign(slots, Mat(int(total), cfg.head_dim));

  size_t row0 = 0;
  for (const auto& prompt : prompts) {
    ForwardHooks hooks;
    hooks.kv_state = [&](int l, int g, const Mat& k, const Mat& v) {
      Mat& dk = out.keys[size_t(l) * cfg.n_kv_heads + g];
      Mat& dv = out.values[size_t(l) * cfg.n_kv_heads + g];
      for (int i = 0; i < k.rows(); ++i)
        for (int j = 0; j < cfg.head_dim; ++j) {
          dk(int(row0) + i, j) = k(i, j);
          dv(int(row0) + i, j) = v(i, j);
        }
    };
    forward_baseline(w, prompt, &hooks);
    row0 += prompt.size();
  }
  return out;
}

struct PcaInitResult {
  ProjectionBank bank;
  // Descending eigenvalues of each slot's second-moment matrix, bank slot
  // order; the tail sums are the oracle for how compressible a slot is.
  std::vector<std::vector<double>> eigenvalues;
};

// PCA-initialized bank: u_init is each slot's eigenbasis, the Cayley
// generator starts at zero so the initial U equals the PCA basis exactly.
inline PcaInitResult init_bank(const TransformerWeights& w,
                               std::span<const std::vector<int>> prompts) {
  const ModelConfig& cfg = w.config;
  const StateSamples samples = collect_states(w, prompts);
  PcaInitResult out;
  out.bank = ProjectionBank::identity(cfg);
  out.eigenvalues.resize(out.bank.slots.size());
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      PcaResult pk = pca_init(samples.key_rows(l, g));
      PcaResult pv = pca_init(samples.value_rows(l, g));
      auto& sk = out.bank.slot(l, g, SlotKind::key);
      auto& sv = out.bank.slot(l, g, SlotKind::value);
      sk.u_init = std::move(pk.basis);
      sv.u_init = std::move(pv.basis);
      out.eigenvalues[out.bank.slot_index(l, g, SlotKind::key)] = std::move(pk.eigenvalues);
      out.eigenvalues[out.bank.slot_index(l, g, SlotKind::value)] = std::move(pv.eigenvalues);
    }
  out.bank.refresh_cache();
  return out;
}

}  // namespace mkv
