#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mkv/checkpoint.hpp"
#include "mkv/config.hpp"
#include "mkv/errors.hpp"
#include "mkv/linalg.hpp"
#include "mkv/mat.hpp"

namespace mkv {

enum class SlotKind : int { key = 0, value = 1 };

// Per-(layer, kv_head, K/V) retained rank.  Stored layer-major so slot
// (l, h) lives at l * kv_heads + h.
struct RankAllocation {
  int layers = 0;
  int kv_heads = 0;
  int head_dim = 0;
  std::vector<int> k_ranks;
  std::vector<int> v_ranks;

  RankAllocation() = default;
  RankAllocation(int layers_, int kv_heads_, int head_dim_, int initial_rank)
      : layers(layers_),
        kv_heads(kv_heads_),
        head_dim(head_dim_),
        k_ranks(size_t(layers_) * kv_heads_, initial_rank),
        v_ranks(size_t(layers_) * kv_heads_, initial_rank) {}

  static RankAllocation full(int layers, int kv_heads, int head_dim) {
    return RankAllocation(layers, kv_heads, head_dim, head_dim);
  }

  int& k_rank(int l, int h) { return k_ranks[size_t(l) * kv_heads + h]; }
  int k_rank(int l, int h) const { return k_ranks[size_t(l) * kv_heads + h]; }
  int& v_rank(int l, int h) { return v_ranks[size_t(l) * kv_heads + h]; }
  int v_rank(int l, int h) const { return v_ranks[size_t(l) * kv_heads + h]; }
  int rank(int l, int h, SlotKind kind) const {
    return kind == SlotKind::key ? k_rank(l, h) : v_rank(l, h);
  }

  void validate() const {
    if (layers < 1 || kv_heads < 1 || head_dim < 1)
      throw ShapeMismatch("rank allocation: empty dimensions");
    for (int r : k_ranks)
      if (r < 1 || r > head_dim)
        throw RankOutOfRange("key rank " + std::to_string(r) + " outside [1, " +
                             std::to_string(head_dim) + "]");
    for (int r : v_ranks)
      if (r < 1 || r > head_dim)
        throw RankOutOfRange("value rank " + std::to_string(r) + " outside [1, " +
                             std::to_string(head_dim) + "]");
  }

  // Fraction of the full cache the allocation keeps: mean of r/d over all
  // key and value slots.
  double budget_fraction() const {
    double sum = 0.0;
    for (int r : k_ranks) sum += r;
    for (int r : v_ranks) sum += r;
    return sum / (2.0 * layers * kv_heads * head_dim);
  }

  bool operator==(const RankAllocation& o) const {
    return layers == o.layers && kv_heads == o.kv_heads && head_dim == o.head_dim &&
           k_ranks == o.k_ranks && v_ranks == o.v_ranks;
  }
};

// ---------------------------------------------------------------------------
// Projection bank
// ---------------------------------------------------------------------------

// One trainable orthogonal basis per (layer, kv_head, K/V).  In the standard
// mode U = Cayley(S) * U_init with S skew-symmetric and U_init frozen (the
// PCA basis); `params` is the strict lower triangle of S, initialized to zero
// so training starts exactly at the PCA solution.  The unconstrained ablation
// instead stores U itself in `params`.
struct ProjectionSlot {
  Mat u_init;   // d x d, frozen
  Mat params;   // 1 x d(d-1)/2 (orthogonal mode) or d x d (raw mode)
  Mat u_cached; // current U, refreshed after each optimizer step
};

struct ProjectionBank {
  ModelConfig config;
  bool orthogonal = true;
  std::vector<ProjectionSlot> slots;  // (layer * kv_heads + head) * 2 + kind

  int slot_count() const { return int(slots.size()); }
  int slot_index(int layer, int kv_head, SlotKind kind) const {
    return (layer * config.n_kv_heads + kv_head) * 2 + int(kind);
  }
  ProjectionSlot& slot(int layer, int kv_head, SlotKind kind) {
    return slots[slot_index(layer, kv_head, kind)];
  }
  const ProjectionSlot& slot(int layer, int kv_head, SlotKind kind) const {
    return slots[slot_index(layer, kv_head, kind)];
  }

  // Identity-basis bank (u_init = I, S = 0): the projected model reproduces
  // the base model at full rank by construction.
  static ProjectionBank identity(const ModelConfig& cfg) {
    cfg.validate();
    ProjectionBank bank;
    bank.config = cfg;
    const int d = cfg.head_dim;
    bank.slots.resize(size_t(cfg.n_layers) * cfg.n_kv_heads * 2);
    for (auto& s : bank.slots) {
      s.u_init = Mat::identity(d);
      s.params = Mat(1, int(SkewGenerator::param_count(d)));
      s.u_cached = s.u_init;
    }
    return bank;
  }

  void refresh_cache() {
    for (auto& s : slots) {
      if (orthogonal) {
        SkewGenerator gen(config.head_dim);
        for (size_t k = 0; k < gen.params.size(); ++k) gen.params[k] = s.params(0, int(k));
        s.u_cached = matmul(cayley_map(gen), s.u_init);
      } else {
        s.u_cached = s.params;
      }
    }
  }

  // First r columns of the slot's current basis.
  Mat truncated(int layer, int kv_head, SlotKind kind, int r) const {
    const int d = config.head_dim;
    if (r < 1 || r > d)
      throw RankOutOfRange("truncated: rank " + std::to_string(r) + " outside [1, " +
                           std::to_string(d) + "]");
    return slice_cols(slot(layer, kv_head, kind).u_cached, 0, r);
  }
};

// ---------------------------------------------------------------------------
// PCA initialization (uncentered)
// ---------------------------------------------------------------------------

struct PcaResult {
  Mat basis;                        // d x d, columns by descending eigenvalue
  std::vector<double> eigenvalues; // of X^T X / n, descending
};

// Eigendecomposition of the uncentered second-moment matrix of the sample
// rows.  Requires at least as many samples as dimensions.
inline PcaResult pca_init(const Mat& samples) {
  const int n = samples.rows(), d = samples.cols();
  if (d < 1) throw ShapeMismatch("pca_init: empty samples");
  if (n < d)
    throw InsufficientTokens("pca_init: " + std::to_string(n) + " samples for dimension " +
                             std::to_string(d));
  Mat cov(d, d);
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < d; ++a) {
      const double xa = samples(i, a);
      if (xa == 0.0) continue;
      for (int b = 0; b < d; ++b) cov(a, b) += xa * samples(i, b);
    }
  for (auto& v : cov.data()) v /= n;
  EighResult eig = jacobi_eigh(cov);
  return PcaResult{std::move(eig.eigenvectors), std::move(eig.eigenvalues)};
}

// ---------------------------------------------------------------------------
// Bank serialization
// ---------------------------------------------------------------------------

namespace detail {
inline std::string slot_prefix(int layer, int kv_head, SlotKind kind) {
  return "l" + std::to_string(layer) + ".h" + std::to_string(kv_head) +
         (kind == SlotKind::key ? ".k" : ".v");
}
}  // namespace detail

inline void save_bank(const std::string& path, const ProjectionBank& bank) {
  std::vector<TensorEntry> tensors;
  for (int l = 0; l < bank.config.n_layers; ++l)
    for (int h = 0; h < bank.config.n_kv_heads; ++h)
      for (SlotKind kind : {SlotKind::key, SlotKind::value}) {
        const auto& s = bank.slot(l, h, kind);
        const std::string prefix = detail::slot_prefix(l, h, kind);
        if (bank.orthogonal) {
          tensors.push_back({prefix + ".gen", s.params});
          tensors.push_back({prefix + ".u_init", s.u_init});
        } else {
          tensors.push_back({prefix + ".raw", s.params});
        }
      }
  write_tensor_file(path, CkptKind::bank, bank.config, tensors);
}

inline ProjectionBank load_bank(const std::string& path) {
  const TensorFile tf = read_tensor_file(path, CkptKind::bank);
  ProjectionBank bank;
  bank.config = tf.config;
  const int d = tf.config.head_dim;
  bank.slots.resize(size_t(tf.config.n_layers) * tf.config.n_kv_heads * 2);
  bank.orthogonal = tf.find("l0.h0.k.raw") == nullptr;
  for (int l = 0; l < tf.config.n_layers; ++l)
    for (int h = 0; h < tf.config.n_kv_heads; ++h)
      for (SlotKind kind : {SlotKind::key, SlotKind::value}) {
        auto& s = bank.slot(l, h, kind);
        const std::string prefix = detail::slot_prefix(l, h, kind);
        if (bank.orthogonal) {
          const Mat* gen = tf.find(prefix + ".gen");
          const Mat* u_init = tf.find(prefix + ".u_init");
          if (!gen || !u_init) throw IoError(path + ": missing tensors for slot " + prefix);
          if (gen->rows() != 1 || gen->cols() != int(SkewGenerator::param_count(d)) ||
              u_init->rows() != d || u_init->cols() != d)
            throw IoError(path + ": bad tensor shape for slot " + prefix);
          s.params = *gen;
          s.u_init = *u_init;
        } else {
          const Mat* raw = tf.find(prefix + ".raw");
          if (!raw) throw IoError(path + ": missing tensors for slot " + prefix);
          if (raw->rows() != d || raw->cols() != d)
            throw IoError(path + ": bad tensor shape for slot " + prefix);
          s.params = *raw;
          s.u_init = Mat::identity(d);
        }
      }
  bank.refresh_cache();
  return bank;
}

}  // namespace mkv
