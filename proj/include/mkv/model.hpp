#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mkv/autodiff.hpp"
#include "mkv/checkpoint.hpp"
#include "mkv/config.hpp"
#include "mkv/errors.hpp"
#include "mkv/projections.hpp"

namespace mkv {

// Pre-norm decoder-only transformer: RMSNorm, rotary positions, gated SiLU
// MLP, optional grouped-query attention, byte-level vocabulary.  Activations
// are row vectors; weights multiply on the right.

struct TransformerWeights {
  ModelConfig config;
  bool tied = true;  // lm head shares the token embedding
  Mat tok_emb;       // vocab x E
  struct LayerWeights {
    Mat attn_norm;  // 1 x E
    Mat wq;         // E x E
    Mat wk;         // E x KV
    Mat wv;         // E x KV
    Mat wo;         // E x E
    Mat mlp_norm;   // 1 x E
    Mat w_gate;     // E x F
    Mat w_up;       // E x F
    Mat w_down;     // F x E
  };
  std::vector<LayerWeights> layers;
  Mat final_norm;  // 1 x E
  Mat lm_head;     // E x vocab, empty when tied
};

inline TransformerWeights init_weights(const ModelConfig& cfg, Rng& rng, bool tied = true) {
  cfg.validate();
  const int e = cfg.model_dim(), kv = cfg.kv_dim(), f = cfg.mlp_hidden();
  const double we = 1.0 / std::sqrt(double(e));
  const double wf = 1.0 / std::sqrt(double(f));
  TransformerWeights w;
  w.config = cfg;
  w.tied = tied;
  w.tok_emb = Mat::random_normal(cfg.vocab, e, rng, 0.05);
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.attn_norm = Mat(1, e);
    for (auto& v : l.attn_norm.data()) v = 1.0;
    l.wq = Mat::random_normal(e, e, rng, we);
    l.wk = Mat::random_normal(e, kv, rng, we);
    l.wv = Mat::random_normal(e, kv, rng, we);
    l.wo = Mat::random_normal(e, e, rng, we);
    l.mlp_norm = l.attn_norm;
    l.w_gate = Mat::random_normal(e, f, rng, we);
    l.w_up = Mat::random_normal(e, f, rng, we);
    l.w_down = Mat::random_normal(f, e, rng, wf);
  }
  w.final_norm = Mat(1, e);
  for (auto& v : w.final_norm.data()) v = 1.0;
  if (!tied) w.lm_head = Mat::random_normal(e, cfg.vocab, rng, 0.05);
  return w;
}

// Canonical tensor order shared by serialization, checksums, and the
// trainable-leaf layout.
template <class W, class Fn>
void for_each_tensor(W& weights, Fn&& fn) {
  fn("tok_emb", weights.tok_emb);
  for (size_t l = 0; l < weights.layers.size(); ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    auto& lw = weights.layers[l];
    fn(p + "attn_norm", lw.attn_norm);
    fn(p + "wq", lw.wq);
    fn(p + "wk", lw.wk);
    fn(p + "wv", lw.wv);
    fn(p + "wo", lw.wo);
    fn(p + "mlp_norm", lw.mlp_norm);
    fn(p + "w_gate", lw.w_gate);
    fn(p + "w_up", lw.w_up);
    fn(p + "w_down", lw.w_down);
  }
  fn("final_norm", weights.final_norm);
  if (!weights.tied) fn("lm_head", weights.lm_head);
}

inline void save_weights(const std::string& path, const TransformerWeights& w) {
  std::vector<TensorEntry> tensors;
  for_each_tensor(w, [&](const std::string& name, const Mat& m) { tensors.push_back({name, m}); });
  write_tensor_file(path, CkptKind::weights, w.config, tensors);
}

inline TransformerWeights load_weights(const std::string& path) {
  const TensorFile tf = read_tensor_file(path, CkptKind::weights);
  TransformerWeights w;
  w.config = tf.config;
  w.tied = tf.find("lm_head") == nullptr;
  w.layers.resize(tf.config.n_layers);
  if (!w.tied) w.lm_head = Mat(1, 1);
  for_each_tensor(w, [&](const std::string& name, Mat& m) {
    const Mat* src = tf.find(name);
    if (!src) throw IoError(path + ": missing tensor " + name);
    m = *src;
  });
  return w;
}

// FNV-1a over every tensor's name and payload bytes; used to assert the base
// model stays frozen during distillation.
inline uint64_t weights_checksum(const TransformerWeights& w) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for_each_tensor(w, [&](const std::string& name, const Mat& m) {
    mix(name.data(), name.size());
    mix(m.data().data(), m.size() * sizeof(double));
  });
  return h;
}

// ---------------------------------------------------------------------------
// Tape forward pass
// ---------------------------------------------------------------------------

struct WeightVars {
  Var tok_emb;
  struct LayerVars {
    Var attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
  };
  std::vector<LayerVars> layers;
  Var final_norm;
  Var lm_head;
  bool tied = true;
  std::vector<Var> leaves;  // canonical order, for optimizers
};

inline WeightVars lift_weights(Tape& t, const TransformerWeights& w, bool trainable) {
  WeightVars out;
  out.tied = w.tied;
  out.layers.resize(w.layers.size());
  std::vector<Var*> targets;
  targets.push_back(&out.tok_emb);
  for (auto& l : out.layers)
    for (Var* v : {&l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.mlp_norm, &l.w_gate, &l.w_up,
                   &l.w_down})
      targets.push_back(v);
  targets.push_back(&out.final_norm);
  if (!w.tied) targets.push_back(&out.lm_head);
  size_t idx = 0;
  for_each_tensor(w, [&](const std::string&, const Mat& m) {
    *targets[idx] = t.leaf(m, trainable);
    out.leaves.push_back(*targets[idx]);
    ++idx;
  });
  return out;
}

// Per-slot basis U lifted onto the tape.  In orthogonal mode the Cayley
// transform is rebuilt from the generator leaf every time, so gradients flow
// through (I + S)(I - S)^{-1} and the frozen u_init constant.
struct BankVars {
  std::vector<Var> params;  // trainable leaves, bank slot order
  std::vector<Var> u;       // derived bases, bank slot order
};

inline BankVars lift_bank(Tape& t, const ProjectionBank& bank, bool trainable) {
  BankVars out;
  const int d = bank.config.head_dim;
  const Var eye = t.constant(Mat::identity(d));
  for (const auto& s : bank.slots) {
    const Var p = t.leaf(s.params, trainable);
    out.params.push_back(p);
    if (bank.orthogonal) {
      const Var skew = t.skew_expand(p, d);
      const Var cayley = t.matmul(t.add(eye, skew), t.mat_inverse(t.sub(eye, skew)));
      out.u.push_back(t.matmul(cayley, t.constant(s.u_init)));
    } else {
      out.u.push_back(p);
    }
  }
  return out;
}

struct ForwardHooks {
  std::function<void(int layer, int kv_head, const Mat& k_rope, const Mat& v)> kv_state;
  std::function<void(int layer, const Mat& xn)> attn_input;
  std::function<void(int layer, int head, const Mat& probs)> attn_probs;
};

// One builder serves every path: baseline (bank == nullptr), projected
// reconstruction (A * V_r * U_r^T * W^O), and the merged form that folds
// U_r^T into the output weights (A * V_r * W^OV).  The softmax temperature
// stays 1/sqrt(head_dim) at every rank.
inline Var build_logits(Tape& t, const WeightVars& w, const ModelConfig& cfg,
                        const BankVars* bank, const ProjectionBank* bank_host,
                        const RankAllocation* ranks, bool merged_values,
                        std::span<const int> tokens, const ForwardHooks* hooks = nullptr) {
  const int n = int(tokens.size());
  if (n < 1 || n > cfg.context)
    throw ContextOverflow("forward: " + std::to_string(n) + " tokens for context " +
                          std::to_string(cfg.context));
  if (bank) {
    if (!ranks || !bank_host) throw Error("forward: projected path needs bank and ranks");
    ranks->validate();
    if (ranks->layers != cfg.n_layers || ranks->kv_heads != cfg.n_kv_heads ||
        ranks->head_dim != cfg.head_dim)
      throw ShapeMismatch("forward: rank allocation does not match model dimensions");
    if (!(bank_host->config.n_layers == cfg.n_layers &&
          bank_host->config.n_kv_heads == cfg.n_kv_heads &&
          bank_host->config.head_dim == cfg.head_dim))
      throw ShapeMismatch("forward: projection bank does not match model dimensions");
  }

  const int d = cfg.head_dim;
  const double att_scale = 1.0 / std::sqrt(double(d));
  std::vector<int> positions(n);
  for (int i = 0; i < n; ++i) positions[i] = i;

  Mat mask_m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) mask_m(i, j) = -1e30;
  const Var mask = t.constant(std::move(mask_m));

  Var x = t.embed_lookup(w.tok_emb, std::vector<int>(tokens.begin(), tokens.end()));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    const Var xn = t.rms_norm_rows(x, lw.attn_norm);
    if (hooks && hooks->attn_input) hooks->attn_input(l, t.value(xn));
    const Var q = t.matmul(xn, lw.wq);
    const Var k = t.matmul(xn, lw.wk);
    const Var v = t.matmul(xn, lw.wv);

    // Per kv-head cached streams, compressed when a bank is present.
    std::vector<Var> k_store(cfg.n_kv_heads), v_store(cfg.n_kv_heads), u_key(cfg.n_kv_heads),
        u_val(cfg.n_kv_heads);
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      Var kg = t.rope_rows(t.slice_cols(k, g * d, (g + 1) * d), positions, cfg.rope_base);
      Var vg = t.slice_cols(v, g * d, (g + 1) * d);
      if (hooks && hooks->kv_state) hooks->kv_state(l, g, t.value(kg), t.value(vg));
      if (bank) {
        const int ik = bank_host->slot_index(l, g, SlotKind::key);
        const int iv = bank_host->slot_index(l, g, SlotKind::value);
        u_key[g] = t.slice_cols(bank->u[ik], 0, ranks->k_rank(l, g));
        u_val[g] = t.slice_cols(bank->u[iv], 0, ranks->v_rank(l, g));
        kg = t.matmul(kg, u_key[g]);  // n x r_k, what the cache would hold
        vg = t.matmul(vg, u_val[g]);  // n x r_v
      }
      k_store[g] = kg;
      v_store[g] = vg;
    }

    Var attn_out{};
    std::vector<Var> head_outs;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = h / cfg.group_size();
      Var qh = t.rope_rows(t.slice_cols(q, h * d, (h + 1) * d), positions, cfg.rope_base);
      if (bank) qh = t.matmul(qh, u_key[g]);  // queries share the key basis
      const Var scores =
          t.add(t.scalar_mul(att_scale, t.matmul(qh, t.transpose(k_store[g]))), mask);
      const Var probs = t.softmax_rows(scores);
      if (hooks && hooks->attn_probs) hooks->attn_probs(l, h, t.value(probs));
      const Var ctx = t.matmul(probs, v_store[g]);  // n x (r_v | d)
      if (bank && merged_values) {
        // Fold the value reconstruction into this head's block of W^O.
        const Var wov = t.matmul(t.transpose(u_val[g]), t.slice_rows(lw.wo, h * d, (h + 1) * d));
        const Var contrib = t.matmul(ctx, wov);
        attn_out = attn_out.id < 0 ? contrib : t.add(attn_out, contrib);
      } else {
        head_outs.push_back(bank ? t.matmul(ctx, t.transpose(u_val[g])) : ctx);
      }
    }
    if (!(bank && merged_values)) attn_out = t.matmul(t.concat_cols(head_outs), lw.wo);
    x = t.add(x, attn_out);

    const Var xm = t.rms_norm_rows(x, lw.mlp_norm);
    const Var gate = t.silu(t.matmul(xm, lw.w_gate));
    const Var up = t.matmul(xm, lw.w_up);
    x = t.add(x, t.matmul(t.mul(gate, up), lw.w_down));
  }
  const Var xf = t.rms_norm_rows(x, w.final_norm);
  return w.tied ? t.matmul(xf, t.transpose(w.tok_emb)) : t.matmul(xf, w.lm_head);
}

inline Mat forward_baseline(const TransformerWeights& w, std::span<const int> tokens,
                            const ForwardHooks* hooks = nullptr) {
  Tape t;
  const WeightVars wv = lift_weights(t, w, false);
  return t.value(build_logits(t, wv, w.config, nullptr, nullptr, nullptr, false, tokens, hooks));
}

inline Mat forward_projected(const TransformerWeights& w, const ProjectionBank& bank,
                             const RankAllocation& ranks, std::span<const int> tokens,
                             bool merged_values = false, const ForwardHooks* hooks = nullptr) {
  Tape t;
  const WeightVars wv = lift_weights(t, w, false);
  const BankVars bv = lift_bank(t, bank, false);
  return t.value(
      build_logits(t, wv, w.config, &bv, &bank, &ranks, merged_values, tokens, hooks));
}

// ---------------------------------------------------------------------------
// Merged output weights and the incremental decode path
// ---------------------------------------------------------------------------

// W^OV for query head h is U_{r_v}^T (of h's kv group) times h's d-row block
// of W^O: an (r_v x E) matrix.  The truncated rows of W^O drop out entirely.
struct MergedOutput {
  int heads = 0;
  std::vector<Mat> per_head;  // layer * n_heads + h
};

inline MergedOutput merge_output_weights(const TransformerWeights& w, const ProjectionBank& bank,
                                         const RankAllocation& ranks) {
  ranks.validate();
  const ModelConfig& cfg = w.config;
  const int d = cfg.head_dim;
  MergedOutput out;
  out.heads = cfg.n_heads;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = h / cfg.group_size();
      const Mat u_r = bank.truncated(l, g, SlotKind::value, ranks.v_rank(l, g));
      const Mat wo_block = slice_rows(w.layers[l].wo, h * d, (h + 1) * d);
      out.per_head.push_back(matmul(transpose(u_r), wo_block));
    }
  return out;
}

// KV cache holding only the compressed coordinates.  Slot (l, g) stores
// length x r_k keys and length x r_v values.
struct CompressedKVCache {
  ModelConfig config;
  RankAllocation ranks;
  int length = 0;
  struct SlotCache {
    Mat k, v;  // preallocated at context rows
  };
  std::vector<SlotCache> slots;  // layer * n_kv_heads + g

  CompressedKVCache(const ModelConfig& cfg, const RankAllocation& alloc)
      : config(cfg), ranks(alloc) {
    cfg.validate();
    alloc.validate();
    if (alloc.layers != cfg.n_layers || alloc.kv_heads != cfg.n_kv_heads ||
        alloc.head_dim != cfg.head_dim)
      throw ShapeMismatch("kv cache: rank allocation does not match model dimensions");
    for (int l = 0; l < cfg.n_layers; ++l)
      for (int g = 0; g < cfg.n_kv_heads; ++g)
        slots.push_back({Mat(cfg.context, alloc.k_rank(l, g)), Mat(cfg.context, alloc.v_rank(l, g))});
  }

  SlotCache& slot(int l, int g) { return slots[size_t(l) * config.n_kv_heads + g]; }

  // Number of cached scalars actually stored; full cache would hold
  // length * 2 * L * H_kv * d.
  int64_t stored_scalars() const {
    int64_t per_pos = 0;
    for (int l = 0; l < config.n_layers; ++l)
      for (int g = 0; g < config.n_kv_heads; ++g)
        per_pos += ranks.k_rank(l, g) + ranks.v_rank(l, g);
    return per_pos * length;
  }
  double budget_fraction() const { return ranks.budget_fraction(); }
};

namespace detail {

inline Mat rms_norm_row(const Mat& x, const Mat& gain) {
  double ms = 0.0;
  for (int j = 0; j < x.cols(); ++j) ms += x(0, j) * x(0, j);
  const double rms = std::sqrt(ms / x.cols() + 1e-6);
  Mat out(1, x.cols());
  for (int j = 0; j < x.cols(); ++j) out(0, j) = x(0, j) * gain(0, j) / rms;
  return out;
}

inline void rope_row_inplace(Mat& x, int pos, double base) {
  for (int k = 0; k < x.cols() / 2; ++k) {
    const double theta = pos * std::pow(base, -2.0 * k / x.cols());
    const double c = std::cos(theta), s = std::sin(theta);
    const double x0 = x(0, 2 * k), x1 = x(0, 2 * k + 1);
    x(0, 2 * k) = x0 * c - x1 * s;
    x(0, 2 * k + 1) = x0 * s + x1 * c;
  }
}

inline void softmax_row_inplace(std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double sum = 0.0;
  for (auto& v : z) {
    v = std::exp(v - m);
    sum += v;
  }
  for (auto& v : z) v /= sum;
}

}  // namespace detail

// Appends one token to the cache and returns the 1 x vocab logits row.
// Mirrors the merged-value tape path; value reconstruction never happens at
// decode time.
inline Mat decode_step(CompressedKVCache& cache, const TransformerWeights& w,
                       const ProjectionBank& bank, const RankAllocation& ranks, int token) {
  const ModelConfig& cfg = w.config;
  if (!(ranks == cache.ranks)) throw ShapeMismatch("decode_step: ranks differ from cache ranks");
  if (cache.length >= cfg.context)
    throw ContextOverflow("decode_step: cache already holds " + std::to_string(cache.length) +
                          " of " + std::to_string(cfg.context) + " positions");
  if (token < 0 || token >= cfg.vocab) throw ShapeMismatch("decode_step: token outside vocab");

  const int d = cfg.head_dim;
  const int pos = cache.length;
  const double att_scale = 1.0 / std::sqrt(double(d));
  const MergedOutput merged = merge_output_weights(w, bank, ranks);

  Mat x(1, cfg.model_dim());
  for (int j = 0; j < cfg.model_dim(); ++j) x(0, j) = w.tok_emb(token, j);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    const Mat xn = detail::rms_norm_row(x, lw.attn_norm);
    const Mat q = matmul(xn, lw.wq);
    const Mat k = matmul(xn, lw.wk);
    const Mat v = matmul(xn, lw.wv);

    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      Mat kg = slice_cols(k, g * d, (g + 1) * d);
      detail::rope_row_inplace(kg, pos, cfg.rope_base);
      const Mat kc = matmul(kg, bank.truncated(l, g, SlotKind::key, ranks.k_rank(l, g)));
      const Mat vc = matmul(slice_cols(v, g * d, (g + 1) * d),
                            bank.truncated(l, g, SlotKind::value, ranks.v_rank(l, g)));
      auto& sc = cache.slot(l, g);
      for (int j = 0; j < kc.cols(); ++j) sc.k(pos, j) = kc(0, j);
      for (int j = 0; j < vc.cols(); ++j) sc.v(pos, j) = vc(0, j);
    }

    Mat attn_out(1, cfg.model_dim());
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = h / cfg.group_size();
      const auto& sc = cache.slot(l, g);
      const int rk = ranks.k_rank(l, g), rv = ranks.v_rank(l, g);
      Mat qh = slice_cols(q, h * d, (h + 1) * d);
      detail::rope_row_inplace(qh, pos, cfg.rope_base);
      const Mat qc = matmul(qh, bank.truncated(l, g, SlotKind::key, rk));

      std::vector<double> scores(size_t(pos) + 1);
      for (int tpos = 0; tpos <= pos; ++tpos) {
        double dot = 0.0;
        for (int j = 0; j < rk; ++j) dot += qc(0, j) * sc.k(tpos, j);
        scores[tpos] = dot * att_scale;
      }
      detail::softmax_row_inplace(scores);

      Mat ctx(1, rv);
      for (int tpos = 0; tpos <= pos; ++tpos) {
        const double a = scores[tpos];
        if (a == 0.0) continue;
        for (int j = 0; j < rv; ++j) ctx(0, j) += a * sc.v(tpos, j);
      }
      attn_out = add(attn_out, matmul(ctx, merged.per_head[size_t(l) * cfg.n_heads + h]));
    }
    x = add(x, attn_out);

    const Mat xm = detail::rms_norm_row(x, lw.mlp_norm);
    Mat gate = matmul(xm, lw.w_gate);
    for (auto& gv : gate.data()) gv = gv / (1.0 + std::exp(-gv));
    x = add(x, matmul(hadamard(gate, matmul(xm, lw.w_up)), lw.w_down));
  }
  cache.length += 1;

  const Mat xf = detail::rms_norm_row(x, w.final_norm);
  return w.tied ? matmul(xf, transpose(w.tok_emb)) : matmul(xf, w.lm_head);
}

// ---------------------------------------------------------------------------
// Probability helpers shared by evaluation, calibration, and distillation
// ---------------------------------------------------------------------------

inline Mat softmax_rows_mat(const Mat& z) {
  Mat out(z.rows(), z.cols());
  for (int i = 0; i < z.rows(); ++i) {
    double m = z(i, 0);
    for (int j = 1; j < z.cols(); ++j) m = std::max(m, z(i, j));
    double sum = 0.0;
    for (int j = 0; j < z.cols(); ++j) {
      out(i, j) = std::exp(z(i, j) - m);
      sum += out(i, j);
    }
    for (int j = 0; j < z.cols(); ++j) out(i, j) /= sum;
  }
  return out;
}

// Row-mean KL(softmax(teacher) || softmax(student)); probabilities are
// clamped at 1e-12 before the log, matching the tape primitives.
inline double mean_kl_logits(const Mat& teacher_logits, const Mat& student_logits) {
  check_same_shape(teacher_logits, student_logits, "mean_kl_logits");
  const Mat p = softmax_rows_mat(teacher_logits);
  double total = 0.0;
  for (int i = 0; i < p.rows(); ++i) {
    double m = student_logits(i, 0);
    for (int j = 1; j < p.cols(); ++j) m = std::max(m, student_logits(i, j));
    double sum = 0.0;
    for (int j = 0; j < p.cols(); ++j) sum += std::exp(student_logits(i, j) - m);
    const double lse = m + std::log(sum);
    for (int j = 0; j < p.cols(); ++j) {
      if (p(i, j) == 0.0) continue;
      total += p(i, j) * (std::log(std::max(p(i, j), 1e-12)) - (student_logits(i, j) - lse));
    }
  }
  return total / p.rows();
}

// ---------------------------------------------------------------------------
// Attention error decomposition
// ---------------------------------------------------------------------------

// For one query head, the gap between the exact attention output and the
// compressed one splits exactly into an attention-shift term (scores moved
// because keys were truncated) and a value-subspace term (components of V
// outside the kept value basis):
//   A V W_h - A~ V P W_h = (A - A~) V P W_h + A V (I - P) W_h,
// with P = U_r U_r^T the value-basis projector.
struct AttnErrorTerms {
  Mat total;           // n x E error of the compressed head output
  Mat attention_term;  // (A - A~) V P W_h
  Mat value_term;      // A V (I - P) W_h
};

inline AttnErrorTerms attention_error_decomposition(const TransformerWeights& w,
                                                    const ProjectionBank& bank,
                                                    std::span<const int> tokens, int layer,
                                                    int head, int r_k, int r_v) {
  const ModelConfig& cfg = w.config;
  if (layer < 0 || layer >= cfg.n_layers || head < 0 || head >= cfg.n_heads)
    throw ShapeMismatch("attention_error_decomposition: layer or head out of range");
  const int d = cfg.head_dim;
  const int n = int(tokens.size());
  const int g = head / cfg.group_size();

  Mat xn;  // baseline input rows to this layer's attention, post-norm
  ForwardHooks hooks;
  hooks.attn_input = [&](int l, const Mat& m) {
    if (l == layer) xn = m;
  };
  forward_baseline(w, tokens, &hooks);

  std::vector<int> positions(n);
  for (int i = 0; i < n; ++i) positions[i] = i;
  auto roped = [&](Mat m) {
    for (int i = 0; i < n; ++i) {
      Mat row = slice_rows(m, i, i + 1);
      detail::rope_row_inplace(row, positions[i], cfg.rope_base);
      for (int j = 0; j < m.cols(); ++j) m(i, j) = row(0, j);
    }
    return m;
  };

  const auto& lw = w.layers[layer];
  const Mat q = roped(slice_cols(matmul(xn, lw.wq), head * d, (head + 1) * d));
  const Mat k = roped(slice_cols(matmul(xn, lw.wk), g * d, (g + 1) * d));
  const Mat v = slice_cols(matmul(xn, lw.wv), g * d, (g + 1) * d);

  auto causal_softmax = [&](Mat scores) {
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) scores(i, j) = -1e30;
    return softmax_rows_mat(scores);
  };
  const double att_scale = 1.0 / std::sqrt(double(d));
  const Mat a_full = causal_softmax(scale(matmul(q, transpose(k)), att_scale));
  const Mat u_k = bank.truncated(layer, g, SlotKind::key, r_k);
  const Mat a_tilde =
      causal_softmax(scale(matmul(matmul(q, u_k), transpose(matmul(k, u_k))), att_scale));

  const Mat u_v = bank.truncated(layer, g, SlotKind::value, r_v);
  const Mat proj = matmul(u_v, transpose(u_v));  // P
  const Mat wo_block = slice_rows(lw.wo, head * d, (head + 1) * d);

  const Mat vp_wo = matmul(matmul(v, proj), wo_block);
  const Mat v_wo = matmul(v, wo_block);

  AttnErrorTerms terms;
  terms.total = sub(matmul(a_full, v_wo), matmul(a_tilde, vp_wo));
  terms.attention_term = matmul(sub(a_full, a_tilde), vp_wo);
  terms.value_term = sub(matmul(a_full, v_wo), matmul(a_full, vp_wo));
  return terms;
}

}  // namespace mkv
