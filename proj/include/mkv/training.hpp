#pragma once

#include <chrono>
#include <span>
#include <string>
#include <vector>

#include "mkv/autodiff.hpp"
#include "mkv/model.hpp"
#include "mkv/projections.hpp"

namespace mkv {

// ---------------------------------------------------------------------------
// Rank schedule and sampling
// ---------------------------------------------------------------------------

// Candidate ranks drawn during training.  Full rank must be in the set:
// training at d is what anchors the projected model to the base model, so
// dropping it silently would undermine every downstream comparison.
struct Schedule {
  std::vector<int> ranks;  // strictly ascending, ends at head_dim

  static Schedule eighths(int head_dim) { return fractions(head_dim, 8); }
  static Schedule quarters(int head_dim) { return fractions(head_dim, 4); }
  static Schedule fractions(int head_dim, int denom) {
    if (head_dim % denom != 0)
      throw NotRepresentable("schedule: head_dim " + std::to_string(head_dim) +
                             " is not a multiple of " + std::to_string(denom));
    Schedule s;
    for (int i = 1; i <= denom; ++i) s.ranks.push_back(head_dim * i / denom);
    return s;
  }

  void validate(int head_dim) const {
    if (ranks.empty()) throw NotRepresentable("schedule: empty");
    for (size_t i = 0; i < ranks.size(); ++i) {
      if (ranks[i] < 1 || ranks[i] > head_dim)
        throw RankOutOfRange("schedule: rank " + std::to_string(ranks[i]) + " outside [1, " +
                             std::to_string(head_dim) + "]");
      if (i > 0 && ranks[i] <= ranks[i - 1])
        throw NotRepresentable("schedule: ranks must be strictly ascending");
    }
    if (ranks.back() != head_dim)
      throw NotRepresentable("schedule: full rank " + std::to_string(head_dim) +
                             " must be in the schedule");
  }
};

// Independent uniform draw per (layer, kv_head, K/V), in a fixed order so a
// seeded stream reproduces the same allocations.  fixed_rank != 0 pins every
// slot instead (the fixed-rank ablation).
inline RankAllocation sample_ranks(const Schedule& schedule, const ModelConfig& cfg, Rng& rng,
                                   int fixed_rank = 0) {
  schedule.validate(cfg.head_dim);
  RankAllocation alloc = RankAllocation::full(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim);
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      if (fixed_rank != 0) {
        alloc.k_rank(l, g) = fixed_rank;
        alloc.v_rank(l, g) = fixed_rank;
      } else {
        alloc.k_rank(l, g) = schedule.ranks[rng.bounded(schedule.ranks.size())];
        alloc.v_rank(l, g) = schedule.ranks[rng.bounded(schedule.ranks.size())];
      }
    }
  alloc.validate();
  return alloc;
}

// ---------------------------------------------------------------------------
// Distillation loss
// ---------------------------------------------------------------------------

struct DistillGraph {
  Tape tape;
  BankVars bank_vars;
  Var kd, lm, total;
};

// total = kd_weight * KL(teacher || student) + lm_weight * next-byte CE.
// The teacher is the same frozen model run through the baseline path, once
// per sequence, with no gradient.  kd covers every position; lm covers the
// n-1 next-token transitions.
inline DistillGraph build_distill_loss(const TransformerWeights& w, const ProjectionBank& bank,
                                       const RankAllocation& ranks,
                                       std::span<const std::vector<int>> batch, double kd_weight,
                                       double lm_weight) {
  if (batch.empty()) throw InsufficientTokens("distill: empty batch");
  DistillGraph g;
  const WeightVars wv = lift_weights(g.tape, w, false);
  g.bank_vars = lift_bank(g.tape, bank, true);

  Var kd_sum{}, lm_sum{};
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw InsufficientTokens("distill: sequences need at least 2 tokens");
    const Mat teacher_probs = softmax_rows_mat(forward_baseline(w, seq));
    const Var logits =
        build_logits(g.tape, wv, w.config, &g.bank_vars, &bank, &ranks, false, seq);
    const Var kd_s = g.tape.kl_div_logits_rows(teacher_probs, logits);
    const std::vector<int> targets(seq.begin() + 1, seq.end());
    const Var lm_s =
        g.tape.cross_entropy_rows(g.tape.slice_rows(logits, 0, int(seq.size()) - 1), targets);
    kd_sum = kd_sum.id < 0 ? kd_s : g.tape.add(kd_sum, kd_s);
    lm_sum = lm_sum.id < 0 ? lm_s : g.tape.add(lm_sum, lm_s);
  }
  const double inv_b = 1.0 / double(batch.size());
  g.kd = g.tape.scalar_mul(inv_b, kd_sum);
  g.lm = g.tape.scalar_mul(inv_b, lm_sum);
  g.total = g.tape.add(g.tape.scalar_mul(kd_weight, g.kd), g.tape.scalar_mul(lm_weight, g.lm));
  return g;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct TrainConfig {
  double kd_weight = 1.0;
  double lm_weight = 3.0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int steps = 2000;
  int batch_size = 4;
  uint64_t seed = 42;
  Schedule schedule;
  int fixed_rank = 0;  // ablation: pin every slot to this rank
};

struct StepMetrics {
  int step = 0;
  double kd = 0.0;
  double lm = 0.0;
  double total = 0.0;
  double wallclock_ms = 0.0;
};

struct AdamState {
  std::vector<Mat> m, v;
  int64_t t = 0;
};

// One Adam update; params[i] receives grads[i] (a null grad means zero
// gradient and still advances the moments).
inline void adam_step(std::vector<Mat*>& params, const std::vector<const Mat*>& grads,
                      AdamState& state, const TrainConfig& tc) {
  if (state.m.empty()) {
    for (Mat* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(tc.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(tc.beta2, double(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    Mat& m = state.m[i];
    Mat& v = state.v[i];
    for (size_t j = 0; j < p.size(); ++j) {
      const double gj = grads[i] ? grads[i]->data()[j] : 0.0;
      m.data()[j] = tc.beta1 * m.data()[j] + (1.0 - tc.beta1) * gj;
      v.data()[j] = tc.beta2 * v.data()[j] + (1.0 - tc.beta2) * gj * gj;
      const double mhat = m.data()[j] / bc1;
      const double vhat = v.data()[j] / bc2;
      p.data()[j] -= tc.lr * mhat / (std::sqrt(vhat) + tc.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct AblationFlags {
  int fixed_rank = 0;
  bool no_orthogonality = false;
  bool random_init = false;

  void validate() const {
    const int set = (fixed_rank != 0) + no_orthogonality + random_init;
    if (set > 1) throw ConflictingFlags("ablations are mutually exclusive");
  }
};

// Rewrites the bank for the requested ablation.  no_orthogonality turns the
// current basis into a raw unconstrained matrix; random_init replaces the
// PCA basis with a random rotation (generator still starts at zero).
inline void apply_ablation(ProjectionBank& bank, const AblationFlags& flags, Rng& rng) {
  flags.validate();
  if (flags.no_orthogonality) {
    bank.refresh_cache();
    bank.orthogonal = false;
    for (auto& s : bank.slots) {
      s.params = s.u_cached;
      s.u_init = Mat::identity(bank.config.head_dim);
    }
    bank.refresh_cache();
  } else if (flags.random_init) {
    for (auto& s : bank.slots) {
      s.u_init = random_orthogonal(bank.config.head_dim, rng);
      for (auto& p : s.params.data()) p = 0.0;
    }
    bank.refresh_cache();
  }
}

// ---------------------------------------------------------------------------
// Trainers
// ---------------------------------------------------------------------------

// Distillation under random rank sampling; only the bank parameters move.
// The base model is checksummed at construction and re-verified every step.
class DistillTrainer {
 public:
  DistillTrainer(const TransformerWeights& w, ProjectionBank& bank, const TrainConfig& tc)
      : weights_(w), bank_(bank), tc_(tc), rng_(tc.seed), base_checksum_(weights_checksum(w)) {
    tc_.schedule.validate(w.config.head_dim);
    if (tc_.fixed_rank != 0 &&
        (tc_.fixed_rank < 1 || tc_.fixed_rank > w.config.head_dim))
      throw RankOutOfRange("fixed rank outside [1, head_dim]");
  }

  StepMetrics step(std::span<const std::vector<int>> batch) {
    const auto t0 = std::chrono::steady_clock::now();
    const RankAllocation ranks = sample_ranks(tc_.schedule, weights_.config, rng_, tc_.fixed_rank);
    DistillGraph g =
        build_distill_loss(weights_, bank_, ranks, batch, tc_.kd_weight, tc_.lm_weight);
    const auto grads = g.tape.backward(g.total);

    std::vector<Mat*> params;
    std::vector<const Mat*> gptrs;
    for (size_t i = 0; i < bank_.slots.size(); ++i) {
      params.push_back(&bank_.slots[i].params);
      const auto it = grads.find(g.bank_vars.params[i].id);
      gptrs.push_back(it == grads.end() ? nullptr : &it->second);
    }
    adam_step(params, gptrs, adam_, tc_);
    bank_.refresh_cache();

    if (weights_checksum(weights_) != base_checksum_)
      throw Error("distill: frozen base model was mutated mid-training");

    StepMetrics metrics;
    metrics.step = ++step_;
    metrics.kd = g.tape.value(g.kd)(0, 0);
    metrics.lm = g.tape.value(g.lm)(0, 0);
    metrics.total = g.tape.value(g.total)(0, 0);
    metrics.wallclock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return metrics;
  }

  Rng& rng() { return rng_; }

 private:
  const TransformerWeights& weights_;
  ProjectionBank& bank_;
  TrainConfig tc_;
  Rng rng_;
  AdamState adam_;
  uint64_t base_checksum_;
  int step_ = 0;
};

// Plain next-byte cross-entropy training of the base model itself.
class Pretrainer {
 public:
  Pretrainer(TransformerWeights& w, const TrainConfig& tc) : weights_(w), tc_(tc), rng_(tc.seed) {
    for_each_tensor(weights_, [&](const std::string&, Mat& m) { tensors_.push_back(&m); });
  }

  StepMetrics step(std::span<const std::vector<int>> batch) {
    if (batch.empty()) throw InsufficientTokens("pretrain: empty batch");
    const auto t0 = std::chrono::steady_clock::now();
    Tape tape;
    const WeightVars wv = lift_weights(tape, weights_, true);
    Var loss_sum{};
    for (const auto& seq : batch) {
      if (seq.size() < 2) throw InsufficientTokens("pretrain: sequences need at least 2 tokens");
      const Var logits =
          build_logits(tape, wv, weights_.config, nullptr, nullptr, nullptr, false, seq);
      const std::vector<int> targets(seq.begin() + 1, seq.end());
      const Var ce =
          tape.cross_entropy_rows(tape.slice_rows(logits, 0, int(seq.size()) - 1), targets);
      loss_sum = loss_sum.id < 0 ? ce : tape.add(loss_sum, ce);
    }
    const Var loss = tape.scalar_mul(1.0 / double(batch.size()), loss_sum);
    const auto grads = tape.backward(loss);

    std::vector<Mat*> params = tensors_;
    std::vector<const Mat*> gptrs;
    for (size_t i = 0; i < wv.leaves.size(); ++i) {
      const auto it = grads.find(wv.leaves[i].id);
      gptrs.push_back(it == grads.end() ? nullptr : &it->second);
    }
    adam_step(params, gptrs, adam_, tc_);

    StepMetrics metrics;
    metrics.step = ++step_;
    metrics.lm = tape.value(loss)(0, 0);
    metrics.total = metrics.lm;
    metrics.wallclock_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return metrics;
  }

  Rng& rng() { return rng_; }

 private:
  TransformerWeights& weights_;
  TrainConfig tc_;
  Rng rng_;
  AdamState adam_;
  std::vector<Mat*> tensors_;
  int step_ = 0;
};

}  // namespace mkv
