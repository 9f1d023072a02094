#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mkv/model.hpp"
#include "mkv/pca.hpp"
#include "test_util.hpp"

using namespace mkv;
using mkv::testutil::mat_equal;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.n_kv_heads = 2;
  cfg.head_dim = 8;
  cfg.vocab = 32;
  cfg.context = 16;
  return cfg;
}

std::vector<int> random_prompt(const ModelConfig& cfg, int len, Rng& rng) {
  std::vector<int> p(len);
  for (auto& t : p) t = int(rng.bounded(cfg.vocab));
  return p;
}

// Bank whose bases are random rotations: full-rank projection must still be
// an exact identity on the logits.
ProjectionBank random_orthogonal_bank(const ModelConfig& cfg, uint64_t seed) {
  ProjectionBank bank = ProjectionBank::identity(cfg);
  Rng rng(seed);
  for (auto& s : bank.slots) s.u_init = random_orthogonal(cfg.head_dim, rng);
  bank.refresh_cache();
  return bank;
}

RankAllocation random_ranks(const ModelConfig& cfg, Rng& rng) {
  RankAllocation a = RankAllocation::full(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim);
  for (auto& r : a.k_ranks) r = 1 + int(rng.bounded(cfg.head_dim));
  for (auto& r : a.v_ranks) r = 1 + int(rng.bounded(cfg.head_dim));
  return a;
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(Forward, FullRankProjectionIsIdentity) {
  const ModelConfig cfg = small_config();
  Rng rng(101);
  const TransformerWeights w = init_weights(cfg, rng);
  const ProjectionBank bank = random_orthogonal_bank(cfg, 5);
  const RankAllocation full = RankAllocation::full(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim);
  for (int trial = 0; trial < 5; ++trial) {
    const auto prompt = random_prompt(cfg, 3 + int(rng.bounded(13)), rng);
    const Mat base = forward_baseline(w, prompt);
    EXPECT_LE(max_abs_diff(forward_projected(w, bank, full, prompt), base), 1e-8);
    EXPECT_LE(max_abs_diff(forward_projected(w, bank, full, prompt, /*merged=*/true), base), 1e-8);
  }
}

TEST(Forward, MergedValuePathMatchesReconstruction) {
  const ModelConfig cfg = small_config();
  Rng rng(102);
  const TransformerWeights w = init_weights(cfg, rng);
  const ProjectionBank bank = random_orthogonal_bank(cfg, 6);
  for (int trial = 0; trial < 5; ++trial) {
    const RankAllocation ranks = random_ranks(cfg, rng);
    const auto prompt = random_prompt(cfg, 10, rng);
    const Mat plain = forward_projected(w, bank, ranks, prompt, false);
    const Mat merged = forward_projected(w, bank, ranks, prompt, true);
    EXPECT_LE(max_abs_diff(plain, merged), 1e-10);
  }
}

TEST(Forward, AttentionRowsAreNormalized) {
  const ModelConfig cfg = small_config();
  Rng rng(103);
  const TransformerWeights w = init_weights(cfg, rng);
  const auto prompt = random_prompt(cfg, 9, rng);
  ForwardHooks hooks;
  int seen = 0;
  hooks.attn_probs = [&](int, int, const Mat& probs) {
    ++seen;
    for (int i = 0; i < probs.rows(); ++i) {
      double sum = 0.0;
      for (int j = 0; j < probs.cols(); ++j) {
        sum += probs(i, j);
        if (j > i) EXPECT_EQ(probs(i, j), 0.0) << "future position leaked";
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  };
  forward_baseline(w, prompt, &hooks);
  EXPECT_EQ(seen, cfg.n_layers * cfg.n_heads);
}

TEST(Forward, RejectsOverlongAndInvalidPrompts) {
  const ModelConfig cfg = small_config();
  Rng rng(104);
  const TransformerWeights w = init_weights(cfg, rng);
  EXPECT_THROW(forward_baseline(w, random_prompt(cfg, cfg.context + 1, rng)), ContextOverflow);
  EXPECT_THROW(forward_baseline(w, std::vector<int>{}), ContextOverflow);
  EXPECT_THROW(forward_baseline(w, std::vector<int>{cfg.vocab}), ShapeMismatch);
}

TEST(Forward, DeterministicAcrossCalls) {
  const ModelConfig cfg = small_config();
  Rng rng(105);
  const TransformerWeights w = init_weights(cfg, rng);
  const auto prompt = random_prompt(cfg, 12, rng);
  EXPECT_TRUE(mat_equal(forward_baseline(w, prompt), forward_baseline(w, prompt)));
}

TEST(Forward, GroupedQueryHeadsShareKvSlots) {
  ModelConfig cfg = small_config();
  cfg.n_heads = 4;
  cfg.n_kv_heads = 2;  // two query heads per kv group
  Rng rng(106);
  const TransformerWeights w = init_weights(cfg, rng);
  const ProjectionBank bank = random_orthogonal_bank(cfg, 7);
  EXPECT_EQ(bank.slot_count(), cfg.n_layers * cfg.n_kv_heads * 2);
  const RankAllocation full = RankAllocation::full(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim);
  const auto prompt = random_prompt(cfg, 11, rng);
  EXPECT_LE(max_abs_diff(forward_projected(w, bank, full, prompt), forward_baseline(w, prompt)),
            1e-8);
  // The merged output weights repeat the group's value rank across all query
  // heads in that group.
  RankAllocation ranks = full;
  ranks.v_rank(0, 0) = 3;
  ranks.v_rank(0, 1) = 5;
  const MergedOutput merged = merge_output_weights(w, bank, ranks);
  EXPECT_EQ(merged.per_head[0].rows(), 3);
  EXPECT_EQ(merged.per_head[1].rows(), 3);
  EXPECT_EQ(merged.per_head[2].rows(), 5);
  EXPECT_EQ(merged.per_head[3].rows(), 5);
  // And the cache allocates one slot per kv head, not per query head.
  CompressedKVCache cache(cfg, ranks);
  EXPECT_EQ(cache.slots.size(), size_t(cfg.n_layers) * cfg.n_kv_heads);
}

TEST(Decode, IncrementalMatchesOneShot) {
  const ModelConfig cfg = small_config();
  Rng rng(107);
  const TransformerWeights w = init_weights(cfg, rng);
  const ProjectionBank bank = random_orthogonal_bank(cfg, 8);
  const RankAllocation ranks = random_ranks(cfg, rng);
  const auto prompt = random_prompt(cfg, 12, rng);

  CompressedKVCache cache(cfg, ranks);
  for (size_t i = 0; i < prompt.size(); ++i) {
    const Mat step = decode_step(cache, w, bank, ranks, prompt[i]);
    const std::vector<int> prefix(prompt.begin(), prompt.begin() + i + 1);
    const Mat oneshot = forward_projected(w, bank, ranks, prefix, /*merged=*/true);
    EXPECT_LE(max_abs_diff(step, slice_rows(oneshot, int(i), int(i) + 1)), 1e-8)
        << "position " << i;
  }
}

TEST(Decode, CacheAccountingMatchesBudget) {
  const ModelConfig cfg = small_config();
  Rng rng(108);
  const TransformerWeights w = init_weights(cfg, rng);
  const ProjectionBank bank = random_orthogonal_bank(cfg, 9);
  const RankAllocation ranks = random_ranks(cfg, rng);
  CompressedKVCache cache(cfg, ranks);
  for (int i = 0; i < 6; ++i) decode_step(cache, w, bank, ranks, int(rng.bounded(cfg.vocab)));

  int64_t per_pos = 0;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int g = 0; g < cfg.n_kv_heads; ++g) per_pos += ranks.k_rank(l, g) + ranks.v_rank(l, g);
  EXPECT_EQ(cache.stored_scalars(), 6 * per_pos);
  EXPECT_DOUBLE_EQ(cache.budget_fraction(), ranks.budget_fraction());
  const double full_scalars = 6.0 * 2 * cfg.n_layers * cfg.n_kv_heads * cfg.head_dim;
  EXPECT_DOUBLE_EQ(double(cache.stored_scalars()) / full_scalars, cache.budget_fraction());
}

TEST(Decode, OverflowAndMismatchErrors) {
  ModelConfig cfg = small_config();
  cfg.context = 3;
  Rng rng(109);
  const TransformerWeights w = init_weights(cfg, rng);
  const ProjectionBank bank = random_orthogonal_bank(cfg, 10);
  const RankAllocation full = RankAllocation::full(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim);
  CompressedKVCache cache(cfg, full);
  for (int i = 0; i < 3; ++i) decode_step(cache, w, bank, full, 1);
  EXPECT_THROW(decode_step(cache, w, bank, full, 1), ContextOverflow);

  CompressedKVCache cache2(cfg, full);
  RankAllocation other = full;
  other.k_rank(0, 0) = 4;
  EXPECT_THROW(decode_step(cache2, w, bank, other, 1), ShapeMismatch);
}

TEST(Checkpoint, WeightsRoundTripBitExact) {
  const ModelConfig cfg = small_config();
  Rng rng(110);
  for (bool tied : {true, false}) {
    const TransformerWeights w = init_weights(cfg, rng, tied);
    const std::string path = temp_path("mkv_test_weights.ckpt");
    save_weights(path, w);
    const TransformerWeights r = load_weights(path);
    EXPECT_EQ(r.tied, tied);
    EXPECT_TRUE(r.config == cfg);
    EXPECT_EQ(weights_checksum(r), weights_checksum(w));
    const auto prompt = random_prompt(cfg, 7, rng);
    EXPECT_TRUE(mat_equal(forward_baseline(r, prompt), forward_baseline(w, prompt)));
    std::filesystem::remove(path);
  }
}

TEST(Checkpoint, RejectsBadMagicWrongKindAndTruncation) {
  const ModelConfig cfg = small_config();
  Rng rng(111);
  const TransformerWeights w = init_weights(cfg, rng);
  const std::string path = temp_path("mkv_test_corrupt.ckpt");
  save_weights(path, w);

  EXPECT_THROW(read_tensor_file(path, CkptKind::bank), FormatVersionMismatch);

  // Truncate mid-tensor.
  {
    std::ifstream in(path, std::ios::binary);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(buf.data(), std::streamsize(buf.size() - 11));
  }
  EXPECT_THROW(read_tensor_file(path), IoError);

  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "NOPE this is not a checkpoint";
  }
  EXPECT_THROW(read_tensor_file(path), FormatVersionMismatch);
  EXPECT_THROW(read_tensor_file(path + ".does_not_exist"), IoError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, ChecksumTracksEveryTensor) {
  const ModelConfig cfg = small_config();
  Rng rng(112);
  TransformerWeights w = init_weights(cfg, rng);
  const uint64_t before = weights_checksum(w);
  w.layers[1].w_down(0, 0) += 1e-9;
  EXPECT_NE(before, weights_checksum(w));
}

TEST(ErrorDecomposition, TermsRecombineExactly) {
  const ModelConfig cfg = small_config();
  Rng rng(113);
  const TransformerWeights w = init_weights(cfg, rng);
  const ProjectionBank bank = random_orthogonal_bank(cfg, 11);
  const auto prompt = random_prompt(cfg, 10, rng);
  for (int trial = 0; trial < 8; ++trial) {
    const int layer = int(rng.bounded(cfg.n_layers));
    const int head = int(rng.bounded(cfg.n_heads));
    const int r_k = 1 + int(rng.bounded(cfg.head_dim));
    const int r_v = 1 + int(rng.bounded(cfg.head_dim));
    const AttnErrorTerms terms =
        attention_error_decomposition(w, bank, prompt, layer, head, r_k, r_v);
    const Mat recombined = add(terms.attention_term, terms.value_term);
    const double denom = std::max(1e-12, frob_norm(terms.total));
    EXPECT_LE(frob_norm(sub(recombined, terms.total)) / denom, 1e-9);
  }
}

TEST(ErrorDecomposition, FullRankTermsVanish) {
  const ModelConfig cfg = small_config();
  Rng rng(114);
  const TransformerWeights w = init_weights(cfg, rng);
  const ProjectionBank bank = random_orthogonal_bank(cfg, 12);
  const auto prompt = random_prompt(cfg, 10, rng);
  const int d = cfg.head_dim;
  // Full key rank: attention probabilities are unchanged.
  const AttnErrorTerms tk = attention_error_decomposition(w, bank, prompt, 0, 1, d, d / 2);
  EXPECT_LE(frob_norm(tk.attention_term), 1e-10);
  // Full value rank: nothing escapes the value basis.
  const AttnErrorTerms tv = attention_error_decomposition(w, bank, prompt, 1, 0, d / 2, d);
  EXPECT_LE(frob_norm(tv.value_term), 1e-10);
  EXPECT_GE(frob_norm(tv.attention_term), 0.0);
}
