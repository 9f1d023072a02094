// Greedy budget search: uniform baseline, calibration KL, the decrement loop
// (hand-traced and brute-force oracles), invariants, and the allocation CSV.

#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mkv/model.hpp"
#include "mkv/pca.hpp"
#include "mkv/search.hpp"
#include "test_util.hpp"

using namespace mkv;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.n_kv_heads = 2;
  cfg.head_dim = 8;
  cfg.vocab = 32;
  cfg.context = 16;
  return cfg;
}

std::vector<std::vector<int>> make_prompts(int count, int len, int vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<int>> prompts(count);
  for (auto& p : prompts) {
    p.resize(len);
    for (int& t : p) t = int(rng.bounded(uint64_t(vocab)));
  }
  return prompts;
}

struct SearchFixture {
  ModelConfig cfg = tiny_config();
  TransformerWeights w;
  ProjectionBank bank;
  std::vector<std::vector<int>> prompts;

  SearchFixture() {
    Rng rng(11);
    w = init_weights(cfg, rng);
    prompts = make_prompts(3, 12, cfg.vocab, 99);
    bank = init_bank(w, prompts).bank;
  }
};

SearchFixture& fixture() {
  static SearchFixture f;
  return f;
}

std::string temp_path(const std::string& name) {
  return testing::TempDir() + name;
}

}  // namespace

// ---------------------------------------------------------------------------
// uniform_allocation
// ---------------------------------------------------------------------------

TEST(UniformAllocation, HalfOfSixteenWithDeltaTwoGivesEight) {
  ModelConfig cfg;
  cfg.head_dim = 16;
  RankAllocation a = uniform_allocation(cfg, 0.5);
  for (int r : a.k_ranks) EXPECT_EQ(r, 8);
  for (int r : a.v_ranks) EXPECT_EQ(r, 8);
  EXPECT_DOUBLE_EQ(a.budget_fraction(), 0.5);
}

TEST(UniformAllocation, FullFractionGivesHeadDim) {
  ModelConfig cfg;
  cfg.head_dim = 16;
  RankAllocation a = uniform_allocation(cfg, 1.0);
  for (int r : a.k_ranks) EXPECT_EQ(r, 16);
  for (int r : a.v_ranks) EXPECT_EQ(r, 16);
}

TEST(UniformAllocation, NonGridFractionThrows) {
  ModelConfig cfg;
  cfg.head_dim = 16;
  // 0.30 * 16 = 4.8, not a multiple of 2: no silent rounding.
  EXPECT_THROW(uniform_allocation(cfg, 0.30), NotRepresentable);
}

TEST(UniformAllocation, BelowFloorThrows) {
  ModelConfig cfg;
  cfg.head_dim = 16;
  // 0.125 * 16 = 2, a clean multiple of delta but below the floor of 4.
  EXPECT_THROW(uniform_allocation(cfg, 0.125), NotRepresentable);
}

TEST(UniformAllocation, AboveFullThrows) {
  ModelConfig cfg;
  cfg.head_dim = 16;
  EXPECT_THROW(uniform_allocation(cfg, 1.25), NotRepresentable);
}

TEST(UniformAllocation, SevenBudgetGridAllRepresentableAtDefaultShape) {
  ModelConfig cfg;  // head_dim 16, delta 2, floor 4
  for (double f : {1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25}) {
    RankAllocation a = uniform_allocation(cfg, f);
    EXPECT_NEAR(a.budget_fraction(), f, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// calib_kl
// ---------------------------------------------------------------------------

TEST(CalibKl, FullRankIsZero) {
  SearchFixture& f = fixture();
  RankAllocation full = RankAllocation::full(f.cfg.n_layers, f.cfg.n_kv_heads, f.cfg.head_dim);
  double kl = calib_kl(f.w, f.bank, full, f.prompts);
  EXPECT_LE(std::fabs(kl), 1e-12);
}

TEST(CalibKl, ReducedRankIsPositive) {
  SearchFixture& f = fixture();
  RankAllocation half = uniform_allocation(f.cfg, 0.5);
  double kl = calib_kl(f.w, f.bank, half, f.prompts);
  EXPECT_GT(kl, 0.0);
}

TEST(CalibKl, EmptyPromptListThrows) {
  SearchFixture& f = fixture();
  RankAllocation full = RankAllocation::full(f.cfg.n_layers, f.cfg.n_kv_heads, f.cfg.head_dim);
  std::vector<std::vector<int>> none;
  EXPECT_THROW(calib_kl(f.w, f.bank, full, none), InsufficientTokens);
}

TEST(CalibKl, DisjointCalibrationSetsAgreeWithinAnOrderOfMagnitude) {
  // Stability diagnostic: two disjoint prompt sets should give the same
  // order of magnitude at a fixed allocation.
  SearchFixture& f = fixture();
  RankAllocation half = uniform_allocation(f.cfg, 0.5);
  auto set_a = make_prompts(3, 12, f.cfg.vocab, 7001);
  auto set_b = make_prompts(3, 12, f.cfg.vocab, 7002);
  double kl_a = calib_kl(f.w, f.bank, half, set_a);
  double kl_b = calib_kl(f.w, f.bank, half, set_b);
  ASSERT_GT(kl_a, 0.0);
  ASSERT_GT(kl_b, 0.0);
  double ratio = kl_a > kl_b ? kl_a / kl_b : kl_b / kl_a;
  EXPECT_LT(ratio, 10.0);
}

// ---------------------------------------------------------------------------
// greedy_search: loop semantics
// ---------------------------------------------------------------------------

TEST(GreedySearch, GammaOneAppliesExactlyOneDecrement) {
  SearchFixture& f = fixture();
  SearchConfig sc;
  sc.gamma = 1.0;
  SearchResult res = greedy_search(f.w, f.bank, f.prompts, sc);
  // head_dim 8: delta defaults to 1, floor to 2.
  int full_slots = 0, reduced_slots = 0;
  for (int r : res.allocation.k_ranks) (r == 8 ? full_slots : reduced_slots)++;
  for (int r : res.allocation.v_ranks) (r == 8 ? full_slots : reduced_slots)++;
  EXPECT_EQ(reduced_slots, 1);
  EXPECT_EQ(full_slots, 2 * f.cfg.n_layers * f.cfg.n_kv_heads - 1);
  EXPECT_EQ(res.iterations, 1);
  const double quantum = 1.0 / (2.0 * f.cfg.n_layers * f.cfg.n_kv_heads * f.cfg.head_dim);
  EXPECT_NEAR(res.achieved_budget, 1.0 - quantum, 1e-12);
}

TEST(GreedySearch, GammaOneChoosesTheArgminSlot) {
  // Independently score every single-decrement candidate and confirm the
  // loop picked the first minimum in (K-before-V, layer, head) order.
  SearchFixture& f = fixture();
  SearchConfig sc;
  sc.gamma = 1.0;
  SearchResult res = greedy_search(f.w, f.bank, f.prompts, sc);

  RankAllocation probe = RankAllocation::full(f.cfg.n_layers, f.cfg.n_kv_heads, f.cfg.head_dim);
  double best = 0.0;
  int best_slot = -1;
  int slot_index = 0;
  for (int kind_i = 0; kind_i < 2; ++kind_i) {
    SlotKind kind = kind_i == 0 ? SlotKind::key : SlotKind::value;
    for (int l = 0; l < f.cfg.n_layers; ++l)
      for (int h = 0; h < f.cfg.n_kv_heads; ++h) {
        int& r = kind == SlotKind::key ? probe.k_rank(l, h) : probe.v_rank(l, h);
        r -= 1;
        double eps = calib_kl(f.w, f.bank, probe, f.prompts);
        r += 1;
        if (best_slot < 0 || eps < best) {
          best = eps;
          best_slot = slot_index;
        }
        ++slot_index;
      }
  }

  // Locate the slot the search reduced, in the same enumeration order.
  int reduced_slot = -1;
  slot_index = 0;
  for (int kind_i = 0; kind_i < 2; ++kind_i) {
    SlotKind kind = kind_i == 0 ? SlotKind::key : SlotKind::value;
    for (int l = 0; l < f.cfg.n_layers; ++l)
      for (int h = 0; h < f.cfg.n_kv_heads; ++h) {
        if (res.allocation.rank(l, h, kind) == 7) reduced_slot = slot_index;
        ++slot_index;
      }
  }
  EXPECT_EQ(reduced_slot, best_slot);
  EXPECT_NEAR(res.calib_kl, best, 1e-15);
}

TEST(GreedySearch, TwoSlotHandTrace) {
  // L = H_kv = 1, d = 8, delta = 4, floor = 4, gamma = 0.75: iteration one
  // lowers one side to 4 (budget 0.75, not yet below target), iteration two
  // must lower the other side (the first is floor-bound), landing at 0.5.
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 1;
  cfg.n_kv_heads = 1;
  Rng rng21(21);
  TransformerWeights w = init_weights(cfg, rng21);
  auto prompts = make_prompts(2, 10, cfg.vocab, 5);
  ProjectionBank bank = init_bank(w, prompts).bank;

  SearchConfig sc;
  sc.gamma = 0.75;
  sc.delta_rank = 4;
  sc.floor_rank = 4;
  SearchResult res = greedy_search(w, bank, prompts, sc);
  EXPECT_EQ(res.allocation.k_rank(0, 0), 4);
  EXPECT_EQ(res.allocation.v_rank(0, 0), 4);
  EXPECT_DOUBLE_EQ(res.achieved_budget, 0.5);
  EXPECT_EQ(res.iterations, 2);
  // Iteration one scores two candidates, iteration two only the survivor.
  EXPECT_EQ(res.kl_evaluations, 3);
}

TEST(GreedySearch, MatchesBruteForceTraceOnTwoSlotInstance) {
  // Brute-force oracle: simulate the argmin-decrement loop independently and
  // require identical allocations at every target budget.
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 1;
  cfg.n_kv_heads = 1;
  Rng rng23(23);
  TransformerWeights w = init_weights(cfg, rng23);
  auto prompts = make_prompts(2, 10, cfg.vocab, 17);
  ProjectionBank bank = init_bank(w, prompts).bank;
  const int delta = 4, floor_r = 4;

  for (double gamma : {1.0, 0.75, 0.5}) {
    RankAllocation oracle = RankAllocation::full(1, 1, 8);
    for (;;) {
      double best = 0.0;
      int best_side = -1;  // 0 = K, 1 = V (K wins ties)
      for (int side = 0; side < 2; ++side) {
        int& r = side == 0 ? oracle.k_rank(0, 0) : oracle.v_rank(0, 0);
        if (r - delta < floor_r) continue;
        r -= delta;
        double eps = calib_kl(w, bank, oracle, prompts);
        r += delta;
        if (best_side < 0 || eps < best) {
          best = eps;
          best_side = side;
        }
      }
      if (best_side < 0) break;
      (best_side == 0 ? oracle.k_rank(0, 0) : oracle.v_rank(0, 0)) -= delta;
      if (oracle.budget_fraction() < gamma) break;
    }

    SearchConfig sc;
    sc.gamma = gamma;
    sc.delta_rank = delta;
    sc.floor_rank = floor_r;
    SearchResult res = greedy_search(w, bank, prompts, sc);
    EXPECT_EQ(res.allocation, oracle) << "gamma = " << gamma;
  }
}

TEST(GreedySearch, BudgetLandsInTheTerminalWindow) {
  // Achieved budget must sit in [gamma - quantum, gamma): one quantum is shed
  // per decrement and the loop stops at the first crossing.
  SearchFixture& f = fixture();
  const double quantum = 1.0 / (2.0 * f.cfg.n_layers * f.cfg.n_kv_heads * f.cfg.head_dim);
  for (double gamma : {0.875, 0.625, 0.5}) {
    SearchConfig sc;
    sc.gamma = gamma;
    SearchResult res = greedy_search(f.w, f.bank, f.prompts, sc);
    EXPECT_GE(res.achieved_budget, gamma - quantum - 1e-12) << "gamma = " << gamma;
    EXPECT_LT(res.achieved_budget, gamma) << "gamma = " << gamma;
    for (int r : res.allocation.k_ranks) EXPECT_GE(r, 2);
    for (int r : res.allocation.v_ranks) EXPECT_GE(r, 2);
  }
}

TEST(GreedySearch, GammaAtFloorBudgetStopsAtTheFloorAllocation) {
  // With gamma equal to the floor budget the strict stop condition can never
  // fire; the loop must still terminate, at the all-floor allocation.
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 1;
  cfg.n_kv_heads = 1;
  Rng rng29(29);
  TransformerWeights w = init_weights(cfg, rng29);
  auto prompts = make_prompts(2, 10, cfg.vocab, 31);
  ProjectionBank bank = init_bank(w, prompts).bank;

  SearchConfig sc;
  sc.gamma = 0.5;
  sc.delta_rank = 4;
  sc.floor_rank = 4;
  SearchResult res = greedy_search(w, bank, prompts, sc);
  EXPECT_EQ(res.allocation.k_rank(0, 0), 4);
  EXPECT_EQ(res.allocation.v_rank(0, 0), 4);
  EXPECT_DOUBLE_EQ(res.achieved_budget, 0.5);
}

TEST(GreedySearch, DeterministicAcrossRuns) {
  SearchFixture& f = fixture();
  SearchConfig sc;
  sc.gamma = 0.625;
  SearchResult a = greedy_search(f.w, f.bank, f.prompts, sc);
  SearchResult b = greedy_search(f.w, f.bank, f.prompts, sc);
  EXPECT_EQ(a.allocation, b.allocation);
  EXPECT_EQ(a.iterations, b.iterations);
  EXPECT_DOUBLE_EQ(a.calib_kl, b.calib_kl);
}

TEST(GreedySearch, EvaluationCountStaysWithinTheCostModel) {
  SearchFixture& f = fixture();
  SearchConfig sc;
  sc.gamma = 0.5;
  SearchResult res = greedy_search(f.w, f.bank, f.prompts, sc);
  ASSERT_GT(res.iterations, 0);
  EXPECT_LE(res.kl_evaluations,
            long(res.iterations) * 2 * f.cfg.n_layers * f.cfg.n_kv_heads);
}

TEST(GreedySearch, MeanRankDiagnosticsMatchTheAllocation) {
  SearchFixture& f = fixture();
  SearchConfig sc;
  sc.gamma = 0.5;
  SearchResult res = greedy_search(f.w, f.bank, f.prompts, sc);
  double k_sum = 0.0, v_sum = 0.0;
  for (int r : res.allocation.k_ranks) k_sum += r;
  for (int r : res.allocation.v_ranks) v_sum += r;
  EXPECT_DOUBLE_EQ(res.mean_k_rank, k_sum / res.allocation.k_ranks.size());
  EXPECT_DOUBLE_EQ(res.mean_v_rank, v_sum / res.allocation.v_ranks.size());
  EXPECT_NEAR((res.mean_k_rank + res.mean_v_rank) / (2.0 * f.cfg.head_dim),
              res.achieved_budget, 1e-12);
}

TEST(GreedySearch, ParallelAcceptReachesTheSameBudgetWindowInFewerRounds) {
  SearchFixture& f = fixture();
  SearchConfig serial;
  serial.gamma = 0.5;
  SearchResult s = greedy_search(f.w, f.bank, f.prompts, serial);

  SearchConfig par = serial;
  par.parallel_accept = 2;
  SearchResult p = greedy_search(f.w, f.bank, f.prompts, par);

  const double quantum = 1.0 / (2.0 * f.cfg.n_layers * f.cfg.n_kv_heads * f.cfg.head_dim);
  EXPECT_GE(p.achieved_budget, par.gamma - quantum - 1e-12);
  EXPECT_LT(p.achieved_budget, par.gamma);
  for (int r : p.allocation.k_ranks) EXPECT_GE(r, 2);
  for (int r : p.allocation.v_ranks) EXPECT_GE(r, 2);
  EXPECT_LT(p.iterations, s.iterations);
}

// ---------------------------------------------------------------------------
// greedy_search: configuration errors
// ---------------------------------------------------------------------------

TEST(GreedySearch, GammaBelowFloorBudgetIsInfeasible) {
  SearchFixture& f = fixture();
  SearchConfig sc;
  sc.gamma = 0.2;  // floor budget is 2/8 = 0.25
  EXPECT_THROW(greedy_search(f.w, f.bank, f.prompts, sc), InfeasibleBudget);
}

TEST(GreedySearch, GammaOutsideUnitIntervalIsRejected) {
  SearchFixture& f = fixture();
  SearchConfig sc;
  sc.gamma = 0.0;
  EXPECT_THROW(greedy_search(f.w, f.bank, f.prompts, sc), ConfigError);
  sc.gamma = 1.5;
  EXPECT_THROW(greedy_search(f.w, f.bank, f.prompts, sc), ConfigError);
}

TEST(GreedySearch, BadDeltaOrFloorIsRejected) {
  SearchFixture& f = fixture();
  SearchConfig sc;
  sc.gamma = 0.5;
  sc.delta_rank = 3;  // does not divide 8
  EXPECT_THROW(greedy_search(f.w, f.bank, f.prompts, sc), ConfigError);
  sc.delta_rank = 2;
  sc.floor_rank = 1;  // below delta
  EXPECT_THROW(greedy_search(f.w, f.bank, f.prompts, sc), ConfigError);
  sc.floor_rank = 3;  // not reachable from 8 in steps of 2
  EXPECT_THROW(greedy_search(f.w, f.bank, f.prompts, sc), ConfigError);
}

// ---------------------------------------------------------------------------
// Allocation CSV
// ---------------------------------------------------------------------------

TEST(AllocationCsv, RoundTripPreservesEverything) {
  RankAllocation a(2, 3, 16, 16);
  a.k_rank(0, 1) = 8;
  a.k_rank(1, 2) = 4;
  a.v_rank(0, 0) = 12;
  a.v_rank(1, 1) = 6;
  const std::string path = temp_path("alloc_roundtrip.csv");
  save_allocation_csv(path, a);
  RankAllocation b = load_allocation_csv(path);
  EXPECT_EQ(a, b);
  std::remove(path.c_str());
}

TEST(AllocationCsv, FileShapeIsHeaderPlusTwoRowsPerSlot) {
  RankAllocation a(2, 4, 16, 16);
  const std::string path = temp_path("alloc_shape.csv");
  save_allocation_csv(path, a);
  std::ifstream in(path, std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text.find('\r'), std::string::npos);
  std::istringstream lines(text);
  std::string line;
  int data_rows = 0;
  bool saw_comment = false, saw_header = false;
  while (std::getline(lines, line)) {
    if (line.rfind("# head_dim = 16", 0) == 0)
      saw_comment = true;
    else if (line == "layer,head,kind,rank")
      saw_header = true;
    else if (!line.empty())
      ++data_rows;
  }
  EXPECT_TRUE(saw_comment);
  EXPECT_TRUE(saw_header);
  EXPECT_EQ(data_rows, 2 * 2 * 4);
  std::remove(path.c_str());
}

TEST(AllocationCsv, MissingFileThrows) {
  EXPECT_THROW(load_allocation_csv(temp_path("nope_does_not_exist.csv")), IoError);
}

TEST(AllocationCsv, MissingHeadDimCommentThrows) {
  const std::string path = temp_path("alloc_nohd.csv");
  std::ofstream(path) << "layer,head,kind,rank\n0,0,K,8\n0,0,V,8\n";
  EXPECT_THROW(load_allocation_csv(path), IoError);
  std::remove(path.c_str());
}

TEST(AllocationCsv, MissingSlotRowThrows) {
  const std::string path = temp_path("alloc_missing.csv");
  std::ofstream(path) << "# head_dim = 8\nlayer,head,kind,rank\n0,0,K,8\n";
  EXPECT_THROW(load_allocation_csv(path), IoError);
  std::remove(path.c_str());
}

TEST(AllocationCsv, DuplicateRowThrows) {
  const std::string path = temp_path("alloc_dup.csv");
  std::ofstream(path) << "# head_dim = 8\nlayer,head,kind,rank\n0,0,K,8\n0,0,K,4\n0,0,V,8\n";
  EXPECT_THROW(load_allocation_csv(path), IoError);
  std::remove(path.c_str());
}

TEST(AllocationCsv, BadKindThrows) {
  const std::string path = temp_path("alloc_badkind.csv");
  std::ofstream(path) << "# head_dim = 8\nlayer,head,kind,rank\n0,0,Q,8\n0,0,V,8\n";
  EXPECT_THROW(load_allocation_csv(path), IoError);
  std::remove(path.c_str());
}

TEST(AllocationCsv, SearchedResultRoundTrips) {
  SearchFixture& f = fixture();
  SearchConfig sc;
  sc.gamma = 0.625;
  SearchResult res = greedy_search(f.w, f.bank, f.prompts, sc);
  const std::string path = temp_path("alloc_searched.csv");
  save_allocation_csv(path, res.allocation);
  EXPECT_EQ(load_allocation_csv(path), res.allocation);
  std::remove(path.c_str());
}
