// Command-line pipeline driver: pretrain a byte-level model, fit the PCA
// projection bank, distill it with random rank sampling, search per-head
// compression levels, and evaluate / export reports.
//
//   mkv pretrain --corpus <path> --config <path> --out <ckpt> [--seed N]
//   mkv pca-init --ckpt <base> --corpus <path> --out <bank> [--seed N]
//   mkv distill  --ckpt <base> --bank <in> --corpus <path> --steps N --out <bank>
//                [--fixed-rank r] [--no-orthogonality] [--random-init] [--seed N]
//   mkv search   --ckpt <base> --bank <bank> --calib <path> --gamma G --out <csv> [--seed N]
//   mkv eval     --ckpt <base> --bank <bank> --alloc <csv|uniform:F> --corpus <path> [--seed N]
//   mkv heatmap  --alloc <csv> --out <csv>
//
// Every command is deterministic for a fixed seed; failures print a single
// "error: ..." line to stderr and exit 2.

#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mkv/harness.hpp"
#include "mkv/pca.hpp"

namespace {

using namespace mkv;

// ---------------------------------------------------------------------------
// Flag parsing
// ---------------------------------------------------------------------------

const std::set<std::string> kBoolFlags = {"--no-orthogonality", "--random-init"};

struct Args {
  std::map<std::string, std::string> values;
  std::set<std::string> bools;

  bool has(const std::string& flag) const {
    return values.count(flag) != 0 || bools.count(flag) != 0;
  }
  const std::string& need(const std::string& flag) const {
    const auto it = values.find(flag);
    if (it == values.end()) throw ConfigError("missing required flag " + flag);
    return it->second;
  }
  std::string get(const std::string& flag, const std::string& fallback) const {
    const auto it = values.find(flag);
    return it == values.end() ? fallback : it->second;
  }
};

Args parse_args(int argc, char** argv, int start) {
  Args args;
  for (int i = start; i < argc; ++i) {
    const std::string flag = argv[i];
    if (flag.rfind("--", 0) != 0) throw ConfigError("expected a --flag, got '" + flag + "'");
    if (kBoolFlags.count(flag)) {
      if (!args.bools.insert(flag).second) throw ConfigError("duplicate flag " + flag);
      continue;
    }
    if (i + 1 >= argc) throw ConfigError("flag " + flag + " needs a value");
    if (!args.values.emplace(flag, argv[i + 1]).second)
      throw ConfigError("duplicate flag " + flag);
    ++i;
  }
  return args;
}

void reject_unknown(const Args& args, const std::set<std::string>& known) {
  for (const auto& [flag, _] : args.values)
    if (!known.count(flag)) throw ConfigError("unknown flag " + flag);
  for (const auto& flag : args.bools)
    if (!known.count(flag)) throw ConfigError("unknown flag " + flag);
}

uint64_t parse_seed(const Args& args) {
  const std::string s = args.get("--seed", "42");
  size_t pos = 0;
  uint64_t v = 0;
  try {
    v = std::stoull(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("bad --seed value '" + s + "'");
  }
  if (pos != s.size()) throw ConfigError("bad --seed value '" + s + "'");
  return v;
}

long parse_long_flag(const Args& args, const std::string& flag) {
  const std::string s = args.need(flag);
  size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("bad " + flag + " value '" + s + "'");
  }
  if (pos != s.size()) throw ConfigError("bad " + flag + " value '" + s + "'");
  return v;
}

double parse_real_flag(const Args& args, const std::string& flag) {
  const std::string s = args.need(flag);
  size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ConfigError("bad " + flag + " value '" + s + "'");
  }
  if (pos != s.size()) throw ConfigError("bad " + flag + " value '" + s + "'");
  return v;
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

std::vector<std::vector<int>> load_calibration_prompts(const std::string& path, int context) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("calibration file not found: " + path);
  std::vector<std::vector<int>> prompts;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<int> tokens;
    for (char c : line) {
      tokens.push_back(uint8_t(c));
      if (int(tokens.size()) == context) break;  // clip to the context window
    }
    prompts.push_back(std::move(tokens));
  }
  if (prompts.empty()) throw InsufficientTokens("calibration file has no prompts: " + path);
  if (prompts.size() < 5 || prompts.size() > 10)
    std::fprintf(stderr, "warning: %zu calibration prompts (recommended 5-10)\n", prompts.size());
  return prompts;
}

void progress(const char* stage, int step, int total, double loss) {
  std::fprintf(stderr, "%s step %d/%d loss %.6g\n", stage, step, total, loss);
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_pretrain(const Args& args) {
  reject_unknown(args, {"--corpus", "--config", "--out", "--seed"});
  const HarnessConfig hc = load_config_file(args.need("--config"));
  const Corpus corpus = Corpus::load(args.need("--corpus"));
  if (corpus.bytes.size() < size_t(10) * hc.model.context)
    throw InsufficientTokens("corpus too small: need at least 10 * context = " +
                             std::to_string(10 * hc.model.context) + " bytes");
  const uint64_t seed = parse_seed(args);

  Rng rng(seed);
  TransformerWeights w = init_weights(hc.model, rng, /*tied=*/false);
  TrainConfig tc;
  tc.lr = hc.lr;
  tc.steps = hc.steps;
  tc.batch_size = hc.batch_size;
  tc.seed = seed;
  Pretrainer trainer(w, tc);
  std::vector<StepMetrics> metrics;
  metrics.reserve(hc.steps);
  const int report_every = std::max(1, hc.steps / 10);
  for (int s = 0; s < hc.steps; ++s) {
    const auto batch = corpus.train_batch(rng, hc.batch_size, hc.model.context);
    metrics.push_back(trainer.step(batch));
    if ((s + 1) % report_every == 0 || s + 1 == hc.steps)
      progress("pretrain", s + 1, hc.steps, metrics.back().lm);
  }
  const std::string out = args.need("--out");
  save_weights(out, w);
  write_metrics_csv(out + ".metrics.csv", metrics);

  const double train_loss = metrics.empty() ? 0.0 : metrics.back().lm;
  const EvalReport rep = evaluate(w, nullptr, nullptr, corpus);
  std::printf("final train loss %s eval loss %s\n", format_g9(train_loss).c_str(),
              format_g9(std::log(rep.perplexity)).c_str());
  return 0;
}

int cmd_pca_init(const Args& args) {
  reject_unknown(args, {"--ckpt", "--corpus", "--out", "--seed"});
  const TransformerWeights w = load_weights(args.need("--ckpt"));
  const Corpus corpus = Corpus::load(args.need("--corpus"));
  Rng rng(parse_seed(args));

  // A small training-split sample is enough for the per-slot second moments.
  std::vector<std::vector<int>> prompts;
  for (int i = 0; i < 32; ++i) prompts.push_back(corpus.train_chunk(rng, w.config.context));
  const PcaInitResult result = init_bank(w, prompts);
  save_bank(args.need("--out"), result.bank);

  // Eigenvalue tails at each schedule rank: the share of state variance a
  // rank-r truncation would discard.  Small tails mean a compressible slot.
  const Schedule sched = Schedule::eighths(w.config.head_dim);
  std::printf("slot,total_variance");
  for (int r : sched.ranks) std::printf(",tail@%d", r);
  std::printf("\n");
  size_t slot_idx = 0;
  for (int l = 0; l < w.config.n_layers; ++l)
    for (int g = 0; g < w.config.n_kv_heads; ++g)
      for (const char* kind : {"k", "v"}) {
        const std::vector<double>& ev = result.eigenvalues[slot_idx++];
        double total = 0.0;
        for (double v : ev) total += v;
        std::printf("l%d.h%d.%s,%s", l, g, kind, format_g9(total).c_str());
        for (int r : sched.ranks) {
          double tail = 0.0;
          for (size_t i = size_t(r); i < ev.size(); ++i) tail += ev[i];
          std::printf(",%s", format_g9(total > 0.0 ? tail / total : 0.0).c_str());
        }
        std::printf("\n");
      }

  // Full-rank sanity: the fresh bank must reproduce the plain model exactly.
  const RankAllocation full =
      RankAllocation::full(w.config.n_layers, w.config.n_kv_heads, w.config.head_dim);
  const auto& probe = prompts.front();
  const double delta =
      max_abs_diff(forward_baseline(w, probe), forward_projected(w, result.bank, full, probe));
  std::printf("full-rank identity check: max abs delta %s %s\n", format_g9(delta).c_str(),
              delta <= 1e-8 ? "ok" : "FAILED");
  return delta <= 1e-8 ? 0 : 1;
}

int cmd_distill(const Args& args) {
  reject_unknown(args, {"--ckpt", "--bank", "--corpus", "--steps", "--out", "--fixed-rank",
                        "--no-orthogonality", "--random-init", "--seed"});
  const TransformerWeights w = load_weights(args.need("--ckpt"));
  ProjectionBank bank = load_bank(args.need("--bank"));
  if (!(bank.config == w.config))
    throw ConfigError("bank and checkpoint disagree on the model shape");
  const Corpus corpus = Corpus::load(args.need("--corpus"));
  const long steps = parse_long_flag(args, "--steps");
  if (steps < 0) throw ConfigError("--steps must be >= 0");
  const uint64_t seed = parse_seed(args);

  AblationFlags flags;
  if (args.has("--fixed-rank")) flags.fixed_rank = int(parse_long_flag(args, "--fixed-rank"));
  flags.no_orthogonality = args.has("--no-orthogonality");
  flags.random_init = args.has("--random-init");
  flags.validate();

  Rng rng(seed);
  apply_ablation(bank, flags, rng);

  TrainConfig tc;
  tc.lr = 5e-3;
  tc.steps = int(steps);
  tc.seed = seed;
  tc.schedule = Schedule::eighths(w.config.head_dim);
  tc.fixed_rank = flags.fixed_rank;
  DistillTrainer trainer(w, bank, tc);
  std::vector<StepMetrics> metrics;
  metrics.reserve(steps);
  const int report_every = std::max(1, int(steps) / 10);
  for (long s = 0; s < steps; ++s) {
    const auto batch = corpus.train_batch(rng, tc.batch_size, w.config.context);
    metrics.push_back(trainer.step(batch));
    if ((s + 1) % report_every == 0 || s + 1 == steps)
      progress("distill", int(s + 1), int(steps), metrics.back().total);
  }
  const std::string out = args.need("--out");
  save_bank(out, bank);
  write_metrics_csv(out + ".metrics.csv", metrics);
  if (metrics.empty())
    std::printf("distilled 0 steps\n");
  else
    std::printf("distilled %ld steps final kd %s lm %s\n", steps,
                format_g9(metrics.back().kd).c_str(), format_g9(metrics.back().lm).c_str());
  return 0;
}

int cmd_search(const Args& args) {
  reject_unknown(args, {"--ckpt", "--bank", "--calib", "--gamma", "--out", "--seed"});
  const TransformerWeights w = load_weights(args.need("--ckpt"));
  const ProjectionBank bank = load_bank(args.need("--bank"));
  if (!(bank.config == w.config))
    throw ConfigError("bank and checkpoint disagree on the model shape");
  const auto prompts = load_calibration_prompts(args.need("--calib"), w.config.context);

  SearchConfig sc;
  sc.gamma = parse_real_flag(args, "--gamma");
  const SearchResult res = greedy_search(w, bank, prompts, sc);
  save_allocation_csv(args.need("--out"), res.allocation);

  std::printf("achieved budget %s calibration kl %s iterations %d evaluations %ld\n",
              format_g9(res.achieved_budget).c_str(), format_g9(res.calib_kl).c_str(),
              res.iterations, res.kl_evaluations);
  std::printf("mean key rank %s mean value rank %s\n", format_g9(res.mean_k_rank).c_str(),
              format_g9(res.mean_v_rank).c_str());

  // Paired reference point: the uniform allocation at the largest grid
  // fraction not exceeding gamma.
  const int d = w.config.head_dim;
  const int delta = d / 8;
  int uniform_rank = (int(std::floor(sc.gamma * d / delta)) * delta);
  uniform_rank = std::min(uniform_rank, d);
  if (uniform_rank >= d / 4) {
    const RankAllocation uni = uniform_allocation(w.config, double(uniform_rank) / d);
    const double uni_kl = calib_kl(w, bank, uni, prompts);
    std::printf("uniform budget %s kl %s searched %s uniform\n",
                format_g9(uni.budget_fraction()).c_str(), format_g9(uni_kl).c_str(),
                res.calib_kl <= uni_kl ? "<=" : ">");
  }
  return 0;
}

int cmd_eval(const Args& args) {
  reject_unknown(args, {"--ckpt", "--bank", "--alloc", "--corpus", "--seed"});
  const TransformerWeights w = load_weights(args.need("--ckpt"));
  const ProjectionBank bank = load_bank(args.need("--bank"));
  if (!(bank.config == w.config))
    throw ConfigError("bank and checkpoint disagree on the model shape");
  const Corpus corpus = Corpus::load(args.need("--corpus"));

  const std::string alloc_arg = args.need("--alloc");
  RankAllocation alloc;
  std::string mode;
  if (alloc_arg.rfind("uniform:", 0) == 0) {
    const std::string frac = alloc_arg.substr(8);
    size_t pos = 0;
    double f = 0.0;
    try {
      f = std::stod(frac, &pos);
    } catch (const std::exception&) {
      throw ConfigError("bad --alloc fraction '" + frac + "'");
    }
    if (pos != frac.size()) throw ConfigError("bad --alloc fraction '" + frac + "'");
    alloc = uniform_allocation(w.config, f);
    mode = "uniform";
  } else {
    alloc = load_allocation_csv(alloc_arg);
    if (alloc.layers != w.config.n_layers || alloc.kv_heads != w.config.n_kv_heads ||
        alloc.head_dim != w.config.head_dim)
      throw ConfigError("allocation shape does not match the checkpoint");
    mode = "searched";
  }

  EvalReport rep = evaluate(w, &bank, &alloc, corpus);
  rep.mode = mode;
  std::printf("%s\n%s\n", sweep_header().c_str(), sweep_row_csv(rep).c_str());
  return 0;
}

int cmd_heatmap(const Args& args) {
  reject_unknown(args, {"--alloc", "--out", "--seed"});
  const RankAllocation alloc = load_allocation_csv(args.need("--alloc"));
  write_heatmap_csv(args.need("--out"), alloc);
  return 0;
}

int usage() {
  std::fprintf(stderr,
               "usage: mkv <command> --flags...\n"
               "commands:\n"
               "  pretrain --corpus <path> --config <path> --out <ckpt> [--seed N]\n"
               "  pca-init --ckpt <base> --corpus <path> --out <bank> [--seed N]\n"
               "  distill  --ckpt <base> --bank <in> --corpus <path> --steps N --out <bank>\n"
               "           [--fixed-rank r] [--no-orthogonality] [--random-init] [--seed N]\n"
               "  search   --ckpt <base> --bank <bank> --calib <path> --gamma G --out <csv>\n"
               "  eval     --ckpt <base> --bank <bank> --alloc <csv|uniform:F> --corpus <path>\n"
               "  heatmap  --alloc <csv> --out <csv>\n");
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return usage();
  const std::string cmd = argv[1];
  try {
    const Args args = parse_args(argc, argv, 2);
    if (cmd == "pretrain") return cmd_pretrain(args);
    if (cmd == "pca-init") return cmd_pca_init(args);
    if (cmd == "distill") return cmd_distill(args);
    if (cmd == "search") return cmd_search(args);
    if (cmd == "eval") return cmd_eval(args);
    if (cmd == "heatmap") return cmd_heatmap(args);
    std::fprintf(stderr, "error: unknown command '%s'\n", cmd.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
