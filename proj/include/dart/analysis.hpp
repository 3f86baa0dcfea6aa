#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "dart/image.hpp"
#include "dart/trainer.hpp"

// Post-hoc analysis: where the policy's attention goes, what breaks when
// parts of its input are taken away, and the normalized-score metric suite
// used to aggregate benchmark tables.

namespace dart {

// ---- normalized score metrics ----

struct ScoreRow {
  std::string game;
  double random = 0;
  double human = 0;
  std::vector<double> runs;
};

struct ScoreTable {
  std::vector<ScoreRow> rows;
};

// CSV schema: game,random,human,score_run1[,score_run2..]
inline ScoreTable load_score_table(const std::string& path) {
  auto cells = image::read_csv(path);
  if (cells.size() < 2) throw IoError("score table " + path + " has no data rows");
  ScoreTable t;
  for (std::size_t i = 1; i < cells.size(); ++i) {
    const auto& row = cells[i];
    if (row.size() < 4) throw IoError("score table row " + std::to_string(i) + " needs game,random,human,score");
    ScoreRow r;
    r.game = row[0];
    r.random = std::stod(row[1]);
    r.human = std::stod(row[2]);
    for (std::size_t c = 3; c < row.size(); ++c) r.runs.push_back(std::stod(row[c]));
    t.rows.push_back(std::move(r));
  }
  return t;
}

struct NormalizedMetrics {
  std::vector<std::string> games;
  std::vector<double> per_game;  // mean over runs of the normalized score
  double mean = 0;
  double median = 0;
  double iqm = 0;
  double optimality_gap = 0;
  int superhuman = 0;
};

// normalized = (score - random) / (human - random); aggregates follow the
// usual sample-efficiency conventions: median and mean over per-game
// scores, IQM = mean of the middle 50% of all per-run scores (25% trimmed
// from each side), optimality gap = mean over runs of 1 - min(score, 1),
// superhuman = games whose per-game score exceeds 1.
inline NormalizedMetrics normalized_metrics(const ScoreTable& table) {
  if (table.rows.empty()) throw ContractError("normalized_metrics: empty table");
  NormalizedMetrics m;
  std::vector<double> per_run;
  for (const auto& r : table.rows) {
    const double denom = r.human - r.random;
    if (denom == 0.0) throw ContractError("normalized_metrics: human == random for " + r.game);
    if (r.runs.empty()) throw ContractError("normalized_metrics: no runs for " + r.game);
    double acc = 0;
    for (double s : r.runs) {
      const double n = (s - r.random) / denom;
      per_run.push_back(n);
      acc += n;
    }
    m.games.push_back(r.game);
    m.per_game.push_back(acc / static_cast<double>(r.runs.size()));
  }

  const std::size_t g = m.per_game.size();
  std::vector<double> sorted_games = m.per_game;
  std::sort(sorted_games.begin(), sorted_games.end());
  m.mean = 0;
  for (double v : m.per_game) m.mean += v;
  m.mean /= static_cast<double>(g);
  m.median = g % 2 ? sorted_games[g / 2] : 0.5 * (sorted_games[g / 2 - 1] + sorted_games[g / 2]);

  std::sort(per_run.begin(), per_run.end());
  const std::size_t n = per_run.size();
  const std::size_t trim = n / 4;
  double acc = 0;
  for (std::size_t i = trim; i < n - trim; ++i) acc += per_run[i];
  m.iqm = acc / static_cast<double>(n - 2 * trim);

  double gap = 0;
  for (double v : per_run) gap += 1.0 - std::min(v, 1.0);
  m.optimality_gap = gap / static_cast<double>(n);

  for (double v : m.per_game)
    if (v > 1.0) ++m.superhuman;
  return m;
}

// ---- attention summary ----

struct AttentionSummary {
  Tensor<double> matrix;  // [L, K+2]: attention received per input position
  int n_states = 0;
  int layers = 0;
  int heads = 0;
};

// Plays evaluation episodes, sampling n_states (frame, memory) pairs as the
// policy actually visited them, then averages each layer's post-softmax
// attention over heads, query positions and states.
template <typename T>
AttentionSummary attention_summary(Trainer<T>& tr, int n_states, std::uint64_t seed) {
  if (n_states < 1) throw ContractError("attention_summary: n_states must be >= 1");
  const Config& cfg = tr.config();
  const int K = cfg.tok_tokens_per_image;
  const int L = cfg.pol_layers;
  const int H = cfg.pol_heads;
  const int S = K + 2;

  struct Visit {
    std::vector<int> ids;
    Tensor<T> mem;
  };
  std::vector<Visit> pool;
  RngStream reset_rng(seed, "attn_reset");
  RngStream act_rng(seed, "attn_act");
  RngStream pick_rng(seed, "attn_pick");
  Env& env = tr.env();
  while (static_cast<int>(pool.size()) < n_states) {
    Tensor<std::uint8_t> obs = env.reset(reset_rng.next_u64());
    Tensor<T> mem = tr.policy().initial_mem_value();
    bool done = false;
    while (!done) {
      const std::vector<int> ids = tr.tokenizer().tokenize(obs);
      pool.push_back(Visit{ids, mem});
      Tape<T> tp(true, true);
      auto po = tr.policy().forward(tp, ids, tp.constant(mem));
      const int a = tr.policy().act(tp, po.logits, cfg.pol_temperature_eval, act_rng).action;
      mem = tp.val(po.mem_next);
      StepResult sr = env.step(a);
      obs = sr.obs;
      done = sr.done;
    }
  }

  AttentionSummary out;
  out.matrix = Tensor<double>::zeros({L, S});
  out.n_states = n_states;
  out.layers = L;
  out.heads = H;
  for (int s = 0; s < n_states; ++s) {
    const Visit& v = pool[static_cast<std::size_t>(pick_rng.uniform_int(static_cast<int>(pool.size())))];
    Tape<T> tp(true, true);
    AttnRecord<T> rec;
    auto po = tr.policy().forward(tp, v.ids, tp.constant(v.mem), {}, nullptr, &rec);
    (void)po;
    if (static_cast<int>(rec.size()) != L * H) throw ContractError("attention_summary: unexpected record count");
    for (int l = 0; l < L; ++l)
      for (int h = 0; h < H; ++h) {
        const Tensor<T>& p = rec[static_cast<std::size_t>(l * H + h)];
        if (p.shape != Shape{S, S}) throw ShapeError("attention_summary: unexpected attention shape");
        for (int q = 0; q < S; ++q)
          for (int kcol = 0; kcol < S; ++kcol)
            out.matrix.at(l, kcol) += static_cast<double>(p.at(q, kcol)) / (H * S);
      }
  }
  for (auto& v : out.matrix.data) v /= n_states;
  return out;
}

// CSV (rows = layers, columns = CLS, t1..tK, MEM) plus a grayscale PGM
// scaled to the matrix maximum.
inline void write_attention_summary(const AttentionSummary& s, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const int L = s.matrix.shape[0], S = s.matrix.shape[1];
  std::vector<std::string> header{"layer", "CLS"};
  for (int k = 1; k <= S - 2; ++k) header.push_back("t" + std::to_string(k));
  header.push_back("MEM");
  std::vector<std::vector<std::string>> rows;
  for (int l = 0; l < L; ++l) {
    std::vector<std::string> row{std::to_string(l)};
    for (int c = 0; c < S; ++c) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", s.matrix.at(l, c));
      row.push_back(buf);
    }
    rows.push_back(std::move(row));
  }
  image::write_csv((fs::path(dir) / "attention.csv").string(), header, rows);

  double mx = 0;
  for (double v : s.matrix.data) mx = std::max(mx, v);
  Tensor<std::uint8_t> img = Tensor<std::uint8_t>::zeros({L, S});
  for (std::int64_t i = 0; i < img.size(); ++i)
    img[i] = mx > 0 ? static_cast<std::uint8_t>(std::lround(255.0 * s.matrix[i] / mx)) : 0;
  image::write_pgm((fs::path(dir) / "attention.pgm").string(), img);
}

template <typename T>
double mem_attention_share(Trainer<T>& tr, int n_states, std::uint64_t seed) {
  AttentionSummary s = attention_summary(tr, n_states, seed);
  double acc = 0;
  for (int l = 0; l < s.layers; ++l) acc += s.matrix.at(l, s.matrix.shape[1] - 1);
  return acc / s.layers;
}

// ---- ablations ----

struct AblateMode {
  enum class Kind { mask_mem, mask_obs, no_pe, no_eps } kind = Kind::mask_mem;
  int obs_pct = 0;

  bool eval_time() const { return kind == Kind::mask_mem || kind == Kind::mask_obs; }
};

inline AblateMode parse_ablate_mode(const std::string& s) {
  AblateMode m;
  if (s == "mask-mem") {
    m.kind = AblateMode::Kind::mask_mem;
  } else if (s.rfind("mask-obs:", 0) == 0) {
    m.kind = AblateMode::Kind::mask_obs;
    const std::string pct = s.substr(9);
    try {
      std::size_t used = 0;
      m.obs_pct = std::stoi(pct, &used);
      if (used != pct.size()) throw std::invalid_argument(pct);
    } catch (const std::exception&) {
      throw ConfigError("ablate: bad mask-obs percentage '" + pct + "'");
    }
    if (m.obs_pct < 0 || m.obs_pct > 100) throw ConfigError("ablate: mask-obs percentage outside [0,100]");
  } else if (s == "no-pe") {
    m.kind = AblateMode::Kind::no_pe;
  } else if (s == "no-eps") {
    m.kind = AblateMode::Kind::no_eps;
  } else {
    throw ConfigError("ablate: unknown mode '" + s + "' (mask-mem, mask-obs:P, no-pe, no-eps)");
  }
  return m;
}

// Per-episode returns under an evaluation-time mask. mask-obs redraws the
// ceil(p*K/100) hidden positions independently every step; a zero-position
// mask is the plain unmasked forward pass.
template <typename T>
std::vector<double> evaluate_masked(Trainer<T>& tr, const AblateMode* mode, int episodes, double temperature,
                                    std::uint64_t seed) {
  if (episodes < 1) throw ContractError("evaluate_masked: episodes must be >= 1");
  if (mode && !mode->eval_time()) throw ContractError("evaluate_masked: training-time mode");
  const int K = tr.config().tok_tokens_per_image;
  RngStream reset_rng(seed, "ablate_reset");
  RngStream act_rng(seed, "ablate_act");
  RngStream mask_rng(seed, "ablate_mask");
  const int n_mask = mode && mode->kind == AblateMode::Kind::mask_obs
                         ? static_cast<int>((static_cast<long>(mode->obs_pct) * K + 99) / 100)
                         : 0;
  Env& env = tr.env();
  std::vector<double> returns;
  for (int e = 0; e < episodes; ++e) {
    Tensor<std::uint8_t> obs = env.reset(reset_rng.next_u64());
    Tensor<T> mem = tr.policy().initial_mem_value();
    double ret = 0;
    bool done = false;
    while (!done) {
      PolicyMask pm;
      if (mode && mode->kind == AblateMode::Kind::mask_mem) pm.keep_mem = false;
      if (n_mask > 0) {
        std::vector<int> idx(static_cast<std::size_t>(K));
        for (int i = 0; i < K; ++i) idx[static_cast<std::size_t>(i)] = i;
        for (int i = 0; i < n_mask; ++i) {
          const int j = i + mask_rng.uniform_int(K - i);
          std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        }
        pm.obs_keep.assign(static_cast<std::size_t>(K), 1);
        for (int i = 0; i < n_mask; ++i) pm.obs_keep[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = 0;
      }
      Tape<T> tp(true, true);
      auto po = tr.policy().forward(tp, tr.tokenizer().tokenize(obs), tp.constant(mem), pm);
      const int a = tr.policy().act(tp, po.logits, temperature, act_rng).action;
      mem = tp.val(po.mem_next);
      StepResult sr = env.step(a);
      ret += sr.reward;
      obs = sr.obs;
      done = sr.done;
    }
    returns.push_back(ret);
  }
  return returns;
}

struct AblateReport {
  std::string mode;
  std::vector<double> per_seed_mean;
  double mean = 0;
  double stddev = 0;  // over the pooled per-episode returns
  int episodes = 0;
  int seeds = 0;
};

inline void finish_report(AblateReport& rep, const std::vector<std::vector<double>>& per_seed) {
  std::vector<double> pooled;
  for (const auto& rs : per_seed) {
    double m = 0;
    for (double r : rs) m += r;
    rep.per_seed_mean.push_back(m / static_cast<double>(rs.size()));
    pooled.insert(pooled.end(), rs.begin(), rs.end());
  }
  double mean = 0;
  for (double r : pooled) mean += r;
  mean /= static_cast<double>(pooled.size());
  double var = 0;
  for (double r : pooled) var += (r - mean) * (r - mean);
  rep.mean = mean;
  rep.stddev = std::sqrt(var / static_cast<double>(pooled.size()));
  rep.episodes = static_cast<int>(pooled.size() / per_seed.size());
  rep.seeds = static_cast<int>(per_seed.size());
}

// Zeroes the policy's positional table and pins its learning rate to zero,
// so training proceeds with no positional information.
template <typename T>
void freeze_positional_encoding(Policy<T>& pol) {
  for (auto* p : pol.params())
    if (p->name == "pol.pos") {
      std::fill(p->value.data.begin(), p->value.data.end(), T{0});
      p->lr_scale = 0.0;
      return;
    }
  throw ContractError("freeze_positional_encoding: pol.pos not found");
}

// Evaluation-time modes score an existing checkpoint under the mask;
// training-time modes (no-pe, no-eps) train a fresh run per seed with the
// modified configuration and score that.
template <typename T>
AblateReport ablate(const std::string& ckpt_path, const std::string& mode_str, int episodes, int seeds) {
  if (seeds < 1) throw ContractError("ablate: seeds must be >= 1");
  const AblateMode mode = parse_ablate_mode(mode_str);
  AblateReport rep;
  rep.mode = mode_str;
  std::vector<std::vector<double>> per_seed;
  if (mode.eval_time()) {
    auto tr = Trainer<T>::from_checkpoint(ckpt_path);
    for (int s = 0; s < seeds; ++s)
      per_seed.push_back(
          evaluate_masked(*tr, &mode, episodes, tr->config().pol_temperature_eval, tr->config().run_seed + 1000 + s));
  } else {
    ckpt::Reader r(ckpt_path);
    Config base;
    config_apply_text(base, r.text("trainer.config"), ckpt_path);
    for (int s = 0; s < seeds; ++s) {
      Config cfg = base;
      cfg.run_seed = base.run_seed + 1000 + s;
      if (mode.kind == AblateMode::Kind::no_eps) cfg.pol_epsilon = 0.0;
      Trainer<T> tr(cfg);
      if (mode.kind == AblateMode::Kind::no_pe) freeze_positional_encoding(tr.policy());
      while (tr.epoch() < cfg.train_epochs && tr.real_steps() < cfg.env_budget_steps) tr.train_epoch();
      per_seed.push_back(evaluate_masked(tr, nullptr, episodes, cfg.pol_temperature_eval, cfg.run_seed));
    }
  }
  finish_report(rep, per_seed);
  return rep;
}

}  // namespace dart
