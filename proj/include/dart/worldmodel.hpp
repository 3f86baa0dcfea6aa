#pragma once

#include <string>
#include <vector>

#include "dart/adam.hpp"
#include "dart/config.hpp"
#include "dart/layers.hpp"
#include "dart/ops.hpp"

// Causal transformer over interleaved observation/action sequences. Each
// environment step contributes K observation tokens followed by one action
// token; the net predicts the next observation token at every position
// that precedes one, and reward plus termination at every action slot.
// Imagination replays the same network position by position with a
// per-layer key/value cache, so sampled rollouts match teacher-forced
// evaluation up to float reassociation.

namespace dart {

// Flat position arithmetic for the interleaved layout.
struct SequenceLayout {
  int steps = 0;
  int tokens_per_step = 0;

  int slots_per_step() const { return tokens_per_step + 1; }
  int length() const { return steps * slots_per_step(); }
  int step_of(int pos) const { return pos / slots_per_step(); }
  int slot_of(int pos) const { return pos % slots_per_step(); }
  bool is_action_slot(int pos) const { return slot_of(pos) == tokens_per_step; }
  int token_pos(int step, int k) const { return step * slots_per_step() + k; }
  int action_pos(int step) const { return step * slots_per_step() + tokens_per_step; }
};

// One training example. `ids[p]` indexes the action table where
// `is_action[p]` is set, the token table otherwise. `next_token_target` is
// -1 at positions whose successor is not an observation token (the last
// token of each step precedes an action, and nothing follows the final
// action slot). Reward and termination targets are per step, read at the
// action slots.
template <typename T>
struct WmSequence {
  SequenceLayout layout;
  std::vector<int> ids;
  std::vector<std::uint8_t> is_action;
  std::vector<int> next_token_target;
  std::vector<T> reward_target;
  std::vector<int> done_target;
};

// Incremental decoding state: one key/value cache per layer plus enough
// bookkeeping to enforce the layout and the halt rule. Confined to a
// single rollout; the world model itself stays read-only during use.
template <typename T>
struct RolloutState {
  std::vector<Tensor<T>> kcache, vcache;  // per layer, [maxlen, dim], rows [0, len) valid
  int len = 0;
  int steps_imagined = 0;
  bool halted = false;
};

template <typename T>
class WorldModel {
 public:
  struct ForwardOut {
    Var hidden;       // [L, D]
    Var tok_logits;   // [L, N]
    Var reward;       // [L, 1]
    Var done_logits;  // [L, 2]
  };

  struct LossReport {
    double next_token_ce = 0;
    double reward_mse = 0;
    double termination_ce = 0;
    double total = 0;
  };

  struct StepResult {
    std::vector<int> tokens;  // empty when the step predicted termination
    T reward = 0;
    int done = 0;
  };

  WorldModel(const Config& cfg, int num_actions, std::uint64_t seed)
      : cfg_(cfg),
        num_actions_(num_actions),
        layout_{0, cfg.tok_tokens_per_image},
        max_positions_((cfg.wm_context_steps + cfg.wm_horizon + 1) * (cfg.tok_tokens_per_image + 1)) {
    if (num_actions < 1) throw ConfigError("worldmodel: num_actions must be >= 1");
    if (cfg.wm_embed_dim % cfg.wm_heads != 0)
      throw ConfigError("worldmodel.embed_dim must be divisible by worldmodel.heads");
    RngStream rng(seed, "worldmodel_init");
    tok_emb_ = Embedding<T>("wm.tok_emb", cfg.tok_codebook_size, cfg.wm_embed_dim, rng);
    act_emb_ = Embedding<T>("wm.act_emb", num_actions, cfg.wm_embed_dim, rng);
    pos_ = Param<T>("wm.pos", trunc_normal_init<T>({max_positions_, cfg.wm_embed_dim}, rng));
    blocks_.reserve(static_cast<std::size_t>(cfg.wm_layers));
    for (int l = 0; l < cfg.wm_layers; ++l)
      blocks_.emplace_back("wm.block" + std::to_string(l), cfg.wm_embed_dim, cfg.wm_heads, 4 * cfg.wm_embed_dim,
                           Activation::gelu, rng);
    ln_f_ = LayerNorm<T>("wm.lnf", cfg.wm_embed_dim);
    head_tok_ = Linear<T>("wm.head_tok", cfg.wm_embed_dim, cfg.tok_codebook_size, rng);
    head_reward_ = Linear<T>("wm.head_reward", cfg.wm_embed_dim, 1, rng);
    head_done_ = Linear<T>("wm.head_done", cfg.wm_embed_dim, 2, rng);

    tok_emb_.register_params(params_);
    act_emb_.register_params(params_);
    params_.add(pos_);
    for (auto& b : blocks_) b.register_params(params_);
    ln_f_.register_params(params_);
    head_tok_.register_params(params_);
    head_reward_.register_params(params_);
    head_done_.register_params(params_);
  }

  ParamSet<T>& params() { return params_; }
  const Config& config() const { return cfg_; }
  int num_actions() const { return num_actions_; }
  int max_positions() const { return max_positions_; }

  // Lays out a segment of T steps: grids of K token ids, one action, reward
  // and done flag per step.
  WmSequence<T> build_sequence(const std::vector<std::vector<int>>& token_grids, const std::vector<int>& actions,
                               const std::vector<T>& rewards, const std::vector<std::uint8_t>& dones) const {
    const std::size_t steps = token_grids.size();
    if (steps < 1) throw ContractError("build_sequence: segment must contain at least one step");
    if (actions.size() != steps || rewards.size() != steps || dones.size() != steps)
      throw ShapeError("build_sequence: per-step arrays disagree on length");
    const int K = cfg_.tok_tokens_per_image;
    WmSequence<T> seq;
    seq.layout = SequenceLayout{static_cast<int>(steps), K};
    if (seq.layout.length() > max_positions_)
      throw ShapeError("build_sequence: segment of " + std::to_string(steps) + " steps exceeds max positions " +
                       std::to_string(max_positions_));
    seq.ids.reserve(static_cast<std::size_t>(seq.layout.length()));
    seq.is_action.reserve(seq.ids.capacity());
    for (std::size_t t = 0; t < steps; ++t) {
      if (static_cast<int>(token_grids[t].size()) != K)
        throw ShapeError("build_sequence: step " + std::to_string(t) + " has " +
                         std::to_string(token_grids[t].size()) + " tokens, expected " + std::to_string(K));
      for (int id : token_grids[t]) {
        seq.ids.push_back(id);
        seq.is_action.push_back(0);
      }
      seq.ids.push_back(actions[t]);
      seq.is_action.push_back(1);
    }
    seq.next_token_target.assign(seq.ids.size(), -1);
    for (int p = 0; p + 1 < static_cast<int>(seq.ids.size()); ++p)
      if (!seq.is_action[static_cast<std::size_t>(p + 1)]) seq.next_token_target[static_cast<std::size_t>(p)] = seq.ids[static_cast<std::size_t>(p + 1)];
    seq.reward_target.assign(rewards.begin(), rewards.end());
    seq.done_target.reserve(steps);
    for (auto d : dones) seq.done_target.push_back(d ? 1 : 0);
    return seq;
  }

  // Inverse of build_sequence, for consumers that want grids back.
  static void deinterleave(const WmSequence<T>& seq, std::vector<std::vector<int>>& token_grids,
                           std::vector<int>& actions) {
    token_grids.clear();
    actions.clear();
    const int K = seq.layout.tokens_per_step;
    for (int t = 0; t < seq.layout.steps; ++t) {
      std::vector<int> grid;
      grid.reserve(static_cast<std::size_t>(K));
      for (int k = 0; k < K; ++k) grid.push_back(seq.ids[static_cast<std::size_t>(seq.layout.token_pos(t, k))]);
      token_grids.push_back(std::move(grid));
      actions.push_back(seq.ids[static_cast<std::size_t>(seq.layout.action_pos(t))]);
    }
  }

  // Teacher-forced pass over a full sequence. Heads are evaluated at every
  // position; training and tests select the positions they care about.
  ForwardOut forward(Tape<T>& tp, const std::vector<int>& ids, const std::vector<std::uint8_t>& is_action,
                     RngStream* drop_rng = nullptr, AttnRecord<T>* record = nullptr) {
    if (ids.size() != is_action.size()) throw ShapeError("wm forward: ids/is_action length mismatch");
    const int L = static_cast<int>(ids.size());
    if (L < 1) throw ShapeError("wm forward: empty sequence");
    if (L > max_positions_)
      throw ShapeError("wm forward: sequence length " + std::to_string(L) + " exceeds max positions " +
                       std::to_string(max_positions_));
    const bool train = drop_rng != nullptr;
    Var x = ops::dual_embedding(tp, tp.leaf(tok_emb_.table), tp.leaf(act_emb_.table), is_action, ids);
    x = ops::add(tp, x, ops::slice_rows(tp, tp.leaf(pos_), 0, L));
    if (train && cfg_.wm_dropout_embed > 0.0) x = ops::dropout(tp, x, cfg_.wm_dropout_embed, *drop_rng);
    const double p_attn = train ? cfg_.wm_dropout_attn : 0.0;
    const double p_resid = train ? cfg_.wm_dropout_resid : 0.0;
    for (auto& b : blocks_) x = b.forward(tp, x, AttnMask::causal(), p_attn, p_resid, drop_rng, record);
    Var h = ln_f_.forward(tp, x);
    return ForwardOut{h, head_tok_.forward(tp, h), head_reward_.forward(tp, h), head_done_.forward(tp, h)};
  }

  // One optimizer update on a batch of sequences. Per sequence the loss is
  // next-token CE + reward MSE + termination CE with unit weights; the
  // batch loss is their mean.
  LossReport train_step(const std::vector<WmSequence<T>>& batch, Adam<T>& opt, RngStream* drop_rng = nullptr) {
    if (batch.empty()) throw ContractError("wm train_step: empty batch");
    Tape<T> tp;
    std::vector<Var> totals;
    LossReport rep;
    for (const auto& seq : batch) {
      ForwardOut out = forward(tp, seq.ids, seq.is_action, drop_rng);
      std::vector<int> tok_pos, tok_tgt;
      for (int p = 0; p < static_cast<int>(seq.ids.size()); ++p) {
        const int tgt = seq.next_token_target[static_cast<std::size_t>(p)];
        if (tgt >= 0) {
          tok_pos.push_back(p);
          tok_tgt.push_back(tgt);
        }
      }
      std::vector<int> act_pos;
      for (int t = 0; t < seq.layout.steps; ++t) act_pos.push_back(seq.layout.action_pos(t));
      if (tok_pos.empty()) throw ContractError("wm train_step: sequence carries no next-token targets");

      Var ce_tok = ops::cross_entropy_rows(tp, ops::gather_rows(tp, out.tok_logits, tok_pos), tok_tgt);
      Tensor<T> rt = Tensor<T>::zeros({static_cast<int>(act_pos.size()), 1});
      for (std::size_t i = 0; i < act_pos.size(); ++i) rt[static_cast<std::int64_t>(i)] = seq.reward_target[i];
      Var mse_r = ops::mse_loss(tp, ops::gather_rows(tp, out.reward, act_pos), rt);
      Var ce_done = ops::cross_entropy_rows(tp, ops::gather_rows(tp, out.done_logits, act_pos), seq.done_target);

      rep.next_token_ce += static_cast<double>(tp.val(ce_tok)[0]);
      rep.reward_mse += static_cast<double>(tp.val(mse_r)[0]);
      rep.termination_ce += static_cast<double>(tp.val(ce_done)[0]);
      totals.push_back(ops::add(tp, ops::add(tp, ce_tok, mse_r), ce_done));
    }
    Var total = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) total = ops::add(tp, total, totals[i]);
    if (totals.size() > 1) total = ops::scale(tp, total, T{1} / static_cast<T>(totals.size()));
    tp.backward(total);
    opt.step();
    const double inv = 1.0 / static_cast<double>(batch.size());
    rep.next_token_ce *= inv;
    rep.reward_mse *= inv;
    rep.termination_ce *= inv;
    rep.total = rep.next_token_ce + rep.reward_mse + rep.termination_ce;
    return rep;
  }

  // ---- imagination ----

  RolloutState<T> begin_rollout() const {
    RolloutState<T> st;
    st.kcache.reserve(blocks_.size());
    st.vcache.reserve(blocks_.size());
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      st.kcache.push_back(Tensor<T>::zeros({max_positions_, cfg_.wm_embed_dim}));
      st.vcache.push_back(Tensor<T>::zeros({max_positions_, cfg_.wm_embed_dim}));
    }
    return st;
  }

  // Appends one step's K observation tokens (real context or externally
  // chosen ids). Must land at the start of a step.
  void feed_tokens(RolloutState<T>& st, const std::vector<int>& tokens) const {
    if (st.halted) throw ContractError("feed_tokens: rollout already halted");
    const int K = cfg_.tok_tokens_per_image;
    if (static_cast<int>(tokens.size()) != K)
      throw ShapeError("feed_tokens: expected " + std::to_string(K) + " tokens, got " + std::to_string(tokens.size()));
    if (st.len % (K + 1) != 0) throw ContractError("feed_tokens: mid-step rollout state");
    for (int id : tokens) advance(st, id, false);
  }

  // Appends a real action without sampling successors; reward/termination
  // predictions for context steps are discarded.
  void feed_action(RolloutState<T>& st, int action) const {
    if (st.halted) throw ContractError("feed_action: rollout already halted");
    if (st.len % (cfg_.tok_tokens_per_image + 1) != cfg_.tok_tokens_per_image)
      throw ContractError("feed_action: rollout state not at an action slot");
    advance(st, action, true);
  }

  // Takes the chosen action, reads reward and termination at the action
  // slot, then autoregressively samples the next step's K tokens at the
  // given temperature (0 = exact argmax). No tokens are sampled once
  // termination is predicted; the horizon also halts the rollout.
  StepResult imagine_step(RolloutState<T>& st, int action, RngStream& rng, double temperature = 1.0) const {
    if (st.halted) throw ContractError("imagine_step: rollout already halted");
    if (st.len % (cfg_.tok_tokens_per_image + 1) != cfg_.tok_tokens_per_image)
      throw ContractError("imagine_step: rollout state not at an action slot");
    Tensor<T> h = advance(st, action, true);
    StepResult res;
    res.reward = head_row(h, head_reward_)[0];
    Tensor<T> dl = head_row(h, head_done_);
    res.done = dl[1] > dl[0] ? 1 : 0;
    ++st.steps_imagined;
    if (res.done == 1 || st.steps_imagined >= cfg_.wm_horizon) st.halted = true;
    if (res.done == 1) return res;
    Tensor<T> cur = h;
    for (int k = 0; k < cfg_.tok_tokens_per_image; ++k) {
      const int id = sample_row(head_row(cur, head_tok_), rng, temperature);
      res.tokens.push_back(id);
      cur = advance(st, id, false);
    }
    return res;
  }

 private:
  // One position through the cached stack; returns the final hidden row.
  Tensor<T> advance(RolloutState<T>& st, int id, bool action) const {
    if (st.len >= max_positions_) throw ShapeError("rollout exceeds max positions");
    const Tensor<T>& table = action ? act_emb_.table.value : tok_emb_.table.value;
    if (id < 0 || id >= table.shape[0])
      throw ContractError(std::string(action ? "action" : "token") + " id " + std::to_string(id) + " outside vocab " +
                          std::to_string(table.shape[0]));
    const int D = cfg_.wm_embed_dim;
    std::vector<T> x(static_cast<std::size_t>(D));
    for (int j = 0; j < D; ++j)
      x[static_cast<std::size_t>(j)] =
          table[static_cast<std::int64_t>(id) * D + j] + pos_.value[static_cast<std::int64_t>(st.len) * D + j];
    const int heads = cfg_.wm_heads, hd = D / heads;
    const T inv_sqrt_hd = T{1} / std::sqrt(static_cast<T>(hd));
    std::vector<T> buf(static_cast<std::size_t>(D)), q(static_cast<std::size_t>(D)), merged(static_cast<std::size_t>(D));
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const auto& b = blocks_[l];
      ln_row(x.data(), buf.data(), D, b.ln1);
      T* krow = st.kcache[l].data.data() + static_cast<std::int64_t>(st.len) * D;
      T* vrow = st.vcache[l].data.data() + static_cast<std::int64_t>(st.len) * D;
      vecmat(buf.data(), q.data(), D, D, b.attn.wq);
      vecmat(buf.data(), krow, D, D, b.attn.wk);
      vecmat(buf.data(), vrow, D, D, b.attn.wv);
      const int ctx = st.len + 1;
      for (int h = 0; h < heads; ++h) {
        const int c0 = h * hd;
        std::vector<double> w(static_cast<std::size_t>(ctx));
        double mx = -1e300;
        for (int p = 0; p < ctx; ++p) {
          const T* kp = st.kcache[l].data.data() + static_cast<std::int64_t>(p) * D + c0;
          T dot{0};
          for (int j = 0; j < hd; ++j) dot += q[static_cast<std::size_t>(c0 + j)] * kp[j];
          w[static_cast<std::size_t>(p)] = static_cast<double>(dot * inv_sqrt_hd);
          mx = std::max(mx, w[static_cast<std::size_t>(p)]);
        }
        double denom = 0;
        for (auto& wv : w) {
          wv = std::exp(wv - mx);
          denom += wv;
        }
        for (int j = 0; j < hd; ++j) {
          double acc = 0;
          for (int p = 0; p < ctx; ++p)
            acc += w[static_cast<std::size_t>(p)] *
                   static_cast<double>(st.vcache[l].data[static_cast<std::int64_t>(p) * D + c0 + j]);
          merged[static_cast<std::size_t>(c0 + j)] = static_cast<T>(acc / denom);
        }
      }
      vecmat_add(merged.data(), x.data(), D, D, b.attn.wo);
      ln_row(x.data(), buf.data(), D, b.ln2);
      const int M = b.fc1.w.value.shape[1];
      std::vector<T> mid(static_cast<std::size_t>(M));
      vecmat(buf.data(), mid.data(), D, M, b.fc1);
      for (auto& v : mid) v = gelu_scalar(v);
      vecmat_add(mid.data(), x.data(), M, D, b.fc2);
    }
    ++st.len;
    Tensor<T> h = Tensor<T>::zeros({1, D});
    ln_row(x.data(), h.data.data(), D, ln_f_);
    return h;
  }

  static T gelu_scalar(T v) {
    const T inv_sqrt2 = static_cast<T>(0.7071067811865475244);
    return static_cast<T>(0.5) * v * (T{1} + std::erf(v * inv_sqrt2));
  }

  static void ln_row(const T* in, T* out, int n, const LayerNorm<T>& ln) {
    T mean{0};
    for (int j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<T>(n);
    T var{0};
    for (int j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(n);
    const T inv = T{1} / std::sqrt(var + static_cast<T>(1e-5));
    for (int j = 0; j < n; ++j) out[j] = (in[j] - mean) * inv * ln.gain.value[j] + ln.bias.value[j];
  }

  // out = in · W + b with W stored [n_in, n_out].
  static void vecmat(const T* in, T* out, int n_in, int n_out, const Linear<T>& lin) {
    for (int j = 0; j < n_out; ++j) out[j] = lin.b.value[j];
    for (int i = 0; i < n_in; ++i) {
      const T v = in[i];
      const T* wrow = lin.w.value.data.data() + static_cast<std::int64_t>(i) * n_out;
      for (int j = 0; j < n_out; ++j) out[j] += v * wrow[j];
    }
  }

  static void vecmat_add(const T* in, T* acc, int n_in, int n_out, const Linear<T>& lin) {
    for (int j = 0; j < n_out; ++j) acc[j] += lin.b.value[j];
    for (int i = 0; i < n_in; ++i) {
      const T v = in[i];
      const T* wrow = lin.w.value.data.data() + static_cast<std::int64_t>(i) * n_out;
      for (int j = 0; j < n_out; ++j) acc[j] += v * wrow[j];
    }
  }

  Tensor<T> head_row(const Tensor<T>& h, const Linear<T>& head) const {
    const int n_out = head.w.value.shape[1];
    Tensor<T> out = Tensor<T>::zeros({n_out});
    vecmat(h.data.data(), out.data.data(), cfg_.wm_embed_dim, n_out, head);
    return out;
  }

  // Categorical sample at the given temperature; 0 means exact argmax with
  // ties to the lowest index.
  static int sample_row(const Tensor<T>& logits, RngStream& rng, double temperature) {
    const std::int64_t n = logits.size();
    if (temperature <= 0.0) {
      int best = 0;
      for (std::int64_t i = 1; i < n; ++i)
        if (logits[i] > logits[best]) best = static_cast<int>(i);
      return best;
    }
    std::vector<double> p(static_cast<std::size_t>(n));
    double mx = -1e300;
    for (std::int64_t i = 0; i < n; ++i) {
      p[static_cast<std::size_t>(i)] = static_cast<double>(logits[i]) / temperature;
      mx = std::max(mx, p[static_cast<std::size_t>(i)]);
    }
    double denom = 0;
    for (auto& v : p) {
      v = std::exp(v - mx);
      denom += v;
    }
    for (auto& v : p) v /= denom;
    return rng.categorical(p);
  }

  Config cfg_;
  int num_actions_ = 0;
  SequenceLayout layout_;
  int max_positions_ = 0;
  Embedding<T> tok_emb_, act_emb_;
  Param<T> pos_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> ln_f_;
  Linear<T> head_tok_, head_reward_, head_done_;
  ParamSet<T> params_;
};

}  // namespace dart
