#pragma once

#include <string>
#include <vector>

#include "dart/ops.hpp"
#include "dart/rng.hpp"
#include "dart/tape.hpp"
#include "dart/tensor.hpp"

namespace dart {

enum class Activation { gelu, swish, relu };

template <typename T>
Var activate(Tape<T>& tp, Var x, Activation act) {
  switch (act) {
    case Activation::gelu: return ops::gelu(tp, x);
    case Activation::swish: return ops::swish(tp, x);
    case Activation::relu: return ops::relu(tp, x);
  }
  throw ContractError("activate: unknown activation");
}

template <typename T>
Tensor<T> trunc_normal_init(const Shape& shape, RngStream& rng, T stddev = static_cast<T>(0.02)) {
  Tensor<T> t = Tensor<T>::zeros(shape);
  for (auto& v : t.data) v = static_cast<T>(rng.truncated_normal(static_cast<double>(stddev)));
  return t;
}

// Per-element uniform in [lo, hi).
template <typename T>
Tensor<T> uniform_init(const Shape& shape, RngStream& rng, T lo, T hi) {
  Tensor<T> t = Tensor<T>::zeros(shape);
  for (auto& v : t.data) v = lo + static_cast<T>(rng.uniform()) * (hi - lo);
  return t;
}

// Attention masking modes. `keymask` drops columns (key positions) for every
// query; `causal` is the strict lower-triangular-inclusive rule.
struct AttnMask {
  enum class Kind { none, causal, keymask };
  Kind kind = Kind::none;
  std::vector<std::uint8_t> keep;

  static AttnMask none() { return AttnMask{}; }
  static AttnMask causal() { return AttnMask{Kind::causal, {}}; }
  static AttnMask keymask(std::vector<std::uint8_t> keep) { return AttnMask{Kind::keymask, std::move(keep)}; }
};

// y = x W + b, W stored [in, out].
template <typename T>
struct Linear {
  Param<T> w, b;

  Linear() = default;
  Linear(const std::string& name, int in, int out, RngStream& rng)
      : w(name + ".w", trunc_normal_init<T>({in, out}, rng)), b(name + ".b", Tensor<T>::zeros({out})) {}

  void register_params(ParamSet<T>& ps) {
    ps.add(w);
    ps.add(b);
  }

  Var forward(Tape<T>& tp, Var x) {
    Var xw = ops::matmul(tp, x, tp.leaf(w));
    return ops::add_rowvec(tp, xw, tp.leaf(b));
  }
};

template <typename T>
struct LayerNorm {
  Param<T> gain, bias;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim)
      : gain(name + ".g", Tensor<T>::full({dim}, T{1})), bias(name + ".b", Tensor<T>::zeros({dim})) {}

  void register_params(ParamSet<T>& ps) {
    ps.add(gain);
    ps.add(bias);
  }

  Var forward(Tape<T>& tp, Var x) { return ops::layernorm(tp, x, tp.leaf(gain), tp.leaf(bias)); }
};

template <typename T>
struct Embedding {
  Param<T> table;

  Embedding() = default;
  Embedding(const std::string& name, int vocab, int dim, RngStream& rng)
      : table(name + ".table", trunc_normal_init<T>({vocab, dim}, rng)) {}

  void register_params(ParamSet<T>& ps) { ps.add(table); }

  Var forward(Tape<T>& tp, const std::vector<int>& ids) { return ops::embedding(tp, tp.leaf(table), ids); }
};

// Optional sink for attention probabilities, one [S,S] matrix per head per
// layer, in forward order. Used by the analysis pass.
template <typename T>
using AttnRecord = std::vector<Tensor<T>>;

template <typename T>
struct MultiHeadAttention {
  int dim = 0, heads = 0, head_dim = 0;
  Linear<T> wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, int dim_, int heads_, RngStream& rng)
      : dim(dim_),
        heads(heads_),
        head_dim(dim_ / heads_),
        wq(name + ".wq", dim_, dim_, rng),
        wk(name + ".wk", dim_, dim_, rng),
        wv(name + ".wv", dim_, dim_, rng),
        wo(name + ".wo", dim_, dim_, rng) {
    if (dim_ % heads_ != 0)
      throw ConfigError("attention dim " + std::to_string(dim_) + " not divisible by heads " + std::to_string(heads_));
  }

  void register_params(ParamSet<T>& ps) {
    wq.register_params(ps);
    wk.register_params(ps);
    wv.register_params(ps);
    wo.register_params(ps);
  }

  Var forward(Tape<T>& tp, Var x, const AttnMask& mask, double attn_dropout, RngStream* drop_rng,
              AttnRecord<T>* record = nullptr) {
    Var q = wq.forward(tp, x);
    Var k = wk.forward(tp, x);
    Var v = wv.forward(tp, x);
    const T inv_sqrt_hd = T{1} / std::sqrt(static_cast<T>(head_dim));
    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const int c0 = h * head_dim, c1 = (h + 1) * head_dim;
      Var qh = ops::slice_cols(tp, q, c0, c1);
      Var kh = ops::slice_cols(tp, k, c0, c1);
      Var vh = ops::slice_cols(tp, v, c0, c1);
      Var scores = ops::scale(tp, ops::matmul_nt(tp, qh, kh), inv_sqrt_hd);
      Var probs;
      switch (mask.kind) {
        case AttnMask::Kind::causal: probs = ops::causal_softmax_rows(tp, scores); break;
        case AttnMask::Kind::keymask: probs = ops::keymask_softmax_rows(tp, scores, mask.keep); break;
        case AttnMask::Kind::none: probs = ops::softmax_rows(tp, scores); break;
      }
      if (record) record->push_back(tp.val(probs));
      if (attn_dropout > 0.0) probs = ops::dropout(tp, probs, attn_dropout, *drop_rng);
      head_outs.push_back(ops::matmul(tp, probs, vh));
    }
    Var merged = heads == 1 ? head_outs[0] : ops::concat_cols(tp, head_outs);
    return wo.forward(tp, merged);
  }
};

// Pre-norm transformer block: x += attn(ln1(x)); x += mlp(ln2(x)).
template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  Linear<T> fc1, fc2;
  Activation act = Activation::gelu;

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, int dim, int heads, int mlp_dim, Activation act_, RngStream& rng)
      : ln1(name + ".ln1", dim),
        ln2(name + ".ln2", dim),
        attn(name + ".attn", dim, heads, rng),
        fc1(name + ".fc1", dim, mlp_dim, rng),
        fc2(name + ".fc2", mlp_dim, dim, rng),
        act(act_) {}

  void register_params(ParamSet<T>& ps) {
    ln1.register_params(ps);
    ln2.register_params(ps);
    attn.register_params(ps);
    fc1.register_params(ps);
    fc2.register_params(ps);
  }

  Var forward(Tape<T>& tp, Var x, const AttnMask& mask, double attn_dropout, double resid_dropout,
              RngStream* drop_rng, AttnRecord<T>* record = nullptr) {
    Var a = attn.forward(tp, ln1.forward(tp, x), mask, attn_dropout, drop_rng, record);
    if (resid_dropout > 0.0) a = ops::dropout(tp, a, resid_dropout, *drop_rng);
    x = ops::add(tp, x, a);
    Var m = fc2.forward(tp, activate(tp, fc1.forward(tp, ln2.forward(tp, x)), act));
    if (resid_dropout > 0.0) m = ops::dropout(tp, m, resid_dropout, *drop_rng);
    return ops::add(tp, x, m);
  }
};

}  // namespace dart
