#pragma once

#include <string>
#include <vector>

#include "dart/adam.hpp"
#include "dart/config.hpp"
#include "dart/image.hpp"
#include "dart/layers.hpp"
#include "dart/ops.hpp"

// VQ-VAE over 16x16x3 frames. The encoder embeds non-overlapping 4x4
// patches onto a 4x4 grid (K = 16 latent positions) and refines them with
// 1x1 stacks; quantization snaps each position to its nearest codebook row
// (ties to the lowest index) with straight-through gradients; the decoder
// mirrors the encoder and squashes to [0,1]. Keeping the grid strictly
// patch-aligned means a one-pixel sprite owns a sixteenth of its cell's
// signal instead of vanishing into a global average.
//
// Details that keep the discrete bottleneck healthy at this tiny scale:
// channelwise layer norms hold activations at unit magnitude; learned grid
// position embeddings on both sides let codebook rows be reused across
// positions; the pre-squash latent mixes the trained features with a
// fixed seeded random projection of the raw patch, so patches with
// different content can never be driven onto the same latent by early
// encoder drift (gradient-only codebooks cannot recover a merged cluster,
// they can only track it). The squash is tanh scaled into the codebook
// init envelope uniform(-1/N, 1/N), with no learnable gain the commitment
// pull could shrink. The reconstruction loss carries an optional
// feature-space term (fixed depthwise Laplacian, L1) that gives isolated
// sprite pixels weight comparable to the flat background they sit on.

namespace dart {

template <typename T>
struct Conv2dLayer {
  Param<T> w, b;
  int stride = 1, pad = 1;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, int cin, int cout, int k, int stride_, int pad_, RngStream& rng)
      : w(name + ".w", trunc_normal_init<T>({cout, cin, k, k}, rng)),
        b(name + ".b", Tensor<T>::zeros({cout})),
        stride(stride_),
        pad(pad_) {}

  void register_params(ParamSet<T>& ps) {
    ps.add(w);
    ps.add(b);
  }

  Var forward(Tape<T>& tp, Var x) { return ops::conv2d(tp, x, tp.leaf(w), tp.leaf(b), stride, pad); }
};

template <typename T>
struct ConvT2dLayer {
  Param<T> w, b;
  int stride = 2, pad = 1;

  ConvT2dLayer() = default;
  ConvT2dLayer(const std::string& name, int cin, int cout, int k, int stride_, int pad_, RngStream& rng)
      : w(name + ".w", trunc_normal_init<T>({cin, cout, k, k}, rng)),
        b(name + ".b", Tensor<T>::zeros({cout})),
        stride(stride_),
        pad(pad_) {}

  void register_params(ParamSet<T>& ps) {
    ps.add(w);
    ps.add(b);
  }

  Var forward(Tape<T>& tp, Var x) { return ops::conv2d_transpose(tp, x, tp.leaf(w), tp.leaf(b), stride, pad); }
};

// Layer norm across channels of a CHW map, one row per spatial cell.
template <typename T>
struct ChannelNorm {
  LayerNorm<T> ln;

  ChannelNorm() = default;
  ChannelNorm(const std::string& name, int ch) : ln(name, ch) {}

  void register_params(ParamSet<T>& ps) { ln.register_params(ps); }

  Var forward(Tape<T>& tp, Var x_chw, int h, int w) {
    return ops::chw_from_rows(tp, ln.forward(tp, ops::rows_from_chw(tp, x_chw)), h, w);
  }
};

template <typename T>
struct ResBlock {
  ChannelNorm<T> n1, n2;
  Conv2dLayer<T> c1, c2;
  int hw = 0;

  ResBlock() = default;
  ResBlock(const std::string& name, int ch, int hw_, RngStream& rng)
      : n1(name + ".n1", ch),
        n2(name + ".n2", ch),
        c1(name + ".c1", ch, ch, 1, 1, 0, rng),
        c2(name + ".c2", ch, ch, 1, 1, 0, rng),
        hw(hw_) {}

  void register_params(ParamSet<T>& ps) {
    n1.register_params(ps);
    n2.register_params(ps);
    c1.register_params(ps);
    c2.register_params(ps);
  }

  Var forward(Tape<T>& tp, Var x) {
    Var y = c1.forward(tp, ops::swish(tp, n1.forward(tp, x, hw, hw)));
    y = c2.forward(tp, ops::swish(tp, n2.forward(tp, y, hw, hw)));
    return ops::add(tp, x, y);
  }
};

// One bidirectional attention block over the K latent grid positions.
template <typename T>
struct LatentAttention {
  LayerNorm<T> ln;
  MultiHeadAttention<T> attn;

  LatentAttention() = default;
  LatentAttention(const std::string& name, int ch, RngStream& rng)
      : ln(name + ".ln", ch), attn(name + ".attn", ch, 4, rng) {}

  void register_params(ParamSet<T>& ps) {
    ln.register_params(ps);
    attn.register_params(ps);
  }

  Var forward(Tape<T>& tp, Var x_chw, int h, int w) {
    Var rows = ops::rows_from_chw(tp, x_chw);
    Var a = attn.forward(tp, ln.forward(tp, rows), AttnMask::none(), 0.0, nullptr);
    return ops::chw_from_rows(tp, ops::add(tp, rows, a), h, w);
  }
};

// Identity kernel that rearranges each non-overlapping 4x4 patch into its
// own channel stack: [3,16,16] -> [48,4,4].
template <typename T>
Tensor<T> patchify_kernel() {
  Tensor<T> w = Tensor<T>::zeros({48, 3, 4, 4});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        const int out = (c * 4 + i) * 4 + j;
        w.data[((static_cast<std::size_t>(out) * 3 + c) * 4 + i) * 4 + j] = T{1};
      }
  return w;
}

// Depthwise 3x3 Laplacian bank used by the feature-space reconstruction
// term; responds at edges and isolated pixels, exactly zero on flats.
template <typename T>
Tensor<T> laplacian_kernel() {
  Tensor<T> w = Tensor<T>::zeros({3, 3, 3, 3});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        const std::size_t at = ((static_cast<std::size_t>(c) * 3 + c) * 3 + i) * 3 + j;
        w.data[at] = (i == 1 && j == 1) ? T{1} : T{-0.125};
      }
  return w;
}

template <typename T>
struct TokenizerLosses {
  T rec = 0, codebook = 0, commit = 0, total = 0;
};

template <typename T>
class Tokenizer {
 public:
  Tokenizer(const Config& cfg, std::uint64_t seed) : cfg_(cfg) {
    RngStream rng(seed, "tokenizer_init");
    const int c = cfg.tok_base_channels, d = cfg.tok_embed_dim, R = cfg.tok_res_blocks;
    enc_in_ = Conv2dLayer<T>("tok.enc.in", 3, c, 4, 4, 0, rng);
    for (int i = 0; i < R; ++i) enc_res1_.emplace_back("tok.enc.res1." + std::to_string(i), c, 4, rng);
    enc_mid_norm_ = ChannelNorm<T>("tok.enc.mid_norm", c);
    enc_mid_ = Conv2dLayer<T>("tok.enc.mid", c, 2 * c, 1, 1, 0, rng);
    for (int i = 0; i < R; ++i) enc_res2_.emplace_back("tok.enc.res2." + std::to_string(i), 2 * c, 4, rng);
    if (cfg.tok_self_attention) enc_attn_ = LatentAttention<T>("tok.enc.attn", 2 * c, rng);
    enc_out_norm_ = ChannelNorm<T>("tok.enc.out_norm", 2 * c);
    enc_out_ = Conv2dLayer<T>("tok.enc.out", 2 * c, d, 1, 1, 0, rng);

    dec_in_ = Conv2dLayer<T>("tok.dec.in", d, 2 * c, 1, 1, 0, rng);
    if (cfg.tok_self_attention) dec_attn_ = LatentAttention<T>("tok.dec.attn", 2 * c, rng);
    for (int i = 0; i < R; ++i) dec_res1_.emplace_back("tok.dec.res1." + std::to_string(i), 2 * c, 4, rng);
    dec_mid_norm_ = ChannelNorm<T>("tok.dec.mid_norm", 2 * c);
    dec_mid_ = Conv2dLayer<T>("tok.dec.mid", 2 * c, c, 1, 1, 0, rng);
    for (int i = 0; i < R; ++i) dec_res2_.emplace_back("tok.dec.res2." + std::to_string(i), c, 4, rng);
    dec_out_norm_ = ChannelNorm<T>("tok.dec.out_norm", c);
    dec_out_ = ConvT2dLayer<T>("tok.dec.out", c, 3, 4, 4, 0, rng);

    enc_pos_ = Param<T>("tok.enc.pos", trunc_normal_init<T>({c, 4, 4}, rng));
    dec_pos_ = Param<T>("tok.dec.pos", trunc_normal_init<T>({cfg.tok_tokens_per_image, d}, rng));

    RngStream anchor_rng(seed, "tokenizer_anchor");
    anchor_ = trunc_normal_init<T>({48, d}, anchor_rng, T{2} / std::sqrt(T{48}));

    const T bound = T{1} / static_cast<T>(cfg.tok_codebook_size);
    codebook_ = Param<T>("tok.codebook", uniform_init<T>({cfg.tok_codebook_size, d}, rng, -bound, bound));
    codebook_.lr_scale = cfg.tok_codebook_lr_scale;

    enc_in_.register_params(params_);
    params_.add(enc_pos_);
    params_.add(dec_pos_);
    for (auto& r : enc_res1_) r.register_params(params_);
    enc_mid_norm_.register_params(params_);
    enc_mid_.register_params(params_);
    for (auto& r : enc_res2_) r.register_params(params_);
    if (cfg.tok_self_attention) enc_attn_.register_params(params_);
    enc_out_norm_.register_params(params_);
    enc_out_.register_params(params_);
    dec_in_.register_params(params_);
    if (cfg.tok_self_attention) dec_attn_.register_params(params_);
    for (auto& r : dec_res1_) r.register_params(params_);
    dec_mid_norm_.register_params(params_);
    dec_mid_.register_params(params_);
    for (auto& r : dec_res2_) r.register_params(params_);
    dec_out_norm_.register_params(params_);
    dec_out_.register_params(params_);
    params_.add(codebook_);

    // the decoder must differentiate codes before encoder drift can merge
    // them, so it runs ahead of the rest of the net
    for (auto* p : params_)
      if (p->name.rfind("tok.dec", 0) == 0) p->lr_scale = cfg.tok_decoder_lr_scale;
  }

  Tokenizer(const Tokenizer&) = delete;
  Tokenizer& operator=(const Tokenizer&) = delete;

  ParamSet<T>& params() { return params_; }
  const Config& config() const { return cfg_; }
  Param<T>& codebook() { return codebook_; }
  int codebook_size() const { return cfg_.tok_codebook_size; }
  int tokens_per_image() const { return cfg_.tok_tokens_per_image; }
  int embed_dim() const { return cfg_.tok_embed_dim; }

  // image [3,16,16] in [0,1] -> pre-quant latents [K,d]
  Var encode(Tape<T>& tp, const Tensor<T>& img) {
    check_image(img);
    Var x = tp.constant(img);
    x = ops::add(tp, ops::swish(tp, enc_in_.forward(tp, x)), tp.leaf(enc_pos_));
    for (auto& r : enc_res1_) x = r.forward(tp, x);
    x = enc_mid_.forward(tp, ops::swish(tp, enc_mid_norm_.forward(tp, x, 4, 4)));
    for (auto& r : enc_res2_) x = r.forward(tp, x);
    if (cfg_.tok_self_attention) x = enc_attn_.forward(tp, x, 4, 4);
    x = enc_out_.forward(tp, ops::swish(tp, enc_out_norm_.forward(tp, x, 4, 4)));
    Var rows = ops::rows_from_chw(tp, x);
    Var patches = ops::rows_from_chw(
        tp, ops::conv2d(tp, tp.constant(img), tp.constant(patchify_kernel<T>()),
                        tp.constant(Tensor<T>::zeros({48})), 4, 0));
    Var anchored = ops::add(tp, rows, ops::matmul(tp, patches, tp.constant(anchor_)));
    return ops::scale(tp, ops::tanh(tp, anchored), T{1} / static_cast<T>(cfg_.tok_codebook_size));
  }

  // Exhaustive nearest-neighbor scan; strict less keeps the lowest index
  // on ties.
  std::vector<int> quantize_indices(const Tensor<T>& latents) const {
    if (latents.rank() != 2 || latents.shape[1] != cfg_.tok_embed_dim)
      throw ShapeError("quantize: latents " + shape_str(latents.shape) + " vs embed dim " +
                       std::to_string(cfg_.tok_embed_dim));
    const int K = latents.shape[0], N = cfg_.tok_codebook_size, d = cfg_.tok_embed_dim;
    if (N < 1) throw ConfigError("quantize: empty codebook");
    std::vector<int> idx(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
      T best = std::numeric_limits<T>::infinity();
      int best_i = 0;
      for (int i = 0; i < N; ++i) {
        T dist{0};
        for (int j = 0; j < d; ++j) {
          const T diff = latents.data[static_cast<std::size_t>(k) * d + j] -
                         codebook_.value.data[static_cast<std::size_t>(i) * d + j];
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          best_i = i;
        }
      }
      idx[static_cast<std::size_t>(k)] = best_i;
    }
    return idx;
  }

  Tensor<T> codebook_rows(const std::vector<int>& indices) const {
    const int d = cfg_.tok_embed_dim;
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(indices.size()), d});
    for (std::size_t k = 0; k < indices.size(); ++k) {
      if (indices[k] < 0 || indices[k] >= cfg_.tok_codebook_size)
        throw ContractError("codebook_rows: index " + std::to_string(indices[k]) + " out of range");
      std::copy(codebook_.value.data.begin() + static_cast<std::int64_t>(indices[k]) * d,
                codebook_.value.data.begin() + static_cast<std::int64_t>(indices[k] + 1) * d,
                out.data.begin() + static_cast<std::int64_t>(k) * d);
    }
    return out;
  }

  // quantized [K,d] -> image [3,16,16] in (0,1)
  Var decode(Tape<T>& tp, Var quantized) {
    const Tensor<T>& q = tp.val(quantized);
    if (q.rank() != 2 || q.shape[0] != cfg_.tok_tokens_per_image || q.shape[1] != cfg_.tok_embed_dim)
      throw ShapeError("decode: expected [" + std::to_string(cfg_.tok_tokens_per_image) + "," +
                       std::to_string(cfg_.tok_embed_dim) + "], got " + shape_str(q.shape));
    // codes live in the (-1/N, 1/N) box; undo that scale so they enter the
    // stack at unit magnitude instead of vanishing against learned biases
    Var scaled = ops::scale(tp, quantized, static_cast<T>(cfg_.tok_codebook_size));
    Var x = ops::chw_from_rows(tp, ops::add(tp, scaled, tp.leaf(dec_pos_)), 4, 4);
    x = dec_in_.forward(tp, x);
    if (cfg_.tok_self_attention) x = dec_attn_.forward(tp, x, 4, 4);
    for (auto& r : dec_res1_) x = r.forward(tp, x);
    x = dec_mid_.forward(tp, ops::swish(tp, dec_mid_norm_.forward(tp, x, 4, 4)));
    for (auto& r : dec_res2_) x = r.forward(tp, x);
    x = dec_out_.forward(tp, ops::swish(tp, dec_out_norm_.forward(tp, x, 4, 4)));
    return ops::sigmoid(tp, x);
  }

  // One optimizer step on the batch. Loss = L_rec + L_codebook + beta *
  // L_commit where L_rec = L1 + MSE (+ the weighted feature term when
  // enabled), codebook/commitment as stop-gradient MSE pairs.
  TokenizerLosses<T> train_step(const std::vector<Tensor<T>>& batch, Adam<T>& opt) {
    if (batch.empty()) throw ContractError("tokenizer train_step: empty batch");
    // Early assignments decide which codebook rows ever engage, so the
    // first updates run at reduced step size. Keyed off the optimizer's
    // step count, which checkpoints already carry.
    if (cfg_.tok_lr_warmup > 0)
      opt.set_lr(cfg_.tok_lr * std::min(1.0, static_cast<double>(opt.t() + 1) / cfg_.tok_lr_warmup));
    Tape<T> tp;
    Var total;
    TokenizerLosses<T> report{};
    const T inv_b = T{1} / static_cast<T>(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
      Var latents = encode(tp, batch[b]);
      const std::vector<int> idx = quantize_indices(tp.val(latents));
      const Tensor<T> q_rows = codebook_rows(idx);
      Var st = ops::straight_through(tp, latents, q_rows);
      Var recon = decode(tp, st);

      Var l_rec = ops::add(tp, ops::l1_loss(tp, recon, batch[b]), ops::mse_loss(tp, recon, batch[b]));
      if (cfg_.tok_feat_weight > 0.0) {
        Var f_rec = feature_map(tp, recon);
        Var l_feat = ops::l1_loss(tp, f_rec, feature_map_of(batch[b]));
        l_rec = ops::add(tp, l_rec, ops::scale(tp, l_feat, static_cast<T>(cfg_.tok_feat_weight)));
      }
      Var cb_rows = ops::embedding(tp, tp.leaf(codebook_), idx);
      Var l_codebook = ops::mse_loss(tp, cb_rows, tp.val(latents));
      Var l_commit = ops::mse_loss(tp, latents, q_rows);

      report.rec += tp.val(l_rec)[0] * inv_b;
      report.codebook += tp.val(l_codebook)[0] * inv_b;
      report.commit += tp.val(l_commit)[0] * inv_b;

      Var item = ops::add(tp, l_rec, ops::add(tp, l_codebook, ops::scale(tp, l_commit, static_cast<T>(cfg_.tok_beta))));
      total = b == 0 ? item : ops::add(tp, total, item);
    }
    total = ops::scale(tp, total, inv_b);
    report.total = tp.val(total)[0];
    tp.backward(total);
    opt.step();
    return report;
  }

  // frozen-path helpers
  std::vector<int> tokenize(const Tensor<std::uint8_t>& frame) {
    Tape<T> tp(true, true);
    Var latents = encode(tp, image::to_float<T>(frame));
    return quantize_indices(tp.val(latents));
  }

  Tensor<T> decode_tokens(const std::vector<int>& indices) {
    Tape<T> tp(true, true);
    Var q = tp.constant(codebook_rows(indices));
    return tp.val(decode(tp, q));
  }

 private:
  Var feature_map(Tape<T>& tp, Var img) {
    return ops::conv2d(tp, img, tp.constant(laplacian_kernel<T>()), tp.constant(Tensor<T>::zeros({3})), 1, 1);
  }

  Tensor<T> feature_map_of(const Tensor<T>& img) {
    Tape<T> scratch(true, true);
    return scratch.val(feature_map(scratch, scratch.constant(img)));
  }

  void check_image(const Tensor<T>& img) const {
    if (img.shape != Shape{3, 16, 16}) throw ShapeError("tokenizer: expected [3,16,16] image, got " + shape_str(img.shape));
    for (auto v : img.data)
      if (v < T{0} || v > T{1}) throw ContractError("tokenizer: image values must lie in [0,1]");
  }

  Config cfg_;
  ParamSet<T> params_;
  Conv2dLayer<T> enc_in_, enc_mid_, enc_out_, dec_in_, dec_mid_;
  ChannelNorm<T> enc_mid_norm_, enc_out_norm_, dec_mid_norm_, dec_out_norm_;
  ConvT2dLayer<T> dec_out_;
  std::vector<ResBlock<T>> enc_res1_, enc_res2_, dec_res1_, dec_res2_;
  LatentAttention<T> enc_attn_, dec_attn_;
  Param<T> enc_pos_, dec_pos_, codebook_;
  Tensor<T> anchor_;
};

}  // namespace dart
