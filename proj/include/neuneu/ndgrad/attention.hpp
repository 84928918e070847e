#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "neuneu/ndgrad/ops.hpp"
#include "neuneu/ndgrad/params.hpp"

namespace neuneu::nd {

struct AttentionBlockWeights {
  Tensor ln1_gain, ln1_shift;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_shift;
  Tensor w1, b1, w2, b2;

  // Registers a fresh block under `prefix` (e.g. "layer0.").
  static AttentionBlockWeights create(ParameterStore& params, const std::string& prefix, std::size_t d,
                                      std::size_t ffn, double init_std, std::mt19937_64& rng) {
    AttentionBlockWeights w;
    w.ln1_gain = params.add(prefix + "ln1.gain", Tensor::full({d}, 1.0), false);
    w.ln1_shift = params.add(prefix + "ln1.shift", Tensor::zeros({d}), false);
    w.wq = params.add(prefix + "attn.wq", truncated_normal({d, d}, init_std, rng), true);
    w.bq = params.add(prefix + "attn.bq", Tensor::zeros({d}), false);
    w.wk = params.add(prefix + "attn.wk", truncated_normal({d, d}, init_std, rng), true);
    w.bk = params.add(prefix + "attn.bk", Tensor::zeros({d}), false);
    w.wv = params.add(prefix + "attn.wv", truncated_normal({d, d}, init_std, rng), true);
    w.bv = params.add(prefix + "attn.bv", Tensor::zeros({d}), false);
    w.wo = params.add(prefix + "attn.wo", truncated_normal({d, d}, init_std, rng), true);
    w.bo = params.add(prefix + "attn.bo", Tensor::zeros({d}), false);
    w.ln2_gain = params.add(prefix + "ln2.gain", Tensor::full({d}, 1.0), false);
    w.ln2_shift = params.add(prefix + "ln2.shift", Tensor::zeros({d}), false);
    w.w1 = params.add(prefix + "ffn.w1", truncated_normal({ffn, d}, init_std, rng), true);
    w.b1 = params.add(prefix + "ffn.b1", Tensor::zeros({ffn}), false);
    w.w2 = params.add(prefix + "ffn.w2", truncated_normal({d, ffn}, init_std, rng), true);
    w.b2 = params.add(prefix + "ffn.b2", Tensor::zeros({d}), false);
    return w;
  }

  static AttentionBlockWeights bind(ParameterStore& params, const std::string& prefix) {
    AttentionBlockWeights w;
    w.ln1_gain = params.get(prefix + "ln1.gain");
    w.ln1_shift = params.get(prefix + "ln1.shift");
    w.wq = params.get(prefix + "attn.wq");
    w.bq = params.get(prefix + "attn.bq");
    w.wk = params.get(prefix + "attn.wk");
    w.bk = params.get(prefix + "attn.bk");
    w.wv = params.get(prefix + "attn.wv");
    w.bv = params.get(prefix + "attn.bv");
    w.wo = params.get(prefix + "attn.wo");
    w.bo = params.get(prefix + "attn.bo");
    w.ln2_gain = params.get(prefix + "ln2.gain");
    w.ln2_shift = params.get(prefix + "ln2.shift");
    w.w1 = params.get(prefix + "ffn.w1");
    w.b1 = params.get(prefix + "ffn.b1");
    w.w2 = params.get(prefix + "ffn.w2");
    w.b2 = params.get(prefix + "ffn.b2");
    return w;
  }
};

struct AttentionOptions {
  std::size_t heads = 8;
  bool rope = true;
  double ln_eps = 1e-5;
};

// Bidirectional scaled dot-product attention over [seq x d] projections,
// split into `heads` column blocks. Positions are the sequence indices.
// If `probs` is non-null it receives one [seq x seq] row-stochastic matrix
// per head.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads, bool rope,
                                   std::vector<Tensor>* probs = nullptr) {
  detail::require(q.rank() == 2 && k.shape() == q.shape() && v.shape() == q.shape(),
                  "multi_head_attention: q, k, v must share shape [seq x d]");
  const std::size_t seq = q.dim(0), d = q.dim(1);
  detail::require(heads >= 1 && d % heads == 0,
                  "multi_head_attention: d=" + std::to_string(d) + " not divisible by heads=" + std::to_string(heads));
  const std::size_t hd = d / heads;
  std::vector<std::size_t> positions(seq);
  for (std::size_t i = 0; i < seq; ++i) positions[i] = i;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, hd);
    Tensor kh = slice_cols(k, h * hd, hd);
    if (rope) {
      qh = rope_apply(qh, positions);
      kh = rope_apply(kh, positions);
    }
    Tensor p = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
    if (probs) probs->push_back(p);
    outs.push_back(matmul(p, slice_cols(v, h * hd, hd)));
  }
  return heads == 1 ? outs.front() : concat_cols(outs);
}

// Pre-norm residual block: x + MHA(LN(x)), then + FFN(LN(.)).
inline Tensor attention_block(const Tensor& x, const AttentionBlockWeights& w, const AttentionOptions& opt) {
  detail::require(x.rank() == 2, "attention_block: input must be [seq x d]");
  Tensor h = layer_norm(x, opt.ln_eps, w.ln1_gain, w.ln1_shift);
  Tensor attn = multi_head_attention(linear(h, w.wq, w.bq), linear(h, w.wk, w.bk), linear(h, w.wv, w.bv),
                                     opt.heads, opt.rope);
  Tensor x1 = add(x, linear(attn, w.wo, w.bo));
  Tensor h2 = layer_norm(x1, opt.ln_eps, w.ln2_gain, w.ln2_shift);
  return add(x1, linear(gelu(linear(h2, w.w1, w.b1)), w.w2, w.b2));
}

}  // namespace neuneu::nd
