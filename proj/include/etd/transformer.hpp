#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "etd/tensor.hpp"

namespace etd {

struct ModelConfig {
  int layers = 0;        // transformer layer count
  int hidden = 0;        // residual-stream width d_h
  int heads = 0;         // attention head count
  int head_dim = 0;      // per-head width d_k
  int ffn = 0;           // FFN intermediate width d_ff
  int vocab = 0;
  int max_seq_len = 0;
  double layer_norm_eps = 1e-12;

  void validate() const;  // throws ConfigError
  bool operator==(const ModelConfig&) const = default;
};

// Per-layer parameters. W_Q/W_K/W_V are [hidden, heads*head_dim] with head i
// owning columns [i*head_dim, (i+1)*head_dim); W_O is the transposed view.
struct LayerWeights {
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;
  Tensor mha_ln_gain, mha_ln_bias;
  Tensor w1, b1;  // [hidden, ffn], [ffn]
  Tensor w2, b2;  // [ffn, hidden], [hidden]
  Tensor ffn_ln_gain, ffn_ln_bias;
};

struct TransformerWeights {
  Tensor token_embedding;     // [vocab, hidden]
  Tensor position_embedding;  // [max_seq_len, hidden]
  Tensor emb_ln_gain, emb_ln_bias;
  std::vector<LayerWeights> layers;
  Tensor mlm_w, mlm_b;  // [hidden, vocab], [vocab]

  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  void set_requires_grad(bool v);
  TransformerWeights clone() const;
};

TransformerWeights init_weights(const ModelConfig& config, std::uint64_t seed);

struct TokenBatch {
  std::vector<int> ids;  // row-major [batch, seq]
  Index batch = 0;
  Index seq = 0;
};

// Everything the scoring and distillation passes need from one forward run.
struct ForwardTrace {
  std::vector<Tensor> hidden;       // hidden[l] for l = 0..L; hidden[0] is the embedding output
  std::vector<Tensor> attn_logits;  // per layer, pre-softmax [b, heads, s, s]
  std::vector<Tensor> attn_probs;   // per layer, post-softmax [b, heads, s, s]
  std::vector<Tensor> head_out;     // per layer, concatenated per-head outputs [b, s, hidden]
  std::vector<Tensor> ffn_act;      // per layer, post-GeLU intermediate [b, s, ffn]
};

// Multiplicative channel masks for removing neurons in place; an undefined
// tensor leaves the layer untouched.
struct NeuronMasks {
  std::vector<Tensor> ffn;   // per layer [ffn]
  std::vector<Tensor> head;  // per layer [hidden] over the concatenated head axis
};

struct ForwardOptions {
  // Treat the embedding output as a gradient root so activation gradients
  // exist even when no parameter requires grad (importance scoring).
  bool grad_from_hidden0 = false;
  const NeuronMasks* masks = nullptr;
};

Tensor embed(const ModelConfig& config, const TransformerWeights& w, const TokenBatch& batch);

struct MhaResult {
  Tensor h_out;     // LayerNorm(h + MHA(h))
  Tensor logits;    // pre-softmax attention [b, heads, s, s]
  Tensor probs;     // post-softmax attention
  Tensor head_out;  // softmax(A_i) V_i, concatenated over heads [b, s, hidden]
};
MhaResult mha_forward(const Tensor& h, const LayerWeights& lw, const ModelConfig& config,
                      const Tensor* head_mask = nullptr);

struct FfnResult {
  Tensor h_out;  // LayerNorm(h + FFN(h))
  Tensor act;    // post-GeLU intermediate [b, s, ffn]
};
FfnResult ffn_forward(const Tensor& h_mha, const LayerWeights& lw, const ModelConfig& config,
                      const Tensor* ffn_mask = nullptr);

ForwardTrace forward(const ModelConfig& config, const TransformerWeights& w,
                     const TokenBatch& batch, const ForwardOptions& opts = {});

// Mean cross-entropy of the MLM head over the masked positions.
Tensor mlm_loss(const ForwardTrace& trace, const TransformerWeights& w,
                const std::vector<Index>& masked_positions, const std::vector<int>& target_ids);

}  // namespace etd
