#include "etd/transformer.hpp"

#include <string>

#include "etd/rng.hpp"

namespace etd {

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be >= 1, got " + std::to_string(v));
  };
  positive(layers, "layers");
  positive(hidden, "hidden");
  positive(heads, "heads");
  positive(head_dim, "head_dim");
  positive(ffn, "ffn");
  positive(vocab, "vocab");
  positive(max_seq_len, "max_seq_len");
  if (head_dim * heads != hidden) {
    throw ConfigError("head_dim * heads must equal hidden (got " + std::to_string(head_dim) + "*" +
                      std::to_string(heads) + " != " + std::to_string(hidden) + ")");
  }
  if (layer_norm_eps <= 0.0) throw ConfigError("layer_norm_eps must be positive");
}

std::vector<std::pair<std::string, Tensor>> TransformerWeights::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embedding/token", token_embedding);
  out.emplace_back("embedding/position", position_embedding);
  out.emplace_back("embedding/ln_gain", emb_ln_gain);
  out.emplace_back("embedding/ln_bias", emb_ln_bias);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers/" + std::to_string(l) + "/";
    const LayerWeights& lw = layers[l];
    out.emplace_back(p + "attn/wq", lw.wq);
    out.emplace_back(p + "attn/bq", lw.bq);
    out.emplace_back(p + "attn/wk", lw.wk);
    out.emplace_back(p + "attn/bk", lw.bk);
    out.emplace_back(p + "attn/wv", lw.wv);
    out.emplace_back(p + "attn/bv", lw.bv);
    out.emplace_back(p + "attn/wo", lw.wo);
    out.emplace_back(p + "attn/bo", lw.bo);
    out.emplace_back(p + "attn/ln_gain", lw.mha_ln_gain);
    out.emplace_back(p + "attn/ln_bias", lw.mha_ln_bias);
    out.emplace_back(p + "ffn/w1", lw.w1);
    out.emplace_back(p + "ffn/b1", lw.b1);
    out.emplace_back(p + "ffn/w2", lw.w2);
    out.emplace_back(p + "ffn/b2", lw.b2);
    out.emplace_back(p + "ffn/ln_gain", lw.ffn_ln_gain);
    out.emplace_back(p + "ffn/ln_bias", lw.ffn_ln_bias);
  }
  out.emplace_back("mlm/weight", mlm_w);
  out.emplace_back("mlm/bias", mlm_b);
  return out;
}

std::vector<Tensor> TransformerWeights::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void TransformerWeights::set_requires_grad(bool v) {
  for (auto& t : parameters()) t.set_requires_grad(v);
}

TransformerWeights TransformerWeights::clone() const {
  TransformerWeights c;
  c.token_embedding = token_embedding.clone();
  c.position_embedding = position_embedding.clone();
  c.emb_ln_gain = emb_ln_gain.clone();
  c.emb_ln_bias = emb_ln_bias.clone();
  for (const LayerWeights& lw : layers) {
    LayerWeights cl;
    cl.wq = lw.wq.clone();
    cl.bq = lw.bq.clone();
    cl.wk = lw.wk.clone();
    cl.bk = lw.bk.clone();
    cl.wv = lw.wv.clone();
    cl.bv = lw.bv.clone();
    cl.wo = lw.wo.clone();
    cl.bo = lw.bo.clone();
    cl.mha_ln_gain = lw.mha_ln_gain.clone();
    cl.mha_ln_bias = lw.mha_ln_bias.clone();
    cl.w1 = lw.w1.clone();
    cl.b1 = lw.b1.clone();
    cl.w2 = lw.w2.clone();
    cl.b2 = lw.b2.clone();
    cl.ffn_ln_gain = lw.ffn_ln_gain.clone();
    cl.ffn_ln_bias = lw.ffn_ln_bias.clone();
    c.layers.push_back(std::move(cl));
  }
  c.mlm_w = mlm_w.clone();
  c.mlm_b = mlm_b.clone();
  return c;
}

namespace {

Tensor normal_init(Shape shape, Rng& rng, double sd) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& x : t.data()) x = rng.normal(0.0, sd);
  return t;
}

}  // namespace

TransformerWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const double sd = 0.02;  // BERT-style init scale
  const Index d = config.hidden, f = config.ffn, v = config.vocab;
  TransformerWeights w;
  w.token_embedding = normal_init({v, d}, rng, sd);
  w.position_embedding = normal_init({config.max_seq_len, d}, rng, sd);
  w.emb_ln_gain = Tensor::full({d}, 1.0, true);
  w.emb_ln_bias = Tensor::zeros({d}, true);
  for (int l = 0; l < config.layers; ++l) {
    LayerWeights lw;
    lw.wq = normal_init({d, d}, rng, sd);
    lw.bq = Tensor::zeros({d}, true);
    lw.wk = normal_init({d, d}, rng, sd);
    lw.bk = Tensor::zeros({d}, true);
    lw.wv = normal_init({d, d}, rng, sd);
    lw.bv = Tensor::zeros({d}, true);
    lw.wo = normal_init({d, d}, rng, sd);
    lw.bo = Tensor::zeros({d}, true);
    lw.mha_ln_gain = Tensor::full({d}, 1.0, true);
    lw.mha_ln_bias = Tensor::zeros({d}, true);
    lw.w1 = normal_init({d, f}, rng, sd);
    lw.b1 = Tensor::zeros({f}, true);
    lw.w2 = normal_init({f, d}, rng, sd);
    lw.b2 = Tensor::zeros({d}, true);
    lw.ffn_ln_gain = Tensor::full({d}, 1.0, true);
    lw.ffn_ln_bias = Tensor::zeros({d}, true);
    w.layers.push_back(std::move(lw));
  }
  w.mlm_w = normal_init({d, v}, rng, sd);
  w.mlm_b = Tensor::zeros({v}, true);
  return w;
}

Tensor embed(const ModelConfig& config, const TransformerWeights& w, const TokenBatch& batch) {
  if (batch.batch < 1 || batch.seq < 1 ||
      static_cast<Index>(batch.ids.size()) != batch.batch * batch.seq) {
    throw ConfigError("embed: batch geometry inconsistent with ids");
  }
  if (batch.seq > config.max_seq_len) {
    throw ConfigError("embed: sequence length " + std::to_string(batch.seq) + " exceeds max " +
                      std::to_string(config.max_seq_len));
  }
  for (int id : batch.ids) {
    if (id < 0 || id >= config.vocab) {
      throw ConfigError("embed: token id " + std::to_string(id) + " out of vocabulary range");
    }
  }
  Tensor tok = embedding_lookup(w.token_embedding, batch.ids, batch.batch, batch.seq);
  Tensor pos = slice_rows(w.position_embedding, 0, batch.seq);
  Tensor summed = add_suffix(tok, pos);
  return layer_norm(summed, w.emb_ln_gain, w.emb_ln_bias, config.layer_norm_eps);
}

MhaResult mha_forward(const Tensor& h, const LayerWeights& lw, const ModelConfig& config,
                      const Tensor* head_mask) {
  if (h.ndim() != 3 || h.dim(2) != config.hidden) {
    throw ShapeError("mha_forward: expected input [b,s," + std::to_string(config.hidden) + "]");
  }
  Tensor q = linear(h, lw.wq, lw.bq);
  Tensor k = linear(h, lw.wk, lw.bk);
  Tensor v = linear(h, lw.wv, lw.bv);
  MhaResult r;
  r.logits = attention_scores(q, k, config.heads);
  r.probs = softmax_rows(r.logits);
  Tensor heads = attention_mix(r.probs, v);
  if (head_mask != nullptr && head_mask->defined()) heads = mul_suffix(heads, *head_mask);
  r.head_out = heads;
  Tensor proj = linear(heads, lw.wo, lw.bo);
  r.h_out = layer_norm(add(h, proj), lw.mha_ln_gain, lw.mha_ln_bias, config.layer_norm_eps);
  return r;
}

FfnResult ffn_forward(const Tensor& h_mha, const LayerWeights& lw, const ModelConfig& config,
                      const Tensor* ffn_mask) {
  if (h_mha.ndim() != 3 || h_mha.dim(2) != config.hidden) {
    throw ShapeError("ffn_forward: expected input [b,s," + std::to_string(config.hidden) + "]");
  }
  Tensor act = gelu(linear(h_mha, lw.w1, lw.b1));
  if (ffn_mask != nullptr && ffn_mask->defined()) act = mul_suffix(act, *ffn_mask);
  FfnResult r;
  r.act = act;
  Tensor proj = linear(act, lw.w2, lw.b2);
  r.h_out = layer_norm(add(h_mha, proj), lw.ffn_ln_gain, lw.ffn_ln_bias, config.layer_norm_eps);
  return r;
}

ForwardTrace forward(const ModelConfig& config, const TransformerWeights& w,
                     const TokenBatch& batch, const ForwardOptions& opts) {
  config.validate();
  if (static_cast<int>(w.layers.size()) != config.layers) {
    throw ShapeError("forward: weight stack depth does not match config");
  }
  ForwardTrace trace;
  Tensor h = embed(config, w, batch);
  if (opts.grad_from_hidden0 && Tape::current() != nullptr) h.set_requires_grad(true);
  trace.hidden.push_back(h);
  for (int l = 0; l < config.layers; ++l) {
    const Tensor* head_mask = nullptr;
    const Tensor* ffn_mask = nullptr;
    if (opts.masks != nullptr) {
      if (l < static_cast<int>(opts.masks->head.size())) head_mask = &opts.masks->head[static_cast<std::size_t>(l)];
      if (l < static_cast<int>(opts.masks->ffn.size())) ffn_mask = &opts.masks->ffn[static_cast<std::size_t>(l)];
    }
    MhaResult mha = mha_forward(h, w.layers[static_cast<std::size_t>(l)], config, head_mask);
    trace.attn_logits.push_back(mha.logits);
    trace.attn_probs.push_back(mha.probs);
    trace.head_out.push_back(mha.head_out);
    FfnResult ffn = ffn_forward(mha.h_out, w.layers[static_cast<std::size_t>(l)], config, ffn_mask);
    trace.ffn_act.push_back(ffn.act);
    h = ffn.h_out;
    trace.hidden.push_back(h);
  }
  return trace;
}

Tensor mlm_loss(const ForwardTrace& trace, const TransformerWeights& w,
                const std::vector<Index>& masked_positions, const std::vector<int>& target_ids) {
  if (masked_positions.empty()) throw ConfigError("mlm_loss: empty masked position set");
  Tensor logits = linear(trace.hidden.back(), w.mlm_w, w.mlm_b);
  return masked_cross_entropy(logits, masked_positions, target_ids);
}

}  // namespace etd
