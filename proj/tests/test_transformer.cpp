#include <cmath>
#include <vector>

#include "doctest.h"
#include "etd/rng.hpp"
#include "etd/transformer.hpp"
#include "fd_check.hpp"
#include "permute_util.hpp"

using namespace etd;
using namespace etd::testing;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 8;
  c.heads = 2;
  c.head_dim = 4;
  c.ffn = 12;
  c.vocab = 11;
  c.max_seq_len = 6;
  return c;
}

TokenBatch make_batch(const std::vector<int>& ids, Index batch, Index seq) {
  return TokenBatch{ids, batch, seq};
}

std::vector<double> ln_row(const std::vector<double>& x, const std::vector<double>& g,
                           const std::vector<double>& b, double eps) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = g[i] * (x[i] - mean) / std::sqrt(var + eps) + b[i];
  return out;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.layers = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.head_dim = 3;  // 3*2 != 8
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("embed: zero embeddings normalize to zeros") {
  ModelConfig c = tiny_config();
  TransformerWeights w = init_weights(c, 1);
  std::fill(w.token_embedding.data().begin(), w.token_embedding.data().end(), 0.0);
  std::fill(w.position_embedding.data().begin(), w.position_embedding.data().end(), 0.0);
  Tensor h0 = embed(c, w, make_batch({3}, 1, 1));
  for (double v : h0.data()) CHECK(v == 0.0);
}

TEST_CASE("embed: position embeddings separate identical tokens") {
  ModelConfig c = tiny_config();
  TransformerWeights w = init_weights(c, 2);
  TokenBatch batch = make_batch({4, 4}, 1, 2);
  Tensor h0 = embed(c, w, batch);
  double diff = 0.0;
  for (Index j = 0; j < c.hidden; ++j) {
    diff += std::fabs(h0.data()[static_cast<std::size_t>(j)] -
                      h0.data()[static_cast<std::size_t>(c.hidden + j)]);
  }
  CHECK(diff > 1e-6);

  // equal position rows -> equal outputs
  for (Index j = 0; j < c.hidden; ++j) {
    w.position_embedding.data()[static_cast<std::size_t>(c.hidden + j)] =
        w.position_embedding.data()[static_cast<std::size_t>(j)];
  }
  Tensor h0b = embed(c, w, batch);
  for (Index j = 0; j < c.hidden; ++j) {
    CHECK(h0b.data()[static_cast<std::size_t>(j)] ==
          h0b.data()[static_cast<std::size_t>(c.hidden + j)]);
  }
}

TEST_CASE("embed: hand-computed 2-token case, d_h = 4") {
  ModelConfig c;
  c.layers = 1;
  c.hidden = 4;
  c.heads = 1;
  c.head_dim = 4;
  c.ffn = 4;
  c.vocab = 3;
  c.max_seq_len = 2;
  TransformerWeights w = init_weights(c, 0);
  w.token_embedding = Tensor::from({3, 4}, {0.1, 0.2, 0.3, 0.4,   //
                                            -1.0, 0.5, 2.0, 0.0,  //
                                            0.0, 0.0, 1.0, -1.0});
  w.position_embedding = Tensor::from({2, 4}, {0.05, -0.05, 0.10, 0.20,  //
                                               1.00, 2.00, -1.00, 0.50});
  w.emb_ln_gain = Tensor::from({4}, {1.0, 2.0, 0.5, 1.5});
  w.emb_ln_bias = Tensor::from({4}, {0.0, -0.1, 0.1, 0.2});
  Tensor h0 = embed(c, w, make_batch({1, 2}, 1, 2));

  const std::vector<double> gain = {1.0, 2.0, 0.5, 1.5};
  const std::vector<double> bias = {0.0, -0.1, 0.1, 0.2};
  const std::vector<double> row0 = {-1.0 + 0.05, 0.5 - 0.05, 2.0 + 0.10, 0.0 + 0.20};
  const std::vector<double> row1 = {0.0 + 1.00, 0.0 + 2.00, 1.0 - 1.00, -1.0 + 0.50};
  const std::vector<double> e0 = ln_row(row0, gain, bias, c.layer_norm_eps);
  const std::vector<double> e1 = ln_row(row1, gain, bias, c.layer_norm_eps);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(h0.data()[j] == doctest::Approx(e0[j]).epsilon(1e-12));
    CHECK(h0.data()[4 + j] == doctest::Approx(e1[j]).epsilon(1e-12));
  }
}

TEST_CASE("embed rejects out-of-range ids and long sequences") {
  ModelConfig c = tiny_config();
  TransformerWeights w = init_weights(c, 3);
  CHECK_THROWS_AS(embed(c, w, make_batch({11}, 1, 1)), ConfigError);
  CHECK_THROWS_AS(embed(c, w, make_batch(std::vector<int>(7, 0), 1, 7)), ConfigError);
}

TEST_CASE("mha: single position gives attention [[1.0]]") {
  ModelConfig c = tiny_config();
  TransformerWeights w = init_weights(c, 4);
  Tensor h0 = embed(c, w, make_batch({5}, 1, 1));
  MhaResult r = mha_forward(h0, w.layers[0], c);
  CHECK(r.probs.shape() == Shape{1, 2, 1, 1});
  for (double v : r.probs.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("mha: zero value/output projections reduce to LayerNorm(h)") {
  ModelConfig c = tiny_config();
  TransformerWeights w = init_weights(c, 5);
  LayerWeights& lw = w.layers[0];
  std::fill(lw.wv.data().begin(), lw.wv.data().end(), 0.0);
  std::fill(lw.bv.data().begin(), lw.bv.data().end(), 0.0);
  std::fill(lw.wo.data().begin(), lw.wo.data().end(), 0.0);
  std::fill(lw.bo.data().begin(), lw.bo.data().end(), 0.0);
  Tensor h0 = embed(c, w, make_batch({1, 2, 3}, 1, 3));
  MhaResult r = mha_forward(h0, lw, c);
  Tensor expect = layer_norm(h0, lw.mha_ln_gain, lw.mha_ln_bias, c.layer_norm_eps);
  CHECK(max_abs_diff(r.h_out, expect) == 0.0);
}

TEST_CASE("mha: hand-worked 2-position single-head case") {
  ModelConfig c;
  c.layers = 1;
  c.hidden = 2;
  c.heads = 1;
  c.head_dim = 2;
  c.ffn = 2;
  c.vocab = 4;
  c.max_seq_len = 2;
  TransformerWeights w = init_weights(c, 6);
  LayerWeights& lw = w.layers[0];
  lw.wq = Tensor::from({2, 2}, {0.5, -0.3, 0.2, 0.7});
  lw.bq = Tensor::from({2}, {0.1, -0.1});
  lw.wk = Tensor::from({2, 2}, {-0.4, 0.6, 0.3, 0.2});
  lw.bk = Tensor::from({2}, {0.0, 0.05});
  lw.wv = Tensor::from({2, 2}, {1.0, 0.5, -0.5, 0.25});
  lw.bv = Tensor::from({2}, {0.2, 0.0});
  lw.wo = Tensor::from({2, 2}, {0.8, -0.2, 0.1, 0.9});
  lw.bo = Tensor::from({2}, {-0.05, 0.15});
  lw.mha_ln_gain = Tensor::from({2}, {1.2, 0.8});
  lw.mha_ln_bias = Tensor::from({2}, {0.05, -0.05});

  const std::vector<double> h = {0.3, -0.6, 1.1, 0.4};  // [1,2,2]
  Tensor ht = Tensor::from({1, 2, 2}, std::vector<double>(h));
  MhaResult r = mha_forward(ht, lw, c);

  // independent scalar evaluation
  auto matvec = [](const std::vector<double>& m, const double* x, const std::vector<double>& b) {
    return std::vector<double>{m[0] * x[0] + m[2] * x[1] + b[0], m[1] * x[0] + m[3] * x[1] + b[1]};
  };
  const std::vector<double> wq = lw.wq.data(), wk = lw.wk.data(), wv = lw.wv.data(), wo = lw.wo.data();
  std::vector<std::vector<double>> q(2), k(2), v(2);
  for (int t = 0; t < 2; ++t) {
    q[t] = matvec(wq, h.data() + 2 * t, lw.bq.data());
    k[t] = matvec(wk, h.data() + 2 * t, lw.bk.data());
    v[t] = matvec(wv, h.data() + 2 * t, lw.bv.data());
  }
  const double inv = 1.0 / std::sqrt(2.0);
  double a[2][2], p[2][2];
  for (int t = 0; t < 2; ++t) {
    for (int u = 0; u < 2; ++u) a[t][u] = (q[t][0] * k[u][0] + q[t][1] * k[u][1]) * inv;
    const double mx = std::max(a[t][0], a[t][1]);
    const double z = std::exp(a[t][0] - mx) + std::exp(a[t][1] - mx);
    for (int u = 0; u < 2; ++u) p[t][u] = std::exp(a[t][u] - mx) / z;
  }
  for (int t = 0; t < 2; ++t) {
    for (int u = 0; u < 2; ++u) {
      CHECK(r.logits.data()[static_cast<std::size_t>(t * 2 + u)] == doctest::Approx(a[t][u]).epsilon(1e-12));
      CHECK(r.probs.data()[static_cast<std::size_t>(t * 2 + u)] == doctest::Approx(p[t][u]).epsilon(1e-12));
    }
  }
  for (int t = 0; t < 2; ++t) {
    std::vector<double> head = {p[t][0] * v[0][0] + p[t][1] * v[1][0],
                                p[t][0] * v[0][1] + p[t][1] * v[1][1]};
    std::vector<double> proj = {wo[0] * head[0] + wo[2] * head[1] + lw.bo.data()[0],
                                wo[1] * head[0] + wo[3] * head[1] + lw.bo.data()[1]};
    std::vector<double> res = {h[2 * t] + proj[0], h[2 * t + 1] + proj[1]};
    std::vector<double> expect = ln_row(res, lw.mha_ln_gain.data(), lw.mha_ln_bias.data(), c.layer_norm_eps);
    for (int j = 0; j < 2; ++j) {
      CHECK(r.head_out.data()[static_cast<std::size_t>(t * 2 + j)] == doctest::Approx(head[static_cast<std::size_t>(j)]).epsilon(1e-12));
      CHECK(r.h_out.data()[static_cast<std::size_t>(t * 2 + j)] == doctest::Approx(expect[static_cast<std::size_t>(j)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("ffn: zero weights reduce to LayerNorm(h), d_ff = 1 hand case, act shape") {
  ModelConfig c = tiny_config();
  TransformerWeights w = init_weights(c, 7);
  LayerWeights& lw = w.layers[0];
  std::fill(lw.w1.data().begin(), lw.w1.data().end(), 0.0);
  std::fill(lw.b1.data().begin(), lw.b1.data().end(), 0.0);
  std::fill(lw.w2.data().begin(), lw.w2.data().end(), 0.0);
  std::fill(lw.b2.data().begin(), lw.b2.data().end(), 0.0);
  Tensor h0 = embed(c, w, make_batch({1, 2}, 1, 2));
  FfnResult r = ffn_forward(h0, lw, c);
  Tensor expect = layer_norm(h0, lw.ffn_ln_gain, lw.ffn_ln_bias, c.layer_norm_eps);
  CHECK(max_abs_diff(r.h_out, expect) == 0.0);
  CHECK(r.act.shape() == Shape{1, 2, c.ffn});

  // d_ff = 1: single neuron, scalar recomputation
  ModelConfig c1;
  c1.layers = 1;
  c1.hidden = 2;
  c1.heads = 1;
  c1.head_dim = 2;
  c1.ffn = 1;
  c1.vocab = 4;
  c1.max_seq_len = 2;
  TransformerWeights w1 = init_weights(c1, 8);
  LayerWeights& l1 = w1.layers[0];
  l1.w1 = Tensor::from({2, 1}, {0.7, -0.4});
  l1.b1 = Tensor::from({1}, {0.2});
  l1.w2 = Tensor::from({1, 2}, {1.5, -0.5});
  l1.b2 = Tensor::from({2}, {0.1, 0.3});
  const std::vector<double> h = {0.9, -0.2};
  FfnResult r1 = ffn_forward(Tensor::from({1, 1, 2}, std::vector<double>(h)), l1, c1);
  const double pre = 0.7 * 0.9 - 0.4 * (-0.2) + 0.2;
  const double act = pre * 0.5 * std::erfc(-pre / std::sqrt(2.0));
  CHECK(r1.act.item() == doctest::Approx(act).epsilon(1e-14));
  std::vector<double> res = {h[0] + act * 1.5 + 0.1, h[1] + act * (-0.5) + 0.3};
  std::vector<double> expect1 = ln_row(res, l1.ffn_ln_gain.data(), l1.ffn_ln_bias.data(), c1.layer_norm_eps);
  CHECK(r1.h_out.data()[0] == doctest::Approx(expect1[0]).epsilon(1e-12));
  CHECK(r1.h_out.data()[1] == doctest::Approx(expect1[1]).epsilon(1e-12));
}

TEST_CASE("forward: trace sizes and bit-exact reproducibility") {
  ModelConfig c = tiny_config();
  TransformerWeights w = init_weights(c, 9);
  TokenBatch batch = make_batch({1, 2, 3, 4, 5, 6, 7, 8}, 2, 4);
  ForwardTrace t1 = forward(c, w, batch);
  CHECK(t1.hidden.size() == 3);
  CHECK(t1.attn_logits.size() == 2);
  CHECK(t1.attn_probs.size() == 2);
  CHECK(t1.head_out.size() == 2);
  CHECK(t1.ffn_act.size() == 2);
  CHECK(t1.hidden[0].shape() == Shape{2, 4, 8});
  CHECK(t1.attn_probs[0].shape() == Shape{2, 2, 4, 4});

  ForwardTrace t2 = forward(c, w, batch);
  for (std::size_t l = 0; l < t1.hidden.size(); ++l) {
    CHECK(t1.hidden[l].data() == t2.hidden[l].data());
  }

  // attention rows are probability distributions
  for (const Tensor& p : t1.attn_probs) {
    const Index s = p.dim(3);
    const Index rows = p.numel() / s;
    for (Index r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (Index j = 0; j < s; ++j) acc += p.data()[static_cast<std::size_t>(r * s + j)];
      CHECK(std::fabs(acc - 1.0) < 1e-10);
    }
  }
}

TEST_CASE("mlm_loss: uniform logits give ln(vocab), empty mask rejected") {
  ModelConfig c = tiny_config();
  TransformerWeights w = init_weights(c, 10);
  std::fill(w.mlm_w.data().begin(), w.mlm_w.data().end(), 0.0);
  std::fill(w.mlm_b.data().begin(), w.mlm_b.data().end(), 0.0);
  TokenBatch batch = make_batch({0, 1, 2, 3}, 1, 4);
  ForwardTrace trace = forward(c, w, batch);
  Tensor loss = mlm_loss(trace, w, {1, 3}, {5, 6});
  CHECK(loss.item() == doctest::Approx(std::log(11.0)).epsilon(1e-12));
  CHECK_THROWS_AS(mlm_loss(trace, w, {}, {}), ConfigError);
}

TEST_CASE("full transformer loss gradients match finite differences") {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 6;
  c.heads = 2;
  c.head_dim = 3;
  c.ffn = 8;
  c.vocab = 9;
  c.max_seq_len = 5;
  TransformerWeights w = init_weights(c, 11);
  TokenBatch batch = make_batch({0, 1, 2, 3, 4, 5, 6, 7}, 2, 4);
  std::vector<Index> pos = {1, 2, 5};
  std::vector<int> tgt = {3, 8, 0};

  auto loss_fn = [&] {
    ForwardTrace trace = forward(c, w, batch);
    return mlm_loss(trace, w, pos, tgt);
  };
  // step 3e-4: the loss is O(2) while attention grads are O(1e-6), so a
  // smaller step drowns the central difference in cancellation noise
  auto rep = fd_compare(w.parameters(), loss_fn, 100, 1e-4, 77, 3e-4);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("hidden-dimension permutation equivariance") {
  ModelConfig c = tiny_config();
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    TransformerWeights w = init_weights(c, 100 + static_cast<std::uint64_t>(trial));
    std::vector<int> perm = random_perm(c.hidden, rng);
    TransformerWeights wp = permute_hidden_dims(w, perm);
    TokenBatch batch = make_batch({1, 4, 2, 9, 3, 3, 7, 0}, 2, 4);
    ForwardTrace a = forward(c, w, batch);
    ForwardTrace b = forward(c, wp, batch);
    for (std::size_t l = 0; l < a.hidden.size(); ++l) {
      const Index rows = a.hidden[l].numel() / c.hidden;
      for (Index r = 0; r < rows; ++r) {
        for (Index j = 0; j < c.hidden; ++j) {
          const double orig = a.hidden[l].data()[static_cast<std::size_t>(r * c.hidden + perm[static_cast<std::size_t>(j)])];
          const double got = b.hidden[l].data()[static_cast<std::size_t>(r * c.hidden + j)];
          CHECK(std::fabs(orig - got) < 1e-10);
        }
      }
    }
    for (std::size_t l = 0; l < a.attn_logits.size(); ++l) {
      CHECK(max_abs_diff(a.attn_logits[l], b.attn_logits[l]) < 1e-10);
    }
  }
}

TEST_CASE("within-head and FFN-neuron permutation invariance") {
  ModelConfig c = tiny_config();
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    TransformerWeights w = init_weights(c, 200 + static_cast<std::uint64_t>(trial));
    TokenBatch batch = make_batch({5, 2, 8, 1, 0, 6, 10, 4}, 2, 4);
    ForwardTrace a = forward(c, w, batch);

    TransformerWeights wh = permute_within_head(w, trial % c.layers, trial % c.heads, c.head_dim,
                                                random_perm(c.head_dim, rng));
    ForwardTrace b = forward(c, wh, batch);
    for (std::size_t l = 0; l < a.hidden.size(); ++l) {
      CHECK(max_abs_diff(a.hidden[l], b.hidden[l]) < 1e-10);
    }
    for (std::size_t l = 0; l < a.attn_probs.size(); ++l) {
      CHECK(max_abs_diff(a.attn_probs[l], b.attn_probs[l]) < 1e-10);
    }

    TransformerWeights wf = permute_ffn_neurons(w, trial % c.layers, random_perm(c.ffn, rng));
    ForwardTrace d = forward(c, wf, batch);
    for (std::size_t l = 0; l < a.hidden.size(); ++l) {
      CHECK(max_abs_diff(a.hidden[l], d.hidden[l]) < 1e-10);
    }
  }
}

TEST_CASE("neuron masks zero the traced activations") {
  ModelConfig c = tiny_config();
  TransformerWeights w = init_weights(c, 14);
  TokenBatch batch = make_batch({1, 2, 3, 4}, 1, 4);

  NeuronMasks masks;
  masks.ffn.resize(2);
  masks.head.resize(2);
  masks.ffn[0] = Tensor::full({c.ffn}, 1.0);
  masks.ffn[0].data()[5] = 0.0;
  masks.head[1] = Tensor::full({c.hidden}, 1.0);
  masks.head[1].data()[2] = 0.0;

  ForwardOptions opts;
  opts.masks = &masks;
  ForwardTrace t = forward(c, w, batch, opts);
  for (Index r = 0; r < 4; ++r) {
    CHECK(t.ffn_act[0].data()[static_cast<std::size_t>(r * c.ffn + 5)] == 0.0);
    CHECK(t.head_out[1].data()[static_cast<std::size_t>(r * c.hidden + 2)] == 0.0);
  }
}
