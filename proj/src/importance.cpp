#include "etd/importance.hpp"

#include <cmath>

#include "etd/rng.hpp"

namespace etd {

ImportanceScores ImportanceScores::zeros(const ModelConfig& config) {
  config.validate();
  ImportanceScores s;
  s.geometry = config;
  s.ffn.assign(static_cast<std::size_t>(config.layers),
               std::vector<double>(static_cast<std::size_t>(config.ffn), 0.0));
  s.head.assign(static_cast<std::size_t>(config.layers),
                std::vector<std::vector<double>>(
                    static_cast<std::size_t>(config.heads),
                    std::vector<double>(static_cast<std::size_t>(config.head_dim), 0.0)));
  s.hidden_per_layer.assign(static_cast<std::size_t>(config.layers + 1),
                            std::vector<double>(static_cast<std::size_t>(config.hidden), 0.0));
  s.hidden_dim.assign(static_cast<std::size_t>(config.hidden), 0.0);
  return s;
}

void ImportanceScores::require_same_geometry(const ImportanceScores& other) const {
  if (geometry.layers != other.geometry.layers || geometry.hidden != other.geometry.hidden ||
      geometry.heads != other.geometry.heads || geometry.head_dim != other.geometry.head_dim ||
      geometry.ffn != other.geometry.ffn) {
    throw ShapeError("importance scores describe different model geometries");
  }
}

namespace {

// flag restorer: scoring differentiates activations only, parameters stay out
// of the recorded graph
class ParamGradOff {
 public:
  explicit ParamGradOff(const TransformerWeights& w) : params_(w.parameters()) {
    for (Tensor& t : params_) {
      saved_.push_back(t.requires_grad());
      t.set_requires_grad(false);
    }
  }
  ~ParamGradOff() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].set_requires_grad(saved_[i]);
  }

 private:
  std::vector<Tensor> params_;
  std::vector<bool> saved_;
};

void add_abs_products(const Tensor& act, const std::string& what, std::vector<double>& out,
                      Index width) {
  const std::vector<double>& x = act.data();
  const std::vector<double>& g = act.grad();
  const Index rows = act.numel() / width;
  for (Index r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * width;
    const double* gr = g.data() + r * width;
    for (Index j = 0; j < width; ++j) {
      const double v = gr[j] * xr[j];
      if (!std::isfinite(v)) {
        throw NumericError("importance scoring: non-finite gradient contribution in " + what);
      }
      out[static_cast<std::size_t>(j)] += std::fabs(v);
    }
  }
}

}  // namespace

ImportanceScores score_batch(const ModelConfig& config, const TransformerWeights& weights,
                             const MaskedBatch& batch) {
  ImportanceScores s = ImportanceScores::zeros(config);
  ParamGradOff guard(weights);

  Tape tape;
  TapeScope scope(tape);
  ForwardOptions opts;
  opts.grad_from_hidden0 = true;
  ForwardTrace trace = forward(config, weights, batch.tokens, opts);
  Tensor loss = mlm_loss(trace, weights, batch.positions, batch.targets);
  if (!std::isfinite(loss.item())) {
    throw NumericError("importance scoring: MLM loss is not finite");
  }
  // gradients of the position-summed loss, so chunked accumulation is exact
  Tensor summed = scale(loss, static_cast<double>(batch.positions.size()));
  tape.backward(summed);

  for (int l = 0; l < config.layers; ++l) {
    add_abs_products(trace.ffn_act[static_cast<std::size_t>(l)], "ffn layer " + std::to_string(l),
                     s.ffn[static_cast<std::size_t>(l)], config.ffn);

    std::vector<double> head_concat(static_cast<std::size_t>(config.hidden), 0.0);
    add_abs_products(trace.head_out[static_cast<std::size_t>(l)],
                     "head outputs layer " + std::to_string(l), head_concat, config.hidden);
    for (int i = 0; i < config.heads; ++i) {
      for (int k = 0; k < config.head_dim; ++k) {
        s.head[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] +=
            head_concat[static_cast<std::size_t>(i * config.head_dim + k)];
      }
    }
  }
  for (int l = 0; l <= config.layers; ++l) {
    add_abs_products(trace.hidden[static_cast<std::size_t>(l)],
                     "hidden state " + std::to_string(l),
                     s.hidden_per_layer[static_cast<std::size_t>(l)], config.hidden);
  }
  s.token_count = batch.tokens.batch * batch.tokens.seq;
  aggregate_hidden(s);
  return s;
}

ImportanceScores accumulate(const ImportanceScores& a, const ImportanceScores& b) {
  a.require_same_geometry(b);
  ImportanceScores out = a;
  for (std::size_t l = 0; l < out.ffn.size(); ++l) {
    for (std::size_t j = 0; j < out.ffn[l].size(); ++j) out.ffn[l][j] += b.ffn[l][j];
  }
  for (std::size_t l = 0; l < out.head.size(); ++l) {
    for (std::size_t i = 0; i < out.head[l].size(); ++i) {
      for (std::size_t k = 0; k < out.head[l][i].size(); ++k) out.head[l][i][k] += b.head[l][i][k];
    }
  }
  for (std::size_t l = 0; l < out.hidden_per_layer.size(); ++l) {
    for (std::size_t j = 0; j < out.hidden_per_layer[l].size(); ++j) {
      out.hidden_per_layer[l][j] += b.hidden_per_layer[l][j];
    }
  }
  out.token_count += b.token_count;
  aggregate_hidden(out);  // keeps hidden_dim == sum over layers exactly
  return out;
}

void aggregate_hidden(ImportanceScores& scores) {
  std::fill(scores.hidden_dim.begin(), scores.hidden_dim.end(), 0.0);
  for (const auto& layer : scores.hidden_per_layer) {
    for (std::size_t j = 0; j < layer.size(); ++j) scores.hidden_dim[j] += layer[j];
  }
}

ImportanceScores score_calibration(const ModelConfig& config, const TransformerWeights& weights,
                                   const CorpusStream& stream, std::int64_t begin,
                                   std::int64_t count, Index batch_size, std::uint64_t mask_seed) {
  if (count < 1) throw ConfigError("calibration needs at least one sequence");
  ImportanceScores total = ImportanceScores::zeros(config);
  std::int64_t done = 0;
  while (done < count) {
    const Index take = static_cast<Index>(std::min<std::int64_t>(batch_size, count - done));
    TokenBatch tokens = stream.batch(begin + done, take);
    // per-offset mask seeds: re-chunking the stream reproduces the same masks
    MaskedBatch masked =
        mask_batch(tokens, stream.spec(), split_seed(mask_seed, static_cast<std::uint64_t>(begin + done)));
    total = accumulate(total, score_batch(config, weights, masked));
    done += take;
  }
  return total;
}

void save_scores(const std::string& path, const ImportanceScores& scores, const Provenance& prov) {
  std::vector<NamedTensor> ts;
  const ModelConfig& g = scores.geometry;
  for (int l = 0; l < g.layers; ++l) {
    ts.push_back({"importance/ffn/" + std::to_string(l),
                  Tensor::from({g.ffn}, std::vector<double>(scores.ffn[static_cast<std::size_t>(l)]))});
  }
  for (int l = 0; l < g.layers; ++l) {
    for (int i = 0; i < g.heads; ++i) {
      ts.push_back({"importance/head/" + std::to_string(l) + "/" + std::to_string(i),
                    Tensor::from({g.head_dim},
                                 std::vector<double>(scores.head[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)]))});
    }
  }
  for (int l = 0; l <= g.layers; ++l) {
    ts.push_back({"importance/hidden_per_layer/" + std::to_string(l),
                  Tensor::from({g.hidden},
                               std::vector<double>(scores.hidden_per_layer[static_cast<std::size_t>(l)]))});
  }
  ts.push_back({"importance/hidden_dim", Tensor::from({g.hidden}, std::vector<double>(scores.hidden_dim))});

  nlohmann::ordered_json meta;
  meta["config"] = config_to_json(g);
  meta["token_count"] = scores.token_count;
  save_tensor_file(path, "importance", meta, ts, prov);
}

ImportanceScores load_scores(const std::string& path) {
  TensorFile f = load_tensor_file(path);
  if (f.kind != "importance") throw IoError(path + ": not an importance score file");
  const ModelConfig g = config_from_json(f.meta.at("config"));
  ImportanceScores s = ImportanceScores::zeros(g);
  s.token_count = f.meta.value("token_count", 0ll);
  for (int l = 0; l < g.layers; ++l) {
    s.ffn[static_cast<std::size_t>(l)] = f.get("importance/ffn/" + std::to_string(l)).data();
    for (int i = 0; i < g.heads; ++i) {
      s.head[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)] =
          f.get("importance/head/" + std::to_string(l) + "/" + std::to_string(i)).data();
    }
  }
  for (int l = 0; l <= g.layers; ++l) {
    s.hidden_per_layer[static_cast<std::size_t>(l)] =
        f.get("importance/hidden_per_layer/" + std::to_string(l)).data();
  }
  s.hidden_dim = f.get("importance/hidden_dim").data();
  return s;
}

}  // namespace etd
