#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "etd/checkpoint.hpp"
#include "etd/data.hpp"
#include "etd/transformer.hpp"

namespace etd {

// Accumulated |dL/dx * x| per neuron, summed over token positions.
// hidden_per_layer[0] scores the embedding output; entry l scores the
// hidden state emitted by transformer layer l.
struct ImportanceScores {
  ModelConfig geometry;
  std::vector<std::vector<double>> ffn;                 // [layers][ffn]
  std::vector<std::vector<std::vector<double>>> head;   // [layers][heads][head_dim]
  std::vector<std::vector<double>> hidden_per_layer;    // [layers+1][hidden]
  std::vector<double> hidden_dim;                       // [hidden]
  std::int64_t token_count = 0;

  static ImportanceScores zeros(const ModelConfig& config);
  void require_same_geometry(const ImportanceScores& other) const;
};

// One forward/backward of the MLM loss; scores use gradients of the
// position-summed cross-entropy so disjoint chunks add exactly.
ImportanceScores score_batch(const ModelConfig& config, const TransformerWeights& weights,
                             const MaskedBatch& batch);

ImportanceScores accumulate(const ImportanceScores& a, const ImportanceScores& b);

// hidden_dim[j] = sum over l of hidden_per_layer[l][j], in ascending l
void aggregate_hidden(ImportanceScores& scores);

// Scores `count` sequences starting at `begin`, in batches of `batch_size`
// (a trailing partial batch is processed too), masking each batch with a
// seed derived from (mask_seed, batch index).
ImportanceScores score_calibration(const ModelConfig& config, const TransformerWeights& weights,
                                   const CorpusStream& stream, std::int64_t begin,
                                   std::int64_t count, Index batch_size, std::uint64_t mask_seed);

void save_scores(const std::string& path, const ImportanceScores& scores, const Provenance& prov);
ImportanceScores load_scores(const std::string& path);

}  // namespace etd
