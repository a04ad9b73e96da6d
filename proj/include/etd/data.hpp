#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "etd/transformer.hpp"

namespace etd {

struct CorpusSpec {
  int vocab = 64;
  int seq_len = 32;
  std::int64_t num_sequences = 50000;
  std::string generator = "markov";  // "markov" | "grammar"
  int markov_order = 1;
  std::uint64_t seed = 0;
  double mask_prob = 0.15;
  int mask_token_id = 1;
  int cls_token_id = 0;
  int pad_token_id = 2;

  void validate() const;
  std::vector<int> regular_tokens() const;  // vocabulary minus the reserved ids
};

// Deterministic stream of fixed-length sequences, randomly addressable by
// index so train/calibration/held-out splits are plain index ranges.
class CorpusStream {
 public:
  explicit CorpusStream(CorpusSpec spec);

  const CorpusSpec& spec() const { return spec_; }
  std::vector<int> sequence(std::int64_t index) const;
  TokenBatch batch(std::int64_t start_index, Index count) const;

  // row-stochastic transition matrix over regular tokens (markov generator)
  const std::vector<std::vector<double>>& transition() const { return transition_; }

 private:
  std::vector<int> markov_sequence(std::int64_t index) const;
  std::vector<int> grammar_sequence(std::int64_t index) const;

  CorpusSpec spec_;
  std::vector<int> tokens_;                        // regular token ids
  std::vector<std::vector<double>> transition_;    // [state][state] probabilities
  std::vector<std::vector<double>> cumulative_;    // row-wise CDF for sampling
  std::vector<std::vector<std::vector<int>>> rules_;  // grammar: nonterminal -> alternatives
};

struct MaskedBatch {
  TokenBatch tokens;             // inputs after mask corruption
  std::vector<Index> positions;  // flat [batch*seq] indices selected for prediction
  std::vector<int> targets;      // original ids at those positions
};

// BERT-style corruption: each non-CLS, non-pad position is selected with
// probability mask_prob; selected positions are 80% mask token, 10% random
// regular token, 10% unchanged. Zero selections triggers one reseeded retry.
MaskedBatch mask_batch(const TokenBatch& batch, const CorpusSpec& spec, std::uint64_t seed);

// newline-delimited token-id text, one sequence per line
void export_corpus(const CorpusStream& stream, std::int64_t begin, std::int64_t count,
                   const std::string& path, const std::string& provenance_comment);
std::vector<std::vector<int>> import_corpus(const std::string& path);

}  // namespace etd
