#include "etd/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "etd/rng.hpp"

namespace etd {

namespace {

constexpr std::uint64_t kStreamRows = 0x6d61726b6f76ull;   // markov row construction
constexpr std::uint64_t kStreamSeq = 0x73657175656eull;    // per-sequence draws
constexpr std::uint64_t kStreamRules = 0x72756c6573ull;    // grammar rule construction
constexpr std::uint64_t kStreamMask = 0x4d41534bull;       // masking
constexpr std::uint64_t kStreamMaskRetry = 0x52455452ull;  // masking retry

constexpr double kRowWeights[4] = {0.55, 0.25, 0.12, 0.08};

}  // namespace

void CorpusSpec::validate() const {
  if (vocab < 1) throw ConfigError("corpus vocab must be >= 1");
  if (seq_len < 2) throw ConfigError("corpus seq_len must be >= 2");
  if (num_sequences < 1) throw ConfigError("corpus num_sequences must be >= 1");
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) {
    throw ConfigError("mask_prob must lie in (0, 1), got " + std::to_string(mask_prob));
  }
  auto in_range = [&](int id, const char* name) {
    if (id < 0 || id >= vocab) throw ConfigError(std::string(name) + " must be < vocab");
  };
  in_range(mask_token_id, "mask_token_id");
  in_range(cls_token_id, "cls_token_id");
  in_range(pad_token_id, "pad_token_id");
  if (mask_token_id == cls_token_id || mask_token_id == pad_token_id ||
      cls_token_id == pad_token_id) {
    throw ConfigError("mask/cls/pad token ids must be mutually distinct");
  }
  if (static_cast<int>(regular_tokens().size()) < 4) {
    throw ConfigError("corpus needs at least 4 non-reserved tokens");
  }
  if (generator != "markov" && generator != "grammar") {
    throw ConfigError("unknown corpus generator '" + generator + "'");
  }
  if (generator == "markov" && (markov_order < 1 || markov_order > 2)) {
    throw ConfigError("markov_order must be 1 or 2");
  }
}

std::vector<int> CorpusSpec::regular_tokens() const {
  std::vector<int> out;
  for (int id = 0; id < vocab; ++id) {
    if (id != mask_token_id && id != cls_token_id && id != pad_token_id) out.push_back(id);
  }
  return out;
}

CorpusStream::CorpusStream(CorpusSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  tokens_ = spec_.regular_tokens();
  const int n = static_cast<int>(tokens_.size());

  if (spec_.generator == "markov") {
    // rows are built once; each row concentrates mass on a few successors so
    // the chain has low entropy and the MLM task is learnable
    const int support = std::min(4, n);
    double wsum = 0.0;
    for (int i = 0; i < support; ++i) wsum += kRowWeights[i];
    const std::int64_t states = spec_.markov_order == 1 ? n : static_cast<std::int64_t>(n) * n;
    transition_.assign(static_cast<std::size_t>(states), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    cumulative_.assign(static_cast<std::size_t>(states), {});
    for (std::int64_t s = 0; s < states; ++s) {
      Rng rng(split_seed(spec_.seed ^ kStreamRows, static_cast<std::uint64_t>(s)));
      std::vector<int> succ;
      while (static_cast<int>(succ.size()) < support) {
        const int cand = rng.uniform_int(n);
        if (std::find(succ.begin(), succ.end(), cand) == succ.end()) succ.push_back(cand);
      }
      auto& row = transition_[static_cast<std::size_t>(s)];
      for (int i = 0; i < support; ++i) row[static_cast<std::size_t>(succ[static_cast<std::size_t>(i)])] = kRowWeights[i] / wsum;
      auto& cdf = cumulative_[static_cast<std::size_t>(s)];
      cdf.resize(static_cast<std::size_t>(n));
      double acc = 0.0;
      for (int j = 0; j < n; ++j) {
        acc += row[static_cast<std::size_t>(j)];
        cdf[static_cast<std::size_t>(j)] = acc;
      }
      cdf.back() = 1.0;
    }
  } else {
    // small seeded grammar: nonterminal i only references higher nonterminals,
    // the last one is all-terminal, so expansion always terminates
    const int n_nt = 6;
    Rng rng(split_seed(spec_.seed ^ kStreamRules, 0));
    rules_.resize(n_nt);
    for (int nt = 0; nt < n_nt; ++nt) {
      for (int alt = 0; alt < 2; ++alt) {
        const int len = 2 + rng.uniform_int(3);
        std::vector<int> symbols;
        for (int k = 0; k < len; ++k) {
          const bool terminal = nt == n_nt - 1 || rng.uniform() < 0.6;
          if (terminal) {
            symbols.push_back(tokens_[static_cast<std::size_t>(rng.uniform_int(n))]);
          } else {
            // negative value -(j+1) marks a reference to nonterminal j
            const int j = nt + 1 + rng.uniform_int(n_nt - nt - 1);
            symbols.push_back(-(j + 1));
          }
        }
        rules_[static_cast<std::size_t>(nt)].push_back(std::move(symbols));
      }
    }
  }
}

std::vector<int> CorpusStream::markov_sequence(std::int64_t index) const {
  const int n = static_cast<int>(tokens_.size());
  Rng rng(split_seed(spec_.seed ^ kStreamSeq, static_cast<std::uint64_t>(index)));
  std::vector<int> seq;
  seq.reserve(static_cast<std::size_t>(spec_.seq_len));
  seq.push_back(spec_.cls_token_id);
  int prev = rng.uniform_int(n);
  int prev2 = -1;
  seq.push_back(tokens_[static_cast<std::size_t>(prev)]);
  while (static_cast<int>(seq.size()) < spec_.seq_len) {
    std::int64_t state = prev;
    if (spec_.markov_order == 2 && prev2 >= 0) state = static_cast<std::int64_t>(prev2) * n + prev;
    const auto& cdf = cumulative_[static_cast<std::size_t>(state)];
    const double u = rng.uniform();
    const int next = static_cast<int>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    seq.push_back(tokens_[static_cast<std::size_t>(next)]);
    prev2 = prev;
    prev = next;
  }
  return seq;
}

std::vector<int> CorpusStream::grammar_sequence(std::int64_t index) const {
  Rng rng(split_seed(spec_.seed ^ kStreamSeq, static_cast<std::uint64_t>(index)));
  std::vector<int> seq;
  seq.push_back(spec_.cls_token_id);
  while (static_cast<int>(seq.size()) < spec_.seq_len) {
    std::vector<int> stack = {-1};  // start symbol
    while (!stack.empty() && static_cast<int>(seq.size()) < spec_.seq_len) {
      const int sym = stack.back();
      stack.pop_back();
      if (sym >= 0) {
        seq.push_back(sym);
        continue;
      }
      const auto& alts = rules_[static_cast<std::size_t>(-sym - 1)];
      const auto& alt = alts[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(alts.size())))];
      for (auto it = alt.rbegin(); it != alt.rend(); ++it) stack.push_back(*it);
    }
  }
  return seq;
}

std::vector<int> CorpusStream::sequence(std::int64_t index) const {
  if (index < 0 || index >= spec_.num_sequences) {
    throw ConfigError("sequence index " + std::to_string(index) + " outside corpus of " +
                      std::to_string(spec_.num_sequences));
  }
  return spec_.generator == "markov" ? markov_sequence(index) : grammar_sequence(index);
}

TokenBatch CorpusStream::batch(std::int64_t start_index, Index count) const {
  if (count < 1) throw ConfigError("batch count must be >= 1");
  TokenBatch b;
  b.batch = count;
  b.seq = spec_.seq_len;
  b.ids.reserve(static_cast<std::size_t>(count * spec_.seq_len));
  for (Index i = 0; i < count; ++i) {
    const std::vector<int> s = sequence(start_index + i);
    b.ids.insert(b.ids.end(), s.begin(), s.end());
  }
  return b;
}

namespace {

MaskedBatch mask_attempt(const TokenBatch& batch, const CorpusSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  const std::vector<int> regular = spec.regular_tokens();
  MaskedBatch out;
  out.tokens = batch;
  for (Index b = 0; b < batch.batch; ++b) {
    for (Index t = 0; t < batch.seq; ++t) {
      const Index flat = b * batch.seq + t;
      const int id = batch.ids[static_cast<std::size_t>(flat)];
      if (id == spec.cls_token_id || id == spec.pad_token_id) continue;
      if (rng.uniform() >= spec.mask_prob) continue;
      out.positions.push_back(flat);
      out.targets.push_back(id);
      const double u = rng.uniform();
      if (u < 0.8) {
        out.tokens.ids[static_cast<std::size_t>(flat)] = spec.mask_token_id;
      } else if (u < 0.9) {
        const int r = regular[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(regular.size())))];
        out.tokens.ids[static_cast<std::size_t>(flat)] = r;
      }  // else leave unchanged
    }
  }
  return out;
}

}  // namespace

MaskedBatch mask_batch(const TokenBatch& batch, const CorpusSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (batch.batch < 1 || batch.ids.empty()) throw ConfigError("mask_batch: empty batch");
  MaskedBatch out = mask_attempt(batch, spec, split_seed(seed, kStreamMask));
  if (!out.positions.empty()) return out;
  out = mask_attempt(batch, spec, split_seed(seed, kStreamMaskRetry));
  if (!out.positions.empty()) return out;
  throw ConfigError("mask_batch: no positions selected after retry");
}

void export_corpus(const CorpusStream& stream, std::int64_t begin, std::int64_t count,
                   const std::string& path, const std::string& provenance_comment) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  if (!provenance_comment.empty()) out << "# " << provenance_comment << "\n";
  for (std::int64_t i = 0; i < count; ++i) {
    const std::vector<int> seq = stream.sequence(begin + i);
    for (std::size_t j = 0; j < seq.size(); ++j) {
      if (j) out << ' ';
      out << seq[j];
    }
    out << '\n';
  }
  if (!out) throw IoError("short write to " + path);
}

std::vector<std::vector<int>> import_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::vector<int>> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::vector<int> seq;
    int v;
    while (is >> v) seq.push_back(v);
    if (!is.eof()) throw IoError(path + ": malformed token line");
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace etd
