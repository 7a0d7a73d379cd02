#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tlab/wordpiece.hpp"

namespace tlab {

struct SentencePair {
  std::string source;
  std::string target;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

// Reads "source<TAB>target" lines. Blank lines are skipped; a line without
// exactly one TAB is a ParseError naming its 1-based line number.
std::vector<SentencePair> load_parallel_corpus(const std::filesystem::path& path);

void save_parallel_corpus(const std::filesystem::path& path, std::span<const SentencePair> pairs);

struct TokenizedPair {
  std::vector<TokenId> src_ids;
  std::vector<TokenId> tgt_ids;  // START ... END
};

std::vector<TokenizedPair> tokenize_pairs(std::span<const SentencePair> pairs,
                                          const Vocab& src_vocab, const Vocab& tgt_vocab);

// One padded mini-batch in teacher-forcing layout. All id arrays are
// row-major [size x len]; padding is Vocab::kPad.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<TokenId> enc_input;
  std::vector<TokenId> dec_input;  // target without its final token
  std::vector<TokenId> labels;     // target without START
  std::vector<std::size_t> src_lengths;
  std::vector<std::size_t> tgt_lengths;

  // 1 where the encoder (resp. decoder) position holds a real token.
  std::vector<std::uint8_t> src_mask() const;
  std::vector<std::uint8_t> tgt_mask() const;

  // FNV-1a over the shape and all ids.
  std::uint64_t checksum() const;
};

// Seeded shuffle, truncation to max_len (targets keep their END token), and
// grouping into batches padded to their longest member. The last batch may
// be short.
std::vector<Batch> make_batches(std::span<const TokenizedPair> pairs, std::size_t batch_size,
                                std::size_t max_len, std::uint64_t seed);

// Deterministic toy translation corpus: a small grammar over generated
// lexicons with a word-for-word dictionary, adjective/noun reordering and
// plural agreement, so that targets are a learnable function of sources.
struct SyntheticCorpusOptions {
  std::size_t nouns = 700;
  std::size_t adjectives = 250;
  std::size_t verbs = 350;
  std::size_t adverbs = 60;
};

std::vector<SentencePair> synthetic_parallel_corpus(std::size_t count, std::uint64_t seed,
                                                    const SyntheticCorpusOptions& options = {});

}  // namespace tlab
