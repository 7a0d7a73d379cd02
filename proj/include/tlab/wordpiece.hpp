#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tlab/ops.hpp"

namespace tlab {

// Ordered token list; line i of a vocab file is the token with id i.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kStart = 1;
  static constexpr TokenId kEnd = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kReservedCount = 4;
  static const std::array<std::string, kReservedCount>& reserved();

  // Throws InputError unless the list starts with the reserved tokens and
  // holds no duplicates.
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

struct WordpieceOptions {
  // Pairs seen fewer times than this are never merged.
  std::size_t min_pair_frequency = 2;
};

// Learns a wordpiece vocabulary of at most target_size tokens: the reserved
// tokens, the corpus alphabet (word-initial and "##" continuation forms, most
// frequent first), then repeated merges of the most frequent adjacent pair.
Vocab build_wordpiece_vocab(std::span<const std::string> corpus, std::size_t target_size,
                            const WordpieceOptions& options = {});

// Whitespace split, then greedy longest match per word; a word with no full
// cover becomes a single UNK.
std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab);

// Joins tokens with spaces, gluing "##" pieces to their predecessor. PAD,
// START and END are skipped.
std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab);

// Splits UTF-8 into code points; malformed bytes are kept as single units.
std::vector<std::string> utf8_chars(std::string_view text);

std::vector<std::string> split_whitespace(std::string_view text);

}  // namespace tlab
