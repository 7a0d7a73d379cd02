#include "tlab/wordpiece.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <queue>
#include <set>
#include <unordered_set>

namespace tlab {

namespace {

constexpr std::string_view kContinuation = "##";
constexpr std::size_t kMaxWordChars = 100;

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead & 0xE0) == 0xC0) return 2;
  if ((lead & 0xF0) == 0xE0) return 3;
  if ((lead & 0xF8) == 0xF0) return 4;
  return 1;
}

std::string strip_continuation(const std::string& piece) {
  return piece.starts_with(kContinuation) ? piece.substr(kContinuation.size()) : piece;
}

// Mutable state of the merge loop. Symbols are interned strings; a word is a
// sequence of symbol ids weighted by its corpus frequency.
class MergeTrainer {
 public:
  struct Word {
    std::vector<int> pieces;
    std::size_t freq = 0;
  };

  int intern(const std::string& s) {
    auto [it, inserted] = ids_.try_emplace(s, static_cast<int>(symbols_.size()));
    if (inserted) {
      symbols_.push_back(s);
      holders_.emplace_back();
    }
    return it->second;
  }

  const std::string& symbol(int id) const { return symbols_[static_cast<std::size_t>(id)]; }

  void add_word(Word word) {
    const int index = static_cast<int>(words_.size());
    for (int s : word.pieces) note_holder(s, index);
    words_.push_back(std::move(word));
  }

  // Learns merges until `budget` new tokens were accepted or no pair reaches
  // `min_frequency`. Accepted token strings are appended to `out`.
  void run(std::size_t budget, std::size_t min_frequency,
           std::unordered_set<std::string>& known, std::vector<std::string>& out) {
    for (const auto& w : words_) add_pairs(w, 1);
    for (const auto& [key, count] : counts_) push(key);
    std::size_t added = 0;
    while (added < budget && !heap_.empty()) {
      const Entry top = heap_.top();
      heap_.pop();
      const auto it = counts_.find(top.key);
      if (it == counts_.end() || it->second != top.count || top.count <= 0) continue;
      if (static_cast<std::size_t>(top.count) < min_frequency) break;
      const int a = first(top.key);
      const int b = second(top.key);
      const std::string merged_text = symbol(a) + strip_continuation(symbol(b));
      const int merged = intern(merged_text);
      if (known.insert(merged_text).second) {
        out.push_back(merged_text);
        ++added;
      }
      apply_merge(a, b, merged);
    }
  }

 private:
  struct Entry {
    std::int64_t count;
    std::uint64_t key;
  };

  static std::uint64_t key_of(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }
  static int first(std::uint64_t key) { return static_cast<int>(key >> 32); }
  static int second(std::uint64_t key) { return static_cast<int>(key & 0xffffffffu); }

  struct EntryOrder {
    const MergeTrainer* trainer;
    // Highest count first; ties go to the lexicographically smallest pair.
    bool operator()(const Entry& x, const Entry& y) const {
      if (x.count != y.count) return x.count < y.count;
      const auto& xa = trainer->symbol(first(x.key));
      const auto& ya = trainer->symbol(first(y.key));
      if (xa != ya) return xa > ya;
      return trainer->symbol(second(x.key)) > trainer->symbol(second(y.key));
    }
  };

  void note_holder(int symbol_id, int word_index) {
    auto& list = holders_[static_cast<std::size_t>(symbol_id)];
    if (list.empty() || list.back() != word_index) list.push_back(word_index);
  }

  void add_pairs(const Word& w, std::int64_t sign) {
    for (std::size_t i = 0; i + 1 < w.pieces.size(); ++i) {
      counts_[key_of(w.pieces[i], w.pieces[i + 1])] +=
          sign * static_cast<std::int64_t>(w.freq);
    }
  }

  void push(std::uint64_t key) { heap_.push(Entry{counts_[key], key}); }

  void apply_merge(int a, int b, int merged) {
    std::set<std::uint64_t> touched;
    // Copy: note_holder may grow holders_ for the merged symbol.
    const std::vector<int> candidates = holders_[static_cast<std::size_t>(a)];
    for (int index : candidates) {
      Word& w = words_[static_cast<std::size_t>(index)];
      bool present = false;
      for (std::size_t i = 0; i + 1 < w.pieces.size(); ++i) {
        if (w.pieces[i] == a && w.pieces[i + 1] == b) {
          present = true;
          break;
        }
      }
      if (!present) continue;
      for (std::size_t i = 0; i + 1 < w.pieces.size(); ++i) {
        touched.insert(key_of(w.pieces[i], w.pieces[i + 1]));
      }
      add_pairs(w, -1);
      std::vector<int> next;
      next.reserve(w.pieces.size());
      for (std::size_t i = 0; i < w.pieces.size(); ++i) {
        if (i + 1 < w.pieces.size() && w.pieces[i] == a && w.pieces[i + 1] == b) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(w.pieces[i]);
        }
      }
      w.pieces = std::move(next);
      add_pairs(w, 1);
      for (std::size_t i = 0; i + 1 < w.pieces.size(); ++i) {
        touched.insert(key_of(w.pieces[i], w.pieces[i + 1]));
      }
      note_holder(merged, index);
    }
    for (auto key : touched) push(key);
  }

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> ids_;
  std::vector<std::vector<int>> holders_;  // symbol -> words that may contain it
  std::vector<Word> words_;
  std::unordered_map<std::uint64_t, std::int64_t> counts_;
  std::priority_queue<Entry, std::vector<Entry>, EntryOrder> heap_{EntryOrder{this}};
};

}  // namespace

const std::array<std::string, Vocab::kReservedCount>& Vocab::reserved() {
  static const std::array<std::string, kReservedCount> tokens{"[PAD]", "[START]", "[END]",
                                                              "[UNK]"};
  return tokens;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& res = reserved();
  if (tokens_.size() < kReservedCount || !std::equal(res.begin(), res.end(), tokens_.begin())) {
    throw InputError("vocabulary must start with [PAD], [START], [END], [UNK]");
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw InputError("empty token at id " + std::to_string(i));
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw InputError("duplicate token '" + tokens_[i] + "' at id " + std::to_string(i));
    }
  }
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocab::find(const std::string& token) const {
  const auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  while (!tokens.empty() && tokens.back().empty()) tokens.pop_back();
  return Vocab(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw IoError("failed writing vocabulary file " + path.string());
}

std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = utf8_length(static_cast<unsigned char>(text[i]));
    if (i + len > text.size()) len = 1;
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

Vocab build_wordpiece_vocab(std::span<const std::string> corpus, std::size_t target_size,
                            const WordpieceOptions& options) {
  if (target_size <= Vocab::kReservedCount) {
    throw InputError("vocabulary size must exceed the 4 reserved tokens, got " +
                     std::to_string(target_size));
  }
  std::map<std::string, std::size_t> word_freq;
  for (const auto& line : corpus) {
    for (auto& w : split_whitespace(line)) ++word_freq[std::move(w)];
  }
  if (word_freq.empty()) throw InputError("cannot build a vocabulary from an empty corpus");

  MergeTrainer trainer;
  std::vector<MergeTrainer::Word> words;
  std::map<int, std::size_t> alphabet_freq;
  for (const auto& [word, freq] : word_freq) {
    const auto chars = utf8_chars(word);
    if (chars.size() > kMaxWordChars) continue;
    MergeTrainer::Word w;
    w.freq = freq;
    for (std::size_t i = 0; i < chars.size(); ++i) {
      const int id = trainer.intern(i == 0 ? chars[i] : std::string(kContinuation) + chars[i]);
      w.pieces.push_back(id);
      alphabet_freq[id] += freq;
    }
    words.push_back(std::move(w));
  }

  std::vector<std::pair<int, std::size_t>> alphabet(alphabet_freq.begin(), alphabet_freq.end());
  std::sort(alphabet.begin(), alphabet.end(), [&](const auto& x, const auto& y) {
    if (x.second != y.second) return x.second > y.second;
    return trainer.symbol(x.first) < trainer.symbol(y.first);
  });

  const auto& reserved = Vocab::reserved();
  std::vector<std::string> tokens(reserved.begin(), reserved.end());
  std::unordered_set<std::string> known(tokens.begin(), tokens.end());
  std::unordered_set<int> kept;
  const std::size_t budget = target_size - Vocab::kReservedCount;
  for (const auto& [id, freq] : alphabet) {
    if (kept.size() == budget) break;
    if (known.insert(trainer.symbol(id)).second) tokens.push_back(trainer.symbol(id));
    kept.insert(id);
  }

  // Words with a character outside the alphabet always tokenize to UNK, so
  // they take no part in merging.
  for (auto& w : words) {
    const bool coverable = std::all_of(w.pieces.begin(), w.pieces.end(),
                                       [&](int id) { return kept.count(id) > 0; });
    if (coverable) trainer.add_word(std::move(w));
  }
  trainer.run(target_size - tokens.size(), options.min_pair_frequency, known, tokens);
  return Vocab(std::move(tokens));
}

std::vector<TokenId> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids;
  std::string candidate;
  for (const auto& word : split_whitespace(text)) {
    const auto chars = utf8_chars(word);
    if (chars.size() > kMaxWordChars) {
      ids.push_back(Vocab::kUnk);
      continue;
    }
    std::vector<std::size_t> offsets{0};
    for (const auto& c : chars) offsets.push_back(offsets.back() + c.size());

    std::vector<TokenId> pieces;
    std::size_t start = 0;
    bool covered = true;
    while (start < chars.size()) {
      std::optional<TokenId> match;
      std::size_t end = chars.size();
      for (; end > start; --end) {
        candidate.assign(start > 0 ? kContinuation : std::string_view{});
        candidate.append(word, offsets[start], offsets[end] - offsets[start]);
        match = vocab.find(candidate);
        if (match) break;
      }
      if (!match) {
        covered = false;
        break;
      }
      pieces.push_back(*match);
      start = end;
    }
    if (covered) {
      ids.insert(ids.end(), pieces.begin(), pieces.end());
    } else {
      ids.push_back(Vocab::kUnk);
    }
  }
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string text;
  for (TokenId id : ids) {
    const std::string& tok = vocab.token(id);
    if (id == Vocab::kPad || id == Vocab::kStart || id == Vocab::kEnd) continue;
    if (tok.starts_with(kContinuation)) {
      text += tok.substr(kContinuation.size());
    } else {
      if (!text.empty()) text += ' ';
      text += tok;
    }
  }
  return text;
}

}  // namespace tlab
