#include "tlab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>

namespace tlab {

std::vector<SentencePair> load_parallel_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file " + path.string());
  std::vector<SentencePair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) +
                       ": expected exactly one TAB between source and target");
    }
    pairs.push_back({line.substr(0, tab), line.substr(tab + 1)});
  }
  return pairs;
}

void save_parallel_corpus(const std::filesystem::path& path, std::span<const SentencePair> pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file " + path.string());
  for (const auto& p : pairs) out << p.source << '\t' << p.target << '\n';
}

std::vector<TokenizedPair> tokenize_pairs(std::span<const SentencePair> pairs,
                                          const Vocab& src_vocab, const Vocab& tgt_vocab) {
  std::vector<TokenizedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    TokenizedPair t;
    t.src_ids = tokenize(p.source, src_vocab);
    t.tgt_ids.push_back(Vocab::kStart);
    const auto body = tokenize(p.target, tgt_vocab);
    t.tgt_ids.insert(t.tgt_ids.end(), body.begin(), body.end());
    t.tgt_ids.push_back(Vocab::kEnd);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::uint8_t> Batch::src_mask() const {
  std::vector<std::uint8_t> mask(enc_input.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = enc_input[i] != Vocab::kPad;
  return mask;
}

std::vector<std::uint8_t> Batch::tgt_mask() const {
  std::vector<std::uint8_t> mask(dec_input.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = dec_input[i] != Vocab::kPad;
  return mask;
}

std::uint64_t Batch::checksum() const {
  std::uint64_t h = 14695981039346656037ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  };
  mix(size);
  mix(src_len);
  mix(tgt_len);
  for (auto id : enc_input) mix(static_cast<std::uint64_t>(id));
  for (auto id : dec_input) mix(static_cast<std::uint64_t>(id));
  for (auto id : labels) mix(static_cast<std::uint64_t>(id));
  return h;
}

std::vector<Batch> make_batches(std::span<const TokenizedPair> pairs, std::size_t batch_size,
                                std::size_t max_len, std::uint64_t seed) {
  if (pairs.empty()) throw InputError("cannot batch an empty pair list");
  if (batch_size == 0) throw ContractError("batch size must be at least 1");
  if (max_len < 2) throw ContractError("max_len must be at least 2");

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
  }

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, order.size() - start);
    std::vector<std::vector<TokenId>> src(count), dec(count), lab(count);
    Batch b;
    b.size = count;
    for (std::size_t i = 0; i < count; ++i) {
      const auto& pair = pairs[order[start + i]];
      src[i].assign(pair.src_ids.begin(),
                    pair.src_ids.begin() + static_cast<std::ptrdiff_t>(
                                               std::min(pair.src_ids.size(), max_len)));
      // Keep START, at most max_len - 1 body tokens, and END.
      std::vector<TokenId> tgt = pair.tgt_ids;
      if (tgt.size() > max_len + 1) {
        tgt.resize(max_len);
        tgt.push_back(pair.tgt_ids.back());
      }
      if (tgt.size() < 2) throw InputError("target needs at least START and END tokens");
      dec[i].assign(tgt.begin(), tgt.end() - 1);
      lab[i].assign(tgt.begin() + 1, tgt.end());
      b.src_len = std::max(b.src_len, src[i].size());
      b.tgt_len = std::max(b.tgt_len, dec[i].size());
      b.src_lengths.push_back(src[i].size());
      b.tgt_lengths.push_back(dec[i].size());
    }
    b.enc_input.assign(count * b.src_len, Vocab::kPad);
    b.dec_input.assign(count * b.tgt_len, Vocab::kPad);
    b.labels.assign(count * b.tgt_len, Vocab::kPad);
    for (std::size_t i = 0; i < count; ++i) {
      std::copy(src[i].begin(), src[i].end(), b.enc_input.begin() + static_cast<std::ptrdiff_t>(i * b.src_len));
      std::copy(dec[i].begin(), dec[i].end(), b.dec_input.begin() + static_cast<std::ptrdiff_t>(i * b.tgt_len));
      std::copy(lab[i].begin(), lab[i].end(), b.labels.begin() + static_cast<std::ptrdiff_t>(i * b.tgt_len));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

namespace {

// The toy language is fixed; only sentence sampling depends on the caller's
// seed, so corpora drawn with different seeds share one dictionary.
constexpr std::uint64_t kLexiconSeed = 0x5eed1e7;

struct Lexeme {
  std::string source;
  std::string target;
  int gender = 0;
};

class LexiconBuilder {
 public:
  explicit LexiconBuilder(std::mt19937_64& rng) : rng_(rng) {}

  std::vector<Lexeme> make(std::size_t count) {
    std::vector<Lexeme> words;
    while (words.size() < count) {
      Lexeme w;
      w.source = fresh(source_seen_, "bcdfglmnprstvz", "aeiou");
      w.target = fresh(target_seen_, "bdfghklmnprtwy", "aeiouy");
      w.gender = static_cast<int>(rng_() % 2);
      words.push_back(std::move(w));
    }
    return words;
  }

 private:
  std::string fresh(std::set<std::string>& seen, std::string_view consonants,
                    std::string_view vowels) {
    for (;;) {
      std::string word;
      const std::size_t syllables = 2 + rng_() % 2;
      for (std::size_t s = 0; s < syllables; ++s) {
        word += consonants[rng_() % consonants.size()];
        word += vowels[rng_() % vowels.size()];
      }
      if (rng_() % 3 == 0) word += consonants[rng_() % consonants.size()];
      if (seen.insert(word).second) return word;
    }
  }

  std::mt19937_64& rng_;
  std::set<std::string> source_seen_;
  std::set<std::string> target_seen_;
};

}  // namespace

std::vector<SentencePair> synthetic_parallel_corpus(std::size_t count, std::uint64_t seed,
                                                    const SyntheticCorpusOptions& options) {
  std::mt19937_64 lex_rng(kLexiconSeed);
  LexiconBuilder builder(lex_rng);
  const auto nouns = builder.make(options.nouns);
  const auto adjectives = builder.make(options.adjectives);
  const auto verbs = builder.make(options.verbs);
  const auto adverbs = builder.make(options.adverbs);

  // [definite][plural][gender] source determiners and their translations.
  static const char* kSourceDet[2][2][2] = {{{"un", "una"}, {"unos", "unas"}},
                                             {{"lo", "la"}, {"los", "las"}}};
  static const char* kTargetDet[2][2] = {{"en", "som"}, {"da", "da"}};

  std::mt19937_64 rng(seed);
  auto pick = [&rng](const std::vector<Lexeme>& list) -> const Lexeme& {
    return list[static_cast<std::size_t>(rng() % list.size())];
  };

  struct Phrase {
    std::string source;
    std::string target;
    bool plural = false;
  };
  auto noun_phrase = [&]() {
    Phrase p;
    const Lexeme& noun = pick(nouns);
    const bool definite = rng() % 2 == 0;
    p.plural = rng() % 3 == 0;
    const bool has_adj = rng() % 2 == 0;
    p.source = std::string(kSourceDet[definite][p.plural][noun.gender]) + " " + noun.source +
               (p.plural ? "s" : "");
    p.target = std::string(kTargetDet[definite][p.plural]) + " ";
    if (has_adj) {
      const Lexeme& adj = pick(adjectives);
      p.source += " " + adj.source + (noun.gender ? "a" : "o") + (p.plural ? "s" : "");
      p.target += adj.target + " ";
    }
    p.target += noun.target + (p.plural ? "en" : "");
    return p;
  };

  std::vector<SentencePair> pairs;
  pairs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Phrase subject = noun_phrase();
    const Lexeme& verb = pick(verbs);
    const Phrase object = noun_phrase();
    SentencePair pair;
    pair.source = subject.source + " " + verb.source + (subject.plural ? "n" : "") + " " +
                  object.source;
    pair.target = subject.target + " " + verb.target + (subject.plural ? "" : "s") + " " +
                  object.target;
    if (rng() % 2 == 0) {
      const Lexeme& adv = pick(adverbs);
      pair.source += " " + adv.source + "mente";
      pair.target += " " + adv.target + "ly";
    }
    pair.source += " .";
    pair.target += " .";
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

}  // namespace tlab
