#include "tlab/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>

#include "tlab/wordpiece.hpp"

namespace tlab {

std::string to_string(Variant v) { return v == Variant::baseline ? "baseline" : "proposed"; }

std::string to_string(EmbedScaleMode m) {
  return m == EmbedScaleMode::divide ? "divide" : "multiply";
}

std::string to_string(AttnScaleMode m) {
  return m == AttnScaleMode::embed_dim ? "embed_dim" : "head_dim";
}

std::string to_string(TargetNormMode m) { return m == TargetNormMode::prefix ? "prefix" : "full"; }

Variant parse_variant(const std::string& text) {
  if (text == "baseline") return Variant::baseline;
  if (text == "proposed") return Variant::proposed;
  throw ConfigError("variant: expected baseline or proposed, got '" + text + "'");
}

EmbedScaleMode parse_embed_scale_mode(const std::string& text) {
  if (text == "divide") return EmbedScaleMode::divide;
  if (text == "multiply") return EmbedScaleMode::multiply;
  throw ConfigError("embed_scale: expected divide or multiply, got '" + text + "'");
}

AttnScaleMode parse_attn_scale_mode(const std::string& text) {
  if (text == "embed_dim") return AttnScaleMode::embed_dim;
  if (text == "head_dim") return AttnScaleMode::head_dim;
  throw ConfigError("attn_scale: expected embed_dim or head_dim, got '" + text + "'");
}

TargetNormMode parse_target_norm_mode(const std::string& text) {
  if (text == "prefix") return TargetNormMode::prefix;
  if (text == "full") return TargetNormMode::full;
  throw ConfigError("tgt_norm: expected prefix or full, got '" + text + "'");
}

ModelConfig ModelConfig::proposed_defaults() { return ModelConfig{}; }

ModelConfig ModelConfig::baseline_defaults() {
  ModelConfig c;
  c.variant = Variant::baseline;
  c.blocks = 4;
  c.embed_dim = 128;
  c.ffn_hidden = 512;
  c.heads = 8;
  c.head_dim = 128;
  return c;
}

ModelConfig ModelConfig::defaults_for(Variant v) {
  return v == Variant::baseline ? baseline_defaults() : proposed_defaults();
}

std::size_t ModelConfig::stream_width() const {
  return variant == Variant::baseline ? embed_dim : 2 * embed_dim;
}

std::size_t ModelConfig::attention_scale_dim() const {
  return attn_scale == AttnScaleMode::embed_dim ? embed_dim : head_dim;
}

void ModelConfig::validate() const {
  if (embed_dim == 0 || embed_dim % 2 != 0) {
    throw ConfigError("embed_dim: must be positive and even, got " + std::to_string(embed_dim));
  }
  if (ffn_hidden == 0) throw ConfigError("ffn_hidden: must be positive");
  if (heads == 0) throw ConfigError("heads: must be positive");
  if (head_dim == 0) throw ConfigError("head_dim: must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError("dropout: must lie in [0, 1), got " + std::to_string(dropout));
  }
  if (max_len < 2) throw ConfigError("max_len: must be at least 2");
  if (src_vocab < Vocab::reserved().size()) {
    throw ConfigError("src_vocab: must hold the reserved tokens, got " + std::to_string(src_vocab));
  }
  if (tgt_vocab < Vocab::reserved().size()) {
    throw ConfigError("tgt_vocab: must hold the reserved tokens, got " + std::to_string(tgt_vocab));
  }
}

namespace {

std::size_t attention_count(std::size_t query_width, std::size_t value_width,
                            std::size_t out_width, std::size_t fused, bool bias) {
  std::size_t n = 2 * query_width * fused + value_width * fused + fused * out_width;
  if (bias) n += 3 * fused + out_width;
  return n;
}

std::size_t ffn_count(std::size_t width, std::size_t hidden, bool bias) {
  std::size_t n = 2 * width * hidden;
  if (bias) n += hidden + width;
  return n;
}

}  // namespace

ParameterCount count_parameters(const ModelConfig& config, std::size_t src_vocab,
                                std::size_t tgt_vocab) {
  const std::size_t m = config.embed_dim;
  const std::size_t d = config.stream_width();
  const std::size_t value = config.variant == Variant::proposed ? m : d;
  const std::size_t fused = config.heads * config.head_dim;
  const std::size_t attn = attention_count(d, value, d, fused, config.use_bias);
  const std::size_t ffn = ffn_count(d, config.ffn_hidden, config.use_bias);
  const std::size_t norm = 2 * d;

  ParameterCount pc;
  auto add_part = [&pc](std::string name, std::size_t n) {
    pc.total += n;
    pc.breakdown.emplace_back(std::move(name), n);
  };
  add_part("src_embedding", src_vocab * m);
  add_part("tgt_embedding", tgt_vocab * m);
  for (std::size_t u = 0; u < config.blocks; ++u) {
    const std::string p = "encoder." + std::to_string(u);
    add_part(p + ".self_attn", attn);
    add_part(p + ".ffn", ffn);
    add_part(p + ".norms", 2 * norm);
  }
  for (std::size_t u = 0; u < config.blocks; ++u) {
    const std::string p = "decoder." + std::to_string(u);
    add_part(p + ".masked_attn", attn);
    add_part(p + ".cross_attn", attn);
    add_part(p + ".ffn", ffn);
    add_part(p + ".norms", 3 * norm);
  }
  add_part("output_projection", d * tgt_vocab + tgt_vocab);
  return pc;
}

template <typename T>
Seq2SeqModel<T>::Seq2SeqModel(const ModelConfig& config)
    : config_(config), positions_(config.max_len, config.embed_dim) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const std::size_t m = config_.embed_dim;
  const std::size_t d = config_.stream_width();
  const std::size_t value = config_.variant == Variant::proposed ? m : d;
  const bool bias = config_.use_bias;
  src_embedding = glorot_uniform<T>(config_.src_vocab, m, rng);
  tgt_embedding = glorot_uniform<T>(config_.tgt_vocab, m, rng);
  for (std::size_t u = 0; u < config_.blocks; ++u) {
    EncoderBlock<T> b;
    b.self_attn = MultiHeadWeights<T>::init(d, value, d, config_.heads, config_.head_dim, bias, rng);
    b.norm_attn = LayerNormParams<T>::init(d);
    b.ffn = FfnWeights<T>::init(d, config_.ffn_hidden, bias, rng);
    b.norm_ffn = LayerNormParams<T>::init(d);
    encoder.push_back(std::move(b));
  }
  for (std::size_t u = 0; u < config_.blocks; ++u) {
    DecoderBlock<T> b;
    b.masked_attn =
        MultiHeadWeights<T>::init(d, value, d, config_.heads, config_.head_dim, bias, rng);
    b.norm_masked = LayerNormParams<T>::init(d);
    b.cross_attn =
        MultiHeadWeights<T>::init(d, value, d, config_.heads, config_.head_dim, bias, rng);
    b.norm_cross = LayerNormParams<T>::init(d);
    b.ffn = FfnWeights<T>::init(d, config_.ffn_hidden, bias, rng);
    b.norm_ffn = LayerNormParams<T>::init(d);
    decoder.push_back(std::move(b));
  }
  // Small logits at init keep the untrained loss near ln(vocab).
  out_proj = glorot_uniform<T>(d, config_.tgt_vocab, rng, 0.25);
  out_bias = Tensor<T>(Shape{1, config_.tgt_vocab}, true);
}

template <typename T>
std::vector<NamedTensor<T>> Seq2SeqModel<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  out.push_back({"src_embedding", src_embedding});
  out.push_back({"tgt_embedding", tgt_embedding});
  for (std::size_t u = 0; u < encoder.size(); ++u) {
    const std::string p = "encoder." + std::to_string(u);
    encoder[u].self_attn.collect(p + ".self_attn", out);
    encoder[u].norm_attn.collect(p + ".norm_attn", out);
    encoder[u].ffn.collect(p + ".ffn", out);
    encoder[u].norm_ffn.collect(p + ".norm_ffn", out);
  }
  for (std::size_t u = 0; u < decoder.size(); ++u) {
    const std::string p = "decoder." + std::to_string(u);
    decoder[u].masked_attn.collect(p + ".masked_attn", out);
    decoder[u].norm_masked.collect(p + ".norm_masked", out);
    decoder[u].cross_attn.collect(p + ".cross_attn", out);
    decoder[u].norm_cross.collect(p + ".norm_cross", out);
    decoder[u].ffn.collect(p + ".ffn", out);
    decoder[u].norm_ffn.collect(p + ".norm_ffn", out);
  }
  out.push_back({"out_proj", out_proj});
  out.push_back({"out_bias", out_bias});
  return out;
}

template <typename T>
std::size_t Seq2SeqModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

SequenceBatch SequenceBatch::single(std::span<const TokenId> ids) {
  SequenceBatch s;
  s.ids.assign(ids.begin(), ids.end());
  s.batch = 1;
  s.len = ids.size();
  s.lengths = {ids.size()};
  return s;
}

namespace {

void check_sequence(const SequenceBatch& s, std::size_t max_len, const char* what) {
  if (s.batch == 0 || s.len == 0) {
    throw InputError(std::string(what) + " sequence is empty");
  }
  if (s.ids.size() != s.batch * s.len) {
    throw DimensionError(std::string(what) + " ids hold " + std::to_string(s.ids.size()) +
                         " entries for " + std::to_string(s.batch) + " x " +
                         std::to_string(s.len));
  }
  if (!s.lengths.empty() && s.lengths.size() != s.batch) {
    throw DimensionError(std::string(what) + " lengths do not match the batch size");
  }
  if (s.len > max_len) {
    throw InputError(std::string(what) + " sequence of length " + std::to_string(s.len) +
                     " exceeds max_len " + std::to_string(max_len));
  }
}

template <typename T>
void check_stream(const Tensor<T>& x, std::size_t width, const char* where) {
  if (x.shape().cols() != width) {
    throw ContractError(std::string(where) + " has width " + std::to_string(x.shape().cols()) +
                        ", expected stream width " + std::to_string(width));
  }
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const ModelConfig& config,
                        const ForwardOptions<T>& options) {
  if (!options.training || config.dropout == 0.0) return x;
  if (options.rng == nullptr) throw ContractError("training forward with dropout needs an rng");
  return dropout(x, config.dropout, *options.rng);
}

// Post-norm residual: LN(x + dropout(sublayer)).
template <typename T>
Tensor<T> add_norm(const Tensor<T>& x, const Tensor<T>& sub, const LayerNormParams<T>& norm,
                   const ModelConfig& config, const ForwardOptions<T>& options) {
  return layer_norm(add(x, maybe_dropout(sub, config, options)), norm);
}

std::span<const std::size_t> lengths_of(const SequenceBatch& s) { return s.lengths; }

}  // namespace

template <typename T>
EncoderOutput<T> encoder_forward(const Seq2SeqModel<T>& model, const SequenceBatch& src,
                                 const ForwardOptions<T>& options) {
  const ModelConfig& config = model.config();
  check_sequence(src, config.max_len, "source");
  const std::size_t width = config.stream_width();
  const std::size_t scale_dim = config.attention_scale_dim();
  ForwardTrace<T>* trace = options.trace;

  EncoderOutput<T> out;
  out.lengths = src.lengths.empty() ? std::vector<std::size_t>(src.batch, src.len) : src.lengths;
  const Tensor<T> embedded = token_embed(model.src_embedding, std::span<const TokenId>(src.ids),
                                         src.batch);
  const Tensor<T> positions = model.positions().batched(src.batch, src.len);
  Tensor<T> x;
  if (config.variant == Variant::proposed) {
    out.value = token_normalize(embedded, lengths_of(src));
    if (trace) trace->src_value = out.value;
    x = concat_embed(out.value, positions);
  } else {
    x = baseline_embed_input(embedded, positions, config.embed_dim, config.embed_scale);
  }
  x = maybe_dropout(x, config, options);
  check_stream(x, width, "encoder input");

  const Tensor<T> mask = attention_mask<T>(src.batch, src.len, src.len, lengths_of(src), false);
  for (const auto& block : model.encoder) {
    AttentionTrace<T>* at = nullptr;
    if (trace) at = &trace->encoder_self.emplace_back();
    Tensor<T> attn = config.variant == Variant::proposed
                         ? proposed_multi_head(x, x, out.value, block.self_attn, scale_dim, mask, at)
                         : multi_head_attention(x, x, x, block.self_attn, scale_dim, mask, at);
    x = add_norm(x, attn, block.norm_attn, config, options);
    x = add_norm(x, feed_forward(x, block.ffn), block.norm_ffn, config, options);
    check_stream(x, width, "encoder block output");
    if (trace) trace->encoder_blocks.push_back(x);
  }
  out.states = x;
  return out;
}

template <typename T>
Tensor<T> decoder_forward(const Seq2SeqModel<T>& model, const SequenceBatch& tgt,
                          const EncoderOutput<T>& encoded, const ForwardOptions<T>& options) {
  const ModelConfig& config = model.config();
  check_sequence(tgt, config.max_len, "target");
  const std::size_t width = config.stream_width();
  const std::size_t scale_dim = config.attention_scale_dim();
  ForwardTrace<T>* trace = options.trace;
  if (!encoded.states.defined()) throw ContractError("decoder needs encoder states");
  if (encoded.states.shape().batch() != tgt.batch) {
    throw DimensionError("encoder states " + encoded.states.shape().str() +
                         " do not match a target batch of " + std::to_string(tgt.batch));
  }
  check_stream(encoded.states, width, "encoder states");
  const bool proposed = config.variant == Variant::proposed;
  if (proposed && !encoded.value.defined()) {
    throw ContractError("proposed decoder needs the normalized source embedding");
  }

  const Tensor<T> embedded = token_embed(model.tgt_embedding, std::span<const TokenId>(tgt.ids),
                                         tgt.batch);
  const Tensor<T> positions = model.positions().batched(tgt.batch, tgt.len);
  Tensor<T> y;
  Tensor<T> value;
  if (proposed) {
    value = config.tgt_norm == TargetNormMode::prefix ? token_normalize_prefix(embedded, lengths_of(tgt))
                                                      : token_normalize(embedded, lengths_of(tgt));
    if (trace) trace->tgt_value = value;
    y = concat_embed(value, positions);
  } else {
    y = baseline_embed_input(embedded, positions, config.embed_dim, config.embed_scale);
  }
  y = maybe_dropout(y, config, options);
  check_stream(y, width, "decoder input");

  // Target padding sits after every real position, so the causal mask alone
  // keeps real queries away from pad keys.
  const std::size_t n_src = encoded.states.shape().rows();
  const Tensor<T> self_mask = causal_mask<T>(tgt.len);
  const Tensor<T> cross_mask =
      attention_mask<T>(tgt.batch, tgt.len, n_src, encoded.lengths, false);
  const Tensor<T>& enc = encoded.states;
  for (const auto& block : model.decoder) {
    AttentionTrace<T>* mt = nullptr;
    AttentionTrace<T>* ct = nullptr;
    if (trace) {
      mt = &trace->decoder_masked.emplace_back();
      ct = &trace->decoder_cross.emplace_back();
    }
    Tensor<T> masked =
        proposed ? proposed_multi_head(y, y, value, block.masked_attn, scale_dim, self_mask, mt)
                 : multi_head_attention(y, y, y, block.masked_attn, scale_dim, self_mask, mt);
    y = add_norm(y, masked, block.norm_masked, config, options);
    Tensor<T> cross =
        proposed
            ? proposed_multi_head(y, enc, encoded.value, block.cross_attn, scale_dim, cross_mask, ct)
            : multi_head_attention(y, enc, enc, block.cross_attn, scale_dim, cross_mask, ct);
    y = add_norm(y, cross, block.norm_cross, config, options);
    y = add_norm(y, feed_forward(y, block.ffn), block.norm_ffn, config, options);
    check_stream(y, width, "decoder block output");
    if (trace) trace->decoder_blocks.push_back(y);
  }
  return y;
}

template <typename T>
Tensor<T> model_forward(const Seq2SeqModel<T>& model, const SequenceBatch& src,
                        const SequenceBatch& tgt_in, const ForwardOptions<T>& options) {
  const EncoderOutput<T> encoded = encoder_forward(model, src, options);
  const Tensor<T> y = decoder_forward(model, tgt_in, encoded, options);
  return add(matmul(y, model.out_proj), model.out_bias);
}

namespace {

template <typename T>
Tensor<T> drop_batch_axis(const Tensor<T>& x) {
  return reshape(x, Shape{x.shape().rows(), x.shape().cols()});
}

}  // namespace

template <typename T>
Tensor<T> encoder_forward(const Seq2SeqModel<T>& model, std::span<const TokenId> src) {
  return drop_batch_axis(encoder_forward(model, SequenceBatch::single(src)).states);
}

template <typename T>
Tensor<T> model_forward(const Seq2SeqModel<T>& model, std::span<const TokenId> src,
                        std::span<const TokenId> tgt_in, const ForwardOptions<T>& options) {
  return drop_batch_axis(
      model_forward(model, SequenceBatch::single(src), SequenceBatch::single(tgt_in), options));
}

template <typename T>
std::vector<TokenId> greedy_decode(const Seq2SeqModel<T>& model, std::span<const TokenId> src,
                                   std::size_t max_len) {
  NoGradGuard no_grad;
  const EncoderOutput<T> encoded = encoder_forward(model, SequenceBatch::single(src));
  std::vector<TokenId> out;
  std::vector<TokenId> dec{Vocab::kStart};
  const std::size_t vocab = model.config().tgt_vocab;
  while (out.size() < max_len && dec.size() <= model.config().max_len) {
    const Tensor<T> y = decoder_forward(model, SequenceBatch::single(dec), encoded);
    const std::size_t last = dec.size() - 1;
    // Only the newest row is needed for the next token.
    const auto& yv = y.values();
    const std::size_t d = y.shape().cols();
    const auto& w = model.out_proj.values();
    const auto& b = model.out_bias.values();
    TokenId best = 0;
    T best_score = -std::numeric_limits<T>::infinity();
    for (std::size_t v = 0; v < vocab; ++v) {
      T s = b[v];
      for (std::size_t k = 0; k < d; ++k) s += yv[last * d + k] * w[k * vocab + v];
      if (s > best_score) {
        best_score = s;
        best = static_cast<TokenId>(v);
      }
    }
    if (best == Vocab::kEnd) break;
    out.push_back(best);
    dec.push_back(best);
  }
  return out;
}

namespace {

constexpr char kMagic[8] = {'T', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename U>
void write_pod(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_pod(std::istream& is, const std::filesystem::path& path) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw ParseError(path.string() + ": truncated checkpoint");
  return v;
}

}  // namespace

template <typename T>
void save_checkpoint(const Seq2SeqModel<T>& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_pod<std::uint32_t>(os, kCheckpointVersion);
  write_pod<std::uint32_t>(os, sizeof(T));
  const auto params = model.parameters();
  write_pod<std::uint64_t>(os, params.size());
  for (const auto& p : params) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const Shape& s = p.tensor.shape();
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.rank()));
    for (std::size_t a = 0; a < s.rank(); ++a) write_pod<std::uint64_t>(os, s[a]);
    const auto v = p.tensor.values();
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(T)));
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

template <typename T>
void load_checkpoint(Seq2SeqModel<T>& model, const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(path.string() + ": not a checkpoint file");
  }
  const auto version = read_pod<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw ParseError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto width = read_pod<std::uint32_t>(is, path);
  if (width != sizeof(T)) {
    throw ParseError(path.string() + ": checkpoint holds " + std::to_string(width * 8) +
                     "-bit values, model uses " + std::to_string(sizeof(T) * 8) + "-bit");
  }
  auto params = model.parameters();
  const auto count = read_pod<std::uint64_t>(is, path);
  if (count != params.size()) {
    throw ParseError(path.string() + ": checkpoint has " + std::to_string(count) +
                     " tensors, model has " + std::to_string(params.size()));
  }
  for (auto& p : params) {
    const auto name_len = read_pod<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is || name != p.name) {
      throw ParseError(path.string() + ": expected tensor '" + p.name + "', found '" + name + "'");
    }
    const auto rank = read_pod<std::uint32_t>(is, path);
    const Shape& s = p.tensor.shape();
    bool same = rank == s.rank();
    for (std::size_t a = 0; a < rank; ++a) {
      const auto dim = read_pod<std::uint64_t>(is, path);
      same = same && a < s.rank() && dim == s[a];
    }
    if (!same) throw ParseError(path.string() + ": shape mismatch for '" + p.name + "'");
    auto v = p.tensor.mutable_values();
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
    if (!is) throw ParseError(path.string() + ": truncated checkpoint at '" + p.name + "'");
  }
}

#define TLAB_INSTANTIATE_MODEL(T)                                                            \
  template class Seq2SeqModel<T>;                                                            \
  template EncoderOutput<T> encoder_forward(const Seq2SeqModel<T>&, const SequenceBatch&,    \
                                            const ForwardOptions<T>&);                       \
  template Tensor<T> decoder_forward(const Seq2SeqModel<T>&, const SequenceBatch&,           \
                                     const EncoderOutput<T>&, const ForwardOptions<T>&);     \
  template Tensor<T> model_forward(const Seq2SeqModel<T>&, const SequenceBatch&,             \
                                   const SequenceBatch&, const ForwardOptions<T>&);          \
  template Tensor<T> encoder_forward(const Seq2SeqModel<T>&, std::span<const TokenId>);      \
  template Tensor<T> model_forward(const Seq2SeqModel<T>&, std::span<const TokenId>,         \
                                   std::span<const TokenId>, const ForwardOptions<T>&);      \
  template std::vector<TokenId> greedy_decode(const Seq2SeqModel<T>&,                        \
                                              std::span<const TokenId>, std::size_t);        \
  template void save_checkpoint(const Seq2SeqModel<T>&, const std::filesystem::path&);       \
  template void load_checkpoint(Seq2SeqModel<T>&, const std::filesystem::path&);

TLAB_INSTANTIATE_MODEL(float)
TLAB_INSTANTIATE_MODEL(double)

#undef TLAB_INSTANTIATE_MODEL

}  // namespace tlab
