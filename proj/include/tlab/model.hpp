#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tlab/attention.hpp"
#include "tlab/embedding.hpp"

namespace tlab {

enum class Variant { baseline, proposed };

// How the proposed decoder normalizes its target embeddings.
enum class TargetNormMode {
  prefix,  // row i uses statistics of rows 1..i (causal)
  full,    // statistics over the whole target sequence
};

std::string to_string(Variant v);
std::string to_string(EmbedScaleMode m);
std::string to_string(AttnScaleMode m);
std::string to_string(TargetNormMode m);
Variant parse_variant(const std::string& text);
EmbedScaleMode parse_embed_scale_mode(const std::string& text);
AttnScaleMode parse_attn_scale_mode(const std::string& text);
TargetNormMode parse_target_norm_mode(const std::string& text);

struct ModelConfig {
  Variant variant = Variant::proposed;
  std::size_t blocks = 2;        // N
  std::size_t embed_dim = 64;    // m
  std::size_t ffn_hidden = 256;  // s
  std::size_t heads = 4;         // p
  std::size_t head_dim = 64;     // r = q
  double dropout = 0.1;
  std::size_t max_len = 128;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  EmbedScaleMode embed_scale = EmbedScaleMode::divide;
  AttnScaleMode attn_scale = AttnScaleMode::embed_dim;
  TargetNormMode tgt_norm = TargetNormMode::prefix;
  bool use_bias = true;
  std::uint64_t seed = 0;

  static ModelConfig proposed_defaults();
  static ModelConfig baseline_defaults();
  static ModelConfig defaults_for(Variant v);

  // m for the baseline, 2m for the proposed variant.
  std::size_t stream_width() const;
  std::size_t attention_scale_dim() const;

  // Throws ConfigError naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct ParameterCount {
  std::size_t total = 0;
  std::vector<std::pair<std::string, std::size_t>> breakdown;
};

// Closed-form count from the configuration alone.
ParameterCount count_parameters(const ModelConfig& config, std::size_t src_vocab,
                                std::size_t tgt_vocab);

template <typename T>
struct EncoderBlock {
  MultiHeadWeights<T> self_attn;
  LayerNormParams<T> norm_attn;
  FfnWeights<T> ffn;
  LayerNormParams<T> norm_ffn;
};

template <typename T>
struct DecoderBlock {
  MultiHeadWeights<T> masked_attn;
  LayerNormParams<T> norm_masked;
  MultiHeadWeights<T> cross_attn;
  LayerNormParams<T> norm_cross;
  FfnWeights<T> ffn;
  LayerNormParams<T> norm_ffn;
};

template <typename T>
class Seq2SeqModel {
 public:
  // Seeded Glorot-uniform initialization from config.seed.
  explicit Seq2SeqModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const PositionalTable<T>& positions() const { return positions_; }

  // Every trainable tensor exactly once, in a fixed order.
  std::vector<NamedTensor<T>> parameters() const;
  std::size_t parameter_count() const;

  Tensor<T> src_embedding;  // [src_vocab x m]
  Tensor<T> tgt_embedding;  // [tgt_vocab x m]
  std::vector<EncoderBlock<T>> encoder;
  std::vector<DecoderBlock<T>> decoder;
  Tensor<T> out_proj;  // [stream x tgt_vocab]
  Tensor<T> out_bias;  // [1 x tgt_vocab]

 private:
  ModelConfig config_;
  PositionalTable<T> positions_;
};

// Padded id matrix [batch x len] with the true length of each row.
struct SequenceBatch {
  std::vector<TokenId> ids;
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::size_t> lengths;

  static SequenceBatch single(std::span<const TokenId> ids);
};

template <typename T>
struct ForwardTrace {
  Tensor<T> src_value;  // proposed: TN(X_e)
  Tensor<T> tgt_value;  // proposed: TN(Y_e)
  std::vector<AttentionTrace<T>> encoder_self;
  std::vector<AttentionTrace<T>> decoder_masked;
  std::vector<AttentionTrace<T>> decoder_cross;
  std::vector<Tensor<T>> encoder_blocks;  // output of each encoder block
  std::vector<Tensor<T>> decoder_blocks;
};

template <typename T>
struct ForwardOptions {
  bool training = false;            // enables dropout
  std::mt19937_64* rng = nullptr;   // required when training with dropout > 0
  ForwardTrace<T>* trace = nullptr;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> states;      // [batch x n_src x stream]
  Tensor<T> value;       // proposed: TN(X_e), [batch x n_src x m]; baseline: undefined
  std::vector<std::size_t> lengths;
};

template <typename T>
EncoderOutput<T> encoder_forward(const Seq2SeqModel<T>& model, const SequenceBatch& src,
                                 const ForwardOptions<T>& options = {});

template <typename T>
Tensor<T> decoder_forward(const Seq2SeqModel<T>& model, const SequenceBatch& tgt,
                          const EncoderOutput<T>& encoded, const ForwardOptions<T>& options = {});

// Decoder output times the output projection: [batch x n_tgt x tgt_vocab].
template <typename T>
Tensor<T> model_forward(const Seq2SeqModel<T>& model, const SequenceBatch& src,
                        const SequenceBatch& tgt_in, const ForwardOptions<T>& options = {});

// Single-sequence conveniences returning rank-2 tensors.
template <typename T>
Tensor<T> encoder_forward(const Seq2SeqModel<T>& model, std::span<const TokenId> src);
template <typename T>
Tensor<T> model_forward(const Seq2SeqModel<T>& model, std::span<const TokenId> src,
                        std::span<const TokenId> tgt_in, const ForwardOptions<T>& options = {});

// Argmax decoding from START until END or max_len emitted tokens. Ties go to
// the lowest id. START and END are not part of the result.
template <typename T>
std::vector<TokenId> greedy_decode(const Seq2SeqModel<T>& model, std::span<const TokenId> src,
                                   std::size_t max_len);

// Binary container: registry name -> shape and raw little-endian values.
template <typename T>
void save_checkpoint(const Seq2SeqModel<T>& model, const std::filesystem::path& path);

// Loads into an existing model; names, shapes and element width must match.
template <typename T>
void load_checkpoint(Seq2SeqModel<T>& model, const std::filesystem::path& path);

}  // namespace tlab
