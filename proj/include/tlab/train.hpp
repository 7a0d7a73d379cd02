#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tlab/corpus.hpp"
#include "tlab/model.hpp"

namespace tlab {

// m^-0.5 * min(step^-0.5, step * warmup^-1.5). Step 0 is a ContractError.
double learning_rate(std::size_t step, std::size_t m, std::size_t warmup);

struct LrSchedule {
  std::size_t m = 64;
  std::size_t warmup = 4000;
  double scale = 1.0;  // multiplies the formula; 1 leaves it untouched

  double operator()(std::size_t step) const { return scale * learning_rate(step, m, warmup); }
};

// Mean over non-pad positions of -log softmax(logits)[label]. Logits are
// [n x V] or [batch x n x V] with labels in the same row order. Pad rows
// receive exactly zero gradient. InputError when every label is pad.
template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, std::span<const TokenId> labels,
                               TokenId pad_id = Vocab::kPad);

std::size_t count_targets(std::span<const TokenId> labels, TokenId pad_id = Vocab::kPad);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

template <typename T>
class AdamState {
 public:
  AdamState(std::vector<NamedTensor<T>> params, AdamOptions options = {});

  // One bias-corrected update of every parameter from its accumulated grad,
  // then clears the grads. NumericalError names the first non-finite grad.
  void step(double lr);

  std::size_t steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<NamedTensor<T>>& params() const { return params_; }
  std::span<const T> first_moment(std::size_t i) const { return m_[i]; }
  std::span<const T> second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<NamedTensor<T>> params_;
  AdamOptions options_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::size_t steps_ = 0;
};

template <typename T>
void adam_step(AdamState<T>& state, double lr) {
  state.step(lr);
}

struct EpochMetrics {
  std::size_t trial = 0;
  std::size_t epoch = 0;  // 1-based
  Variant variant = Variant::proposed;
  double train_loss = 0;
  double val_loss = 0;
  double epoch_seconds = 0;  // training passes only
  double val_seconds = 0;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct EpochResult {
  double train_loss = 0;  // token-weighted mean masked CE
  double seconds = 0;
  std::size_t tokens = 0;
};

SequenceBatch source_of(const Batch& batch);
SequenceBatch decoder_input_of(const Batch& batch);

// Forward, masked CE, backward and one Adam step per batch, dropout on.
template <typename T>
EpochResult train_epoch(const Seq2SeqModel<T>& model, std::span<const Batch> batches,
                        AdamState<T>& state, const LrSchedule& schedule, std::mt19937_64& rng);

// Token-weighted mean masked CE without dropout or graph recording.
template <typename T>
double evaluate(const Seq2SeqModel<T>& model, std::span<const Batch> batches);

struct Budget {
  std::size_t max_epochs = 10;
  double max_hours = 12.0;  // checked after each completed epoch
};

struct TrainSettings {
  std::size_t batch_size = 64;
  std::size_t warmup = 4000;
  double lr_scale = 1.0;
  AdamOptions adam;
  std::uint64_t seed = 0;  // batch order and dropout stream
  std::size_t trial = 0;
  Budget budget;
};

struct ExperimentData {
  std::vector<TokenizedPair> train;
  std::vector<TokenizedPair> val;
};

// Seed of the epoch's batch order, shared by every variant of a trial.
std::uint64_t epoch_batch_seed(std::uint64_t seed, std::size_t epoch);

template <typename T>
struct ExperimentResult {
  Seq2SeqModel<T> model;
  std::vector<EpochMetrics> metrics;
  std::vector<std::uint64_t> batch_checksums;  // one per epoch over all its batches
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Trains until budget.max_epochs epochs are done or the wall clock passes
// budget.max_hours at an epoch boundary. Writes the final checkpoint when a
// path is given.
template <typename T>
ExperimentResult<T> run_experiment(const ModelConfig& config, const TrainSettings& settings,
                                   const ExperimentData& data,
                                   const std::filesystem::path& checkpoint = {},
                                   const EpochCallback& on_epoch = {});

inline constexpr const char* kMetricsHeader = "trial,epoch,variant,train_loss,val_loss,epoch_seconds";

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> rows,
                       bool with_val_seconds = false);
std::string format_metrics_csv(std::span<const EpochMetrics> rows, bool with_val_seconds = false);

// ParseError names the missing column or the 1-based line of a bad row.
std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path);

}  // namespace tlab
