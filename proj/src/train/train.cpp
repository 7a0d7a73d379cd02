#include "tlab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tlab {

double learning_rate(std::size_t step, std::size_t m, std::size_t warmup) {
  if (step == 0) throw ContractError("learning_rate: steps are counted from 1");
  if (m == 0 || warmup == 0) throw ContractError("learning_rate: m and warmup must be positive");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(m), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

std::size_t count_targets(std::span<const TokenId> labels, TokenId pad_id) {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(),
                                                [pad_id](TokenId t) { return t != pad_id; }));
}

template <typename T>
Tensor<T> masked_cross_entropy(const Tensor<T>& logits, std::span<const TokenId> labels,
                               TokenId pad_id) {
  const std::size_t vocab = logits.shape().cols();
  const std::size_t rows = logits.shape().batch() * logits.shape().rows();
  if (logits.shape().rank() < 2 || labels.size() != rows) {
    throw DimensionError("masked_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + logits.shape().str());
  }
  const std::size_t count = count_targets(labels, pad_id);
  if (count == 0) throw InputError("masked_cross_entropy: every label is padding");

  const auto& x = logits.node().value;
  // Softmax of every non-pad row, kept for the backward pass.
  std::vector<T> probs(x.size(), T(0));
  double total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const TokenId label = labels[r];
    if (label == pad_id) continue;
    if (label < 0 || static_cast<std::size_t>(label) >= vocab) {
      throw IndexError("masked_cross_entropy: label " + std::to_string(label) +
                       " outside vocabulary of " + std::to_string(vocab));
    }
    const T* row = x.data() + r * vocab;
    T* p = probs.data() + r * vocab;
    const T top = *std::max_element(row, row + vocab);
    T z = 0;
    for (std::size_t c = 0; c < vocab; ++c) {
      p[c] = std::exp(row[c] - top);
      z += p[c];
    }
    for (std::size_t c = 0; c < vocab; ++c) p[c] /= z;
    total += static_cast<double>(std::log(z) + top - row[label]);
  }
  const T loss = static_cast<T>(total / static_cast<double>(count));
  std::vector<TokenId> kept(labels.begin(), labels.end());
  auto bw = [probs = std::move(probs), kept = std::move(kept), rows, vocab, count,
             pad_id](detail::Node<T>& self) {
    auto& ga = self.inputs[0]->grad_buffer();
    const T g = self.grad[0] / static_cast<T>(count);
    for (std::size_t r = 0; r < rows; ++r) {
      if (kept[r] == pad_id) continue;
      const std::size_t o = r * vocab;
      for (std::size_t c = 0; c < vocab; ++c) ga[o + c] += g * probs[o + c];
      ga[o + static_cast<std::size_t>(kept[r])] -= g;
    }
  };
  return Tensor<T>::make_result(Shape{}, {loss}, {logits}, bw, "masked_cross_entropy");
}

template <typename T>
AdamState<T>::AdamState(std::vector<NamedTensor<T>> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamState<T>::step(double lr) {
  for (auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++steps_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const T step_size = static_cast<T>(lr / c1);
  const T root_c2 = static_cast<T>(std::sqrt(c2));
  const T eps = static_cast<T>(options_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& t = params_[i].tensor;
    auto values = t.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool has = t.has_grad();
    const auto grad = t.grad();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const T g = has ? grad[k] : T(0);
      m[k] = static_cast<T>(b1) * m[k] + static_cast<T>(1.0 - b1) * g;
      v[k] = static_cast<T>(b2) * v[k] + static_cast<T>(1.0 - b2) * g * g;
      // lr * m_hat / (sqrt(v_hat) + eps)
      values[k] -= step_size * m[k] / (std::sqrt(v[k]) / root_c2 + eps);
    }
    t.zero_grad();
  }
}

SequenceBatch source_of(const Batch& batch) {
  return SequenceBatch{batch.enc_input, batch.size, batch.src_len, batch.src_lengths};
}

SequenceBatch decoder_input_of(const Batch& batch) {
  return SequenceBatch{batch.dec_input, batch.size, batch.tgt_len, batch.tgt_lengths};
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

}  // namespace

template <typename T>
EpochResult train_epoch(const Seq2SeqModel<T>& model, std::span<const Batch> batches,
                        AdamState<T>& state, const LrSchedule& schedule, std::mt19937_64& rng) {
  if (batches.empty()) throw InputError("train_epoch: no batches");
  const auto start = Clock::now();
  ForwardOptions<T> options;
  options.training = true;
  options.rng = &rng;
  double weighted = 0;
  EpochResult result;
  for (const Batch& batch : batches) {
    const Tensor<T> logits =
        model_forward(model, source_of(batch), decoder_input_of(batch), options);
    const Tensor<T> loss = masked_cross_entropy(logits, std::span<const TokenId>(batch.labels));
    check_finite(loss, "training loss");
    backward(loss);
    state.step(schedule(state.steps() + 1));
    const std::size_t n = count_targets(batch.labels);
    weighted += static_cast<double>(loss.item()) * static_cast<double>(n);
    result.tokens += n;
  }
  result.train_loss = weighted / static_cast<double>(result.tokens);
  result.seconds = seconds_since(start);
  return result;
}

template <typename T>
double evaluate(const Seq2SeqModel<T>& model, std::span<const Batch> batches) {
  if (batches.empty()) throw InputError("evaluate: no batches");
  NoGradGuard no_grad;
  double weighted = 0;
  std::size_t tokens = 0;
  for (const Batch& batch : batches) {
    const Tensor<T> logits = model_forward(model, source_of(batch), decoder_input_of(batch));
    const Tensor<T> loss = masked_cross_entropy(logits, std::span<const TokenId>(batch.labels));
    check_finite(loss, "validation loss");
    const std::size_t n = count_targets(batch.labels);
    weighted += static_cast<double>(loss.item()) * static_cast<double>(n);
    tokens += n;
  }
  return weighted / static_cast<double>(tokens);
}

std::uint64_t epoch_batch_seed(std::uint64_t seed, std::size_t epoch) {
  // splitmix64 finalizer over the pair
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(epoch) + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

std::uint64_t combine_checksums(std::span<const Batch> batches) {
  std::uint64_t h = 14695981039346656037ull;
  for (const Batch& b : batches) {
    const std::uint64_t c = b.checksum();
    for (int i = 0; i < 8; ++i) {
      h ^= (c >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace

template <typename T>
ExperimentResult<T> run_experiment(const ModelConfig& config, const TrainSettings& settings,
                                   const ExperimentData& data,
                                   const std::filesystem::path& checkpoint,
                                   const EpochCallback& on_epoch) {
  if (settings.budget.max_epochs == 0 || !(settings.budget.max_hours > 0)) {
    throw ConfigError("budget: max_epochs and max_hours must be positive");
  }
  if (data.train.empty()) throw InputError("no training pairs");
  if (data.val.empty()) throw InputError("no validation pairs");

  ExperimentResult<T> result{Seq2SeqModel<T>(config), {}, {}};
  const Seq2SeqModel<T>& model = result.model;
  AdamState<T> adam(model.parameters(), settings.adam);
  const LrSchedule schedule{config.embed_dim, settings.warmup, settings.lr_scale};
  std::mt19937_64 dropout_rng(epoch_batch_seed(settings.seed, 0) ^ 0xd40b0u);
  const std::vector<Batch> val_batches =
      make_batches(data.val, settings.batch_size, config.max_len, settings.seed);

  const auto start = Clock::now();
  for (std::size_t epoch = 1; epoch <= settings.budget.max_epochs; ++epoch) {
    const std::vector<Batch> batches = make_batches(
        data.train, settings.batch_size, config.max_len, epoch_batch_seed(settings.seed, epoch));
    result.batch_checksums.push_back(combine_checksums(batches));
    const EpochResult trained =
        train_epoch(model, std::span<const Batch>(batches), adam, schedule, dropout_rng);
    const auto val_start = Clock::now();
    EpochMetrics row;
    row.trial = settings.trial;
    row.epoch = epoch;
    row.variant = config.variant;
    row.train_loss = trained.train_loss;
    row.val_loss = evaluate(model, std::span<const Batch>(val_batches));
    row.val_seconds = seconds_since(val_start);
    row.epoch_seconds = trained.seconds;
    result.metrics.push_back(row);
    if (on_epoch) on_epoch(row);
    if (seconds_since(start) >= settings.budget.max_hours * 3600.0) break;
  }
  if (!checkpoint.empty()) save_checkpoint(model, checkpoint);
  return result;
}

std::string format_metrics_csv(std::span<const EpochMetrics> rows, bool with_val_seconds) {
  std::string out = kMetricsHeader;
  if (with_val_seconds) out += ",val_seconds";
  out += '\n';
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%s,%.6f,%.6f,%.6f", r.trial, r.epoch,
                  to_string(r.variant).c_str(), r.train_loss, r.val_loss, r.epoch_seconds);
    out += buf;
    if (with_val_seconds) {
      std::snprintf(buf, sizeof(buf), ",%.6f", r.val_seconds);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const EpochMetrics> rows,
                       bool with_val_seconds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write metrics " + path.string());
  os << format_metrics_csv(rows, with_val_seconds);
  if (!os) throw IoError("failed writing metrics " + path.string());
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

std::vector<EpochMetrics> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open metrics " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw ParseError(path.string() + ": empty metrics file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  auto column = [&](const std::string& name, bool required) -> std::ptrdiff_t {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      if (required) throw ParseError(path.string() + ": missing column '" + name + "'");
      return -1;
    }
    return it - header.begin();
  };
  const auto c_trial = column("trial", true);
  const auto c_epoch = column("epoch", true);
  const auto c_variant = column("variant", true);
  const auto c_train = column("train_loss", true);
  const auto c_val = column("val_loss", true);
  const auto c_sec = column("epoch_seconds", true);
  const auto c_vsec = column("val_seconds", false);

  std::vector<EpochMetrics> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    if (f.size() != header.size()) {
      throw ParseError(where + "expected " + std::to_string(header.size()) + " fields, found " +
                       std::to_string(f.size()));
    }
    EpochMetrics r;
    try {
      std::size_t used = 0;
      auto whole = [&](std::ptrdiff_t c) {
        const std::string& s = f[static_cast<std::size_t>(c)];
        const unsigned long long v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return static_cast<std::size_t>(v);
      };
      auto real = [&](std::ptrdiff_t c) {
        const std::string& s = f[static_cast<std::size_t>(c)];
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
      };
      r.trial = whole(c_trial);
      r.epoch = whole(c_epoch);
      r.variant = parse_variant(f[static_cast<std::size_t>(c_variant)]);
      r.train_loss = real(c_train);
      r.val_loss = real(c_val);
      r.epoch_seconds = real(c_sec);
      if (c_vsec >= 0) r.val_seconds = real(c_vsec);
    } catch (const ConfigError& e) {
      throw ParseError(where + e.what());
    } catch (const std::exception&) {
      throw ParseError(where + "malformed number");
    }
    rows.push_back(r);
  }
  return rows;
}

#define TLAB_INSTANTIATE_TRAIN(T)                                                               \
  template Tensor<T> masked_cross_entropy(const Tensor<T>&, std::span<const TokenId>, TokenId); \
  template class AdamState<T>;                                                                  \
  template EpochResult train_epoch(const Seq2SeqModel<T>&, std::span<const Batch>,              \
                                   AdamState<T>&, const LrSchedule&, std::mt19937_64&);         \
  template double evaluate(const Seq2SeqModel<T>&, std::span<const Batch>);                     \
  template ExperimentResult<T> run_experiment(const ModelConfig&, const TrainSettings&,         \
                                              const ExperimentData&,                            \
                                              const std::filesystem::path&,                     \
                                              const EpochCallback&);

TLAB_INSTANTIATE_TRAIN(float)
TLAB_INSTANTIATE_TRAIN(double)

#undef TLAB_INSTANTIATE_TRAIN

}  // namespace tlab
