// Acceptance checks, one PASS/FAIL line per criterion. Pass criterion
// numbers as arguments to run a subset; exit status is nonzero on any FAIL.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradient_cases.hpp"
#include "helpers.hpp"
#include "tlab/cli.hpp"

using namespace tlab;
using tlab::test::bitwise_equal;

namespace {

using D = Tensor<double>;

// Tolerances and settings.
constexpr std::size_t kAnchorSrcVocab = 7765;
constexpr std::size_t kAnchorTgtVocab = 7010;
constexpr double kBaselineAnchor = 10184162;
constexpr double kProposedAnchor = 2809634;
constexpr double kAnchorTolerance = 0.02;
constexpr double kRatioLo = 3.4;
constexpr double kRatioHi = 3.9;

constexpr double kGradTolerance = 1e-4;

constexpr int kNormMatrices = 100;
constexpr double kMeanTolerance = 1e-6;
constexpr double kVarTolerance = 1e-5;

constexpr int kCausalConfigs = 20;
constexpr double kCausalTolerance = 1e-7;

constexpr int kLrDigits = 6;

constexpr std::size_t kDeskPairs = 2000;
constexpr std::size_t kDeskVal = 200;
constexpr std::size_t kDeskVocab = 2000;
constexpr std::size_t kDeskMaxLen = 64;
constexpr std::size_t kDeskEpochs = 10;
constexpr std::size_t kDeskWarmup = 1000;
constexpr std::size_t kDeskMinDecreasing = 8;
constexpr double kDeskLossFactor = 0.7;
constexpr double kDeskTimeRatio = 0.8;

constexpr std::size_t kMemoPairs = 32;
constexpr std::size_t kMemoEpochs = 200;
constexpr std::size_t kMemoBatch = 8;
constexpr std::size_t kMemoWarmup = 800;
constexpr double kMemoLoss = 0.1;
constexpr int kMemoExact = 30;

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

Outcome parameter_anchor() {
  const auto base = count_parameters(ModelConfig::baseline_defaults(), kAnchorSrcVocab, kAnchorTgtVocab);
  const auto prop = count_parameters(ModelConfig::proposed_defaults(), kAnchorSrcVocab, kAnchorTgtVocab);
  const double b = static_cast<double>(base.total);
  const double p = static_cast<double>(prop.total);
  const double ratio = b / p;
  const bool ok = std::abs(b - kBaselineAnchor) <= kAnchorTolerance * kBaselineAnchor &&
                  std::abs(p - kProposedAnchor) <= kAnchorTolerance * kProposedAnchor &&
                  ratio >= kRatioLo && ratio <= kRatioHi;
  return {ok, fmt("baseline %zu (anchor 10184162), proposed %zu (anchor 2809634), ratio %.4f",
                  base.total, prop.total, ratio)};
}

Outcome gradient_suite() {
  double worst = 0;
  std::string worst_name;
  std::uint64_t seed = 1;
  std::size_t cases = 0;
  for (const auto& c : tlab::test::primitive_op_cases()) {
    const double e = tlab::test::worst_gradient_error(c, seed++);
    ++cases;
    if (e > worst) {
      worst = e;
      worst_name = c.name;
    }
  }
  for (Variant v : {Variant::baseline, Variant::proposed}) {
    const double e = tlab::test::micro_model_gradient_error(v);
    ++cases;
    if (e > worst) {
      worst = e;
      worst_name = "micro model " + to_string(v);
    }
  }
  return {worst < kGradTolerance,
          fmt("%zu cases, worst relative error %.3g (%s), limit %.0e", cases, worst,
              worst_name.c_str(), kGradTolerance)};
}

// Worst |mean| and |var - 1| over the columns (or rows) of z.
void moments(const D& z, bool by_column, double& worst_mean, double& worst_var) {
  const std::size_t n = z.shape().rows(), m = z.shape().cols();
  const std::size_t lines = by_column ? m : n, len = by_column ? n : m;
  for (std::size_t a = 0; a < lines; ++a) {
    double mean = 0, var = 0;
    for (std::size_t b = 0; b < len; ++b) mean += by_column ? z.at(b, a) : z.at(a, b);
    mean /= static_cast<double>(len);
    for (std::size_t b = 0; b < len; ++b) {
      const double d = (by_column ? z.at(b, a) : z.at(a, b)) - mean;
      var += d * d;
    }
    var /= static_cast<double>(len);
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_var = std::max(worst_var, std::abs(var - 1));
  }
}

Outcome norm_invariants() {
  std::mt19937_64 rng(2024);
  double tn_mean = 0, tn_var = 0, ln_mean = 0, ln_var = 0;
  for (int t = 0; t < kNormMatrices; ++t) {
    const std::size_t n = 2 + rng() % 31;
    const std::size_t m = 2 + rng() % 31;
    moments(token_normalize(tlab::test::spread_columns(n, m, rng)), true, tn_mean, tn_var);
    // Row-spread matrix for layer norm: transpose of a column-spread one.
    const D cols = tlab::test::spread_columns(m, n, rng);
    std::vector<double> rows(n * m);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) rows[j * m + i] = cols.at(i, j);
    }
    moments(layer_norm(D(Shape{n, m}, rows), LayerNormParams<double>::init(m)), false, ln_mean, ln_var);
  }
  const bool ok = tn_mean < kMeanTolerance && tn_var < kVarTolerance && ln_mean < kMeanTolerance &&
                  ln_var < kVarTolerance;
  return {ok, fmt("%d matrices; token norm |mean| %.2g |var-1| %.2g; layer norm |mean| %.2g |var-1| %.2g",
                  kNormMatrices, tn_mean, tn_var, ln_mean, ln_var)};
}

Outcome causality() {
  std::mt19937_64 rng(77);
  double worst = 0;
  std::size_t probes = 0, moved = 0;
  for (int t = 0; t < kCausalConfigs; ++t) {
    for (Variant v : {Variant::baseline, Variant::proposed}) {
      ModelConfig c = ModelConfig::defaults_for(v);
      c.blocks = 1 + rng() % 3;
      c.embed_dim = 2 * (2 + rng() % 5);  // m = 2 pins layer-norm rows to +-1
      c.ffn_hidden = 4 + rng() % 12;
      c.heads = 1 + rng() % 3;
      c.head_dim = 2 + rng() % 5;
      c.dropout = 0;
      c.max_len = 16;
      c.src_vocab = 6 + rng() % 20;
      c.tgt_vocab = 6 + rng() % 20;
      c.use_bias = rng() % 2 == 0;
      c.attn_scale = rng() % 2 == 0 ? AttnScaleMode::embed_dim : AttnScaleMode::head_dim;
      c.seed = rng();
      const Seq2SeqModel<double> model(c);
      std::vector<TokenId> src(1 + rng() % 8), tgt(2 + rng() % 8);
      for (auto& id : src) id = static_cast<TokenId>(4 + rng() % (c.src_vocab - 4));
      for (auto& id : tgt) id = static_cast<TokenId>(4 + rng() % (c.tgt_vocab - 4));
      const auto encoded = encoder_forward(model, SequenceBatch::single(src));
      const D before = decoder_forward(model, SequenceBatch::single(tgt), encoded);
      const std::size_t width = before.shape().cols();
      for (std::size_t j = 1; j < tgt.size(); ++j) {
        auto changed = tgt;
        changed[j] = static_cast<TokenId>(4 + (changed[j] - 4 + 1) % (c.tgt_vocab - 4));
        const D after = decoder_forward(model, SequenceBatch::single(changed), encoded);
        for (std::size_t k = 0; k < j * width; ++k) {
          worst = std::max(worst, std::abs(before.values()[k] - after.values()[k]));
        }
        double own = 0;
        for (std::size_t k = j * width; k < (j + 1) * width; ++k) {
          own = std::max(own, std::abs(before.values()[k] - after.values()[k]));
        }
        moved += own > kCausalTolerance;
        ++probes;
      }
    }
  }
  // Each perturbation must also move its own row, or the probe proves nothing.
  return {worst < kCausalTolerance && moved == probes,
          fmt("%d configs x 2 variants, %zu perturbations (%zu moved their own row), worst change "
              "in earlier rows %.3g",
              kCausalConfigs, probes, moved, worst)};
}

Outcome value_reuse() {
  std::mt19937_64 rng(5);
  std::size_t layers = 0;
  bool ok = true;
  for (std::size_t blocks : {1u, 2u, 3u}) {
    ModelConfig c = ModelConfig::proposed_defaults();
    c.blocks = blocks;
    c.embed_dim = 8;
    c.ffn_hidden = 12;
    c.heads = 2;
    c.head_dim = 4;
    c.dropout = 0;
    c.max_len = 16;
    c.src_vocab = 13;
    c.tgt_vocab = 11;
    const Seq2SeqModel<double> model(c);
    std::vector<TokenId> src(5), tgt(4);
    for (auto& id : src) id = static_cast<TokenId>(4 + rng() % 9);
    for (auto& id : tgt) id = static_cast<TokenId>(4 + rng() % 7);
    ForwardTrace<double> trace;
    ForwardOptions<double> opts;
    opts.trace = &trace;
    model_forward(model, SequenceBatch::single(src), SequenceBatch::single(tgt), opts);
    const D x_bar = token_normalize(token_embed(model.src_embedding, std::span<const TokenId>(src), 1));
    const D y_bar =
        token_normalize_prefix(token_embed(model.tgt_embedding, std::span<const TokenId>(tgt), 1));
    ok = ok && trace.encoder_self.size() == blocks && trace.decoder_masked.size() == blocks &&
         trace.decoder_cross.size() == blocks;
    for (std::size_t u = 0; ok && u < blocks; ++u) {
      ok = ok && bitwise_equal(trace.encoder_self[u].value_input, x_bar) &&
           bitwise_equal(trace.decoder_cross[u].value_input, x_bar) &&
           bitwise_equal(trace.decoder_masked[u].value_input, y_bar);
      layers += 3;
    }
  }
  return {ok, fmt("%zu attention layers over N = 1, 2, 3 checked bitwise", layers)};
}

bool same_significant(double a, double b, int digits) {
  return std::abs(a - b) <= 0.5 * std::pow(10.0, std::floor(std::log10(std::abs(b))) - (digits - 1));
}

Outcome schedule_anchor() {
  struct Fixture {
    std::size_t step, dim, warmup;
    double expected;
  };
  const Fixture fixtures[] = {{4000, 64, 4000, 0.00197642},
                              {1, 64, 4000, 4.94106e-7},
                              {8000, 128, 4000, 9.88212e-4}};
  bool ok = true;
  std::ostringstream detail;
  for (const auto& f : fixtures) {
    const double lr = learning_rate(f.step, f.dim, f.warmup);
    ok = ok && same_significant(lr, f.expected, kLrDigits);
    detail << fmt("lr(%zu) = %.6g; ", f.step, lr);
  }
  std::size_t peak = 1;
  bool unimodal = true;
  for (std::size_t s = 2; s <= 20000; ++s) {
    const double prev = learning_rate(s - 1, 64, 4000), cur = learning_rate(s, 64, 4000);
    if (cur > prev) {
      unimodal = unimodal && peak == s - 1;
      peak = s;
    }
  }
  ok = ok && unimodal && peak == 4000;
  detail << "peak at step " << peak << (unimodal ? ", unimodal" : ", not unimodal");
  return {ok, detail.str()};
}

Outcome desk_scale() {
  const auto pairs = synthetic_parallel_corpus(kDeskPairs + kDeskVal, 1);
  const std::vector<SentencePair> train(pairs.begin(), pairs.begin() + kDeskPairs);
  const std::vector<SentencePair> val(pairs.begin() + kDeskPairs, pairs.end());
  const PreparedData data = prepare_data(train, val, kDeskVocab);
  const double limit = kDeskLossFactor * std::log(static_cast<double>(data.tgt_vocab.size()));

  bool ok = true;
  std::ostringstream detail;
  double seconds[2] = {0, 0};
  for (Variant v : {Variant::baseline, Variant::proposed}) {
    ModelConfig c = ModelConfig::defaults_for(v);
    c.src_vocab = data.src_vocab.size();
    c.tgt_vocab = data.tgt_vocab.size();
    c.max_len = kDeskMaxLen;
    c.seed = 1;
    TrainSettings s;
    s.warmup = kDeskWarmup;
    s.seed = 1;
    s.budget.max_epochs = kDeskEpochs;
    const auto result = run_experiment<float>(c, s, data.data, {}, [&](const EpochMetrics& m) {
      std::printf("  %s epoch %zu train %.4f val %.4f %.1fs\n", to_string(v).c_str(), m.epoch,
                  m.train_loss, m.val_loss, m.epoch_seconds);
      std::fflush(stdout);
    });
    std::size_t decreasing = 0;
    double total = 0;
    for (std::size_t e = 0; e < result.metrics.size(); ++e) {
      total += result.metrics[e].epoch_seconds;
      if (e > 0 && result.metrics[e].train_loss < result.metrics[e - 1].train_loss) ++decreasing;
    }
    const double final_loss = result.metrics.back().train_loss;
    seconds[v == Variant::proposed] = total / static_cast<double>(result.metrics.size());
    ok = ok && result.metrics.size() == kDeskEpochs && decreasing >= kDeskMinDecreasing &&
         final_loss <= limit;
    detail << fmt("%s final %.4f (limit %.4f), %zu/%zu epochs decreasing; ", to_string(v).c_str(),
                  final_loss, limit, decreasing, kDeskEpochs - 1);
  }
  const double ratio = seconds[1] / seconds[0];
  ok = ok && ratio < kDeskTimeRatio;
  detail << fmt("epoch time %.2fs vs %.2fs, ratio %.3f (limit %.1f)", seconds[1], seconds[0], ratio,
                kDeskTimeRatio);
  return {ok, detail.str()};
}

Outcome memorization() {
  const auto pairs = synthetic_parallel_corpus(kMemoPairs, 3);
  const PreparedData data = prepare_data(pairs, pairs, kDeskVocab);
  ModelConfig c = ModelConfig::proposed_defaults();
  c.src_vocab = data.src_vocab.size();
  c.tgt_vocab = data.tgt_vocab.size();
  c.dropout = 0;
  c.seed = 1;
  TrainSettings s;
  s.batch_size = kMemoBatch;
  s.warmup = kMemoWarmup;
  s.seed = 1;
  s.budget.max_epochs = kMemoEpochs;
  const auto result = run_experiment<float>(c, s, data.data);
  const double final_loss = result.metrics.back().train_loss;
  int exact = 0;
  for (const auto& p : data.data.train) {
    const auto out = greedy_decode(result.model, std::span<const TokenId>(p.src_ids), c.max_len);
    exact += std::equal(out.begin(), out.end(), p.tgt_ids.begin() + 1, p.tgt_ids.end() - 1) &&
             out.size() + 2 == p.tgt_ids.size();
  }
  return {final_loss < kMemoLoss && exact >= kMemoExact,
          fmt("%zu epochs, final train loss %.6f (limit %.1f), exact decodes %d/%zu (need %d)",
              result.metrics.size(), final_loss, kMemoLoss, exact, kMemoPairs, kMemoExact)};
}

// CSV text with the epoch_seconds column removed.
std::string strip_seconds(const std::filesystem::path& path) {
  std::ifstream is(path);
  std::ostringstream os;
  for (std::string line; std::getline(is, line);) {
    std::vector<std::string> fields;
    std::stringstream ls(line);
    for (std::string f; std::getline(ls, f, ',');) fields.push_back(f);
    if (fields.size() > 5) fields.erase(fields.begin() + 5);
    for (std::size_t i = 0; i < fields.size(); ++i) os << (i ? "," : "") << fields[i];
    os << '\n';
  }
  return os.str();
}

Outcome determinism() {
  const auto dir = tlab::test::scratch_dir("acceptance-determinism");
  save_parallel_corpus(dir / "corpus.tsv", synthetic_parallel_corpus(240, 4));
  std::string texts[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = dir / ("run" + std::to_string(run));
    const std::vector<std::string> args{
        "--seed", "7", "--out-dir", out.string(), "train", "--variant", "proposed",
        "--max-epochs", "3", "--train", (dir / "corpus.tsv").string(), "--set", "blocks=1",
        "--set", "embed_dim=32", "--set", "ffn_hidden=64", "--set", "head_dim=16",
        "--set", "batch_size=32", "--set", "warmup=50", "--set", "vocab_size=500"};
    std::ostringstream sink;
    if (run_cli(args, sink, sink) != kExitOk) return {false, "train failed: " + sink.str()};
    texts[run] = strip_seconds(out / "metrics.csv");
  }
  const std::size_t rows = static_cast<std::size_t>(std::count(texts[0].begin(), texts[0].end(), '\n'));
  return {texts[0] == texts[1] && rows == 4,
          fmt("two seeded train runs, %zu CSV lines, identical without epoch_seconds: %s", rows,
              texts[0] == texts[1] ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"parameter-count anchor", parameter_anchor},
      {"gradient suite", gradient_suite},
      {"normalization invariants", norm_invariants},
      {"decoder causality", causality},
      {"value reuse wiring", value_reuse},
      {"schedule anchor", schedule_anchor},
      {"desk-scale learning", desk_scale},
      {"memorization", memorization},
      {"determinism", determinism},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s criterion %zu (%s): %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1,
                criteria[i].first.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
