#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "tlab/cli.hpp"

namespace tlab {

void split_holdout(const std::vector<SentencePair>& pairs, double fraction, std::uint64_t seed,
                   std::vector<SentencePair>& train, std::vector<SentencePair>& val) {
  if (pairs.size() < 2) throw InputError("need at least two sentence pairs to hold out validation");
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);
  }
  auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pairs.size())));
  held = std::clamp<std::size_t>(held, 1, pairs.size() - 1);
  // Keep the original order inside each split.
  std::vector<bool> is_val(pairs.size(), false);
  for (std::size_t i = 0; i < held; ++i) is_val[order[i]] = true;
  train.clear();
  val.clear();
  for (std::size_t i = 0; i < pairs.size(); ++i) (is_val[i] ? val : train).push_back(pairs[i]);
}

PreparedData prepare_data(const std::vector<SentencePair>& train,
                          const std::vector<SentencePair>& val, std::size_t vocab_size) {
  std::vector<std::string> src, tgt;
  for (const auto& p : train) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  PreparedData out{build_wordpiece_vocab(src, vocab_size), build_wordpiece_vocab(tgt, vocab_size),
                   {}};
  out.data.train = tokenize_pairs(train, out.src_vocab, out.tgt_vocab);
  out.data.val = tokenize_pairs(val, out.src_vocab, out.tgt_vocab);
  return out;
}

namespace {

namespace fs = std::filesystem;

struct GlobalOptions {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir = "tlab-out";
  std::string precision = "f32";
};

struct DataArgs {
  std::string train;
  std::string val;
  std::size_t synthetic = 0;
  std::string src_vocab;
  std::string tgt_vocab;
};

struct BudgetArgs {
  std::size_t max_epochs = 10;
  double max_hours = 12.0;
  bool val_seconds = false;
};

void add_data_options(CLI::App* cmd, DataArgs& d) {
  cmd->add_option("--train", d.train, "training corpus, one 'source<TAB>target' pair per line");
  cmd->add_option("--val", d.val, "validation corpus (default: hold out val_fraction of --train)");
  cmd->add_option("--synthetic", d.synthetic,
                  "generate this many synthetic sentence pairs instead of reading --train");
  cmd->add_option("--src-vocab", d.src_vocab, "source vocabulary file (default: learned)");
  cmd->add_option("--tgt-vocab", d.tgt_vocab, "target vocabulary file (default: learned)");
}

void add_budget_options(CLI::App* cmd, BudgetArgs& b) {
  cmd->add_option("--max-epochs", b.max_epochs, "stop after this many epochs")->capture_default_str();
  cmd->add_option("--max-hours", b.max_hours, "stop at the first epoch boundary past this wall time")
      ->capture_default_str();
  cmd->add_flag("--val-seconds", b.val_seconds, "add a val_seconds column to metrics");
}

std::string config_help() {
  std::ostringstream os;
  os << "Config file keys (key = value, '#' comments):\n";
  for (const auto& f : config_fields()) {
    os << "  " << std::left << std::setw(13) << f.key << ' ' << f.help << " [" << f.default_value
       << "]\n";
  }
  return os.str();
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// File contents, then the variant override, then --set lines; later keys win.
RunConfig resolve_config(const std::string& path, const std::string& variant,
                         const std::vector<std::string>& sets) {
  std::string text = path.empty() ? std::string() : read_text(path);
  text += '\n';
  if (!variant.empty()) text += "variant = " + variant + '\n';
  for (const auto& s : sets) text += s + '\n';
  return parse_config(text, path.empty() ? "config" : path);
}

struct Corpus {
  std::vector<SentencePair> train;
  std::vector<SentencePair> val;
};

Corpus load_corpus(const DataArgs& d, const RunConfig& config, std::uint64_t seed) {
  std::vector<SentencePair> all;
  if (!d.train.empty()) {
    all = load_parallel_corpus(d.train);
  } else if (d.synthetic > 0) {
    all = synthetic_parallel_corpus(d.synthetic, seed);
  } else {
    throw ConfigError("train: a corpus path (--train) or --synthetic count is required");
  }
  if (all.empty()) throw InputError("training corpus " + d.train + " has no sentence pairs");
  Corpus c;
  if (!d.val.empty()) {
    c.train = std::move(all);
    c.val = load_parallel_corpus(d.val);
    if (c.val.empty()) throw InputError("validation corpus " + d.val + " has no sentence pairs");
  } else {
    split_holdout(all, config.val_fraction, seed, c.train, c.val);
  }
  return c;
}

PreparedData load_data(const DataArgs& d, const RunConfig& config, std::uint64_t seed) {
  const Corpus corpus = load_corpus(d, config, seed);
  if (d.src_vocab.empty() != d.tgt_vocab.empty()) {
    throw ConfigError("vocab: give both --src-vocab and --tgt-vocab or neither");
  }
  if (d.src_vocab.empty()) return prepare_data(corpus.train, corpus.val, config.vocab_size);
  PreparedData out{Vocab::load(d.src_vocab), Vocab::load(d.tgt_vocab), {}};
  out.data.train = tokenize_pairs(corpus.train, out.src_vocab, out.tgt_vocab);
  out.data.val = tokenize_pairs(corpus.val, out.src_vocab, out.tgt_vocab);
  return out;
}

void fit_vocab_sizes(ModelConfig& model, const PreparedData& data) {
  auto fit = [](std::size_t& field, std::size_t actual, const char* name) {
    if (field == 0) {
      field = actual;
    } else if (field != actual) {
      throw ConfigError(std::string(name) + ": config says " + std::to_string(field) +
                        " but the vocabulary has " + std::to_string(actual) + " tokens");
    }
  };
  fit(model.src_vocab, data.src_vocab.size(), "src_vocab");
  fit(model.tgt_vocab, data.tgt_vocab.size(), "tgt_vocab");
}

TrainSettings settings_for(const RunConfig& config, const BudgetArgs& budget, std::uint64_t seed,
                           std::size_t trial) {
  TrainSettings s;
  s.batch_size = config.batch_size;
  s.warmup = config.warmup;
  s.lr_scale = config.lr_scale;
  s.seed = seed;
  s.trial = trial;
  s.budget.max_epochs = budget.max_epochs;
  s.budget.max_hours = budget.max_hours;
  return s;
}

void write_checksums(const fs::path& path, std::span<const std::uint64_t> sums) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  char buf[32];
  for (auto s : sums) {
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(s));
    os << buf << '\n';
  }
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

// One training run into `dir`: config snapshot, metrics, checkpoint and the
// per-epoch batch checksums.
template <typename T>
void train_into(const fs::path& dir, const RunConfig& config, const TrainSettings& settings,
                const ExperimentData& data, const BudgetArgs& budget, std::ostream& out) {
  fs::create_directories(dir);
  save_config(config, dir / "config.txt");
  const std::string label = to_string(config.model.variant);
  auto result = run_experiment<T>(
      config.model, settings, data, dir / "model.ckpt", [&](const EpochMetrics& m) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "[%s trial %zu] epoch %zu  train %.4f  val %.4f  %.1fs\n",
                      label.c_str(), m.trial, m.epoch, m.train_loss, m.val_loss, m.epoch_seconds);
        out << buf << std::flush;
      });
  write_metrics_csv(dir / "metrics.csv", result.metrics, budget.val_seconds);
  write_checksums(dir / "batch_checksums.txt", result.batch_checksums);
}

int cmd_build_vocab(const std::string& corpus, std::size_t size, const std::string& out_path,
                    const std::string& side, std::ostream& out) {
  std::vector<std::string> lines;
  if (side == "lines") {
    std::ifstream is(corpus);
    if (!is) throw IoError("cannot open corpus " + corpus);
    for (std::string line; std::getline(is, line);) lines.push_back(line);
  } else {
    for (auto& p : load_parallel_corpus(corpus)) {
      lines.push_back(side == "source" ? std::move(p.source) : std::move(p.target));
    }
  }
  const Vocab vocab = build_wordpiece_vocab(lines, size);
  vocab.save(out_path);
  out << "vocabulary of " << vocab.size() << " tokens written to " << out_path << '\n';
  return kExitOk;
}

template <typename T>
int cmd_train(const GlobalOptions& g, const RunConfig& base, const DataArgs& d,
              const BudgetArgs& budget, std::size_t trial, std::ostream& out) {
  RunConfig config = base;
  if (g.seed_given) config.model.seed = g.seed;
  const std::uint64_t seed = config.model.seed;
  const PreparedData data = load_data(d, config, seed);
  fit_vocab_sizes(config.model, data);
  config.model.validate();
  const fs::path dir = g.out_dir;
  fs::create_directories(dir);
  data.src_vocab.save(dir / "src_vocab.txt");
  data.tgt_vocab.save(dir / "tgt_vocab.txt");
  out << to_string(config.model.variant) << ": " << data.data.train.size() << " training pairs, "
      << data.data.val.size() << " validation pairs, vocabularies " << data.src_vocab.size()
      << '/' << data.tgt_vocab.size() << ", "
      << count_parameters(config.model, config.model.src_vocab, config.model.tgt_vocab).total
      << " parameters\n";
  train_into<T>(dir, config, settings_for(config, budget, seed, trial), data.data, budget, out);
  out << "metrics written to " << (dir / "metrics.csv").string() << '\n';
  return kExitOk;
}

struct Job {
  std::size_t trial;
  const RunConfig* config;
  fs::path dir;
};

std::string summary_table(std::span<const EpochMetrics> rows) {
  struct Acc {
    double final_train = 0, final_val = 0, seconds = 0, epochs = 0;
    std::size_t trials = 0, rows = 0;
  };
  std::map<int, std::map<std::size_t, std::vector<const EpochMetrics*>>> by_variant;
  for (const auto& r : rows) by_variant[static_cast<int>(r.variant)][r.trial].push_back(&r);
  std::ostringstream os;
  os << std::left << std::setw(10) << "Variant" << std::right << std::setw(6) << "Ep."
     << std::setw(14) << "Train. loss" << std::setw(12) << "Val. loss" << std::setw(14)
     << "Comp. Time" << '\n';
  std::map<int, double> times;
  for (const auto& [variant, trials] : by_variant) {
    Acc a;
    for (const auto& [trial, list] : trials) {
      const EpochMetrics* last = *std::max_element(
          list.begin(), list.end(), [](auto* x, auto* y) { return x->epoch < y->epoch; });
      a.final_train += last->train_loss;
      a.final_val += last->val_loss;
      a.epochs += static_cast<double>(list.size());
      for (const auto* r : list) a.seconds += r->epoch_seconds;
      a.rows += list.size();
      ++a.trials;
    }
    const double n = static_cast<double>(a.trials);
    times[variant] = a.seconds / static_cast<double>(a.rows);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-10s%6.1f%14.4f%12.4f%14.2f\n",
                  to_string(static_cast<Variant>(variant)).c_str(), a.epochs / n,
                  a.final_train / n, a.final_val / n, times[variant]);
    os << buf;
  }
  const auto b = times.find(static_cast<int>(Variant::baseline));
  const auto p = times.find(static_cast<int>(Variant::proposed));
  if (b != times.end() && p != times.end() && b->second > 0) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "epoch time ratio proposed/baseline: %.3f\n",
                  p->second / b->second);
    os << buf;
  }
  return os.str();
}

template <typename T>
int cmd_compare(const GlobalOptions& g, const RunConfig& a, const RunConfig& b,
                const DataArgs& d, const BudgetArgs& budget, std::size_t trials, bool parallel,
                std::ostream& out, std::ostream& err) {
  if (a.model.variant == b.model.variant) {
    throw ConfigError("variant: compare needs one baseline and one proposed config");
  }
  if (a.batch_size != b.batch_size || a.model.max_len != b.model.max_len ||
      a.vocab_size != b.vocab_size || a.val_fraction != b.val_fraction) {
    throw ConfigError(
        "batch_size, max_len, vocab_size and val_fraction must agree so both variants see "
        "identical batches");
  }
  if (trials == 0) throw ConfigError("trials: must be at least 1");
  const std::uint64_t seed = g.seed_given ? g.seed : a.model.seed;
  const PreparedData data = load_data(d, a, seed);
  const fs::path root = g.out_dir;
  fs::create_directories(root);
  data.src_vocab.save(root / "src_vocab.txt");
  data.tgt_vocab.save(root / "tgt_vocab.txt");

  std::vector<RunConfig> configs;
  std::vector<Job> jobs;
  configs.reserve(2 * trials);
  for (std::size_t t = 1; t <= trials; ++t) {
    for (const RunConfig* c : {&a, &b}) {
      RunConfig rc = *c;
      rc.model.seed = seed + (t - 1);
      fit_vocab_sizes(rc.model, data);
      rc.model.validate();
      configs.push_back(rc);
      jobs.push_back({t, &configs.back(),
                      root / ("trial-" + std::to_string(t)) / to_string(rc.model.variant)});
    }
  }
  auto run_job = [&](const Job& job) {
    train_into<T>(job.dir, *job.config,
                  settings_for(*job.config, budget, job.config->model.seed, job.trial),
                  data.data, budget, out);
  };
  if (parallel) {
    std::vector<pid_t> children;
    out.flush();
    for (const Job& job : jobs) {
      const pid_t pid = fork();
      if (pid < 0) throw Error("fork failed");
      if (pid == 0) {
        int code = kExitOk;
        try {
          run_job(job);
        } catch (const std::exception& e) {
          err << "trial " << job.trial << ": " << e.what() << '\n';
          code = kExitFailure;
        }
        out.flush();
        err.flush();
        _exit(code);
      }
      children.push_back(pid);
    }
    bool failed = false;
    for (pid_t pid : children) {
      int status = 0;
      waitpid(pid, &status, 0);
      failed = failed || !WIFEXITED(status) || WEXITSTATUS(status) != 0;
    }
    if (failed) throw Error("a parallel trial failed");
  } else {
    for (const Job& job : jobs) run_job(job);
  }

  std::vector<EpochMetrics> combined;
  std::ostringstream checks;
  for (std::size_t t = 1; t <= trials; ++t) {
    const Job& ja = jobs[2 * (t - 1)];
    const Job& jb = jobs[2 * (t - 1) + 1];
    for (const Job* j : {&ja, &jb}) {
      auto rows = read_metrics_csv(j->dir / "metrics.csv");
      combined.insert(combined.end(), rows.begin(), rows.end());
    }
    const auto sa = read_lines(ja.dir / "batch_checksums.txt");
    const auto sb = read_lines(jb.dir / "batch_checksums.txt");
    const std::size_t shared = std::min(sa.size(), sb.size());
    if (!std::equal(sa.begin(), sa.begin() + static_cast<std::ptrdiff_t>(shared), sb.begin())) {
      throw Error("trial " + std::to_string(t) + ": variants saw different batches");
    }
    checks << "trial " << t << " batch checksums identical across variants over " << shared
           << " epochs (epoch 1: " << (sa.empty() ? "-" : sa.front()) << ")\n";
  }
  write_metrics_csv(root / "combined.csv", combined, budget.val_seconds);
  const std::string summary = summary_table(combined) + checks.str();
  std::ofstream(root / "summary.txt") << summary;
  out << summary;
  return kExitOk;
}

int cmd_count_params(const RunConfig& config, std::size_t src_vocab, std::size_t tgt_vocab,
                     bool json, std::ostream& out) {
  if (src_vocab == 0) src_vocab = config.model.src_vocab;
  if (tgt_vocab == 0) tgt_vocab = config.model.tgt_vocab;
  if (src_vocab == 0) throw ConfigError("src_vocab: required (--src-vocab or config)");
  if (tgt_vocab == 0) throw ConfigError("tgt_vocab: required (--tgt-vocab or config)");
  ModelConfig m = config.model;
  m.src_vocab = src_vocab;
  m.tgt_vocab = tgt_vocab;
  m.validate();
  const ParameterCount pc = count_parameters(m, src_vocab, tgt_vocab);
  if (json) {
    nlohmann::ordered_json j;
    j["variant"] = to_string(m.variant);
    j["src_vocab"] = src_vocab;
    j["tgt_vocab"] = tgt_vocab;
    j["total"] = pc.total;
    j["breakdown"] = nlohmann::ordered_json::array();
    for (const auto& [name, n] : pc.breakdown) j["breakdown"].push_back({{"name", name}, {"count", n}});
    out << j.dump(2) << '\n';
    return kExitOk;
  }
  out << to_string(m.variant) << " (src_vocab " << src_vocab << ", tgt_vocab " << tgt_vocab
      << ")\n";
  for (const auto& [name, n] : pc.breakdown) {
    out << "  " << std::left << std::setw(24) << name << std::right << std::setw(12) << n << '\n';
  }
  out << "  " << std::left << std::setw(24) << "total" << std::right << std::setw(12) << pc.total
      << '\n';
  return kExitOk;
}

int cmd_export_curves(const std::vector<std::string>& inputs, const std::string& svg_path,
                      std::string csv_path, std::ostream& out) {
  std::vector<fs::path> paths(inputs.begin(), inputs.end());
  const auto rows = merge_metrics(paths);
  if (csv_path.empty()) csv_path = fs::path(svg_path).replace_extension(".csv").string();
  std::ofstream svg(svg_path);
  if (!svg) throw IoError("cannot write " + svg_path);
  svg << render_loss_svg(rows);
  write_metrics_csv(csv_path, rows);
  out << "plot written to " << svg_path << ", merged metrics (" << rows.size() << " rows) to "
      << csv_path << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Encoder-decoder transformer laboratory: baseline and proposed variants", "tlab"};
  app.require_subcommand(1);
  app.footer(config_help());

  GlobalOptions g;
  auto* seed_opt = app.add_option("--seed", g.seed, "seed for data order, dropout and weights");
  app.add_option("--out-dir", g.out_dir, "output directory")->capture_default_str();
  app.add_option("--precision", g.precision, "floating-point width")
      ->check(CLI::IsMember({"f32", "f64"}))
      ->capture_default_str();

  std::string corpus, vocab_out, side = "lines";
  std::size_t vocab_size = 8000;
  auto* bv = app.add_subcommand("build-vocab", "learn a wordpiece vocabulary from a corpus");
  bv->add_option("--corpus", corpus, "text or parallel corpus")->required();
  bv->add_option("--size", vocab_size, "maximum vocabulary size")->capture_default_str();
  bv->add_option("--out", vocab_out, "vocabulary file to write")->required();
  bv->add_option("--side", side, "lines: every line; source/target: one side of TAB pairs")
      ->check(CLI::IsMember({"lines", "source", "target"}))
      ->capture_default_str();

  std::string config_path, variant;
  std::vector<std::string> sets;
  DataArgs data;
  BudgetArgs budget;
  std::size_t trial = 1;
  auto* tr = app.add_subcommand("train", "train one variant and write metrics and a checkpoint");
  tr->add_option("--config", config_path, "config file");
  tr->add_option("--variant", variant, "baseline or proposed (resets architecture defaults)")
      ->check(CLI::IsMember({"baseline", "proposed"}));
  tr->add_option("--set", sets, "extra 'key=value' config entries");
  tr->add_option("--trial", trial, "trial id recorded in the metrics")->capture_default_str();
  add_data_options(tr, data);
  add_budget_options(tr, budget);

  std::string config_a, config_b;
  std::size_t trials = 1;
  bool parallel = false;
  auto* cmp = app.add_subcommand("compare", "train both variants on identical batches");
  cmp->add_option("--config-a", config_a, "first config (default: baseline defaults)");
  cmp->add_option("--config-b", config_b, "second config (default: proposed defaults)");
  cmp->add_option("--set", sets, "extra 'key=value' entries applied to both configs");
  cmp->add_option("--trials", trials, "trials per variant")->capture_default_str();
  cmp->add_flag("--parallel-trials", parallel, "run every trial in its own process");
  add_data_options(cmp, data);
  add_budget_options(cmp, budget);

  std::size_t src_vocab = 0, tgt_vocab = 0;
  bool json = false;
  auto* cp = app.add_subcommand("count-params", "print the parameter breakdown of a config");
  cp->add_option("--config", config_path, "config file");
  cp->add_option("--variant", variant, "baseline or proposed")
      ->check(CLI::IsMember({"baseline", "proposed"}));
  cp->add_option("--set", sets, "extra 'key=value' config entries");
  cp->add_option("--src-vocab", src_vocab, "source vocabulary size");
  cp->add_option("--tgt-vocab", tgt_vocab, "target vocabulary size");
  cp->add_flag("--json", json, "machine-readable output");

  std::vector<std::string> metrics;
  std::string plot_out, csv_out;
  auto* ec = app.add_subcommand("export-curves", "plot loss curves and merge metrics files");
  ec->add_option("metrics", metrics, "metrics CSV files")->required();
  ec->add_option("--out", plot_out, "SVG file to write")->required();
  ec->add_option("--csv", csv_out, "merged CSV (default: --out with .csv)");

  for (auto* sub : {bv, tr, cmp, cp, ec}) sub->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }
  g.seed_given = seed_opt->count() > 0;
  const bool f64 = g.precision == "f64";

  try {
    if (bv->parsed()) return cmd_build_vocab(corpus, vocab_size, vocab_out, side, out);
    if (tr->parsed()) {
      const RunConfig config = resolve_config(config_path, variant, sets);
      return f64 ? cmd_train<double>(g, config, data, budget, trial, out)
                 : cmd_train<float>(g, config, data, budget, trial, out);
    }
    if (cmp->parsed()) {
      const RunConfig a = resolve_config(config_a, config_a.empty() ? "baseline" : "", sets);
      const RunConfig b = resolve_config(config_b, config_b.empty() ? "proposed" : "", sets);
      return f64 ? cmd_compare<double>(g, a, b, data, budget, trials, parallel, out, err)
                 : cmd_compare<float>(g, a, b, data, budget, trials, parallel, out, err);
    }
    if (cp->parsed()) {
      return cmd_count_params(resolve_config(config_path, variant, sets), src_vocab, tgt_vocab,
                              json, out);
    }
    if (ec->parsed()) return cmd_export_curves(metrics, plot_out, csv_out, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericalError& e) {
    err << "numerical fault: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace tlab
