#include "tlab/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace tlab {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::size_t parse_size(std::string_view key, std::string_view value) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError(std::string(key) + ": expected a non-negative integer, got '" +
                      std::string(value) + "'");
  }
  return out;
}

double parse_real(std::string_view key, std::string_view value) {
  const std::string text(value);
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (text.empty() || used != text.size()) {
    throw ConfigError(std::string(key) + ": expected a number, got '" + text + "'");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(value) + "'");
}

// Shortest text that reads back to the same double.
std::string real_text(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Rethrows a parse_* error with the field name in front.
template <typename F>
auto field(std::string_view key, F&& parse) {
  try {
    return parse();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(std::string(key) + ":", 0) == 0) throw;
    throw ConfigError(std::string(key) + ": " + msg);
  }
}

}  // namespace

const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    const RunConfig d;
    const ModelConfig& m = d.model;
    return std::vector<ConfigField>{
        {"variant", to_string(m.variant),
         "baseline or proposed; resets the architecture fields to that variant's defaults"},
        {"blocks", std::to_string(m.blocks), "encoder and decoder blocks N"},
        {"embed_dim", std::to_string(m.embed_dim), "token embedding dimension m (even)"},
        {"ffn_hidden", std::to_string(m.ffn_hidden), "feed-forward hidden width"},
        {"heads", std::to_string(m.heads), "attention heads p"},
        {"head_dim", std::to_string(m.head_dim), "per-head projection width r"},
        {"dropout", real_text(m.dropout), "dropout rate"},
        {"max_len", std::to_string(m.max_len), "longest sequence in tokens"},
        {"src_vocab", std::to_string(m.src_vocab), "source vocabulary size (0: from data)"},
        {"tgt_vocab", std::to_string(m.tgt_vocab), "target vocabulary size (0: from data)"},
        {"embed_scale", to_string(m.embed_scale), "baseline input scaling: divide or multiply"},
        {"attn_scale", to_string(m.attn_scale), "score scaling: embed_dim (sqrt m) or head_dim (sqrt r)"},
        {"tgt_norm", to_string(m.tgt_norm),
         "proposed decoder normalization: prefix (causal) or full"},
        {"use_bias", m.use_bias ? "true" : "false", "biases in attention and feed-forward layers"},
        {"seed", std::to_string(m.seed), "weight initialization seed"},
        {"batch_size", std::to_string(d.batch_size), "sentence pairs per batch"},
        {"warmup", std::to_string(d.warmup), "learning-rate warmup steps"},
        {"lr_scale", real_text(d.lr_scale), "multiplier on the learning-rate schedule"},
        {"vocab_size", std::to_string(d.vocab_size), "wordpiece vocabulary budget per side"},
        {"val_fraction", real_text(d.val_fraction),
         "share of training pairs held out when no validation file is given"},
    };
  }();
  return fields;
}

void set_config_value(RunConfig& config, std::string_view key, std::string_view value) {
  ModelConfig& m = config.model;
  if (key == "variant") {
    const Variant v = field(key, [&] { return parse_variant(std::string(value)); });
    ModelConfig fresh = ModelConfig::defaults_for(v);
    fresh.src_vocab = m.src_vocab;
    fresh.tgt_vocab = m.tgt_vocab;
    fresh.seed = m.seed;
    m = fresh;
  } else if (key == "blocks") {
    m.blocks = parse_size(key, value);
  } else if (key == "embed_dim") {
    m.embed_dim = parse_size(key, value);
  } else if (key == "ffn_hidden") {
    m.ffn_hidden = parse_size(key, value);
  } else if (key == "heads") {
    m.heads = parse_size(key, value);
  } else if (key == "head_dim") {
    m.head_dim = parse_size(key, value);
  } else if (key == "dropout") {
    m.dropout = parse_real(key, value);
  } else if (key == "max_len") {
    m.max_len = parse_size(key, value);
  } else if (key == "src_vocab") {
    m.src_vocab = parse_size(key, value);
  } else if (key == "tgt_vocab") {
    m.tgt_vocab = parse_size(key, value);
  } else if (key == "embed_scale") {
    m.embed_scale = field(key, [&] { return parse_embed_scale_mode(std::string(value)); });
  } else if (key == "attn_scale") {
    m.attn_scale = field(key, [&] { return parse_attn_scale_mode(std::string(value)); });
  } else if (key == "tgt_norm") {
    m.tgt_norm = field(key, [&] { return parse_target_norm_mode(std::string(value)); });
  } else if (key == "use_bias") {
    m.use_bias = parse_bool(key, value);
  } else if (key == "seed") {
    m.seed = parse_size(key, value);
  } else if (key == "batch_size") {
    config.batch_size = parse_size(key, value);
  } else if (key == "warmup") {
    config.warmup = parse_size(key, value);
  } else if (key == "lr_scale") {
    config.lr_scale = parse_real(key, value);
  } else if (key == "vocab_size") {
    config.vocab_size = parse_size(key, value);
  } else if (key == "val_fraction") {
    config.val_fraction = parse_real(key, value);
  } else {
    throw ConfigError(std::string(key) + ": unknown config key");
  }
}

RunConfig parse_config(std::string_view text, const std::string& origin) {
  struct Entry {
    std::string key, value;
    std::size_t line;
  };
  std::vector<Entry> entries;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    }
    entries.push_back({std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))),
                       line_no});
  }
  RunConfig config;
  // The variant decides the defaults every other key overrides.
  for (const auto& e : entries) {
    if (e.key == "variant") set_config_value(config, e.key, e.value);
  }
  for (const auto& e : entries) {
    if (e.key == "variant") continue;
    try {
      set_config_value(config, e.key, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError(origin + ":" + std::to_string(e.line) + ": " + err.what());
    }
  }
  if (config.batch_size == 0) throw ConfigError(origin + ": batch_size: must be positive");
  if (config.warmup == 0) throw ConfigError(origin + ": warmup: must be positive");
  if (!(config.lr_scale > 0)) throw ConfigError(origin + ": lr_scale: must be positive");
  if (!(config.val_fraction > 0 && config.val_fraction < 1)) {
    throw ConfigError(origin + ": val_fraction: must lie in (0, 1)");
  }
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string format_config(const RunConfig& config) {
  const ModelConfig& m = config.model;
  std::ostringstream os;
  os << "variant = " << to_string(m.variant) << '\n'
     << "blocks = " << m.blocks << '\n'
     << "embed_dim = " << m.embed_dim << '\n'
     << "ffn_hidden = " << m.ffn_hidden << '\n'
     << "heads = " << m.heads << '\n'
     << "head_dim = " << m.head_dim << '\n'
     << "dropout = " << real_text(m.dropout) << '\n'
     << "max_len = " << m.max_len << '\n'
     << "src_vocab = " << m.src_vocab << '\n'
     << "tgt_vocab = " << m.tgt_vocab << '\n'
     << "embed_scale = " << to_string(m.embed_scale) << '\n'
     << "attn_scale = " << to_string(m.attn_scale) << '\n'
     << "tgt_norm = " << to_string(m.tgt_norm) << '\n'
     << "use_bias = " << (m.use_bias ? "true" : "false") << '\n'
     << "seed = " << m.seed << '\n'
     << "batch_size = " << config.batch_size << '\n'
     << "warmup = " << config.warmup << '\n'
     << "lr_scale = " << real_text(config.lr_scale) << '\n'
     << "vocab_size = " << config.vocab_size << '\n'
     << "val_fraction = " << real_text(config.val_fraction) << '\n';
  return os.str();
}

void save_config(const RunConfig& config, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write config " + path.string());
  os << format_config(config);
  if (!os) throw IoError("failed writing config " + path.string());
}

}  // namespace tlab
