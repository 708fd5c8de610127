#pragma once

#include <array>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>

namespace cisunet {

enum class AttentionVariant { CSW_SA, SW_SA };

inline const char* attention_variant_name(AttentionVariant v) {
  return v == AttentionVariant::CSW_SA ? "csw_sa" : "sw_sa";
}

inline AttentionVariant parse_attention_variant(const std::string& s) {
  if (s == "csw_sa") return AttentionVariant::CSW_SA;
  if (s == "sw_sa") return AttentionVariant::SW_SA;
  throw std::runtime_error("attention_variant: unknown value '" + s +
                           "' (valid: csw_sa, sw_sa)");
}

/// Architecture hyperparameters. Defaults are the base variant.
struct ModelConfig {
  long in_channels = 1;
  long num_classes = 15;  // including background
  std::array<long, 4> stage_depths{3, 4, 6, 3};     // L1..L4 residual units
  std::array<long, 4> stage_channels{64, 128, 256, 512};  // C1..C4
  long embed_dim = 48;   // F, bottleneck token width
  long window_size = 4;  // M, attention window edge in tokens
  long shift_size = 2;   // s, cyclic shift for SW-MSA
  long num_heads = 3;
  double mlp_ratio = 4.0;
  AttentionVariant attention_variant = AttentionVariant::CSW_SA;

  bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  long iterations = 3000;
  long batch_size = 4;
  std::array<long, 3> patch_size{128, 128, 128};
  double lambda_dice = 1.0;
  double lambda_ce = 1.0;
  long rng_seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  double target_spacing = 1.5;                     // mm, isotropic
  std::array<double, 2> intensity_window{-175.0, 250.0};  // HU
  std::array<double, 2> pos_neg_ratio{1.0, 1.0};
  long samples_per_volume = 4;

  bool operator==(const DataConfig&) const = default;
};

struct Configs {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;

  bool operator==(const Configs&) const = default;
};

// ---------------------------------------------------------------------------
// Validation (each violated invariant names its field)
// ---------------------------------------------------------------------------

inline void validate(const ModelConfig& m) {
  auto fail = [](const std::string& msg) {
    throw std::runtime_error("invalid config: " + msg);
  };
  if (m.in_channels < 1) fail("in_channels must be >= 1");
  if (m.num_classes < 2) fail("num_classes must be >= 2");
  for (long d : m.stage_depths)
    if (d < 1) fail("stage_depths entries must be >= 1");
  long prev = 0;
  for (long c : m.stage_channels) {
    if (c < 1) fail("stage_channels entries must be > 0");
    if (c < prev) fail("stage_channels must be non-decreasing");
    prev = c;
  }
  if (m.embed_dim < 1) fail("embed_dim must be > 0");
  if (m.num_heads < 1) fail("num_heads must be >= 1");
  if (m.embed_dim % m.num_heads != 0)
    fail("embed_dim must be divisible by num_heads");
  if (m.window_size < 2) fail("window_size must be >= 2");
  if (m.shift_size <= 0 || m.shift_size >= m.window_size)
    fail("shift_size must satisfy 0 < shift_size < window_size");
  if (m.mlp_ratio <= 0) fail("mlp_ratio must be > 0");
}

inline void validate(const TrainConfig& t) {
  auto fail = [](const std::string& msg) {
    throw std::runtime_error("invalid config: " + msg);
  };
  if (t.learning_rate <= 0) fail("learning_rate must be > 0");
  if (t.weight_decay < 0) fail("weight_decay must be >= 0");
  if (t.iterations < 1) fail("iterations must be >= 1");
  if (t.batch_size < 1) fail("batch_size must be >= 1");
  for (long p : t.patch_size) {
    if (p < 16) fail("patch_size entries must be >= 16");
    if (p % 16 != 0) fail("patch_size must be divisible by 16");
  }
  if (t.lambda_dice < 0) fail("lambda_dice must be >= 0");
  if (t.lambda_ce < 0) fail("lambda_ce must be >= 0");
}

inline void validate(const DataConfig& d) {
  auto fail = [](const std::string& msg) {
    throw std::runtime_error("invalid config: " + msg);
  };
  if (d.target_spacing <= 0) fail("target_spacing must be > 0");
  if (d.intensity_window[0] >= d.intensity_window[1])
    fail("intensity_window must satisfy lo < hi");
  if (d.pos_neg_ratio[0] < 0 || d.pos_neg_ratio[1] < 0)
    fail("pos_neg_ratio weights must be >= 0");
  if (d.pos_neg_ratio[0] == 0 && d.pos_neg_ratio[1] == 0)
    fail("pos_neg_ratio weights must not both be 0");
  if (d.samples_per_volume < 1) fail("samples_per_volume must be >= 1");
}

inline void validate(const Configs& c) {
  validate(c.model);
  validate(c.train);
  validate(c.data);
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

/// Named architecture variants. All use F=48; tiny/small share the reduced
/// channel plan, base doubles it.
inline ModelConfig preset(const std::string& name) {
  ModelConfig m;  // defaults == base
  if (name == "base") {
    m.stage_depths = {3, 4, 6, 3};
    m.stage_channels = {64, 128, 256, 512};
  } else if (name == "small") {
    m.stage_depths = {3, 4, 6, 3};
    m.stage_channels = {32, 64, 128, 256};
  } else if (name == "tiny") {
    m.stage_depths = {2, 2, 2, 2};
    m.stage_channels = {32, 64, 128, 256};
  } else {
    throw std::runtime_error("unknown preset '" + name +
                             "' (valid: tiny, small, base)");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Flat key=value serialization
// ---------------------------------------------------------------------------
// Grammar: one `key = value` per line; blank lines and lines starting with
// '#' ignored; tuple values are comma-separated. Keys are exactly the field
// names. Every key is optional; unset keys keep their defaults.

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <size_t N, typename T>
std::string fmt_tuple(const std::array<T, N>& a) {
  std::string out;
  for (size_t i = 0; i < N; ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, double>)
      out += fmt_double(a[i]);
    else
      out += std::to_string(a[i]);
  }
  return out;
}

inline long parse_long(const std::string& v, const std::string& key) {
  size_t pos = 0;
  long out;
  try {
    out = std::stol(v, &pos);
  } catch (const std::exception&) {
    throw std::runtime_error("value for '" + key + "' is not an integer: '" + v + "'");
  }
  if (pos != v.size())
    throw std::runtime_error("value for '" + key + "' is not an integer: '" + v + "'");
  return out;
}

inline double parse_double(const std::string& v, const std::string& key) {
  size_t pos = 0;
  double out;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::runtime_error("value for '" + key + "' is not a number: '" + v + "'");
  }
  if (pos != v.size())
    throw std::runtime_error("value for '" + key + "' is not a number: '" + v + "'");
  return out;
}

template <size_t N, typename T>
std::array<T, N> parse_tuple(const std::string& v, const std::string& key) {
  std::array<T, N> out{};
  std::istringstream is(v);
  std::string item;
  size_t i = 0;
  while (std::getline(is, item, ',')) {
    if (i >= N)
      throw std::runtime_error("value for '" + key + "' needs exactly " +
                               std::to_string(N) + " comma-separated entries");
    item = trim(item);
    if constexpr (std::is_same_v<T, double>)
      out[i] = parse_double(item, key);
    else
      out[i] = parse_long(item, key);
    ++i;
  }
  if (i != N)
    throw std::runtime_error("value for '" + key + "' needs exactly " +
                             std::to_string(N) + " comma-separated entries");
  return out;
}

}  // namespace detail

inline std::string serialize(const Configs& c) {
  std::ostringstream os;
  os << "# model\n";
  os << "in_channels = " << c.model.in_channels << "\n";
  os << "num_classes = " << c.model.num_classes << "\n";
  os << "stage_depths = " << detail::fmt_tuple(c.model.stage_depths) << "\n";
  os << "stage_channels = " << detail::fmt_tuple(c.model.stage_channels) << "\n";
  os << "embed_dim = " << c.model.embed_dim << "\n";
  os << "window_size = " << c.model.window_size << "\n";
  os << "shift_size = " << c.model.shift_size << "\n";
  os << "num_heads = " << c.model.num_heads << "\n";
  os << "mlp_ratio = " << detail::fmt_double(c.model.mlp_ratio) << "\n";
  os << "attention_variant = " << attention_variant_name(c.model.attention_variant)
     << "\n";
  os << "# training\n";
  os << "learning_rate = " << detail::fmt_double(c.train.learning_rate) << "\n";
  os << "weight_decay = " << detail::fmt_double(c.train.weight_decay) << "\n";
  os << "iterations = " << c.train.iterations << "\n";
  os << "batch_size = " << c.train.batch_size << "\n";
  os << "patch_size = " << detail::fmt_tuple(c.train.patch_size) << "\n";
  os << "lambda_dice = " << detail::fmt_double(c.train.lambda_dice) << "\n";
  os << "lambda_ce = " << detail::fmt_double(c.train.lambda_ce) << "\n";
  os << "rng_seed = " << c.train.rng_seed << "\n";
  os << "# data\n";
  os << "target_spacing = " << detail::fmt_double(c.data.target_spacing) << "\n";
  os << "intensity_window = " << detail::fmt_tuple(c.data.intensity_window) << "\n";
  os << "pos_neg_ratio = " << detail::fmt_tuple(c.data.pos_neg_ratio) << "\n";
  os << "samples_per_volume = " << c.data.samples_per_volume << "\n";
  return os.str();
}

/// Parse the key=value text. `source` names the origin for error messages.
/// Parse errors carry the 1-based line number; invariants are validated after
/// the whole text is consumed.
inline Configs parse_config(const std::string& text,
                            const std::string& source = "<config>") {
  Configs c;
  std::istringstream is(text);
  std::string line;
  long lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    auto err = [&](const std::string& msg) {
      throw std::runtime_error(source + ":" + std::to_string(lineno) + ": " + msg);
    };
    if (eq == std::string::npos) err("expected 'key = value'");
    std::string key = detail::trim(t.substr(0, eq));
    std::string val = detail::trim(t.substr(eq + 1));
    if (key.empty()) err("empty key");
    if (val.empty()) err("empty value for '" + key + "'");
    try {
      if (key == "in_channels") c.model.in_channels = detail::parse_long(val, key);
      else if (key == "num_classes") c.model.num_classes = detail::parse_long(val, key);
      else if (key == "stage_depths")
        c.model.stage_depths = detail::parse_tuple<4, long>(val, key);
      else if (key == "stage_channels")
        c.model.stage_channels = detail::parse_tuple<4, long>(val, key);
      else if (key == "embed_dim") c.model.embed_dim = detail::parse_long(val, key);
      else if (key == "window_size") c.model.window_size = detail::parse_long(val, key);
      else if (key == "shift_size") c.model.shift_size = detail::parse_long(val, key);
      else if (key == "num_heads") c.model.num_heads = detail::parse_long(val, key);
      else if (key == "mlp_ratio") c.model.mlp_ratio = detail::parse_double(val, key);
      else if (key == "attention_variant")
        c.model.attention_variant = parse_attention_variant(val);
      else if (key == "learning_rate")
        c.train.learning_rate = detail::parse_double(val, key);
      else if (key == "weight_decay")
        c.train.weight_decay = detail::parse_double(val, key);
      else if (key == "iterations") c.train.iterations = detail::parse_long(val, key);
      else if (key == "batch_size") c.train.batch_size = detail::parse_long(val, key);
      else if (key == "patch_size")
        c.train.patch_size = detail::parse_tuple<3, long>(val, key);
      else if (key == "lambda_dice")
        c.train.lambda_dice = detail::parse_double(val, key);
      else if (key == "lambda_ce") c.train.lambda_ce = detail::parse_double(val, key);
      else if (key == "rng_seed") c.train.rng_seed = detail::parse_long(val, key);
      else if (key == "target_spacing")
        c.data.target_spacing = detail::parse_double(val, key);
      else if (key == "intensity_window")
        c.data.intensity_window = detail::parse_tuple<2, double>(val, key);
      else if (key == "pos_neg_ratio")
        c.data.pos_neg_ratio = detail::parse_tuple<2, double>(val, key);
      else if (key == "samples_per_volume")
        c.data.samples_per_volume = detail::parse_long(val, key);
      else err("unknown key '" + key + "'");
    } catch (const std::runtime_error& e) {
      std::string msg = e.what();
      if (msg.rfind(source + ":", 0) == 0) throw;  // already line-tagged
      err(msg);
    }
  }
  validate(c);
  return c;
}

inline Configs load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

inline void save_config(const Configs& c, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write config file: " + path);
  f << serialize(c);
  if (!f) throw std::runtime_error("failed writing config file: " + path);
}

}  // namespace cisunet
