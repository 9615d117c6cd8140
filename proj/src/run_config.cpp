#include "uwloc/run_config.hpp"

#include "uwloc/error.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace uwloc {

namespace {

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

double parse_double(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw usage_error("bad real value '" + text + "' for " + key);
  }
  if (used != text.size()) throw usage_error("bad real value '" + text + "' for " + key);
  return v;
}

long long parse_int(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(text, &used);
  } catch (const std::exception&) {
    throw usage_error("bad integer value '" + text + "' for " + key);
  }
  if (used != text.size()) throw usage_error("bad integer value '" + text + "' for " + key);
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    throw usage_error("bad unsigned value '" + text + "' for " + key);
  }
  if (used != text.size()) throw usage_error("bad unsigned value '" + text + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true" || text == "on") return true;
  if (text == "0" || text == "false" || text == "off") return false;
  throw usage_error("bad flag value '" + text + "' for " + key);
}

std::vector<double> parse_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(parse_double(key, item));
  }
  return out;
}

std::string format_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

template <typename Access>
Field real(Access access) {
  return {[=](const RunConfig& c) { return format_double(access(const_cast<RunConfig&>(c))); },
          [=](RunConfig& c, const std::string& v) { access(c) = parse_double("", v); }};
}

template <typename Access>
Field integer(Access access) {
  return {[=](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); },
          [=](RunConfig& c, const std::string& v) {
            using M = std::remove_reference_t<decltype(access(c))>;
            access(c) = static_cast<M>(parse_int("", v));
          }};
}

template <typename Access>
Field unsigned64(Access access) {
  return {[=](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); },
          [=](RunConfig& c, const std::string& v) { access(c) = parse_u64("", v); }};
}

template <typename Access>
Field flag(Access access) {
  return {[=](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "1" : "0"); },
          [=](RunConfig& c, const std::string& v) { access(c) = parse_bool("", v); }};
}

template <typename Access>
Field list(Access access) {
  return {[=](const RunConfig& c) { return format_list(access(const_cast<RunConfig&>(c))); },
          [=](RunConfig& c, const std::string& v) { access(c) = parse_list("", v); }};
}

#define FIELD(expr) [](RunConfig& c) -> auto& { return expr; }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"scenario.duration_min", integer(FIELD(c.scenario.duration_min))},
      {"scenario.tones_hz", list(FIELD(c.scenario.tones_hz))},
      {"scenario.source_speed_mps", real(FIELD(c.scenario.source_speed_mps))},
      {"scenario.range_start_km", real(FIELD(c.scenario.range_start_km))},
      {"scenario.range_end_km", real(FIELD(c.scenario.range_end_km))},
      {"scenario.snr_db", real(FIELD(c.scenario.snr_db))},
      {"scenario.channels", integer(FIELD(c.scenario.channels))},
      {"scenario.seed", unsigned64(FIELD(c.scenario.seed))},
      {"scenario.sample_rate_hz", real(FIELD(c.scenario.sample_rate_hz))},
      {"scenario.sound_speed_mps", real(FIELD(c.scenario.sound_speed_mps))},
      {"scenario.max_delay_samples", real(FIELD(c.scenario.max_delay_samples))},
      {"scenario.delay_range_scale_km", real(FIELD(c.scenario.delay_range_scale_km))},
      {"scenario.interferer.enabled", flag(FIELD(c.interferer_enabled))},
      {"scenario.interferer.tones_hz", list(FIELD(c.interferer.tones_hz))},
      {"scenario.interferer.level_db", real(FIELD(c.interferer.level_db))},
      {"scenario.interferer.range_km", real(FIELD(c.interferer.range_km))},
      {"stft.window_len", integer(FIELD(c.features.stft.window_len))},
      {"stft.hop", integer(FIELD(c.features.stft.hop))},
      {"stft.n_fft", integer(FIELD(c.features.stft.n_fft))},
      {"mel.n_mels", integer(FIELD(c.features.mel.n_mels))},
      {"mel.f_min", real(FIELD(c.features.mel.f_min))},
      {"mel.f_max", real(FIELD(c.features.mel.f_max))},
      {"mel.log_floor", real(FIELD(c.features.mel.log_floor))},
      {"gcc.lags", integer(FIELD(c.features.gcc.lags))},
      {"gcc.n_fft", integer(FIELD(c.features.gcc.n_fft))},
      {"agc.mode",
       {[](const RunConfig& c) { return to_string(c.agc.mode); },
        [](RunConfig& c, const std::string& v) { c.agc.mode = parse_agc_mode(v); }}},
      {"agc.e_target", real(FIELD(c.agc.params.e_target))},
      {"agc.alpha", real(FIELD(c.agc.params.alpha))},
      {"net.conv_blocks", integer(FIELD(c.net.conv_blocks))},
      {"net.base_filters", integer(FIELD(c.net.base_filters))},
      {"net.dropout_p", real(FIELD(c.net.dropout_p))},
      {"net.conformer_blocks", integer(FIELD(c.net.conformer_blocks))},
      {"net.model_dim", integer(FIELD(c.net.model_dim))},
      {"net.attn_heads", integer(FIELD(c.net.attn_heads))},
      {"net.ff_expansion", integer(FIELD(c.net.ff_expansion))},
      {"net.conv_kernel_temporal", integer(FIELD(c.net.conv_kernel_temporal))},
      {"net.head_hidden", integer(FIELD(c.net.head_hidden))},
      {"net.residual_scale_init", real(FIELD(c.net.residual_scale_init))},
      {"net.share_centers", flag(FIELD(c.net.share_centers))},
      {"net.use_gcc_branch", flag(FIELD(c.net.use_gcc_branch))},
      {"net.seed", unsigned64(FIELD(c.net.seed))},
      {"train.batch_size", integer(FIELD(c.train.batch_size))},
      {"train.lr", real(FIELD(c.train.lr))},
      {"train.adam_beta1", real(FIELD(c.train.adam_beta1))},
      {"train.adam_beta2", real(FIELD(c.train.adam_beta2))},
      {"train.adam_eps", real(FIELD(c.train.adam_eps))},
      {"train.epochs", integer(FIELD(c.train.epochs))},
      {"train.seed", unsigned64(FIELD(c.train.seed))},
      {"train.shuffle", flag(FIELD(c.train.shuffle))},
      {"finetune.epochs", integer(FIELD(c.finetune_epochs))},
  };
  return table;
}

#undef FIELD

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Scenario resolved_scenario(const RunConfig& cfg) {
  Scenario s = cfg.scenario;
  if (cfg.interferer_enabled) s.interferer = cfg.interferer;
  else s.interferer.reset();
  return s;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw usage_error("unknown config key '" + key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::usage) throw;
    throw usage_error("bad value '" + value + "' for config key '" + key + "'");
  }
}

std::string get_key(const RunConfig& cfg, const std::string& key) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw usage_error("unknown config key '" + key + "'");
  return it->second.get(cfg);
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, f] : fields()) keys.push_back(k);
  return keys;
}

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw usage_error("expected key=value, got '" + a + "'");
    set_key(cfg, trim(a.substr(0, eq)), trim(a.substr(eq + 1)));
  }
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw usage_error("config line " + std::to_string(line_no) + " is not key = value");
    }
    set_key(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

void save_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot write config " + path.string());
  out << to_text(cfg);
}

void validate(const RunConfig& cfg) {
  validate_scenario(resolved_scenario(cfg));
  validate(cfg.features.stft);
  validate(cfg.agc.params);
  validate(cfg.train);
  if (cfg.finetune_epochs < 0) throw usage_error("finetune.epochs must be non-negative");
}

}  // namespace uwloc
