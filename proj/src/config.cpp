#include "deq/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <sstream>

#include "deq/errors.hpp"

namespace deq {

namespace {

using nlohmann::json;

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

// Strips a trailing comment that is not inside quotes.
std::string_view strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key " + key + ": \"" + v + "\" is not a number");
  }
  return out;
}

std::uint64_t to_unsigned(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("config key " + key + ": \"" + v + "\" is not a non-negative integer");
  }
  return out;
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"epochs", [](TrainConfig& c, auto& k, auto& v) { c.epochs = to_unsigned(k, v); }},
      {"lr_w", [](TrainConfig& c, auto& k, auto& v) { c.lr_endmembers = to_double(k, v); }},
      {"lr_theta", [](TrainConfig& c, auto& k, auto& v) { c.lr_operator = to_double(k, v); }},
      {"wd_w", [](TrainConfig& c, auto& k, auto& v) { c.decay_endmembers = to_double(k, v); }},
      {"wd_theta", [](TrainConfig& c, auto& k, auto& v) { c.decay_operator = to_double(k, v); }},
      {"alpha", [](TrainConfig& c, auto& k, auto& v) { c.alpha = to_double(k, v); }},
      {"gamma", [](TrainConfig& c, auto& k, auto& v) { c.gamma = to_double(k, v); }},
      {"eta", [](TrainConfig& c, auto& k, auto& v) { c.eta = to_double(k, v); }},
      {"lambda0", [](TrainConfig& c, auto& k, auto& v) { c.lambda0 = to_double(k, v); }},
      {"hidden", [](TrainConfig& c, auto& k, auto& v) { c.hidden = to_unsigned(k, v); }},
      {"attention_ratio", [](TrainConfig& c, auto& k, auto& v) { c.attention_ratio = to_unsigned(k, v); }},
      {"seed", [](TrainConfig& c, auto& k, auto& v) { c.seed = to_unsigned(k, v); }},
      {"k_max", [](TrainConfig& c, auto& k, auto& v) { c.solver.k_max = to_unsigned(k, v); }},
      {"tol", [](TrainConfig& c, auto& k, auto& v) { c.solver.tol = to_double(k, v); }},
      {"anderson_memory", [](TrainConfig& c, auto& k, auto& v) { c.solver.anderson_memory = to_unsigned(k, v); }},
      {"anderson_ridge", [](TrainConfig& c, auto& k, auto& v) { c.solver.anderson_ridge = to_double(k, v); }},
      {"damping", [](TrainConfig& c, auto& k, auto& v) { c.solver.damping = to_double(k, v); }},
      {"solver", [](TrainConfig& c, auto&, auto& v) { c.solver_mode = parse_solver_mode(v); }},
      {"t_max", [](TrainConfig& c, auto& k, auto& v) { c.backward.t_max = to_unsigned(k, v); }},
      {"tol_b", [](TrainConfig& c, auto& k, auto& v) { c.backward.tol = to_double(k, v); }},
      {"on_divergence",
       [](TrainConfig& c, auto&, auto& v) { c.backward.on_divergence = parse_divergence_policy(v); }},
  };
  return table;
}

}  // namespace

std::map<std::string, std::string> parse_flat_toml(std::string_view text) {
  std::map<std::string, std::string> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(strip_comment(line));
    if (line.empty() || line.front() == '[') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    std::string key(trim(line.substr(0, eq)));
    std::string_view value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (!out.emplace(key, std::string(value)).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key " + key);
    }
  }
  return out;
}

void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key " + key);
  try {
    it->second(cfg, key, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("config key " + key + ": " + e.what());
  }
}

void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& values) {
  for (const auto& [k, v] : values) apply_config_value(cfg, k, v);
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_config(base, parse_flat_toml(ss.str()));
  base.validate();
  return base;
}

std::string train_config_json(const TrainConfig& cfg) {
  const json j = {{"epochs", cfg.epochs},
                  {"lr_w", cfg.lr_endmembers},
                  {"lr_theta", cfg.lr_operator},
                  {"wd_w", cfg.decay_endmembers},
                  {"wd_theta", cfg.decay_operator},
                  {"alpha", cfg.alpha},
                  {"gamma", cfg.gamma},
                  {"eta", cfg.eta},
                  {"lambda0", cfg.lambda0},
                  {"hidden", cfg.hidden},
                  {"attention_ratio", cfg.attention_ratio},
                  {"seed", cfg.seed},
                  {"k_max", cfg.solver.k_max},
                  {"tol", cfg.solver.tol},
                  {"anderson_memory", cfg.solver.anderson_memory},
                  {"anderson_ridge", cfg.solver.anderson_ridge},
                  {"damping", cfg.solver.damping},
                  {"solver", std::string(solver_mode_name(cfg.solver_mode))},
                  {"t_max", cfg.backward.t_max},
                  {"tol_b", cfg.backward.tol},
                  {"on_divergence", std::string(divergence_policy_name(cfg.backward.on_divergence))}};
  return j.dump();
}

TrainConfig train_config_from_json(std::string_view text) {
  const json j = json::parse(text);
  TrainConfig c;
  try {
    c.epochs = j.at("epochs").get<std::size_t>();
    c.lr_endmembers = j.at("lr_w").get<double>();
    c.lr_operator = j.at("lr_theta").get<double>();
    c.decay_endmembers = j.at("wd_w").get<double>();
    c.decay_operator = j.at("wd_theta").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.gamma = j.at("gamma").get<double>();
    c.eta = j.at("eta").get<double>();
    c.lambda0 = j.at("lambda0").get<double>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.attention_ratio = j.at("attention_ratio").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.solver.k_max = j.at("k_max").get<std::size_t>();
    c.solver.tol = j.at("tol").get<double>();
    c.solver.anderson_memory = j.at("anderson_memory").get<std::size_t>();
    c.solver.anderson_ridge = j.at("anderson_ridge").get<double>();
    c.solver.damping = j.at("damping").get<double>();
    c.solver_mode = parse_solver_mode(j.at("solver").get<std::string>());
    c.backward.t_max = j.at("t_max").get<std::size_t>();
    c.backward.tol = j.at("tol_b").get<double>();
    c.backward.on_divergence = parse_divergence_policy(j.at("on_divergence").get<std::string>());
  } catch (const json::out_of_range& e) {
    throw SchemaError(std::string("config document: ") + e.what());
  }
  return c;
}

}  // namespace deq
