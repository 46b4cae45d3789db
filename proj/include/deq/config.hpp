#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "deq/training.hpp"

namespace deq {

// Flat key = value document: '#' comments, blank lines and [section] headers
// are ignored, string values may be quoted. Duplicate keys are an error.
std::map<std::string, std::string> parse_flat_toml(std::string_view text);

// Keys mirror the JSON config names (epochs, lr_w, lr_theta, wd_w, wd_theta,
// alpha, gamma, eta, lambda0, hidden, attention_ratio, seed, k_max, tol,
// anderson_memory, anderson_ridge, damping, solver, t_max, tol_b,
// on_divergence). Unknown keys and unparsable values throw ConfigError.
void apply_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
void apply_config(TrainConfig& cfg, const std::map<std::string, std::string>& values);
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});

std::string train_config_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(std::string_view text);

}  // namespace deq
