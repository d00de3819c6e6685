// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// Plain-text configuration: one `key = value` per line, `#` starts a comment.
// Unknown keys, duplicates and malformed values are ConfigErrors naming the
// line.

#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cotr/toy_net.hpp"

namespace cotr {

struct ConfigEntry {
  std::string key;
  std::string value;
  int line = 0;
};

std::vector<ConfigEntry> parse_key_values(std::string_view text);

/// Applies the entries in `text` on top of `base`.
ToyConfig parse_toy_config(std::string_view text, const ToyConfig& base = {});
ToyConfig load_toy_config(const std::string& path, const ToyConfig& base = {});

/// Every key, in a form parse_toy_config reads back to an equal config.
std::string format_toy_config(const ToyConfig& config);

/// Names accepted by parse_toy_config.
std::vector<std::string> toy_config_keys();

/// Strict scalar parsers shared with the CLI (ConfigError on bad input).
int parse_int(std::string_view text, std::string_view what);
double parse_double(std::string_view text, std::string_view what);
bool parse_bool(std::string_view text, std::string_view what);
Dims3 parse_dims(std::string_view text, std::string_view what);
std::vector<std::string> split_list(std::string_view text);

}  // namespace cotr
