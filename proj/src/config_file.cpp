// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/config_file.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace cotr {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string quoted(std::string_view s) { return "'" + std::string(s) + "'"; }

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

int parse_int(std::string_view text, std::string_view what) {
  text = trim(text);
  int v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError(std::string(what) + ": expected an integer, got " + quoted(text));
  }
  return v;
}

double parse_double(std::string_view text, std::string_view what) {
  const std::string s(trim(text));
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) {
    throw ConfigError(std::string(what) + ": expected a number, got " + quoted(s));
  }
  return v;
}

bool parse_bool(std::string_view text, std::string_view what) {
  text = trim(text);
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(std::string(what) + ": expected true/false, got " + quoted(text));
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto piece = trim(text.substr(start, comma == std::string_view::npos ? text.npos : comma - start));
    if (!piece.empty()) out.emplace_back(piece);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

Dims3 parse_dims(std::string_view text, std::string_view what) {
  const auto parts = split_list(text);
  if (parts.size() != 3) {
    throw ConfigError(std::string(what) + ": expected D,H,W, got " + quoted(trim(text)));
  }
  return {parse_int(parts[0], what), parse_int(parts[1], what), parse_int(parts[2], what)};
}

std::vector<ConfigEntry> parse_key_values(std::string_view text) {
  std::vector<ConfigEntry> out;
  std::set<std::string> seen;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos);
    ++line_no;
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value, got " +
                        quoted(line));
    }
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key " + quoted(key));
    }
    out.push_back({std::move(key), std::move(value), line_no});
  }
  return out;
}

namespace {

using Setter = std::function<void(ToyConfig&, std::string_view)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"input", [](ToyConfig& c, std::string_view v) { c.input = parse_dims(v, "input"); }},
      {"base_channels",
       [](ToyConfig& c, std::string_view v) { c.base_channels = parse_int(v, "base_channels"); }},
      {"token_channels",
       [](ToyConfig& c, std::string_view v) { c.token_channels = parse_int(v, "token_channels"); }},
      {"levels", [](ToyConfig& c, std::string_view v) { c.levels = parse_int(v, "levels"); }},
      {"encoder_layers",
       [](ToyConfig& c, std::string_view v) { c.encoder_layers = parse_int(v, "encoder_layers"); }},
      {"heads", [](ToyConfig& c, std::string_view v) { c.heads = parse_int(v, "heads"); }},
      {"points", [](ToyConfig& c, std::string_view v) { c.points = parse_int(v, "points"); }},
      {"ffn_width", [](ToyConfig& c, std::string_view v) { c.ffn_width = parse_int(v, "ffn_width"); }},
      {"classes", [](ToyConfig& c, std::string_view v) { c.classes = parse_int(v, "classes"); }},
      {"learning_rate",
       [](ToyConfig& c, std::string_view v) { c.learning_rate = parse_double(v, "learning_rate"); }},
      {"momentum", [](ToyConfig& c, std::string_view v) { c.momentum = parse_double(v, "momentum"); }},
      {"iterations",
       [](ToyConfig& c, std::string_view v) { c.iterations = parse_int(v, "iterations"); }},
      {"seed",
       [](ToyConfig& c, std::string_view v) {
         const std::string s(trim(v));
         std::uint64_t seed = 0;
         const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), seed);
         if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
           throw ConfigError("seed: expected a non-negative integer, got " + quoted(s));
         }
         c.seed = seed;
       }},
      {"ds_weights",
       [](ToyConfig& c, std::string_view v) {
         c.ds_weights.clear();
         for (const auto& w : split_list(v)) c.ds_weights.push_back(parse_double(w, "ds_weights"));
       }},
      {"multi_scale",
       [](ToyConfig& c, std::string_view v) { c.multi_scale = parse_bool(v, "multi_scale"); }},
      {"dropout", [](ToyConfig& c, std::string_view v) { c.dropout = parse_double(v, "dropout"); }},
      {"dice_eps", [](ToyConfig& c, std::string_view v) { c.dice_eps = parse_double(v, "dice_eps"); }},
      {"lr_schedule",
       [](ToyConfig& c, std::string_view v) {
         v = trim(v);
         if (v == "poly") {
           c.lr_schedule = LrSchedule::poly;
         } else if (v == "constant") {
           c.lr_schedule = LrSchedule::constant;
         } else {
           throw ConfigError("lr_schedule: expected poly or constant, got " + quoted(v));
         }
       }},
      {"grad_clip", [](ToyConfig& c, std::string_view v) { c.grad_clip = parse_double(v, "grad_clip"); }},
      {"noise", [](ToyConfig& c, std::string_view v) { c.noise = parse_double(v, "noise"); }},
  };
  return table;
}

}  // namespace

std::vector<std::string> toy_config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

ToyConfig parse_toy_config(std::string_view text, const ToyConfig& base) {
  ToyConfig c = base;
  for (const auto& e : parse_key_values(text)) {
    const auto it = setters().find(e.key);
    if (it == setters().end()) {
      throw ConfigError("config line " + std::to_string(e.line) + ": unknown key " + quoted(e.key));
    }
    try {
      it->second(c, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError("config line " + std::to_string(e.line) + ": " + err.what());
    }
  }
  c.validate();
  return c;
}

ToyConfig load_toy_config(const std::string& path, const ToyConfig& base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + quoted(path));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_toy_config(ss.str(), base);
}

std::string format_toy_config(const ToyConfig& c) {
  std::string out;
  auto put = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  put("input", std::to_string(c.input.d) + "," + std::to_string(c.input.h) + "," +
                   std::to_string(c.input.w));
  put("base_channels", std::to_string(c.base_channels));
  put("token_channels", std::to_string(c.token_channels));
  put("levels", std::to_string(c.levels));
  put("encoder_layers", std::to_string(c.encoder_layers));
  put("heads", std::to_string(c.heads));
  put("points", std::to_string(c.points));
  put("ffn_width", std::to_string(c.ffn_width));
  put("classes", std::to_string(c.classes));
  put("learning_rate", format_double(c.learning_rate));
  put("momentum", format_double(c.momentum));
  put("iterations", std::to_string(c.iterations));
  put("seed", std::to_string(c.seed));
  std::string w;
  for (std::size_t i = 0; i < c.ds_weights.size(); ++i) {
    w += (i ? "," : "") + format_double(c.ds_weights[i]);
  }
  put("ds_weights", w);
  put("multi_scale", c.multi_scale ? "true" : "false");
  put("dropout", format_double(c.dropout));
  put("dice_eps", format_double(c.dice_eps));
  put("lr_schedule", c.lr_schedule == LrSchedule::poly ? "poly" : "constant");
  put("grad_clip", format_double(c.grad_clip));
  put("noise", format_double(c.noise));
  return out;
}

}  // namespace cotr
