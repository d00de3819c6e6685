// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "cotr/config_file.hpp"
#include "cotr/msdmsa.hpp"
#include "cotr/vanilla_attention.hpp"

namespace cotr {

namespace {

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

Dims3 near_cubic(std::size_t size) {
  if (!is_power_of_two(size)) return {1, 1, static_cast<int>(size)};
  int bits = 0;
  while ((std::size_t{1} << bits) < size) ++bits;
  const int d = bits / 3;
  const int h = (bits - d) / 2;
  const int w = bits - d - h;
  return {1 << d, 1 << h, 1 << w};
}

using Clock = std::chrono::steady_clock;

// Smallest non-zero step the clock reports.
double clock_resolution_ns() {
  double best = 1e18;
  for (int i = 0; i < 50; ++i) {
    const auto a = Clock::now();
    auto b = Clock::now();
    while (b == a) b = Clock::now();
    best = std::min(best, std::chrono::duration<double, std::nano>(b - a).count());
  }
  return best;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

constexpr int kMaxRepeats = 64;

}  // namespace

LevelLayout bench_layout(std::size_t n, int levels) {
  if (levels < 1) throw ConfigError("bench: levels must be positive");
  if (n < (std::size_t{1} << (levels - 1))) {
    throw ConfigError("bench: N=" + std::to_string(n) + " is too small for " +
                      std::to_string(levels) + " levels");
  }
  std::vector<Dims3> dims;
  std::size_t used = 0;
  for (int l = 0; l < levels; ++l) {
    const std::size_t size = l + 1 < levels ? n >> (l + 1) : n - used;
    dims.push_back(near_cubic(size));
    used += size;
  }
  return LevelLayout(dims);
}

std::size_t bench_workspace_bytes(const std::string& mechanism, std::size_t tokens,
                                  const BenchConfig& c, std::size_t element_size) {
  if (mechanism == "msdmsa") {
    return dmsa_workspace_elements(tokens, c.channels, c.heads, c.levels, c.points) * element_size;
  }
  if (mechanism == "vanilla") {
    return vanilla_workspace_elements(tokens, c.channels, c.heads) * element_size;
  }
  throw ConfigError("bench: unknown mechanism '" + mechanism + "' (expected msdmsa or vanilla)");
}

template <typename T>
std::vector<BenchRecord> run_bench(const std::vector<std::string>& mechanisms,
                                   const std::vector<std::size_t>& tokens, const BenchConfig& c,
                                   std::vector<std::string>* warnings) {
  if (c.repeats < 3) throw ConfigError("bench: repeats must be at least 3");
  std::vector<std::size_t> distinct = tokens;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 2) throw ConfigError("bench: need at least two distinct N values");
  for (const auto& m : mechanisms) bench_workspace_bytes(m, 1, c, sizeof(T));  // validates names

  const double resolution = clock_resolution_ns();
  std::vector<BenchRecord> out;
  for (const auto& mech : mechanisms) {
    for (std::size_t n : tokens) {
      Rng rng(c.seed + n);
      const LevelLayout layout = bench_layout(n, c.levels);
      TokenSequence<T> seq{Matrix<T>(n, c.channels), layout};
      rng.fill_normal<T>(seq.tokens.data(), 0.0, 1.0);
      const ReferencePoints<T> refs = reference_points<T>(layout);

      std::function<void()> run;
      DmsaParams<T> dp;
      VanillaParams<T> vp;
      if (mech == "msdmsa") {
        dp = init_dmsa_params<T>(c.channels, c.heads, c.levels, c.points, rng);
        rng.fill_normal<T>(dp.offset_weight.value, 0.0, 0.1);
        rng.fill_normal<T>(dp.attn_weight.value, 0.0, 0.1);
        run = [&] {
          DmsaWorkspace<T> ws;
          auto y = msdmsa_forward(seq, refs, dp, &ws);
          if (y.size() != n) throw StateError("bench: bad output");
        };
      } else {
        vp = init_vanilla_params<T>(c.channels, c.heads, rng);
        run = [&] {
          auto y = vanilla_forward(seq, vp);
          if (y.size() != n) throw StateError("bench: bad output");
        };
      }

      int repeats = c.repeats;
      std::vector<double> times;
      run();  // warm-up
      while (true) {
        times.clear();
        for (int r = 0; r < repeats; ++r) {
          const auto t0 = Clock::now();
          run();
          times.push_back(std::chrono::duration<double, std::nano>(Clock::now() - t0).count());
        }
        const double med = median(times);
        if (med >= 1000.0 * resolution || repeats >= kMaxRepeats) break;
        if (warnings != nullptr) {
          char msg[200];
          std::snprintf(msg, sizeof msg,
                        "%s N=%zu: median %.0f ns is within 1000x of the timer resolution "
                        "(%.0f ns); doubling repeats to %d",
                        mech.c_str(), n, med, resolution, repeats * 2);
          warnings->push_back(msg);
        }
        repeats *= 2;
      }
      BenchRecord rec;
      rec.mechanism = mech;
      rec.tokens = n;
      rec.channels = c.channels;
      rec.heads = c.heads;
      rec.levels = c.levels;
      rec.points = c.points;
      rec.time_ns = median(times);
      rec.workspace_bytes = bench_workspace_bytes(mech, n, c, sizeof(T));
      rec.repeats = repeats;
      out.push_back(rec);
    }
  }
  return out;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw DimensionError("loglog_slope: need at least two (x, y) pairs");
  }
  double mx = 0.0;
  double my = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw DimensionError("loglog_slope: values must be positive");
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw DimensionError("loglog_slope: x values must not all be equal");
  return sxy / sxx;
}

double fitted_exponent(const std::vector<BenchRecord>& records, const std::string& mechanism) {
  std::vector<double> x;
  std::vector<double> y;
  for (const auto& r : records) {
    if (r.mechanism != mechanism) continue;
    x.push_back(static_cast<double>(r.tokens));
    y.push_back(r.time_ns);
  }
  return loglog_slope(x, y);
}

std::string bench_csv(const std::vector<BenchRecord>& records) {
  std::string out = "# cotr-bench v1\nmechanism,n,c,h,l,k,time_ns,workspace_bytes,repeats\n";
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%s,%zu,%d,%d,%d,%d,%.0f,%zu,%d\n", r.mechanism.c_str(),
                  r.tokens, r.channels, r.heads, r.levels, r.points, r.time_ns, r.workspace_bytes,
                  r.repeats);
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

ToyConfig apply_sweep_value(const ToyConfig& base, const std::string& axis,
                            const std::string& value) {
  ToyConfig c = base;
  if (axis == "K") {
    c.points = parse_int(value, "K");
  } else if (axis == "H") {
    c.heads = parse_int(value, "H");
  } else if (axis == "L_D") {
    c.encoder_layers = parse_int(value, "L_D");
  } else if (axis == "scales") {
    if (value == "multi") {
      c.multi_scale = true;
    } else if (value == "single") {
      c.multi_scale = false;
    } else {
      throw ConfigError("sweep: scales takes single or multi, got '" + value + "'");
    }
  } else {
    throw ConfigError("sweep: unknown axis '" + axis + "' (expected K, H, L_D or scales)");
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("sweep: " + axis + "=" + value + " is invalid: " + e.what());
  }
  return c;
}

template <typename T>
std::vector<SweepRecord> run_sweep(const std::string& axis, const std::vector<std::string>& values,
                                   const ToyConfig& base, const std::vector<std::uint64_t>& seeds,
                                   const std::function<void(const SweepRecord&)>& on_record) {
  if (values.empty() || seeds.empty()) throw ConfigError("sweep: need values and seeds");
  // Validate every combination before spending time on training.
  std::vector<ToyConfig> configs;
  for (const auto& v : values) configs.push_back(apply_sweep_value(base, axis, v));
  std::vector<SweepRecord> out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::uint64_t seed : seeds) {
      ToyConfig c = configs[i];
      c.seed = seed;
      const auto result = train_toy<T>(c, sphere_task_for<T>(c));
      SweepRecord rec{axis, values[i], seed, c.iterations, result.final_dice, result.final_loss};
      out.push_back(rec);
      if (on_record) on_record(rec);
    }
  }
  return out;
}

std::string sweep_csv(const std::vector<SweepRecord>& records) {
  std::string out = "# cotr-sweep v1\naxis,value,seed,iterations,dice,final_loss\n";
  char line[256];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%s,%s,%llu,%d,%.6f,%.6f\n", r.axis.c_str(), r.value.c_str(),
                  static_cast<unsigned long long>(r.seed), r.iterations, r.dice, r.final_loss);
    out += line;
  }
  return out;
}

template std::vector<BenchRecord> run_bench<float>(const std::vector<std::string>&,
                                                   const std::vector<std::size_t>&,
                                                   const BenchConfig&, std::vector<std::string>*);
template std::vector<BenchRecord> run_bench<double>(const std::vector<std::string>&,
                                                    const std::vector<std::size_t>&,
                                                    const BenchConfig&, std::vector<std::string>*);
template std::vector<SweepRecord> run_sweep<float>(const std::string&,
                                                   const std::vector<std::string>&,
                                                   const ToyConfig&,
                                                   const std::vector<std::uint64_t>&,
                                                   const std::function<void(const SweepRecord&)>&);
template std::vector<SweepRecord> run_sweep<double>(const std::string&,
                                                    const std::vector<std::string>&,
                                                    const ToyConfig&,
                                                    const std::vector<std::uint64_t>&,
                                                    const std::function<void(const SweepRecord&)>&);

}  // namespace cotr
