// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Exit codes: 0 success, 1 a check failed, 2 usage,
// configuration or input error.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "cotr/bench.hpp"
#include "cotr/config_file.hpp"
#include "cotr/gradcheck.hpp"
#include "cotr/msdmsa.hpp"
#include "cotr/positional_encoding.hpp"
#include "cotr/toy_net.hpp"
#include "cotr/vten.hpp"

namespace fs = std::filesystem;
using namespace cotr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

struct Globals {
  std::uint64_t seed = 0;
  std::string precision = "f64";
  std::string out;
};

bool use_double(const Globals& g) { return vten::parse_dtype(g.precision) == vten::Dtype::f64; }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot write " + path.string());
  f << text;
}

// Writes to --out when given, otherwise stdout.
void emit(const Globals& g, const std::string& text) {
  if (g.out.empty()) {
    std::cout << text;
  } else {
    write_text(g.out, text);
  }
}

// --- gradcheck --------------------------------------------------------------

struct GradcheckArgs {
  std::string module;
  std::string dims;
  std::size_t entries = 0;
  double threshold = 0.0;
  int seeds = 1;
  bool zero_params = false;
  bool inject_fault = false;
};

int cmd_gradcheck(const Globals& g, const GradcheckArgs& a) {
  if (!use_double(g)) throw ConfigError("gradcheck runs in double precision only");
  const auto modules = gradcheck_modules();
  if (std::find(modules.begin(), modules.end(), a.module) == modules.end()) {
    std::string list;
    for (const auto& m : modules) list += " " + m;
    throw ConfigError("unknown module '" + a.module + "'; expected one of:" + list);
  }
  if (a.seeds < 1) throw ConfigError("--seeds must be positive");
  GradCheckOptions o;
  o.max_entries = a.entries;
  o.threshold = a.threshold;
  o.zero_params = a.zero_params;
  o.inject_fault = a.inject_fault;
  if (!a.dims.empty()) {
    const Dims3 d = parse_dims(a.dims, "--dims");
    o.dims_d = d.d;
    o.dims_h = d.h;
    o.dims_w = d.w;
  }
  std::string text;
  bool ok = true;
  for (int s = 0; s < a.seeds; ++s) {
    o.seed = g.seed + static_cast<std::uint64_t>(s);
    const GradCheckReport r = run_gradcheck(a.module, o);
    text += "seed " + std::to_string(o.seed) + "\n" + r.format();
    ok = ok && r.pass();
  }
  emit(g, text);
  return ok ? kExitOk : kExitCheckFailed;
}

// --- oracle -----------------------------------------------------------------

struct OracleArgs {
  int instances = 20;
  double tolerance = 1e-10;
};

int cmd_oracle(const Globals& g, const OracleArgs& a) {
  if (a.instances < 1) throw ConfigError("--instances must be positive");
  Rng rng(g.seed);
  const int level_choices[] = {1, 2, 3};
  const int point_choices[] = {1, 2, 4};
  const int head_choices[] = {1, 2, 6};
  double worst = 0.0;
  std::string text = "# cotr-oracle v1\ninstance,n,c,h,l,k,max_abs_err\n";
  for (int i = 0; i < a.instances; ++i) {
    const int L = level_choices[i % 3];
    const int K = point_choices[(i / 3) % 3];
    const int H = head_choices[(i / 9 + i) % 3];
    const int C = 6 * H;
    std::vector<Volume<double>> pyramid;
    Dims3 d{2 + static_cast<int>(rng.index(2)), 3, 2 + static_cast<int>(rng.index(3))};
    for (int l = 0; l < L; ++l) {
      Volume<double> v(C, d);
      rng.fill_normal<double>(v.data(), 0.0, 1.0);
      pyramid.push_back(std::move(v));
      d = {std::max(1, d.d / 2), std::max(1, d.h / 2), std::max(1, d.w / 2)};
    }
    const TokenSequence<double> seq = flatten_levels(pyramid);
    const auto refs = reference_points<double>(seq.layout);
    auto p = init_dmsa_params<double>(C, H, L, K, rng);
    rng.fill_normal<double>(p.offset_weight.value, 0.0, 0.5);
    rng.fill_normal<double>(p.attn_weight.value, 0.0, 0.5);
    const auto fast = msdmsa_forward(seq, refs, p);
    const auto slow = msdmsa_oracle(seq, refs, p);
    double err = 0.0;
    for (std::size_t j = 0; j < fast.tokens.size(); ++j) {
      err = std::max(err, std::abs(fast.tokens.data()[j] - slow.tokens.data()[j]));
    }
    worst = std::max(worst, err);
    char line[128];
    std::snprintf(line, sizeof line, "%d,%zu,%d,%d,%d,%d,%.3e\n", i, seq.size(), C, H, L, K, err);
    text += line;
  }
  emit(g, text);
  std::fprintf(stderr, "oracle: max abs err %.3e over %d instances (tolerance %.1e)\n", worst,
               a.instances, a.tolerance);
  return worst <= a.tolerance ? kExitOk : kExitCheckFailed;
}

// --- bench ------------------------------------------------------------------

struct BenchArgs {
  std::string mechanisms = "msdmsa,vanilla";
  std::string tokens = "512,1024,2048,4096";
  BenchConfig config;
};

int cmd_bench(const Globals& g, BenchArgs a) {
  a.config.seed = g.seed;
  std::vector<std::size_t> ns;
  for (const auto& s : split_list(a.tokens)) {
    const int n = parse_int(s, "--n");
    if (n <= 0) throw ConfigError("--n values must be positive");
    ns.push_back(static_cast<std::size_t>(n));
  }
  const auto mechs = split_list(a.mechanisms);
  std::vector<std::string> warnings;
  const auto records = use_double(g) ? run_bench<double>(mechs, ns, a.config, &warnings)
                                     : run_bench<float>(mechs, ns, a.config, &warnings);
  for (const auto& w : warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  emit(g, bench_csv(records));
  for (const auto& m : mechs) {
    std::fprintf(stderr, "slope %s %.3f\n", m.c_str(), fitted_exponent(records, m));
  }
  return kExitOk;
}

// --- sweep ------------------------------------------------------------------

struct SweepArgs {
  std::string axis;
  std::string values;
  std::string seeds = "0,1,2,3,4";
  std::string config;
  int iterations = -1;
};

ToyConfig base_config(const std::string& path, int iterations) {
  ToyConfig c = path.empty() ? ToyConfig{} : load_toy_config(path);
  if (iterations >= 0) c.iterations = iterations;
  c.validate();
  return c;
}

int cmd_sweep(const Globals& g, const SweepArgs& a) {
  const ToyConfig base = base_config(a.config, a.iterations);
  std::vector<std::uint64_t> seeds;
  for (const auto& s : split_list(a.seeds)) {
    const int v = parse_int(s, "--seeds");
    if (v < 0) throw ConfigError("--seeds must be non-negative");
    seeds.push_back(g.seed + static_cast<std::uint64_t>(v));
  }
  auto progress = [](const SweepRecord& r) {
    std::fprintf(stderr, "%s=%s seed %llu dice %.4f\n", r.axis.c_str(), r.value.c_str(),
                 static_cast<unsigned long long>(r.seed), r.dice);
  };
  const auto values = split_list(a.values);
  const auto records = use_double(g) ? run_sweep<double>(a.axis, values, base, seeds, progress)
                                     : run_sweep<float>(a.axis, values, base, seeds, progress);
  emit(g, sweep_csv(records));
  for (const auto& v : values) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : records) {
      if (r.value == v) {
        sum += r.dice;
        ++n;
      }
    }
    std::fprintf(stderr, "mean dice %s=%s %.4f\n", a.axis.c_str(), v.c_str(), sum / n);
  }
  return kExitOk;
}

// --- train-demo -------------------------------------------------------------

struct TrainArgs {
  std::string config;
  int iterations = -1;
};

template <typename T>
int train_demo(const Globals& g, const ToyConfig& config, vten::Dtype dtype) {
  const fs::path dir = g.out.empty() ? fs::path("train-demo") : fs::path(g.out);
  fs::create_directories(dir / "params");
  write_text(dir / "config.txt", format_toy_config(config));
  const auto sample = sphere_task_for<T>(config);

  std::ofstream trace(dir / "trace.csv");
  trace << "# cotr-trace v1\niter,loss,dice\n";
  auto result = train_toy<T>(config, sample, [&](const TraceRow& r) {
    char line[96];
    std::snprintf(line, sizeof line, "%d,%.9g,%.6f\n", r.iteration, r.loss, r.dice);
    trace << line;
  });
  trace.close();

  result.network.visit([&](const std::string& name, Param<T>& p) {
    std::vector<std::uint32_t> dims;
    for (auto s : p.shape) dims.push_back(static_cast<std::uint32_t>(s));
    std::vector<double> values(p.value.begin(), p.value.end());
    vten::write(dir / "params" / (name + ".vten"), vten::from_values(dims, values, dtype));
  });
  auto labels_file = [&](const LabelVolume& l) {
    std::vector<double> v(l.labels.begin(), l.labels.end());
    const Dims3 d = l.dims;
    return vten::from_values({1, static_cast<std::uint32_t>(d.d), static_cast<std::uint32_t>(d.h),
                              static_cast<std::uint32_t>(d.w)},
                             v, dtype);
  };
  vten::write(dir / "prediction.vten", labels_file(result.prediction));
  vten::write(dir / "labels.vten", labels_file(sample.labels));
  vten::write(dir / "image.vten", vten::from_volume(sample.image, dtype));
  std::printf("final dice %.4f loss %.6f after %d iterations; outputs in %s\n", result.final_dice,
              result.final_loss, config.iterations, dir.string().c_str());
  return kExitOk;
}

int cmd_train(const Globals& g, const TrainArgs& a) {
  ToyConfig c = base_config(a.config, a.iterations);
  c.seed = c.seed + g.seed;
  const auto dtype = vten::parse_dtype(g.precision);
  return dtype == vten::Dtype::f64 ? train_demo<double>(g, c, dtype)
                                   : train_demo<float>(g, c, dtype);
}

// --- pe-dump ----------------------------------------------------------------

struct PeArgs {
  std::string dims;
  int channels = 0;
};

int cmd_pe_dump(const Globals& g, const PeArgs& a) {
  if (g.out.empty()) throw ConfigError("pe-dump needs --out FILE");
  const Dims3 d = parse_dims(a.dims, "--dims");
  if (!d.positive()) throw ConfigError("--dims must be positive");
  const Matrix<double> table = build_pe_table<double>(d, a.channels);
  vten::write(g.out, vten::from_matrix(table, vten::parse_dtype(g.precision)));
  std::printf("wrote %zu x %zu positional encoding to %s\n", table.rows(), table.cols(),
              g.out.c_str());
  return kExitOk;
}

// --- tensor -----------------------------------------------------------------

int cmd_tensor_inspect(const std::string& path) {
  const vten::TensorFile t = vten::read(path);
  std::string dims;
  for (std::size_t i = 0; i < t.dims.size(); ++i) dims += (i ? "," : "") + std::to_string(t.dims[i]);
  std::printf("file %s\ndtype %s\ndims %s\nelements %zu\n", path.c_str(),
              vten::dtype_name(t.dtype).c_str(), dims.c_str(), t.values.size());
  if (!t.values.empty()) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    double sum = 0.0;
    for (double v : t.values) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      sum += v;
    }
    std::printf("min %.17g\nmax %.17g\nmean %.17g\n", lo, hi, sum / t.values.size());
  }
  return kExitOk;
}

int cmd_tensor_convert(const Globals& g, const std::string& path, const std::string& to) {
  if (g.out.empty()) throw ConfigError("tensor convert needs --out FILE");
  vten::TensorFile t = vten::read(path);
  t.dtype = vten::parse_dtype(to);
  if (t.dtype == vten::Dtype::f32) {
    for (double& v : t.values) v = static_cast<double>(static_cast<float>(v));
  }
  vten::write(g.out, t);
  std::printf("wrote %s as %s\n", g.out.c_str(), vten::dtype_name(t.dtype).c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deformable multi-scale attention kernels, checks and benchmarks"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  app.add_option("--out", g.out, "Output file or directory");

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  gc->add_option("--module", ga.module, "Module to check")->required();
  gc->add_option("--dims", ga.dims, "Spatial dims D,H,W for volume-shaped modules");
  gc->add_option("--entries", ga.entries, "Entries sampled per group (0 = all)");
  gc->add_option("--threshold", ga.threshold, "Relative error threshold");
  gc->add_option("--seeds", ga.seeds, "Number of consecutive seeds");
  gc->add_flag("--zero-params", ga.zero_params, "Parameter-free configuration");
  gc->add_flag("--inject-fault", ga.inject_fault, "Corrupt one analytic gradient group");

  OracleArgs oa;
  auto* oc = app.add_subcommand("oracle", "Fast MS-DMSA forward vs the direct loop evaluation");
  oc->add_option("--instances", oa.instances, "Random instances");
  oc->add_option("--tolerance", oa.tolerance, "Max abs error");

  BenchArgs ba;
  auto* bc = app.add_subcommand("bench", "Time deformable vs full attention across N");
  bc->add_option("--mechanism", ba.mechanisms, "Comma list of msdmsa, vanilla");
  bc->add_option("--n", ba.tokens, "Comma list of token counts");
  bc->add_option("--channels", ba.config.channels);
  bc->add_option("--heads", ba.config.heads);
  bc->add_option("--levels", ba.config.levels);
  bc->add_option("--points", ba.config.points);
  bc->add_option("--repeats", ba.config.repeats);

  SweepArgs sa;
  auto* sc = app.add_subcommand("sweep", "Train the toy network across one hyperparameter");
  sc->add_option("--axis", sa.axis, "K, H, L_D or scales")->required();
  sc->add_option("--values", sa.values, "Comma list of values")->required();
  sc->add_option("--seeds", sa.seeds, "Comma list of seed offsets");
  sc->add_option("--config", sa.config, "Base toy config file");
  sc->add_option("--iterations", sa.iterations, "Override iterations");

  TrainArgs ta;
  auto* tc = app.add_subcommand("train-demo", "Train the toy network on a synthetic volume");
  tc->add_option("--config", ta.config, "Toy config file");
  tc->add_option("--iterations", ta.iterations, "Override iterations");

  PeArgs pa;
  auto* pc = app.add_subcommand("pe-dump", "Write a positional-encoding table");
  pc->add_option("--dims", pa.dims, "D,H,W")->required();
  pc->add_option("--channels", pa.channels, "Channels (multiple of 6)")->required();

  auto* tensor = app.add_subcommand("tensor", "Inspect or convert .vten files");
  tensor->require_subcommand(1);
  std::string inspect_path;
  auto* ti = tensor->add_subcommand("inspect", "Print dtype, dims and statistics");
  ti->add_option("file", inspect_path)->required();
  std::string convert_path;
  std::string convert_to;
  auto* tv = tensor->add_subcommand("convert", "Change precision");
  tv->add_option("file", convert_path)->required();
  tv->add_option("--to", convert_to, "f32 or f64")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gc) return cmd_gradcheck(g, ga);
    if (*oc) return cmd_oracle(g, oa);
    if (*bc) return cmd_bench(g, ba);
    if (*sc) return cmd_sweep(g, sa);
    if (*tc) return cmd_train(g, ta);
    if (*pc) return cmd_pe_dump(g, pa);
    if (*ti) return cmd_tensor_inspect(inspect_path);
    if (*tv) return cmd_tensor_convert(g, convert_path, convert_to);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitCheckFailed;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
