// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance runner. Prints one "[PASS]" or "[FAIL]" line per criterion and
// exits non-zero when any requested criterion fails.
//
//   cotr_acceptance                     all criteria
//   cotr_acceptance --criterion 5       one criterion (repeatable)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cotr/bench.hpp"
#include "cotr/gradcheck.hpp"
#include "cotr/msdmsa.hpp"
#include "cotr/positional_encoding.hpp"
#include "cotr/toy_net.hpp"
#include "cotr/vten.hpp"

using namespace cotr;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// --- shared MS-DMSA instances ------------------------------------------------

struct Instance {
  int levels, points, heads;
  TokenSequence<double> seq;
  ReferencePoints<double> refs;
  DmsaParams<double> params;
};

// Every (L, K, H) combination with N <= 128 and non-trivial offsets and
// attention logits.
std::vector<Instance> dmsa_instances(std::uint64_t seed) {
  std::vector<Instance> out;
  Rng rng(seed);
  for (int L : {1, 2, 3})
    for (int K : {1, 2, 4})
      for (int H : {1, 2, 6}) {
        const int C = 12;
        std::vector<Volume<double>> pyramid;
        Dims3 d{2 + static_cast<int>(rng.index(3)), 3 + static_cast<int>(rng.index(2)),
                2 + static_cast<int>(rng.index(4))};
        for (int l = 0; l < L; ++l) {
          Volume<double> v(C, d);
          rng.fill_normal<double>(v.data(), 0.0, 1.0);
          pyramid.push_back(std::move(v));
          d = {std::max(1, d.d / 2), std::max(1, d.h / 2), std::max(1, d.w / 2)};
        }
        Instance inst{L, K, H, flatten_levels(pyramid), {}, init_dmsa_params<double>(C, H, L, K, rng)};
        inst.refs = reference_points<double>(inst.seq.layout);
        rng.fill_normal<double>(inst.params.offset_weight.value, 0.0, 0.5);
        rng.fill_normal<double>(inst.params.attn_weight.value, 0.0, 1.0);
        rng.fill_normal<double>(inst.params.attn_bias.value, 0.0, 1.0);
        out.push_back(std::move(inst));
      }
  return out;
}

// --- 1 -----------------------------------------------------------------------

Outcome oracle_equivalence() {
  const auto instances = dmsa_instances(2026);
  double worst = 0.0;
  std::size_t max_n = 0;
  for (const auto& in : instances) {
    const auto fast = msdmsa_forward(in.seq, in.refs, in.params);
    const auto slow = msdmsa_oracle(in.seq, in.refs, in.params);
    for (std::size_t j = 0; j < fast.tokens.size(); ++j) {
      worst = std::max(worst, std::abs(fast.tokens.data()[j] - slow.tokens.data()[j]));
    }
    max_n = std::max(max_n, in.seq.size());
  }
  return {worst <= 1e-10 && max_n <= 128,
          fmt("%zu instances (L,K,H grid), N<=%zu, max abs err %.2e (tol 1e-10)",
              instances.size(), max_n, worst)};
}

// --- 2 -----------------------------------------------------------------------

Outcome gradient_checks() {
  const std::vector<std::string> modules = {"tensor-core", "msdmsa", "ffn",    "detrans",
                                            "encoder",     "loss",   "toy-net"};
  std::string failures;
  double worst_core = 0.0;
  double worst_net = 0.0;
  std::size_t groups = 0;
  for (const auto& m : modules) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      GradCheckOptions o;
      o.seed = seed;
      const auto r = run_gradcheck(m, o);
      for (const auto& g : r.groups) {
        ++groups;
        double& worst = m == "toy-net" ? worst_net : worst_core;
        worst = std::max(worst, g.max_rel_err);
        if (!g.pass || g.checked == 0) {
          failures += " " + m + "/" + g.name + "@" + std::to_string(seed);
        }
      }
    }
  }
  return {failures.empty(),
          fmt("%zu groups over 5 seeds; max rel err %.2e (tol 1e-6), toy net %.2e (tol 1e-5)%s",
              groups, worst_core, worst_net,
              failures.empty() ? "" : ("; failing:" + failures).c_str())};
}

// --- 3 -----------------------------------------------------------------------

template <typename T>
void attention_sums(const TokenSequence<T>& seq, const ReferencePoints<T>& refs,
                    const DmsaParams<T>& p, double& worst_sum, bool& in_range, std::size_t& rows) {
  DmsaWorkspace<T> ws;
  msdmsa_forward(seq, refs, p, &ws);
  const int per_head = p.samples_per_head();
  for (std::size_t q = 0; q < seq.size(); ++q) {
    for (int i = 0; i < p.heads; ++i) {
      double s = 0.0;
      for (int j = 0; j < per_head; ++j) {
        const double w = static_cast<double>(ws.weights(q, i * per_head + j));
        in_range = in_range && w >= 0.0 && w <= 1.0;
        s += w;
      }
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      ++rows;
    }
  }
}

Outcome attention_normalization() {
  double worst = 0.0;
  bool in_range = true;
  std::size_t rows = 0;
  auto instances = dmsa_instances(7);
  for (auto& in : instances) {
    attention_sums(in.seq, in.refs, in.params, worst, in_range, rows);
    // Same instance in single precision with logits scaled up 20x.
    DmsaParams<float> pf;
    pf.channels = in.params.channels;
    pf.heads = in.params.heads;
    pf.levels = in.params.levels;
    pf.points = in.params.points;
    auto cast = [](const Param<double>& p, double scale) {
      Param<float> q(p.shape);
      for (std::size_t i = 0; i < p.size(); ++i) q.value[i] = static_cast<float>(p.value[i] * scale);
      return q;
    };
    pf.value_weight = cast(in.params.value_weight, 1);
    pf.value_bias = cast(in.params.value_bias, 1);
    pf.offset_weight = cast(in.params.offset_weight, 1);
    pf.offset_bias = cast(in.params.offset_bias, 1);
    pf.attn_weight = cast(in.params.attn_weight, 20);
    pf.attn_bias = cast(in.params.attn_bias, 20);
    pf.out_weight = cast(in.params.out_weight, 1);
    pf.out_bias = cast(in.params.out_bias, 1);
    const TokenSequence<float> sf{cast_matrix<float>(in.seq.tokens), in.seq.layout};
    attention_sums(sf, reference_points<float>(sf.layout), pf, worst, in_range, rows);
  }
  return {worst <= 1e-6 && in_range,
          fmt("%zu (query, head) rows in f64 and f32, max |sum - 1| %.2e (tol 1e-6), all weights in "
              "[0,1]: %s",
              rows, worst, in_range ? "yes" : "no")};
}

// --- 4 -----------------------------------------------------------------------

Outcome shape_law() {
  std::size_t configs = 0;
  std::string failures;
  Rng rng(4);
  for (int levels : {1, 2, 3})
    for (Dims3 input : {Dims3{8, 16, 16}, Dims3{8, 32, 16}, Dims3{16, 32, 48}, Dims3{24, 16, 64}})
      for (int base : {2, 4})
        for (int channels : {6, 12}) {
          ToyConfig c;
          c.input = input;
          c.levels = levels;
          c.base_channels = base;
          c.token_channels = channels;
          c.heads = 1;
          c.points = 1;
          c.encoder_layers = 0;
          c.ffn_width = 4;
          try {
            c.validate();
          } catch (const ConfigError&) {
            continue;
          }
          ++configs;
          ToyNetwork<float> net(c, rng);
          Volume<float> image(1, input);
          rng.fill_normal<float>(image.data(), 0.0, 1.0);
          const auto feats = net.encode(image);
          for (int l = 1; l <= levels; ++l) {
            const Dims3 expect{input.d >> l, input.h >> (l + 1), input.w >> (l + 1)};
            const auto& f = feats[l - 1];
            if (f.dims() != expect || f.channels() != channels) {
              failures += " " + to_string(input) + "/L" + std::to_string(levels) + "/l" +
                          std::to_string(l) + "=" + to_string(f.dims());
            }
          }
        }
  return {failures.empty() && configs > 0,
          fmt("%zu valid configs, stage-l dims == (D/2^l, H/2^(l+1), W/2^(l+1))%s", configs,
              failures.empty() ? "" : ("; mismatches:" + failures).c_str())};
}

// --- 5 -----------------------------------------------------------------------

Outcome complexity() {
  BenchConfig c;  // C=96, H=6, L=3, K=4
  const std::vector<std::size_t> tokens = {512, 1024, 2048, 4096};
  std::vector<std::string> warnings;
  const auto records = run_bench<double>({"msdmsa", "vanilla"}, tokens, c, &warnings);
  const double sd = fitted_exponent(records, "msdmsa");
  const double sv = fitted_exponent(records, "vanilla");
  const double ratio = static_cast<double>(bench_workspace_bytes("vanilla", 4096, c, 8)) /
                       static_cast<double>(bench_workspace_bytes("msdmsa", 4096, c, 8));
  const bool ok = sd >= 0.8 && sd <= 1.3 && sv >= 1.7 && sv <= 2.3 && ratio > 10.0;
  return {ok, fmt("slope msdmsa %.3f (want [0.8,1.3]), vanilla %.3f (want [1.7,2.3]), workspace "
                  "ratio at N=4096 %.1fx (want >10x)",
                  sd, sv, ratio)};
}

// --- 6 and 7 -----------------------------------------------------------------

ToyConfig toy_task(std::uint64_t seed, bool multi_scale) {
  ToyConfig c;  // (16,48,48), C=24, L=2, L_D=2, H=2, K=4, c=2, lr 0.01, momentum 0.99, 300 it
  c.seed = seed;
  c.multi_scale = multi_scale;
  return c;
}

std::vector<double> train_seeds(bool multi_scale) {
  std::vector<double> dice;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ToyConfig c = toy_task(seed, multi_scale);
    const auto t0 = std::chrono::steady_clock::now();
    double d = 0.0;
    try {
      d = train_toy<float>(c, sphere_task_for<float>(c)).final_dice;
    } catch (const DivergenceError& e) {
      std::fprintf(stderr, "  seed %llu diverged: %s\n", static_cast<unsigned long long>(seed),
                   e.what());
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "  %s seed %llu: dice %.4f (%.0f s)\n", multi_scale ? "multi" : "single",
                 static_cast<unsigned long long>(seed), d, secs);
    dice.push_back(d);
  }
  return dice;
}

std::string list(const std::vector<double>& v) {
  std::string s;
  for (double d : v) s += (s.empty() ? "" : " ") + fmt("%.4f", d);
  return s;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double d : v) s += d;
  return s / static_cast<double>(v.size());
}

Outcome toy_overfit(const std::vector<double>& dice) {
  const auto hits = std::count_if(dice.begin(), dice.end(), [](double d) { return d >= 0.95; });
  return {hits >= 4, fmt("%ld/5 seeds reach Dice >= 0.95 in 300 iterations (need 4): %s",
                         static_cast<long>(hits), list(dice).c_str())};
}

Outcome multi_vs_single(const std::vector<double>& multi, const std::vector<double>& single) {
  const double m = mean(multi);
  const double s = mean(single);
  return {m >= s, fmt("mean Dice multi-scale %.4f >= single-scale %.4f (single: %s)", m, s,
                      list(single).c_str())};
}

// --- 8 -----------------------------------------------------------------------

template <typename T>
bool same_bits(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

Outcome roundtrips() {
  std::string failures;
  Rng rng(8);

  // flatten / unflatten
  std::vector<Volume<double>> levels;
  for (Dims3 d : {Dims3{4, 6, 6}, Dims3{2, 3, 3}, Dims3{1, 2, 1}}) {
    Volume<double> v(12, d);
    rng.fill_normal<double>(v.data(), 0.0, 1.0);
    levels.push_back(std::move(v));
  }
  const auto back = unflatten(flatten_levels(levels));
  for (std::size_t l = 0; l < levels.size(); ++l) {
    if (!back[l].same_shape(levels[l]) || !same_bits<double>(back[l].data(), levels[l].data())) {
      failures += " flatten";
    }
  }

  // positional encoding vs direct long-double evaluation
  double pe_err = 0.0;
  for (int channels : {6, 24, 96}) {
    const Dims3 dims{4, 5, 6};
    const auto table = build_pe_table<double>(dims, channels);
    const int per_axis = channels / 3;
    for (std::size_t row = 0; row < dims.count(); ++row) {
      const int pos[3] = {static_cast<int>(row / (dims.h * dims.w)),
                          static_cast<int>(row / dims.w % dims.h), static_cast<int>(row % dims.w)};
      for (int ch = 0; ch < channels; ++ch) {
        const int j = ch % per_axis;
        const long double f = 1.0L / std::pow(10000.0L, (long double)(2 * (j / 2)) / per_axis);
        const long double x = pos[ch / per_axis] * f;
        const long double want = j % 2 == 0 ? std::sin(x) : std::cos(x);
        pe_err = std::max(pe_err, std::abs(table(row, ch) - static_cast<double>(want)));
      }
    }
  }
  if (pe_err > 1e-14) failures += " pe";

  // .vten in both precisions
  Volume<double> vd(3, {2, 3, 4});
  rng.fill_normal<double>(vd.data(), 0.0, 1.0);
  const auto rd = vten::to_volume<double>(
      vten::decode(vten::encode(vten::from_volume(vd, vten::Dtype::f64))));
  if (!same_bits<double>(rd.data(), vd.data())) failures += " vten-f64";
  const auto vf = cast_volume<float>(vd);
  const auto bytes = vten::encode(vten::from_volume(vf, vten::Dtype::f32));
  const auto rf = vten::to_volume<float>(vten::decode(bytes));
  if (!same_bits<float>(rf.data(), vf.data()) || vten::encode(vten::decode(bytes)) != bytes) {
    failures += " vten-f32";
  }

  // perfect prediction
  LabelVolume labels({2, 4, 4});
  for (auto& v : labels.labels) v = static_cast<int>(rng.index(3));
  const auto y = one_hot<double>(labels, 3);
  const double from_probs = dice_ce_from_probs(y, y, 1e-5).loss;
  Volume<double> logits(3, y.dims());
  for (std::size_t i = 0; i < y.size(); ++i) logits.data()[i] = y.data()[i] > 0 ? 50.0 : -50.0;
  const double from_logits = dice_ce_loss(logits, y, 1e-5).loss;
  const float f32 = dice_ce_from_probs(cast_volume<float>(y), cast_volume<float>(y), 1e-5f).loss;
  if (from_probs != -1.0 || from_logits != -1.0 || f32 != -1.0f) failures += " perfect-loss";

  return {failures.empty(),
          fmt("flatten/unflatten and .vten (f32, f64) bitwise; PE max err %.2e (tol 1e-14); "
              "perfect-prediction loss %.17g / %.17g / %.9g (want -1)%s",
              pe_err, from_probs, from_logits, static_cast<double>(f32),
              failures.empty() ? "" : ("; failing:" + failures).c_str())};
}

const std::map<int, std::string> kNames = {
    {1, "oracle-equivalence"},      {2, "gradient-checks"}, {3, "attention-normalization"},
    {4, "shape-law"},               {5, "complexity"},      {6, "toy-overfit"},
    {7, "multi-vs-single-scale"},   {8, "roundtrips-and-encodings"}};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> wanted;
  app.add_option("--criterion", wanted, "Criterion number 1-8 (repeatable; default all)")
      ->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);
  if (wanted.empty()) wanted = {1, 2, 3, 4, 5, 6, 7, 8};
  std::sort(wanted.begin(), wanted.end());
  wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());

  std::optional<std::vector<double>> multi;
  bool all_pass = true;
  for (int n : wanted) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      switch (n) {
        case 1: r = oracle_equivalence(); break;
        case 2: r = gradient_checks(); break;
        case 3: r = attention_normalization(); break;
        case 4: r = shape_law(); break;
        case 5: r = complexity(); break;
        case 6:
          if (!multi) multi = train_seeds(true);
          r = toy_overfit(*multi);
          break;
        case 7: {
          if (!multi) multi = train_seeds(true);
          r = multi_vs_single(*multi, train_seeds(false));
          break;
        }
        case 8: r = roundtrips(); break;
      }
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] %d %s: %s (%.1f s)\n", r.pass ? "PASS" : "FAIL", n, kNames.at(n).c_str(),
                r.detail.c_str(), secs);
    std::fflush(stdout);
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}
