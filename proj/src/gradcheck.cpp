// Copyright 2026 The cotr-kernels Authors
// SPDX-License-Identifier: Apache-2.0

#include "cotr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>

#include "cotr/detrans.hpp"
#include "cotr/error.hpp"
#include "cotr/msdmsa.hpp"
#include "cotr/ops.hpp"
#include "cotr/random.hpp"
#include "cotr/toy_net.hpp"

namespace cotr {

bool GradCheckReport::pass() const {
  return std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.pass; });
}

std::string GradCheckReport::format() const {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "gradcheck %s (threshold %.1e)\n", module.c_str(), threshold);
  out += line;
  std::snprintf(line, sizeof line, "%-40s %8s %8s %8s %12s %12s  %s\n", "group", "size", "checked",
                "skipped", "max_abs", "max_rel", "status");
  out += line;
  for (const auto& g : groups) {
    std::snprintf(line, sizeof line, "%-40s %8zu %8zu %8zu %12.3e %12.3e  %s\n", g.name.c_str(),
                  g.size, g.checked, g.skipped, g.max_abs_err, g.max_rel_err,
                  g.pass ? "ok" : "FAIL");
    out += line;
  }
  out += pass() ? "result: PASS\n" : "result: FAIL\n";
  return out;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

namespace {

using Signature = std::vector<std::int64_t>;

struct Probe {
  double f0;
  Signature sig0;
};

// Numeric derivative on the piece containing the unperturbed point.
std::optional<double> numeric_derivative(GradProblem& p, std::span<double> values, std::size_t i,
                                         const Probe& base, double h0) {
  const double v0 = values[i];
  Signature sp;
  Signature sm;
  auto at = [&](double v, Signature* sig) {
    values[i] = v;
    const double f = p.evaluate(sig);
    values[i] = v0;
    return f;
  };
  for (double h : {h0, h0 / 4.0, h0 / 16.0}) {
    const double fp = at(v0 + h, &sp);
    const double fm = at(v0 - h, &sm);
    if (sp == base.sig0 && sm == base.sig0) return (fp - fm) / (2.0 * h);
  }
  for (double h : {h0, h0 / 16.0}) {
    for (double s : {1.0, -1.0}) {
      const double f1 = at(v0 + s * h, &sp);
      const double f2 = at(v0 + 2.0 * s * h, &sm);
      if (sp == base.sig0 && sm == base.sig0) {
        return s * (-3.0 * base.f0 + 4.0 * f1 - f2) / (2.0 * h);
      }
    }
  }
  return std::nullopt;
}

}  // namespace

GradGroupResult check_group(GradProblem& problem, std::size_t group, const GradCheckOptions& options,
                            double threshold) {
  auto& g = problem.groups.at(group);
  GradGroupResult r;
  r.name = g.name;
  r.size = g.values.size();
  if (g.analytic.size() != g.values.size()) {
    throw StateError("gradcheck: analytic gradient size mismatch for " + g.name);
  }
  Probe base;
  base.f0 = problem.evaluate(&base.sig0);

  std::vector<std::size_t> order(r.size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(options.seed * 1315423911ULL + group);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(rng.next()));
  const std::size_t want =
      options.max_entries == 0 ? r.size : std::min(options.max_entries, r.size);

  std::vector<std::pair<double, double>> pairs;  // (analytic, numeric)
  for (std::size_t idx : order) {
    if (pairs.size() >= want) break;
    const auto n = numeric_derivative(problem, g.values, idx, base, options.step);
    if (!n) {
      ++r.skipped;
      continue;
    }
    pairs.emplace_back(g.analytic[idx], *n);
  }
  r.checked = pairs.size();
  double gmax = 0.0;
  for (const auto& [a, n] : pairs) gmax = std::max(gmax, std::abs(n));
  const double floor = std::max(1e-3 * gmax, 1e-4 * std::max(1.0, std::abs(base.f0)));
  for (const auto& [a, n] : pairs) {
    const double abs_err = std::abs(a - n);
    const double rel = abs_err / std::max({std::abs(a), std::abs(n), floor});
    r.max_abs_err = std::max(r.max_abs_err, abs_err);
    r.max_rel_err = std::max(r.max_rel_err, rel);
  }
  // A group whose every sampled entry sat on a piece boundary is unverified.
  r.pass = r.max_rel_err < threshold && (r.checked > 0 || r.size == 0);
  return r;
}

// ---------------------------------------------------------------------------
// Problem builders
// ---------------------------------------------------------------------------

namespace {

template <typename S>
std::shared_ptr<S> make_state() {
  return std::make_shared<S>();
}

void add_group(GradProblem& p, std::string name, std::span<double> values,
               std::vector<double> analytic) {
  p.groups.push_back({std::move(name), values, std::move(analytic)});
}

void add_param(GradProblem& p, const std::string& name, Param<double>& param) {
  add_group(p, name, param.value, param.grad);
}

std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

double project(std::span<const double> r, std::span<const double> y) {
  if (r.size() != y.size()) throw DimensionError("gradcheck: projection size mismatch");
  return dot<double>(r, y);
}

Dims3 pick_dims(const GradCheckOptions& o, Dims3 fallback) {
  Dims3 d = fallback;
  if (o.dims_d > 0) d.d = o.dims_d;
  if (o.dims_h > 0) d.h = o.dims_h;
  if (o.dims_w > 0) d.w = o.dims_w;
  return d;
}

Volume<double> random_volume(int channels, Dims3 dims, Rng& rng, double scale = 1.0) {
  Volume<double> v(channels, dims);
  rng.fill_normal<double>(v.data(), 0.0, scale);
  return v;
}

Matrix<double> random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Matrix<double> m(rows, cols);
  rng.fill_normal<double>(m.data(), 0.0, scale);
  return m;
}

// Sampling cell and clamp side of every deformable sampling coordinate.
void location_signature(const DmsaWorkspace<double>& ws, const DmsaParams<double>& p,
                        Signature& sig) {
  const int L = p.levels;
  const int K = p.points;
  for (std::size_t q = 0; q < ws.locations.rows(); ++q) {
    auto row = ws.locations.row(q);
    for (std::size_t col = 0; col < row.size(); ++col) {
      const int axis = static_cast<int>(col % 3);
      const int l = static_cast<int>(col / 3 / K) % L;
      const Dims3& dims = ws.layout.dims(l);
      const int n = axis == 0 ? dims.d : axis == 1 ? dims.h : dims.w;
      const double c = row[col];
      if (c <= 0.0) {
        sig.push_back(-1);
      } else if (c >= n - 1) {
        sig.push_back(n);
      } else {
        sig.push_back(static_cast<std::int64_t>(std::floor(c)));
      }
    }
  }
}

void positive_signature(std::span<const double> values, Signature& sig) {
  std::int64_t word = 0;
  int bits = 0;
  for (double v : values) {
    word = (word << 1) | (v > 0.0 ? 1 : 0);
    if (++bits == 62) {
      sig.push_back(word);
      word = 0;
      bits = 0;
    }
  }
  sig.push_back(word);
}

void detrans_signature(const DeTransWorkspace<double>& ws, const DeTransLayerParams<double>& p,
                       Signature& sig) {
  location_signature(ws.attn, p.attn, sig);
  positive_signature(ws.ffn.hidden.data(), sig);
}

// --- primitives -------------------------------------------------------------

GradProblem matmul_problem(Rng& rng) {
  struct S {
    Matrix<double> a, b, r;
  };
  auto st = make_state<S>();
  st->a = random_matrix(5, 7, rng);
  st->b = random_matrix(7, 3, rng);
  st->r = random_matrix(5, 3, rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature*) { return project(st->r.data(), matmul(st->a, st->b).data()); };
  auto g = matmul_backward(st->a, st->b, st->r);
  add_group(p, "a", st->a.data(), to_vector(g.da.data()));
  add_group(p, "b", st->b.data(), to_vector(g.db.data()));
  return p;
}

GradProblem linear_problem(Rng& rng) {
  struct S {
    Matrix<double> x, r;
    Param<double> w, b;
  };
  auto st = make_state<S>();
  st->x = random_matrix(6, 5, rng);
  st->w = Param<double>({4, 5});
  st->b = Param<double>({4});
  rng.fill_normal<double>(st->w.value, 0.0, 1.0);
  rng.fill_normal<double>(st->b.value, 0.0, 1.0);
  st->r = random_matrix(6, 4, rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature*) { return project(st->r.data(), linear(st->x, st->w, st->b).data()); };
  Matrix<double> dx = linear_backward(st->x, st->w, st->b, st->r);
  add_group(p, "x", st->x.data(), to_vector(dx.data()));
  add_param(p, "weight", st->w);
  add_param(p, "bias", st->b);
  return p;
}

GradProblem softmax_problem(Rng& rng) {
  struct S {
    std::vector<double> z, r;
  };
  auto st = make_state<S>();
  st->z.resize(12);
  st->r.resize(12);
  rng.fill_normal<double>(st->z, 0.0, 2.0);
  rng.fill_normal<double>(st->r, 0.0, 1.0);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature*) { return project(st->r, softmax<double>(st->z)); };
  const auto probs = softmax<double>(st->z);
  add_group(p, "logits", st->z, softmax_backward<double>(probs, st->r));
  return p;
}

GradProblem layer_norm_problem(Rng& rng) {
  struct S {
    Matrix<double> x, r;
    Param<double> gain, bias;
  };
  auto st = make_state<S>();
  st->x = random_matrix(4, 12, rng, 2.0);
  st->gain = Param<double>({12});
  st->bias = Param<double>({12});
  rng.fill_normal<double>(st->gain.value, 1.0, 0.3);
  rng.fill_normal<double>(st->bias.value, 0.0, 0.3);
  st->r = random_matrix(4, 12, rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature*) {
    return project(st->r.data(), layer_norm_rows(st->x, st->gain, st->bias).data());
  };
  RowNormCache<double> cache;
  layer_norm_rows(st->x, st->gain, st->bias, kNormEps, &cache);
  Matrix<double> dx = layer_norm_rows_backward(cache, st->gain, st->bias, st->r);
  add_group(p, "x", st->x.data(), to_vector(dx.data()));
  add_param(p, "gain", st->gain);
  add_param(p, "bias", st->bias);
  return p;
}

GradProblem conv_problem(Rng& rng, const GradCheckOptions& o, bool transposed) {
  struct S {
    Volume<double> x, r;
    std::vector<double> w, b;
    ConvGeometry geo;
    bool transposed;
  };
  auto st = make_state<S>();
  st->transposed = transposed;
  if (transposed) {
    st->geo = ConvGeometry{3, 2, {2, 2, 2}, {2, 2, 2}, {0, 0, 0}};
    st->x = random_volume(3, pick_dims(o, {2, 3, 3}), rng);
  } else {
    st->geo = ConvGeometry{2, 3, {3, 3, 3}, {1, 2, 2}, {1, 1, 1}};
    st->x = random_volume(2, pick_dims(o, {4, 5, 6}), rng);
  }
  st->w.resize(st->geo.weight_size());
  st->b.resize(st->geo.out_channels);
  rng.fill_normal<double>(st->w, 0.0, 0.5);
  rng.fill_normal<double>(st->b, 0.0, 0.5);
  auto run = [st]() {
    return st->transposed ? transposed_conv3d<double>(st->x, st->w, st->b, st->geo)
                          : conv3d<double>(st->x, st->w, st->b, st->geo);
  };
  const Volume<double> y = run();
  st->r = random_volume(y.channels(), y.dims(), rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st, run](Signature*) { return project(st->r.data(), run().data()); };
  std::vector<double> dw(st->w.size());
  std::vector<double> db(st->b.size());
  Volume<double> dx =
      transposed ? transposed_conv3d_backward<double>(st->x, st->w, st->geo, st->r, dw, db)
                 : conv3d_backward<double>(st->x, st->w, st->geo, st->r, dw, db);
  add_group(p, "x", st->x.data(), to_vector(dx.data()));
  add_group(p, "weight", st->w, dw);
  add_group(p, "bias", st->b, db);
  return p;
}

GradProblem instance_norm_problem(Rng& rng, const GradCheckOptions& o) {
  struct S {
    Volume<double> x, r;
    std::vector<double> gain, bias;
  };
  auto st = make_state<S>();
  st->x = random_volume(3, pick_dims(o, {3, 4, 5}), rng, 2.0);
  st->gain.resize(3);
  st->bias.resize(3);
  rng.fill_normal<double>(st->gain, 1.0, 0.3);
  rng.fill_normal<double>(st->bias, 0.0, 0.3);
  st->r = random_volume(3, st->x.dims(), rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature*) {
    return project(st->r.data(), instance_norm<double>(st->x, st->gain, st->bias).data());
  };
  InstanceNormCache<double> cache;
  instance_norm<double>(st->x, st->gain, st->bias, kNormEps, &cache);
  std::vector<double> dg(3), db(3);
  Volume<double> dx = instance_norm_backward<double>(cache, st->gain, st->r, dg, db);
  add_group(p, "x", st->x.data(), to_vector(dx.data()));
  add_group(p, "gain", st->gain, dg);
  add_group(p, "bias", st->bias, db);
  return p;
}

GradProblem relu_problem(Rng& rng) {
  struct S {
    Volume<double> x, r;
  };
  auto st = make_state<S>();
  st->x = random_volume(2, {2, 3, 4}, rng);
  st->r = random_volume(2, {2, 3, 4}, rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature* sig) {
    const Volume<double> y = relu(st->x);
    if (sig != nullptr) positive_signature(st->x.data(), *sig);
    return project(st->r.data(), y.data());
  };
  Volume<double> dx = relu_backward(relu(st->x), st->r);
  add_group(p, "x", st->x.data(), to_vector(dx.data()));
  return p;
}

GradProblem upsample_problem(Rng& rng, const GradCheckOptions& o) {
  struct S {
    Volume<double> x, r;
  };
  const Dims3 factor{1, 2, 2};
  auto st = make_state<S>();
  st->x = random_volume(2, pick_dims(o, {2, 3, 3}), rng);
  const Volume<double> y = upsample_linear(st->x, factor);
  st->r = random_volume(2, y.dims(), rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st, factor](Signature*) {
    return project(st->r.data(), upsample_linear(st->x, factor).data());
  };
  Volume<double> dx = upsample_linear_backward(st->x.dims(), factor, st->r);
  add_group(p, "x", st->x.data(), to_vector(dx.data()));
  return p;
}

GradProblem trilinear_problem(Rng& rng, const GradCheckOptions& o) {
  struct S {
    Volume<double> level;
    std::vector<double> coord, r;
  };
  auto st = make_state<S>();
  st->level = random_volume(3, pick_dims(o, {3, 4, 5}), rng);
  const Dims3 d = st->level.dims();
  st->coord = {rng.uniform(-0.5, d.d - 0.5), rng.uniform(-0.5, d.h - 0.5),
               rng.uniform(-0.5, d.w - 0.5)};
  st->r.resize(3);
  rng.fill_normal<double>(st->r, 0.0, 1.0);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature* sig) {
    const std::array<double, 3> c{st->coord[0], st->coord[1], st->coord[2]};
    if (sig != nullptr) {
      const Dims3 dd = st->level.dims();
      const int n[3] = {dd.d, dd.h, dd.w};
      for (int a = 0; a < 3; ++a) {
        sig->push_back(c[a] <= 0 ? -1 : c[a] >= n[a] - 1 ? n[a] : static_cast<std::int64_t>(std::floor(c[a])));
      }
    }
    return project(st->r, trilinear_sample(st->level, c));
  };
  Volume<double> dlevel(st->level.channels(), d);
  const auto dc = trilinear_sample_backward<double>(
      st->level, {st->coord[0], st->coord[1], st->coord[2]}, st->r, dlevel);
  add_group(p, "level", st->level.data(), to_vector(dlevel.data()));
  add_group(p, "coord", st->coord, {dc[0], dc[1], dc[2]});
  return p;
}

// --- attention ---------------------------------------------------------------

struct AttnSetup {
  TokenSequence<double> seq;
  ReferencePoints<double> refs;
};

AttnSetup attention_inputs(Rng& rng, const GradCheckOptions& o, int channels, int levels) {
  std::vector<Volume<double>> pyramid;
  Dims3 d = pick_dims(o, {2, 3, 3});
  for (int l = 0; l < levels; ++l) {
    pyramid.push_back(random_volume(channels, d, rng));
    d = {std::max(1, d.d / 2), std::max(1, d.h / 2), std::max(1, d.w / 2)};
  }
  AttnSetup s{flatten_levels(pyramid), {}};
  s.refs = reference_points<double>(s.seq.layout);
  return s;
}

// Random non-degenerate parameters: offsets and attention logits depend on
// the query so every weight group receives gradient.
DmsaParams<double> random_dmsa(int channels, int heads, int levels, int points, Rng& rng) {
  auto p = init_dmsa_params<double>(channels, heads, levels, points, rng);
  rng.fill_normal<double>(p.offset_weight.value, 0.0, 0.4);
  rng.fill_normal<double>(p.attn_weight.value, 0.0, 0.5);
  rng.fill_normal<double>(p.attn_bias.value, 0.0, 0.5);
  rng.fill_normal<double>(p.value_bias.value, 0.0, 0.3);
  rng.fill_normal<double>(p.out_bias.value, 0.0, 0.3);
  for (auto& b : p.offset_bias.value) b += rng.normal(0.0, 0.5);
  return p;
}

GradProblem msdmsa_problem(Rng& rng, const GradCheckOptions& o) {
  struct S {
    AttnSetup in;
    DmsaParams<double> params;
    Matrix<double> r;
  };
  auto st = make_state<S>();
  st->in = attention_inputs(rng, o, 12, 2);
  st->params = random_dmsa(12, 2, 2, 2, rng);
  st->r = random_matrix(st->in.seq.size(), 12, rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature* sig) {
    DmsaWorkspace<double> ws;
    auto y = msdmsa_forward(st->in.seq, st->in.refs, st->params, &ws);
    if (sig != nullptr) location_signature(ws, st->params, *sig);
    return project(st->r.data(), y.tokens.data());
  };
  DmsaWorkspace<double> ws;
  msdmsa_forward(st->in.seq, st->in.refs, st->params, &ws);
  Matrix<double> dx = msdmsa_backward(ws, st->r, st->params);
  add_group(p, "input", st->in.seq.tokens.data(), to_vector(dx.data()));
  st->params.visit([&](const std::string& n, Param<double>& prm) { add_param(p, n, prm); });
  return p;
}

GradProblem ffn_problem(Rng& rng) {
  struct S {
    Matrix<double> x, r;
    FfnParams<double> params;
  };
  auto st = make_state<S>();
  st->x = random_matrix(5, 6, rng);
  st->params = FfnParams<double>::zeros(6, 10);
  st->params.visit([&](const std::string&, Param<double>& prm) {
    rng.fill_normal<double>(prm.value, 0.0, 0.5);
  });
  st->r = random_matrix(5, 6, rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature* sig) {
    FfnWorkspace<double> ws;
    auto y = ffn(st->x, st->params, &ws);
    if (sig != nullptr) positive_signature(ws.hidden.data(), *sig);
    return project(st->r.data(), y.data());
  };
  FfnWorkspace<double> ws;
  ffn(st->x, st->params, &ws);
  Matrix<double> dx = ffn_backward(ws, st->r, st->params);
  add_group(p, "x", st->x.data(), to_vector(dx.data()));
  st->params.visit([&](const std::string& n, Param<double>& prm) { add_param(p, n, prm); });
  return p;
}

void randomize_layer(DeTransLayerParams<double>& layer, Rng& rng) {
  layer.attn = random_dmsa(layer.attn.channels, layer.attn.heads, layer.attn.levels,
                           layer.attn.points, rng);
  rng.fill_normal<double>(layer.ffn.b1.value, 0.0, 0.3);
  rng.fill_normal<double>(layer.ffn.b2.value, 0.0, 0.3);
  rng.fill_normal<double>(layer.ln1_gain.value, 1.0, 0.2);
  rng.fill_normal<double>(layer.ln1_bias.value, 0.0, 0.2);
  rng.fill_normal<double>(layer.ln2_gain.value, 1.0, 0.2);
  rng.fill_normal<double>(layer.ln2_bias.value, 0.0, 0.2);
}

GradProblem encoder_problem(Rng& rng, const GradCheckOptions& o, int layers) {
  struct S {
    AttnSetup in;
    EncoderParams<double> params;
    Matrix<double> r;
  };
  auto st = make_state<S>();
  st->in = attention_inputs(rng, o, 12, 2);
  st->params = init_encoder<double>(layers, 12, 2, 2, 2, 16, rng);
  for (auto& layer : st->params.layers) randomize_layer(layer, rng);
  st->r = random_matrix(st->in.seq.size(), 12, rng);
  GradProblem p;
  p.state = st;
  p.evaluate = [st](Signature* sig) {
    EncoderWorkspace<double> ws;
    auto y = encoder_forward(st->in.seq, st->in.refs, st->params, &ws);
    if (sig != nullptr) {
      for (std::size_t i = 0; i < ws.layers.size(); ++i) {
        detrans_signature(ws.layers[i], st->params.layers[i], *sig);
      }
    }
    return project(st->r.data(), y.output.tokens.data());
  };
  EncoderWorkspace<double> ws;
  encoder_forward(st->in.seq, st->in.refs, st->params, &ws);
  Matrix<double> dx = encoder_backward(ws, st->r, st->params);
  add_group(p, "input", st->in.seq.tokens.data(), to_vector(dx.data()));
  st->params.visit([&](const std::string& n, Param<double>& prm) { add_param(p, n, prm); });
  return p;
}

GradProblem loss_problem(Rng& rng, const GradCheckOptions& o) {
  struct S {
    Volume<double> logits, target;
  };
  auto st = make_state<S>();
  const Dims3 d = pick_dims(o, {3, 4, 4});
  st->logits = random_volume(3, d, rng, 2.0);
  LabelVolume labels(d);
  for (auto& l : labels.labels) l = static_cast<int>(rng.index(3));
  st->target = one_hot<double>(labels, 3);
  const double eps = 1e-5;
  GradProblem p;
  p.state = st;
  p.evaluate = [st, eps](Signature*) { return dice_ce_loss(st->logits, st->target, eps).loss; };
  auto r = dice_ce_loss(st->logits, st->target, eps);
  add_group(p, "logits", st->logits.data(), to_vector(r.grad.data()));
  return p;
}

// --- full network ------------------------------------------------------------

void block_signature(const ResBlockCache<double>& c, Signature& sig) {
  positive_signature(c.hidden.data(), sig);
  positive_signature(c.output.data(), sig);
}

GradProblem toy_problem(Rng& rng, const GradCheckOptions& o) {
  struct S {
    ToyConfig config;
    ToyNetwork<double> net;
    SegmentationSample<double> sample;
  };
  auto st = make_state<S>();
  ToyConfig& c = st->config;
  c.input = pick_dims(o, {4, 16, 16});
  c.base_channels = 4;
  c.token_channels = 12;
  c.levels = 2;
  c.encoder_layers = 1;
  c.heads = 2;
  c.points = 2;
  c.ffn_width = 16;
  c.classes = 2;
  st->net = ToyNetwork<double>(c, rng);
  // Move norms and biases off their identity initialization.
  st->net.visit([&](const std::string& name, Param<double>& prm) {
    const bool gain = name.find("gain") != std::string::npos;
    const bool bias = name.find("bias") != std::string::npos;
    if (gain || bias) {
      for (auto& v : prm.value) v += rng.normal(0.0, 0.2);
    }
  });
  for (auto& layer : st->net.encoder.layers) randomize_layer(layer, rng);
  st->sample = make_sphere_task<double>(c.input, rng.next(), 0.3);

  auto run = [st](ToyWorkspace<double>& ws) {
    return st->net.forward(st->sample.image, &ws);
  };
  GradProblem p;
  p.state = st;
  p.evaluate = [st, run](Signature* sig) {
    ToyWorkspace<double> ws;
    auto out = run(ws);
    if (sig != nullptr) {
      positive_signature(ws.stem.output.data(), *sig);
      for (const auto& s : ws.stages) block_signature(s, *sig);
      for (const auto& s : ws.refine) block_signature(s, *sig);
      block_signature(ws.stem_refine, *sig);
      for (std::size_t i = 0; i < ws.encoder.layers.size(); ++i) {
        detrans_signature(ws.encoder.layers[i], st->net.encoder.layers[i], *sig);
      }
    }
    return deep_supervision_loss(out, st->sample.labels, st->config).total;
  };
  ToyWorkspace<double> ws;
  auto out = run(ws);
  auto loss = deep_supervision_loss(out, st->sample.labels, c);
  st->net.zero_grad();
  Volume<double> dx = st->net.backward(ws, loss.dfinal, loss.dauxiliary);
  add_group(p, "input", st->sample.image.data(), to_vector(dx.data()));
  st->net.visit([&](const std::string& n, Param<double>& prm) { add_param(p, n, prm); });
  return p;
}

const std::vector<std::string>& primitive_modules() {
  static const std::vector<std::string> m = {
      "matmul", "linear", "softmax", "layer-norm", "conv3d", "transposed-conv3d",
      "instance-norm", "relu", "upsample", "trilinear"};
  return m;
}

}  // namespace

std::vector<std::string> gradcheck_modules() {
  std::vector<std::string> m = primitive_modules();
  for (const char* s : {"msdmsa", "ffn", "detrans", "encoder", "loss", "toy-net", "tensor-core"}) {
    m.emplace_back(s);
  }
  return m;
}

double default_threshold(const std::string& module) {
  return module == "toy-net" ? 1e-5 : 1e-6;
}

GradProblem make_grad_problem(const std::string& module, const GradCheckOptions& o) {
  Rng rng(o.seed);
  if (o.zero_params && module != "encoder") {
    throw ConfigError("gradcheck: module '" + module + "' has no zero-parameter configuration");
  }
  if (module == "matmul") return matmul_problem(rng);
  if (module == "linear") return linear_problem(rng);
  if (module == "softmax") return softmax_problem(rng);
  if (module == "layer-norm") return layer_norm_problem(rng);
  if (module == "conv3d") return conv_problem(rng, o, false);
  if (module == "transposed-conv3d") return conv_problem(rng, o, true);
  if (module == "instance-norm") return instance_norm_problem(rng, o);
  if (module == "relu") return relu_problem(rng);
  if (module == "upsample") return upsample_problem(rng, o);
  if (module == "trilinear") return trilinear_problem(rng, o);
  if (module == "msdmsa") return msdmsa_problem(rng, o);
  if (module == "ffn") return ffn_problem(rng);
  if (module == "detrans") return encoder_problem(rng, o, 1);
  if (module == "encoder") return encoder_problem(rng, o, o.zero_params ? 0 : 2);
  if (module == "loss") return loss_problem(rng, o);
  if (module == "toy-net") return toy_problem(rng, o);
  throw ConfigError("gradcheck: unknown module '" + module + "'");
}

namespace {

// The full network has ~10^4 parameters; sample a few entries per group.
constexpr std::size_t kToyEntries = 16;

void run_into(GradCheckReport& report, const std::string& module, const std::string& prefix,
              const GradCheckOptions& o) {
  GradProblem p = make_grad_problem(module, o);
  if (o.inject_fault && !p.groups.empty()) {
    for (auto& a : p.groups.front().analytic) a = a * 1.01 + 1e-3;
  }
  GradCheckOptions eff = o;
  if (module == "toy-net" && eff.max_entries == 0) eff.max_entries = kToyEntries;
  for (std::size_t g = 0; g < p.groups.size(); ++g) {
    GradGroupResult r = check_group(p, g, eff, report.threshold);
    r.name = prefix + r.name;
    report.groups.push_back(std::move(r));
  }
}

}  // namespace

GradCheckReport run_gradcheck(const std::string& module, const GradCheckOptions& options) {
  GradCheckReport report;
  report.module = module;
  report.threshold = options.threshold > 0.0 ? options.threshold : default_threshold(module);
  if (module == "tensor-core") {
    for (const auto& m : primitive_modules()) run_into(report, m, m + ".", options);
  } else {
    run_into(report, module, "", options);
  }
  return report;
}

}  // namespace cotr
