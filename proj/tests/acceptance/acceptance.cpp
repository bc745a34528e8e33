// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// non-zero when any selected criterion fails.
//
//   acceptance [--only 1,2,3] [--bench-dir DIR] [--epochs N]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "capstare/ablation.hpp"
#include "capstare/capstare.h"
#include "capstare/config.hpp"
#include "capstare/training.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace capstare;
namespace ct = capstare::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

struct Options {
  std::set<int> only;
  std::string bench_dir = "acceptance_bench";
  std::int64_t epochs = 30;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <typename T>
ct::Vec vec(const BasicTensor<T>& t) {
  return ct::to_vec(t.values());
}

// ---------------------------------------------------------------- 1

struct GradCase {
  std::string name;
  std::function<double(RandomSource&)> run;  // relative error
};

double check(const std::vector<Tensor64>& in, const std::function<Tensor64(ct::Projector&, RandomSource&)>& f,
             RandomSource& rng) {
  ct::Projector proj;
  return ct::gradcheck(in, [&] { return f(proj, rng); }).rel_error;
}

void require_grad(std::initializer_list<Tensor64*> ts) {
  for (auto* t : ts) t->set_requires_grad(true);
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.encoder.image_size = 8;
  c.encoder.channels = {3, 4};
  c.num_capsules = 2;
  c.num_heads = 2;
  c.capsule_dim = 4;
  c.hidden_dim = 3;
  c.seq_len = 2;
  return c;
}

std::vector<GradCase> grad_cases() {
  using ct::leaf;
  std::vector<GradCase> cs;
  auto unary = [&](const std::string& name, std::function<Tensor64(const Tensor64&)> op) {
    cs.push_back({name, [op](RandomSource& rng) {
                    auto x = leaf({3, 4}, rng);
                    return check({x}, [&](auto& p, auto& r) { return p(op(x), r); }, rng);
                  }});
  };
  cs.push_back({"add", [](RandomSource& rng) {
                  auto a = leaf({2, 3, 4}, rng), b = leaf({4}, rng);
                  return check({a, b}, [&](auto& p, auto& r) { return p(add(a, b), r); }, rng);
                }});
  cs.push_back({"sub", [](RandomSource& rng) {
                  auto a = leaf({3, 4}, rng), b = leaf({3, 4}, rng);
                  return check({a, b}, [&](auto& p, auto& r) { return p(sub(a, b), r); }, rng);
                }});
  cs.push_back({"mul", [](RandomSource& rng) {
                  auto a = leaf({2, 3}, rng), b = leaf({2, 3}, rng), s = leaf({}, rng);
                  return check({a, b, s}, [&](auto& p, auto& r) { return p(mul(mul(a, b), s), r); }, rng);
                }});
  unary("scale", [](const Tensor64& x) { return scale(x, -1.7); });
  unary("add_scalar", [](const Tensor64& x) { return add_scalar(x, 0.3); });
  unary("neg", [](const Tensor64& x) { return neg(x); });
  unary("exp", [](const Tensor64& x) { return exp(x); });
  unary("sigmoid", [](const Tensor64& x) { return sigmoid(x); });
  unary("tanh", [](const Tensor64& x) { return tanh(x); });
  unary("gelu", [](const Tensor64& x) { return gelu(x); });
  unary("softmax", [](const Tensor64& x) { return softmax(x, 0); });
  unary("reshape", [](const Tensor64& x) { return reshape(x, {2, -1}); });
  unary("transpose", [](const Tensor64& x) { return transpose(x); });
  unary("narrow", [](const Tensor64& x) { return narrow(x, 1, 1, 2); });
  unary("select", [](const Tensor64& x) { return select(x, 0, 2); });
  unary("sum", [](const Tensor64& x) { return sum(x); });
  unary("mean", [](const Tensor64& x) { return mean(x); });
  unary("sum_axis", [](const Tensor64& x) { return sum(x, 1); });
  unary("mean_axis", [](const Tensor64& x) { return mean(x, 0); });
  cs.push_back({"permute", [](RandomSource& rng) {
                  auto x = leaf({2, 3, 4}, rng);
                  return check({x}, [&](auto& p, auto& r) { return p(permute(x, {2, 0, 1}), r); }, rng);
                }});
  cs.push_back({"concat", [](RandomSource& rng) {
                  auto a = leaf({2, 3}, rng), b = leaf({2, 2}, rng);
                  return check({a, b}, [&](auto& p, auto& r) { return p(concat<double>({a, b}, 1), r); }, rng);
                }});
  cs.push_back({"matmul", [](RandomSource& rng) {
                  auto a = leaf({2, 3, 4}, rng), b = leaf({4, 5}, rng), c = leaf({2, 5, 2}, rng);
                  return check({a, b, c}, [&](auto& p, auto& r) { return p(matmul(matmul(a, b), c), r); }, rng);
                }});
  cs.push_back({"conv2d", [](RandomSource& rng) {
                  auto x = leaf({2, 2, 5, 4}, rng), w = leaf({3, 2, 3, 3}, rng), b = leaf({3}, rng);
                  return check({x, w, b}, [&](auto& p, auto& r) { return p(conv2d(x, w, b, 2, 1), r); }, rng);
                }});
  cs.push_back({"linear", [](RandomSource& rng) {
                  auto l = nn::init_linear<double>(4, 3, rng);
                  require_grad({&l.weight, &l.bias});
                  auto x = leaf({5, 4}, rng);
                  return check({x, l.weight, l.bias}, [&](auto& p, auto& r) { return p(nn::linear(x, l), r); }, rng);
                }});
  cs.push_back({"batch_norm", [](RandomSource& rng) {
                  auto n = nn::init_norm<double>(3);
                  n.gain = leaf({3}, rng);
                  n.shift = leaf({3}, rng);
                  auto x = leaf({4, 3, 2, 2}, rng);
                  return check({x, n.gain, n.shift}, [&](auto& p, auto& r) { return p(nn::batch_norm(x, n, true), r); },
                               rng);
                }});
  cs.push_back({"batch_norm_eval", [](RandomSource& rng) {
                  auto n = nn::init_norm<double>(3);
                  n.gain = leaf({3}, rng);
                  n.shift = leaf({3}, rng);
                  n.running_mean = Tensor64::randn({3}, rng);
                  auto x = leaf({4, 3}, rng);
                  return check({x, n.gain, n.shift}, [&](auto& p, auto& r) { return p(nn::batch_norm(x, n, false), r); },
                               rng);
                }});
  cs.push_back({"dropout", [](RandomSource& rng) {
                  auto x = leaf({6, 5}, rng);
                  const auto seed = rng.next_u64();
                  return check({x},
                               [&](auto& p, auto& r) {
                                 RandomSource mask(seed);
                                 return p(nn::dropout(x, {0.4, true}, mask), r);
                               },
                               rng);
                }});
  cs.push_back({"mse_loss", [](RandomSource& rng) {
                  auto a = leaf({3, 2}, rng), b = leaf({3, 2}, rng);
                  return check({a, b}, [&](auto&, auto&) { return mse_loss(a, b); }, rng);
                }});
  cs.push_back({"gru_cell", [](RandomSource& rng) {
                  auto g = nn::init_gru<double>(3, 4, rng);
                  require_grad({&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h, &g.b_z, &g.b_r, &g.b_h});
                  auto x = leaf({2, 3}, rng), h = leaf({2, 4}, rng);
                  return check({x, h, g.w_z, g.w_r, g.w_h, g.u_z, g.u_r, g.u_h, g.b_z, g.b_r, g.b_h},
                               [&](auto& p, auto& r) { return p(nn::gru_cell(x, h, g), r); }, rng);
                }});
  // composite modules
  cs.push_back({"capsule_formation", [](RandomSource& rng) {
                  auto cp = init_capsule_projection<double>(3, 4, 3, rng);
                  require_grad({&cp.phi.weight, &cp.phi.bias, &cp.pool_queries});
                  auto fm = leaf({4, 3, 2, 3}, rng);
                  return check({fm, cp.phi.weight, cp.phi.bias, cp.pool_queries},
                               [&](auto& p, auto& r) {
                                 RandomSource d(0);
                                 auto f = form_capsules(FeatureMap<double>{fm}, 2, cp, {0.0, false}, d);
                                 return add(p(f.capsules.caps, r), sum(mul(f.pooling, f.pooling)));
                               },
                               rng);
                }});
  cs.push_back({"attention_routing", [](RandomSource& rng) {
                  auto a = init_attention<double>(6, 3, AttentionScale::per_head, rng);
                  std::vector<Tensor64> in;
                  for (auto* l : {&a.query, &a.key, &a.value, &a.output}) {
                    l->bias = Tensor64::randn(l->bias.shape(), rng, 0.1);
                    require_grad({&l->weight, &l->bias});
                    in.push_back(l->weight);
                    in.push_back(l->bias);
                  }
                  auto caps = leaf({2, 2, 2, 6}, rng);
                  in.push_back(caps);
                  return check(in,
                               [&](auto& p, auto& r) {
                                 auto out = route(CapsuleSet<double>{caps}, a);
                                 return add(p(out.capsules.caps, r), sum(mul(out.attention, out.attention)));
                               },
                               rng);
                }});
  cs.push_back({"gru_decoder", [](RandomSource& rng) {
                  DecoderParams<double> d{nn::init_gru<double>(6, 4, rng), nn::init_linear<double>(4, 2, rng)};
                  auto& g = d.gru;
                  require_grad({&g.w_z, &g.w_r, &g.w_h, &g.u_z, &g.u_r, &g.u_h, &g.b_z, &g.b_r, &g.b_h,
                                &d.head.weight, &d.head.bias});
                  auto caps = leaf({2, 3, 2, 3}, rng);
                  return check({caps, g.w_z, g.w_r, g.w_h, g.u_z, g.u_r, g.u_h, g.b_z, g.b_r, g.b_h, d.head.weight,
                                d.head.bias},
                               [&](auto& p, auto& r) { return p(decode(CapsuleSet<double>{caps}, d), r); }, rng);
                }});
  cs.push_back({"fusion", [](RandomSource& rng) {
                  FusionParams<double> f{nn::init_linear<double>(4, 2, rng)};
                  require_grad({&f.fc.weight, &f.fc.bias});
                  auto a = leaf({3, 2}, rng), b = leaf({3, 2}, rng);
                  return check({a, b, f.fc.weight, f.fc.bias}, [&](auto& p, auto& r) { return p(fuse(a, b, f), r); },
                               rng);
                }});
  cs.push_back({"full_model", [](RandomSource& rng) {
                  auto c = tiny_model();
                  c.dropout = 0.2;
                  GazeModel<double> m(c, rng.next_u64());
                  auto px = Tensor64::zeros({2, c.seq_len, 3, 8, 8});
                  for (auto& v : px.mutable_values()) v = rng.uniform();
                  std::vector<Tensor64> in;
                  for (const auto& p : m.trainable()) in.push_back(p.tensor);
                  const auto seed = rng.next_u64();
                  return check(in,
                               [&](auto& p, auto& r) {
                                 RandomSource d(seed);
                                 return p(m.forward({px}, Mode::train, d).prediction, r);
                               },
                               rng);
                }});
  return cs;
}

Outcome criterion1() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto cases = grad_cases();
  double worst = 0;
  std::string worst_name;
  std::vector<std::string> failed;
  for (const auto& c : cases) {
    for (int seed = 0; seed < 20; ++seed) {
      RandomSource rng(RandomSource::mix(1000 + seed, c.name));
      const double e = c.run(rng);
      if (!(e < 1e-4)) {
        failed.push_back(c.name + "/seed" + std::to_string(seed) + "=" + fmt("%.2e", e));
        o.pass = false;
      }
      if (!(e <= worst)) {
        worst = e;
        worst_name = c.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  if (secs > 120) o.pass = false;
  o.detail = std::to_string(cases.size()) + " ops/modules x 20 seeds, worst rel err " + fmt("%.2e", worst) + " (" +
             worst_name + "), " + fmt("%.1f", secs) + " s";
  for (const auto& f : failed) o.detail += "; " + f;
  return o;
}

// ---------------------------------------------------------------- 2

Outcome criterion2() {
  Outcome o;
  const auto t0 = Clock::now();
  std::map<std::string, double> worst;
  auto note = [&](const std::string& k, double d) { worst[k] = std::max(worst[k], d); };
  auto f2d = [](const Tensor& t) { return ct::to_vec(t.values()); };

  for (int trial = 0; trial < 1000; ++trial) {
    RandomSource rng(RandomSource::mix(2000, static_cast<std::uint64_t>(trial)));
    auto pick = [&](std::int64_t lo, std::int64_t hi) { return lo + static_cast<std::int64_t>(rng.below(hi - lo + 1)); };

    {  // capsule pooling
      const auto c = pick(1, 4), d = pick(1, 6), k = pick(1, 4), h = pick(1, 3), w = pick(1, 3), b = pick(1, 2),
                 t = pick(1, 3);
      auto p = init_capsule_projection<float>(c, d, k, rng);
      p.phi.bias = Tensor::randn({d}, rng, 0.5);
      Tensor fm = Tensor::randn({b * t, c, h, w}, rng);
      auto f = form_capsules(FeatureMap<float>{fm}, b, p, {0.0, false}, rng);
      const auto ref = ct::pooling_ref(f2d(fm), b * t, c, h, w, f2d(p.phi.weight), f2d(p.phi.bias), d,
                                       f2d(p.pool_queries), k);
      note("pooling", std::max(ct::max_abs_diff(f2d(f.pooling), ref.weights),
                               ct::max_abs_diff(f2d(f.capsules.caps), ref.capsules)));
    }
    {  // attention routing
      const auto heads = pick(1, 3), dh = pick(1, 4), d = heads * dh, b = pick(1, 2), t = pick(1, 3), k = pick(1, 3);
      const auto mode = rng.bernoulli(0.5) ? AttentionScale::per_head : AttentionScale::literal;
      auto a = init_attention<float>(d, heads, mode, rng);
      for (auto* l : {&a.query, &a.key, &a.value, &a.output}) l->bias = Tensor::randn({d}, rng, 0.5);
      Tensor caps = Tensor::randn({b, t, k, d}, rng);
      auto r = route(CapsuleSet<float>{caps}, a);
      ct::AttentionWeights wts{f2d(a.query.weight), f2d(a.query.bias), f2d(a.key.weight),    f2d(a.key.bias),
                               f2d(a.value.weight), f2d(a.value.bias), f2d(a.output.weight), f2d(a.output.bias)};
      const auto ref = ct::attention_ref(f2d(caps), b, t * k, d, wts, heads, a.scale());
      note("attention", std::max(ct::max_abs_diff(f2d(r.capsules.caps), ref.out),
                                 ct::max_abs_diff(f2d(r.attention), ref.attn)));
    }
    {  // GRU sequence
      const auto in = pick(1, 5), hid = pick(1, 5), b = pick(1, 3), t = pick(1, 6);
      auto g = nn::init_gru<float>(in, hid, rng);
      g.b_z = Tensor::randn({hid}, rng, 0.5);
      g.b_r = Tensor::randn({hid}, rng, 0.5);
      g.b_h = Tensor::randn({hid}, rng, 0.5);
      Tensor xs = Tensor::randn({b, t, in}, rng);
      auto out = nn::gru_sequence(xs, Tensor::zeros({b, hid}), g);
      ct::GruWeights w{f2d(g.w_z), f2d(g.w_r), f2d(g.w_h), f2d(g.u_z), f2d(g.u_r),
                       f2d(g.u_h), f2d(g.b_z), f2d(g.b_r), f2d(g.b_h)};
      note("gru", ct::max_abs_diff(f2d(out.last), ct::gru_ref(f2d(xs), b, t, in, w, hid)));
    }
    {  // fusion
      const auto b = pick(1, 5);
      FusionParams<float> f{nn::init_linear<float>(4, 2, rng)};
      f.fc.bias = Tensor::randn({2}, rng);
      Tensor y1 = Tensor::randn({b, 2}, rng), y2 = Tensor::randn({b, 2}, rng);
      note("fusion", ct::max_abs_diff(f2d(fuse(y1, y2, f)),
                                      ct::fusion_ref(f2d(y1), f2d(y2), b, f2d(f.fc.weight), f2d(f.fc.bias))));
    }
    {  // angular error, fp64
      const double p1 = rng.uniform(-1.4, 1.4), y1 = rng.uniform(-3.0, 3.0);
      double p2 = rng.uniform(-1.4, 1.4), y2 = rng.uniform(-3.0, 3.0);
      if (trial % 4 == 0) {  // near-coincident pairs
        p2 = p1 + rng.normal() * 1e-6;
        y2 = y1 + rng.normal() * 1e-6;
      }
      note("angle", std::abs(angular_error_deg({p1, y1}, {p2, y2}) - ct::angle_ref_deg(p1, y1, p2, y2)));
    }
  }
  const double secs = seconds_since(t0);
  for (const auto& [k, v] : worst) {
    const double tol = k == "angle" ? 1e-9 : 1e-5;
    if (!(v < tol)) o.pass = false;
    o.detail += k + " " + fmt("%.1e", v) + ", ";
  }
  if (secs > 120) o.pass = false;
  o.detail = "1000 trials each, max abs diff: " + o.detail + fmt("%.1f", secs) + " s";
  return o;
}

// ---------------------------------------------------------------- 3

Outcome criterion3() {
  Outcome o;
  const auto t0 = Clock::now();
  std::vector<std::string> notes;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) {
      o.pass = false;
      notes.push_back("FAILED " + what);
    }
  };
  ModelConfig c;
  c.encoder.image_size = 32;
  RandomSource rng(3);
  auto frames = [&](std::int64_t b, const ModelConfig& mc) {
    auto px = Tensor::zeros({b, mc.seq_len, 3, mc.encoder.image_size, mc.encoder.image_size});
    for (auto& v : px.mutable_values()) v = static_cast<float>(rng.uniform());
    return FrameBatch<float>{px};
  };

  // row sums
  double worst_row = 0;
  for (int s = 0; s < 5; ++s) {
    GazeModel<float> m(c, s);
    auto r = m.forward(frames(2, c), s % 2 ? Mode::train : Mode::eval, rng);
    auto rows = [&](const Tensor& t) {
      const auto n = t.dim(t.rank() - 1);
      auto v = t.values();
      for (std::size_t i = 0; i < v.size(); i += n)
        worst_row = std::max(worst_row, std::abs(std::accumulate(v.begin() + i, v.begin() + i + n, 0.0) - 1.0));
    };
    rows(r.attention);
    rows(r.pooling);
  }
  expect(worst_row <= 1e-6, "row sums");
  notes.push_back("row sums within " + fmt("%.1e", worst_row));

  // permutation equivariance of routing
  double worst_perm = 0;
  for (int s = 0; s < 20; ++s) {
    RandomSource r2(100 + s);
    auto a = init_attention<float>(16, 4, AttentionScale::per_head, r2);
    const std::int64_t t = 3, k = 4, d = 16, l = t * k;
    Tensor caps = Tensor::randn({1, t, k, d}, r2);
    std::vector<std::int64_t> perm(l);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::int64_t i = l - 1; i > 0; --i) std::swap(perm[i], perm[r2.below(i + 1)]);
    auto permuted = Tensor::zeros({1, t, k, d});
    auto dst = permuted.mutable_values();
    for (std::int64_t i = 0; i < l; ++i)
      for (std::int64_t j = 0; j < d; ++j) dst[i * d + j] = caps.values()[perm[i] * d + j];
    const auto ya = route(CapsuleSet<float>{caps}, a).capsules.caps;
    const auto yb = route(CapsuleSet<float>{permuted}, a).capsules.caps;
    for (std::int64_t i = 0; i < l; ++i)
      for (std::int64_t j = 0; j < d; ++j)
        worst_perm = std::max(worst_perm, double(std::abs(yb.values()[i * d + j] - ya.values()[perm[i] * d + j])));
  }
  expect(worst_perm < 1e-5, "permutation equivariance");

  // eval determinism
  {
    GazeModel<float> m(c, 9);
    auto f = frames(3, c);
    RandomSource r1(1), r2(2);
    const auto a = m.forward(f, Mode::eval, r1).prediction;
    const auto b = m.forward(f, Mode::eval, r2).prediction;
    expect(vec(a) == vec(b), "eval determinism");
  }
  // dual_shared branches
  {
    auto cs = c;
    cs.decoder_mode = DecoderMode::dual_shared;
    GazeModel<float> m(cs, 4);
    const auto r = m.forward(frames(3, cs), Mode::eval, rng);
    expect(r.branches.size() == 2 && vec(r.branches[0]) == vec(r.branches[1]), "dual_shared branch equality");
  }
  // frozen encoder
  {
    auto cf = c;
    cf.encoder.frozen = true;
    GazeModel<float> m(cf, 5);
    const auto f = frames(2, cf);
    auto r = m.forward(f, Mode::train, rng);
    mse_loss(r.prediction, Tensor::zeros({2, 2})).backward();
    bool zero = true, others = false;
    for (const auto& p : m.parameters()) {
      const bool enc = p.name.rfind("encoder.", 0) == 0;
      if (enc && p.tensor.has_grad())
        for (float g : p.tensor.grad()) zero = zero && g == 0.0f;
      if (!enc && p.tensor.has_grad()) others = true;
    }
    expect(zero && others, "frozen encoder gradient");
    expect(m.trainable_count() == count_params(cf), "frozen trainable count");
  }
  // batch independence
  double worst_batch = 0;
  {
    GazeModel<float> m(c, 6);
    const auto f = frames(4, c);
    const auto all = m.forward(f, Mode::eval, rng).prediction;
    for (std::int64_t i = 0; i < 4; ++i) {
      const auto one = m.forward({narrow(f.pixels, 0, i, 1)}, Mode::eval, rng).prediction;
      for (int j = 0; j < 2; ++j)
        worst_batch = std::max(worst_batch, double(std::abs(one.values()[j] - all.values()[i * 2 + j])));
    }
  }
  expect(worst_batch < 1e-6, "batch independence");
  const double secs = seconds_since(t0);
  if (secs > 60) o.pass = false;
  o.detail = "rows " + fmt("%.1e", worst_row) + ", permutation " + fmt("%.1e", worst_perm) + ", batch " +
             fmt("%.1e", worst_batch) + ", determinism/shared/frozen checked, " + fmt("%.1f", secs) + " s";
  for (const auto& n : notes)
    if (n.rfind("FAILED", 0) == 0) o.detail += "; " + n;
  return o;
}

// ---------------------------------------------------------------- 4

Outcome criterion4() {
  Outcome o;
  const auto t0 = Clock::now();
  RunConfig c;  // K=4, h=4, D=64, H=128, T=9, 64x64 frames
  c.data.synthetic.count = 8;
  c.train.lr = 1e-3;
  c.train.batch_size = 8;
  c.train.epochs = 2000;  // one step per epoch
  c.train.max_steps = 2000;
  const auto seqs = generate(synthetic_spec(c));
  GazeModel<float> m(c.model, c.init_seed());
  Tensor target({8, 2}, std::vector<float>(16));
  for (int i = 0; i < 8; ++i) {
    target.mutable_values()[2 * i] = static_cast<float>(seqs[i].label.pitch);
    target.mutable_values()[2 * i + 1] = static_cast<float>(seqs[i].label.yaw);
  }
  struct Done {};
  double mse = NAN, err = NAN;
  std::int64_t steps = 0;
  std::vector<double> losses;
  TrainState st;
  try {
    train(m, seqs, {}, c.train, st, [&](const EpochRecord& r, const TrainState&) {
      losses.push_back(r.train_mse);
      steps = r.step;
      if (r.step % 25 != 0) return;
      const auto p = predict(m, seqs, 8);
      mse = mse_loss(p, target).item();
      err = mean_angular_error_deg(p, target);
      if (mse < 1e-3 && err < 2.0) throw Done{};
    });
  } catch (const Done&) {
  }
  // windowed monotonicity, reported
  int rises = 0, windows = 0;
  for (std::size_t w = 100; w + 100 <= losses.size(); w += 100, ++windows) {
    const double prev = std::accumulate(losses.begin() + w - 100, losses.begin() + w, 0.0);
    const double cur = std::accumulate(losses.begin() + w, losses.begin() + w + 100, 0.0);
    rises += cur > prev;
  }
  const double secs = seconds_since(t0);
  o.pass = mse < 1e-3 && err < 2.0 && steps <= 2000;
  o.detail = "train MSE " + fmt("%.2e", mse) + ", train err " + fmt("%.3f", err) + " deg after " +
             std::to_string(steps) + " steps (" + fmt("%.0f", secs) + " s)";
  if (windows > 0) o.detail += ", " + std::to_string(rises) + "/" + std::to_string(windows) + " 100-step windows rose";
  return o;
}

// ---------------------------------------------------------------- 5

struct Comparison {
  std::string label, better, worse;
};

Outcome criterion5(const Options& opt) {
  Outcome o;
  const auto t0 = Clock::now();
  RunConfig base;
  base.model.encoder.image_size = 32;
  base.data.synthetic.count = 250;
  base.data.train_fraction = 0.8;
  base.train.lr = 1e-3;
  base.train.epochs = opt.epochs;
  base.train.batch_size = 32;
  AblationOptions ao;
  ao.progress = [](const std::string& s) { std::cerr << "  " << s << "\n"; };
  std::map<std::string, AblationResult> res;
  for (const auto& g : {"decoder", "components", "seqlen"}) res[g] = run_ablation(base, builtin_grid(g), opt.bench_dir, ao);

  const std::vector<std::pair<std::string, Comparison>> rules{
      {"decoder", {"a dual<single", "dual", "single"}},
      {"decoder", {"b dual<dual_shared", "dual", "dual_shared"}},
      {"seqlen", {"c T9<T1", "T9", "T1"}},
  };
  std::vector<std::string> parts;
  for (const auto& [grid, cmp] : rules) {
    const auto& a = res[grid].cell(cmp.better);
    const auto& b = res[grid].cell(cmp.worse);
    const bool ordered = a.runs > 0 && b.runs > 0 && a.median_err < b.median_err;
    if (!ordered) o.pass = false;
    parts.push_back(cmp.label + " " + (ordered ? "ok" : "VIOLATED") + " (" + fmt("%.2f", a.median_err) + " vs " +
                    fmt("%.2f", b.median_err) + (a.iqr_overlaps(b) ? ", IQRs overlap" : ", IQRs disjoint") + ")");
  }
  const auto& comp = res["components"];
  const auto& full = comp.cell("caps+attn");
  bool lowest = full.runs > 0;
  std::string order;
  auto cells = comp.cells;
  std::sort(cells.begin(), cells.end(), [](const auto& x, const auto& y) { return x.median_err < y.median_err; });
  for (const auto& c : cells) {
    if (&c != &cells.front()) order += " < ";
    order += c.cell + " " + fmt("%.2f", c.median_err);
    if (c.cell != full.cell && !(full.median_err <= c.median_err)) lowest = false;
  }
  if (!lowest) o.pass = false;
  parts.push_back(std::string("d full lowest ") + (lowest ? "ok" : "VIOLATED") + " (" + order + ")");
  for (const auto& [g, r] : res)
    if (!r.failures.empty()) {
      o.pass = false;
      parts.push_back(g + ": " + std::to_string(r.failures.size()) + " failed runs");
    }
  o.detail = "";
  for (std::size_t i = 0; i < parts.size(); ++i) o.detail += (i ? "; " : "") + parts[i];
  o.detail += "; " + fmt("%.0f", seconds_since(t0)) + " s";
  return o;
}

// ---------------------------------------------------------------- 6

Outcome criterion6() {
  Outcome o;
  std::vector<std::string> notes;
  auto expect = [&](bool ok, const std::string& what) {
    notes.push_back(what + (ok ? "" : " FAILED"));
    if (!ok) o.pass = false;
  };
  expect(gru_param_count(4, 3) == 72, "GRU(4,3)=72");
  ModelConfig a;
  expect(count_params(a) == 341070, "default=341070");
  ModelConfig b;
  b.decoder_mode = DecoderMode::single;
  b.encoder.frozen = true;
  b.num_capsules = 8;
  b.num_heads = 8;
  b.capsule_dim = 32;
  b.hidden_dim = 64;
  const std::int64_t hb = (64 * 32 + 32) + 8 * 32 + 4 * (32 * 32 + 32) + 3 * (64 * 256 + 64 * 64 + 64) + (64 * 2 + 2);
  expect(count_params(b) == hb, "single/frozen=" + std::to_string(hb));
  ModelConfig c;
  c.decoder_mode = DecoderMode::dual_shared;
  c.decoder_split = true;
  c.use_attention = false;
  const std::int64_t enc = (3 * 16 * 9 + 16 + 32) + (16 * 32 * 9 + 32 + 64) + (32 * 64 * 9 + 64 + 128);
  const std::int64_t hc =
      enc + (64 * 64 + 64) + 4 * 64 + 3 * (128 * 128 + 128 * 128 + 128) + (128 * 2 + 2) + (4 * 2 + 2);
  expect(count_params(c) == hc, "shared/split=" + std::to_string(hc));
  for (const auto& cfg : {a, b, c}) {
    GazeModel<float> m(cfg, 1);
    expect(m.trainable_count() == count_params(cfg), "model agrees");
  }

  RandomSource rng(6);
  auto lin = nn::init_linear<float>(3, 2, rng);
  std::uint64_t lone = 0;
  {
    FlopCounter fc;
    nn::linear(Tensor::randn({1, 3}, rng), lin);
    lone = fc.count();
  }
  expect(lone == 14 && 2.0 * 3 * 2 + 2 == 14.0, "linear 3->2 = " + std::to_string(lone));
  GazeModel<float> m(a, 1);
  const double analytic = count_flops(a), measured = instrumented_flops(m);
  const double rel = std::abs(analytic - measured) / measured;
  expect(rel < 0.05, "flops analytic " + fmt("%.4g", analytic) + " vs instrumented " + fmt("%.4g", measured) + " (" +
                         fmt("%.1f", 100 * rel) + "%)");
  for (std::size_t i = 0; i < notes.size(); ++i) o.detail += (i ? ", " : "") + notes[i];
  return o;
}

// ---------------------------------------------------------------- 7

Outcome criterion7(const fs::path& scratch) {
  Outcome o;
  std::vector<std::string> notes;
  // checkpoint
  RunConfig cfg;
  cfg.model.encoder.image_size = 32;
  cfg.data.synthetic.count = 12;
  cfg.train.lr = 1e-3;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 4;
  auto [tr, va] = load_run_data(cfg);
  GazeModel<float> m(cfg.model, cfg.init_seed());
  TrainState st;
  train(m, tr, va, cfg.train, st);
  const auto ckpt = (scratch / "c7.cst").string();
  write_checkpoint(ckpt, make_checkpoint(m, &st, echo_config(cfg)));
  GazeModel<float> back(cfg.model, 0);
  TrainState bs;
  restore_checkpoint(back, &bs, read_checkpoint(ckpt));
  const auto batch = make_batch(va, {0, 1}, cfg.model.seq_len);
  RandomSource r1(0), r2(0);
  const bool bits = vec(m.forward(batch.frames, Mode::eval, r1).prediction) ==
                    vec(back.forward(batch.frames, Mode::eval, r2).prediction);
  o.pass = o.pass && bits;
  notes.push_back(std::string("checkpoint forward ") + (bits ? "bit-identical" : "DIFFERS"));

  // dataset
  SyntheticSpec s;
  s.count = 6;
  s.image_size = 32;
  s.seed = 77;
  const auto seqs = generate(s);
  const auto root = scratch / "c7data";
  fs::remove_all(root);
  save_dataset(root.string(), seqs);
  const auto loaded = load_dataset(root.string());
  double worst = loaded.size() == seqs.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(loaded.size(), seqs.size()); ++i)
    for (std::size_t t = 0; t < seqs[i].frames.size(); ++t)
      for (std::size_t k = 0; k < seqs[i].frames[t].data.size(); ++k)
        worst = std::max(worst, double(std::abs(loaded[i].frames[t].data[k] - seqs[i].frames[t].data[k])));
  const bool data_ok = worst <= 1.0 / 255.0;
  o.pass = o.pass && data_ok;
  notes.push_back("dataset max pixel diff " + fmt("%.5f", worst) + " (bound " + fmt("%.5f", 1.0 / 255) + ")");

  // config echo
  RunConfig c;
  c.model.decoder_mode = DecoderMode::single;
  c.model.encoder.channels = {8, 16, 32, 64};
  c.train.lr = 3e-4 / 7;
  c.data.synthetic.ambiguity = true;
  c.out_dir = "runs/echo";
  const auto echo = echo_config(c);
  const bool echo_ok = same_config(parse_config_text(echo, "echo"), c) &&
                       echo_config(parse_config_text(echo, "echo")) == echo;
  o.pass = o.pass && echo_ok;
  notes.push_back(std::string("config echo ") + (echo_ok ? "round-trips" : "DIFFERS"));
  for (std::size_t i = 0; i < notes.size(); ++i) o.detail += (i ? ", " : "") + notes[i];
  return o;
}

// ---------------------------------------------------------------- 8

Outcome criterion8(const fs::path& scratch) {
  Outcome o;
  const auto out = scratch / "c8";
  fs::remove_all(out);
  cs_config* cfg = nullptr;
  auto ok = [&](cs_status s) {
    if (s != CS_OK) throw std::runtime_error(std::string(cs_status_name(s)) + ": " + cs_last_error());
  };
  ok(cs_config_new(&cfg));
  for (const auto& [k, v] : std::vector<std::pair<const char*, std::string>>{
           {"model.image_size", "32"}, {"data.count", "10"}, {"train.epochs", "1"}, {"train.batch_size", "4"},
           {"train.lr", "0.001"}, {"out.dir", out.string()}})
    ok(cs_config_set(cfg, k, v.c_str()));
  ok(cs_train(cfg, nullptr, nullptr, nullptr));
  const int64_t samples[] = {0, 1};
  const auto maps = out / "maps";
  ok(cs_export_heatmaps((out / "checkpoint.cst").string().c_str(), nullptr, samples, 2, maps.string().c_str()));
  cs_config_free(cfg);

  ModelConfig mc;
  mc.encoder.image_size = 32;
  const auto side = mc.encoder.output_size();
  const auto k = mc.num_capsules, t_len = mc.seq_len;
  double worst_sum = 0;
  bool dims = true, counts = true;
  for (auto s : samples) {
    const auto dir = maps / ("sample_" + std::to_string(s));
    std::map<std::int64_t, int> per_frame;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() != ".png") continue;
      const auto img = read_png(e.path().string());
      dims = dims && img.height == side && img.width == side;
      const auto stem = e.path().stem().string();  // caps_<k>_<t>
      per_frame[std::stoll(stem.substr(stem.rfind('_') + 1))]++;
    }
    counts = counts && static_cast<std::int64_t>(per_frame.size()) == t_len;
    for (const auto& [frame, n] : per_frame) counts = counts && n == k;
    std::ifstream csv(dir / "weights.csv");
    std::string line;
    std::getline(csv, line);
    std::map<std::pair<int, int>, double> sums;
    std::map<std::pair<int, int>, int> cells;
    while (std::getline(csv, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
      const std::pair<int, int> key{std::stoi(f[1]), std::stoi(f[2])};
      sums[key] += std::stod(f[6]);
      cells[key]++;
    }
    counts = counts && static_cast<std::int64_t>(sums.size()) == k * t_len;
    for (const auto& [key, v] : sums) {
      worst_sum = std::max(worst_sum, std::abs(v - 1.0));
      counts = counts && cells[key] == side * side;
    }
  }
  o.pass = dims && counts && worst_sum <= 1e-6;
  o.detail = std::to_string(side) + "x" + std::to_string(side) + " maps " + (dims ? "ok" : "WRONG SIZE") + ", " +
             std::to_string(k) + " per frame x " + std::to_string(t_len) + " frames " + (counts ? "ok" : "WRONG COUNT") +
             ", weight sums within " + fmt("%.1e", worst_sum);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    auto value = [&]() -> std::string {
      if (i + 1 >= argc) {
        std::cerr << a << " needs a value\n";
        std::exit(2);
      }
      return argv[++i];
    };
    if (a == "--only") {
      std::stringstream ss(value());
      for (std::string x; std::getline(ss, x, ',');) opt.only.insert(std::stoi(x));
    } else if (a == "--bench-dir") {
      opt.bench_dir = value();
    } else if (a == "--epochs") {
      opt.epochs = std::stoll(value());
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--bench-dir DIR] [--epochs N]\n";
      return 2;
    }
  }
  const auto scratch = fs::temp_directory_path() / "capstare_acceptance";
  fs::create_directories(scratch);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient integrity", criterion1},
      {"oracle equivalence", criterion2},
      {"structural invariants", criterion3},
      {"overfit probe", criterion4},
      {"directional ablations", [&] { return criterion5(opt); }},
      {"accounting exactness", criterion6},
      {"round trips", [&] { return criterion7(scratch); }},
      {"heatmap contract", [&] { return criterion8(scratch); }},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!opt.only.empty() && !opt.only.count(id)) continue;
    Outcome r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    all = all && r.pass;
    std::cout << (r.pass ? "PASS" : "FAIL") << " criterion " << id << " " << criteria[i].first << ": " << r.detail
              << std::endl;
  }
  return all ? 0 : 1;
}
