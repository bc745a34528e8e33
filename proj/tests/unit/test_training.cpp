// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "capstare/config.hpp"
#include "capstare/training.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace capstare;
namespace ct = capstare::testing;
namespace fs = std::filesystem;

namespace {

struct Setup {
  RunConfig cfg;
  std::vector<Sequence> train, val;
};

Setup tiny_setup() {
  Setup s;
  auto& c = s.cfg;
  c.model.encoder.image_size = 16;
  c.model.encoder.channels = {4, 8};
  c.model.num_capsules = 2;
  c.model.num_heads = 2;
  c.model.capsule_dim = 8;
  c.model.hidden_dim = 8;
  c.model.seq_len = 3;
  c.data.synthetic.count = 10;
  c.data.synthetic.seq_len = 3;
  c.train.lr = 1e-2;
  c.train.epochs = 2;
  c.train.batch_size = 3;
  c.train.seed = 5;
  auto [tr, va] = load_run_data(c);
  s.train = std::move(tr);
  s.val = std::move(va);
  return s;
}

std::vector<std::vector<float>> snapshot(const GazeModel<float>& m) {
  std::vector<std::vector<float>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  for (const auto& p : m.buffers()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / "capstare_test_training";
  fs::create_directories(d);
  return d / name;
}

// Leaf whose gradient after backward() equals `g`.
void set_grad(Tensor& p, float g) {
  p.zero_grad();
  sum(mul(p, Tensor({1}, {g}))).backward();
}

}  // namespace

TEST(Mse, Examples) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(mse_loss(a, a).item(), 0.0f);
  Tensor b({2, 2}, {2, 3, 4, 5});
  EXPECT_FLOAT_EQ(mse_loss(b, a).item(), 1.0f);
  EXPECT_THROW(mse_loss(a, Tensor::zeros({4})), ShapeError);
  RandomSource rng(1);
  auto p = ct::leaf({3, 2}, rng);
  auto t = Tensor64::randn({3, 2}, rng);
  mse_loss(p, t).backward();
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(p.grad()[i], 2 * (p.values()[i] - t.values()[i]) / 6.0, 1e-15);
  p.zero_grad();
  EXPECT_LT(ct::gradcheck({p}, [&] { return mse_loss(p, t); }).rel_error, 1e-6);
}

TEST(Adam, ZeroGradientNoDecayIsNoOp) {
  Tensor p({2}, {0.5f, -1.5f});
  p.set_requires_grad(true);
  set_grad(p, 0.0f);
  TrainConfig cfg;
  cfg.weight_decay = 0;
  AdamState st;
  adam_step({{"p", p}}, st, cfg, 1e-3);
  EXPECT_EQ(p.values()[0], 0.5f);
  EXPECT_EQ(p.values()[1], -1.5f);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p({1}, {1.0f});
  p.set_requires_grad(true);
  set_grad(p, 1.0f);
  TrainConfig cfg;
  cfg.weight_decay = 0;
  AdamState st;
  adam_step({{"p", p}}, st, cfg, 1e-2);
  EXPECT_NEAR(p.values()[0], 1.0 - 1e-2 / (1 + 1e-8), 1e-7);
}

TEST(Adam, ThreeStepHandRecurrence) {
  // Parameters and moments are stored in float; each step is evaluated in
  // double and rounded on store.
  for (double wd : {0.0, 0.1}) {
    Tensor p({1}, {0.75f});
    p.set_requires_grad(true);
    TrainConfig cfg;
    cfg.weight_decay = wd;
    AdamState st;
    const float grads[3] = {0.5f, -0.25f, 1.0f};
    const double lrs[3] = {1e-2, 5e-3, 2e-2};
    float theta = 0.75f, m = 0, v = 0;
    for (int t = 0; t < 3; ++t) {
      set_grad(p, grads[t]);
      adam_step({{"p", p}}, st, cfg, lrs[t]);
      const double g = grads[t] + wd * theta;
      const double mt = 0.9 * m + 0.1 * g;
      const double vt = 0.999 * v + 0.001 * g * g;
      m = static_cast<float>(mt);
      v = static_cast<float>(vt);
      const double mh = mt / (1 - std::pow(0.9, t + 1));
      const double vh = vt / (1 - std::pow(0.999, t + 1));
      theta = static_cast<float>(theta - lrs[t] * mh / (std::sqrt(vh) + 1e-8));
      EXPECT_LT(std::abs(double(p.values()[0]) - theta), 1e-10) << "wd " << wd << " step " << t;
    }
    EXPECT_EQ(st.step, 3);
  }
}

TEST(Adam, WeightDecayShrinksWithZeroGradient) {
  for (bool decoupled : {false, true}) {
    Tensor p({3}, {0.5f, -2.0f, 1.0f});
    p.set_requires_grad(true);
    TrainConfig cfg;
    cfg.weight_decay = 0.1;
    cfg.decoupled_weight_decay = decoupled;
    AdamState st;
    for (int t = 0; t < 5; ++t) {
      std::vector<float> before(p.values().begin(), p.values().end());
      set_grad(p, 0.0f);
      adam_step({{"p", p}}, st, cfg, 1e-2);
      for (int i = 0; i < 3; ++i) EXPECT_LT(std::abs(p.values()[i]), std::abs(before[i]));
    }
  }
}

TEST(Schedule, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 30, 1e-3, 1e-5), 1e-3);
  EXPECT_NEAR(cosine_lr(30, 30, 1e-3, 1e-5), 1e-5, 1e-18);
  EXPECT_NEAR(cosine_lr(15, 30, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-18);
  EXPECT_THROW(cosine_lr(31, 30, 1e-3, 0), ConfigError);
  EXPECT_THROW(cosine_lr(-1, 30, 1e-3, 0), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesParametersBitIdentical) {
  auto s = tiny_setup();
  s.cfg.train.lr = 0;
  s.cfg.model.dropout = 0.0;
  GazeModel<float> m(s.cfg.model, s.cfg.init_seed());
  const auto before = m.parameters();
  std::vector<std::vector<float>> vals;
  for (const auto& p : before) vals.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  TrainState st;
  train(m, s.train, s.val, s.cfg.train, st);
  const auto after = m.parameters();
  for (std::size_t i = 0; i < after.size(); ++i)
    EXPECT_EQ(std::vector<float>(after[i].tensor.values().begin(), after[i].tensor.values().end()), vals[i])
        << after[i].name;
}

TEST(Train, SameSeedSameHistory) {
  auto s = tiny_setup();
  auto run = [&] {
    GazeModel<float> m(s.cfg.model, s.cfg.init_seed());
    TrainState st;
    auto h = train(m, s.train, s.val, s.cfg.train, st);
    return std::make_pair(h, snapshot(m));
  };
  auto [h1, p1] = run();
  auto [h2, p2] = run();
  ASSERT_EQ(h1.size(), 2u);
  for (std::size_t i = 0; i < h1.size(); ++i) {
    EXPECT_EQ(h1[i].train_mse, h2[i].train_mse);
    EXPECT_EQ(h1[i].val_err_deg, h2[i].val_err_deg);
  }
  EXPECT_EQ(p1, p2);
}

TEST(Train, ResumeMatchesUninterrupted) {
  auto s = tiny_setup();
  s.cfg.train.epochs = 3;
  const auto echo = echo_config(s.cfg);
  GazeModel<float> full(s.cfg.model, s.cfg.init_seed());
  TrainState fs_state;
  auto log_full = scratch("full.csv").string();
  auto cfg_full = s.cfg.train;
  cfg_full.log_path = log_full;
  const auto h_full = train(full, s.train, s.val, cfg_full, fs_state);

  struct Stop {};
  const auto ckpt = scratch("resume.cst").string();
  auto cfg_part = s.cfg.train;
  cfg_part.log_path = scratch("part.csv").string();
  GazeModel<float> part(s.cfg.model, s.cfg.init_seed());
  TrainState ps;
  try {
    train(part, s.train, s.val, cfg_part, ps, [&](const EpochRecord& r, const TrainState& st) {
      write_checkpoint(ckpt, make_checkpoint(part, &st, echo));
      if (r.epoch == 2) throw Stop{};
    });
  } catch (const Stop&) {
  }
  GazeModel<float> resumed(s.cfg.model, 999);
  TrainState rs;
  const auto file = read_checkpoint(ckpt);
  EXPECT_EQ(file.state_value("epoch", -1), 2);
  restore_checkpoint(resumed, &rs, file);
  EXPECT_EQ(rs.epoch, 2);
  const auto h_rest = train(resumed, s.train, s.val, cfg_part, rs);
  ASSERT_EQ(h_rest.size(), 1u);
  EXPECT_EQ(h_rest[0].train_mse, h_full[2].train_mse);
  EXPECT_EQ(h_rest[0].val_err_deg, h_full[2].val_err_deg);
  EXPECT_EQ(snapshot(resumed), snapshot(full));

  std::ifstream a(log_full), b(cfg_part.log_path);
  std::string la((std::istreambuf_iterator<char>(a)), {}), lb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(la, lb);
  EXPECT_EQ(la.rfind("epoch,step,lr,train_mse,val_err_deg\n", 0), 0u);
}

TEST(Checkpoint, ForwardBitIdentity) {
  auto s = tiny_setup();
  GazeModel<float> m(s.cfg.model, s.cfg.init_seed());
  TrainState st;
  s.cfg.train.epochs = 1;
  train(m, s.train, s.val, s.cfg.train, st);
  const auto path = scratch("bits.cst").string();
  write_checkpoint(path, make_checkpoint(m, &st, echo_config(s.cfg)));
  const auto file = read_checkpoint(path);
  GazeModel<float> back(s.cfg.model, 12345);
  TrainState bs;
  restore_checkpoint(back, &bs, file);
  auto batch = make_batch(s.val, {0, 1}, s.cfg.model.seq_len);
  RandomSource r1(0), r2(0);
  auto a = m.forward(batch.frames, Mode::eval, r1).prediction;
  auto b = back.forward(batch.frames, Mode::eval, r2).prediction;
  EXPECT_EQ(std::vector<float>(a.values().begin(), a.values().end()),
            std::vector<float>(b.values().begin(), b.values().end()));
  EXPECT_EQ(bs.adam.step, st.adam.step);
  EXPECT_EQ(bs.adam.m, st.adam.m);
  EXPECT_EQ(bs.adam.v, st.adam.v);
  EXPECT_EQ(file.config_echo.find("model.capsule_dim = 8") != std::string::npos, true);
  EXPECT_EQ(static_cast<std::uint64_t>(file.state_value("model_seed", 0)), m.seed());
}

TEST(Checkpoint, WrongConfigNamesTensor) {
  auto s = tiny_setup();
  GazeModel<float> m(s.cfg.model, 1);
  const auto path = scratch("shape.cst").string();
  write_checkpoint(path, make_checkpoint(m, nullptr, echo_config(s.cfg)));
  auto other = s.cfg.model;
  other.hidden_dim = 12;
  GazeModel<float> o(other, 1);
  try {
    restore_checkpoint(o, nullptr, read_checkpoint(path));
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatError::Kind::shape_mismatch);
    EXPECT_NE(std::string(e.what()).find("decoder0.gru"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, VersionAndCorruption) {
  auto s = tiny_setup();
  GazeModel<float> m(s.cfg.model, 1);
  const auto path = scratch("good.cst").string();
  write_checkpoint(path, make_checkpoint(m, nullptr, echo_config(s.cfg)));
  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto kind = [&](const std::string& data) {
    const auto p = scratch("bad.cst").string();
    std::ofstream(p, std::ios::binary | std::ios::trunc) << data;
    try {
      read_checkpoint(p);
    } catch (const FormatError& e) {
      return e.kind();
    }
    return FormatError::Kind::io;
  };
  auto v = bytes;
  v[4] = 2;
  EXPECT_EQ(kind(v), FormatError::Kind::version);
  auto mg = bytes;
  mg[1] = 'Z';
  EXPECT_EQ(kind(mg), FormatError::Kind::bad_magic);
  EXPECT_EQ(kind(bytes.substr(0, bytes.size() - 10)), FormatError::Kind::corrupt);
  EXPECT_EQ(kind(bytes + "xyz"), FormatError::Kind::corrupt);
  EXPECT_THROW(read_checkpoint(scratch("does_not_exist.cst").string()), Error);
}

TEST(Train, NonFiniteLossAborts) {
  auto s = tiny_setup();
  GazeModel<float> m(s.cfg.model, 1);
  for (auto p : m.parameters())
    if (p.name == "fusion.bias") p.tensor.mutable_values()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainState st;
  try {
    train(m, s.train, s.val, s.cfg.train, st);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("lr"), std::string::npos) << e.what();
  }
}
