// SPDX-License-Identifier: Apache-2.0
// Exercises the shared library through its C header only.
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "capstare/capstare.h"

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / "capstare_test_capi" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

struct Config {
  cs_config* p = nullptr;
  Config() { EXPECT_EQ(cs_config_new(&p), CS_OK); }
  ~Config() { cs_config_free(p); }
  void set(const char* k, const std::string& v) { ASSERT_EQ(cs_config_set(p, k, v.c_str()), CS_OK) << cs_last_error(); }
};

void tiny(Config& c, const fs::path& out) {
  c.set("model.image_size", "16");
  c.set("model.encoder_channels", "4,8");
  c.set("model.num_capsules", "2");
  c.set("model.num_heads", "2");
  c.set("model.capsule_dim", "8");
  c.set("model.hidden_dim", "8");
  c.set("model.seq_len", "3");
  c.set("data.seq_len", "3");
  c.set("data.count", "10");
  c.set("train.lr", "0.01");
  c.set("train.epochs", "2");
  c.set("train.batch_size", "4");
  c.set("out.dir", out.string());
}

void collect(const char* line, void* user) { static_cast<std::vector<std::string>*>(user)->push_back(line); }

}  // namespace

TEST(CApi, StatusNamesAndVersion) {
  EXPECT_STREQ(cs_status_name(CS_ERR_CONFIG), "config");
  EXPECT_STREQ(cs_status_name(CS_ERR_FORMAT), "format");
  EXPECT_GT(std::string(cs_version()).size(), 0u);
}

TEST(CApi, ConfigAccessAndErrors) {
  Config c;
  EXPECT_EQ(cs_config_set(c.p, "model.num_capsules", "8"), CS_OK);
  char buf[32];
  size_t need = 0;
  ASSERT_EQ(cs_config_get(c.p, "model.num_capsules", buf, sizeof buf, &need), CS_OK);
  EXPECT_STREQ(buf, "8");
  EXPECT_EQ(need, 2u);
  EXPECT_EQ(cs_config_set(c.p, "model.num_capsuls", "8"), CS_ERR_CONFIG);
  EXPECT_NE(std::string(cs_last_error()).find("model.num_capsules"), std::string::npos);
  EXPECT_EQ(cs_config_apply_flag(c.p, "--train.lr=abc"), CS_ERR_CONFIG);
  EXPECT_EQ(cs_config_apply_flag(c.p, "--train.lr=0.5"), CS_OK);
  ASSERT_EQ(cs_config_echo(c.p, nullptr, 0, &need), CS_OK);
  std::string echo(need, '\0');
  ASSERT_EQ(cs_config_echo(c.p, echo.data(), echo.size(), &need), CS_OK);
  EXPECT_NE(echo.find("train.lr = 0.5"), std::string::npos);
  EXPECT_EQ(cs_config_validate(c.p), CS_OK);
  EXPECT_EQ(cs_config_set(c.p, "data.source", "directory"), CS_OK);
  EXPECT_EQ(cs_config_validate(c.p), CS_ERR_CONFIG);
  EXPECT_EQ(cs_config_set(nullptr, "a", "b"), CS_ERR_CONFIG);
  cs_config* none = nullptr;
  EXPECT_EQ(cs_config_load("/definitely/not/here.cfg", &none), CS_ERR_CONFIG);
}

TEST(CApi, CountAndBench) {
  Config c;
  int64_t params = 0;
  double flops = 0;
  ASSERT_EQ(cs_count(c.p, &params, &flops), CS_OK);
  EXPECT_EQ(params, 341070);
  EXPECT_GT(flops, 0);
  c.set("model.image_size", "16");
  cs_latency lat{};
  EXPECT_EQ(cs_bench(c.p, 0, 5, &lat), CS_ERR_CONFIG);
  ASSERT_EQ(cs_bench(c.p, 1, 10, &lat), CS_OK);
  EXPECT_EQ(lat.iters, 10);
  EXPECT_GT(lat.mean_ms, 0);
}

TEST(CApi, TrainEvalPredictHeatmaps) {
  const auto out = scratch("run");
  Config c;
  tiny(c, out);
  std::vector<std::string> log;
  ASSERT_EQ(cs_train(c.p, nullptr, collect, &log), CS_OK) << cs_last_error();
  EXPECT_FALSE(log.empty());
  const auto ckpt = (out / "checkpoint.cst").string();
  EXPECT_TRUE(fs::exists(ckpt));
  EXPECT_TRUE(fs::exists(out / "config.txt"));
  EXPECT_TRUE(fs::exists(out / "train_log.csv"));

  cs_report rep{};
  ASSERT_EQ(cs_eval(ckpt.c_str(), nullptr, &rep), CS_OK) << cs_last_error();
  EXPECT_TRUE(std::isfinite(rep.err_deg));
  EXPECT_TRUE(std::isnan(rep.err_window_var));  // 2 validation samples < window of 5
  EXPECT_GT(rep.params, 0);
  EXPECT_TRUE(fs::exists(out / "eval.csv"));

  cs_model* m = nullptr;
  ASSERT_EQ(cs_model_load(ckpt.c_str(), &m), CS_OK);
  int64_t t = 0, s = 0;
  ASSERT_EQ(cs_model_shape(m, &t, &s), CS_OK);
  EXPECT_EQ(t, 3);
  EXPECT_EQ(s, 16);
  std::vector<float> px(static_cast<size_t>(2 * t * 3 * s * s), 0.5f);
  float y[4] = {NAN, NAN, NAN, NAN};
  ASSERT_EQ(cs_model_predict(m, px.data(), 2, y), CS_OK) << cs_last_error();
  EXPECT_TRUE(std::isfinite(y[0]) && std::isfinite(y[3]));
  EXPECT_NEAR(y[0], y[2], 1e-6);
  EXPECT_NEAR(y[1], y[3], 1e-6);
  px[7] = 2.0f;
  EXPECT_EQ(cs_model_predict(m, px.data(), 2, y), CS_ERR_DATA);
  cs_model_free(m);

  const auto heat = out / "heat";
  const int64_t samples[] = {0, 1};
  ASSERT_EQ(cs_export_heatmaps(ckpt.c_str(), nullptr, samples, 2, heat.string().c_str()), CS_OK) << cs_last_error();
  int pngs = 0;
  for (const auto& e : fs::directory_iterator(heat / "sample_1")) pngs += e.path().extension() == ".png";
  EXPECT_EQ(pngs, 2 * 3);
  const int64_t bad[] = {99};
  EXPECT_EQ(cs_export_heatmaps(ckpt.c_str(), nullptr, bad, 1, heat.string().c_str()), CS_ERR_DATA);

  // resume continues from the saved epoch
  c.set("train.epochs", "3");
  log.clear();
  ASSERT_EQ(cs_train(c.p, ckpt.c_str(), collect, &log), CS_OK) << cs_last_error();
  std::ifstream in(out / "train_log.csv");
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 1 + 3);
}

TEST(CApi, ErrorCategories) {
  const auto dir = scratch("errors");
  cs_report rep{};
  const auto garbage = (dir / "garbage.cst").string();
  std::ofstream(garbage) << "not a checkpoint";
  EXPECT_EQ(cs_eval(garbage.c_str(), nullptr, &rep), CS_ERR_FORMAT);
  Config c;
  c.set("data.source", "directory");
  c.set("data.path", (dir / "nothing").string());
  c.set("out.dir", (dir / "out").string());
  EXPECT_EQ(cs_train(c.p, nullptr, nullptr, nullptr), CS_ERR_DATA);
  EXPECT_NE(std::string(cs_last_error()).find("labels.csv"), std::string::npos);
}
