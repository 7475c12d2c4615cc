#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "mot/training.hpp"

namespace fs = std::filesystem;
using mot::Tensor;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("mot_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string write_file(const fs::path& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
  return path.string();
}

std::string sample_text(std::size_t n) {
  std::string s;
  const std::string words = "the quick brown fox jumps over the lazy dog while seven wizards quietly hex ";
  while (s.size() < n) s += words;
  return s.substr(0, n);
}

mot::RunConfig small_config(const fs::path& dir, mot::FeedForwardKind kind) {
  mot::RunConfig cfg;
  cfg.model = {1, 16, 32, 2, 256, 16, kind};
  if (kind != mot::FeedForwardKind::dense) {
    cfg.mot = mot::MoTConfig{4, 16, 2, mot::TemperatureMode::learnable, 1.0};
  }
  cfg.steps = 20;
  cfg.batch_size = 4;
  cfg.context_length = 8;
  cfg.peak_lr = 3e-3;
  cfg.seed = 5;
  cfg.data_path = write_file(dir / "data.txt", sample_text(4000));
  cfg.out_dir = (dir / "out").string();
  cfg.log_every = 1;
  return cfg;
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

}  // namespace

TEST(RunConfig, ParsesAllFields) {
  const auto cfg = mot::parse_run_config(R"({
    "model": {"n_blocks": 3, "d_model": 32, "d_ff": 64, "n_heads": 4, "vocab_size": 256,
              "context_length": 32, "ff_kind": "mot"},
    "mot": {"n_experts": 8, "expert_hidden": 16, "group_size": 4, "temperature_mode": "learnable",
            "init_temperature": 0.5},
    "steps": 10, "batch_size": 8, "context_length": 16, "peak_lr": 0.001,
    "warmup_fraction": 0.05, "final_lr_fraction": 0.2, "seed": 9,
    "data_path": "d.txt", "out_dir": "o", "log_every": 2, "eval_every": 5})");
  EXPECT_EQ(cfg.model.n_blocks, 3u);
  EXPECT_EQ(cfg.model.ff_kind, mot::FeedForwardKind::mot);
  ASSERT_TRUE(cfg.mot);
  EXPECT_EQ(cfg.mot->temperature_mode, mot::TemperatureMode::learnable);
  EXPECT_EQ(cfg.mot->init_temperature, 0.5);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.eval_every, 5u);
  const auto again = mot::run_config_from_json(mot::to_json(cfg));
  EXPECT_EQ(mot::to_json(again), mot::to_json(cfg));
}

TEST(RunConfig, UnknownKeysRejected) {
  try {
    mot::parse_run_config(R"({"steps": 10, "stpes": 3})");
    FAIL();
  } catch (const mot::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'stpes'"), std::string::npos) << e.what();
  }
  try {
    mot::parse_run_config(R"({"model": {"dmodel": 8}})");
    FAIL();
  } catch (const mot::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'model.dmodel'"), std::string::npos) << e.what();
  }
}

TEST(RunConfig, TypeErrorsNameTheField) {
  try {
    mot::parse_run_config(R"({"mot": {"group_size": "eight"}})");
    FAIL();
  } catch (const mot::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("'mot.group_size'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(mot::parse_run_config(R"({"steps": -1})"), mot::ConfigError);
  EXPECT_THROW(mot::parse_run_config(R"({"model": {"ff_kind": "sparse"}})"), mot::ConfigError);
}

TEST(RunConfig, SyntaxErrorReportsLine) {
  try {
    mot::parse_run_config("{\n  \"steps\": 10,\n  \"seed\" 3\n}");
    FAIL();
  } catch (const mot::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(RunConfig, Invariants) {
  EXPECT_THROW(mot::parse_run_config(R"({"warmup_fraction": 0.0})"), mot::ConfigError);
  EXPECT_THROW(mot::parse_run_config(R"({"warmup_fraction": 1.0})"), mot::ConfigError);
  EXPECT_THROW(mot::parse_run_config(R"({"final_lr_fraction": 0.0})"), mot::ConfigError);
  EXPECT_NO_THROW(mot::parse_run_config(R"({"final_lr_fraction": 1.0})"));
  EXPECT_THROW(mot::parse_run_config(R"({"model": {"ff_kind": "mot"}, "mot": {"group_size": 3}, "batch_size": 16})"),
               mot::ConfigError);
  EXPECT_THROW(mot::parse_run_config(R"({"model": {"ff_kind": "mot"}})"), mot::ConfigError);
  EXPECT_THROW(mot::load_run_config("/nonexistent/config.json"), mot::ConfigError);
}

TEST(Corpus, MissingAndEmptyFiles) {
  const auto dir = scratch_dir("corpus");
  try {
    mot::load_corpus((dir / "missing.txt").string());
    FAIL();
  } catch (const mot::IoError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.txt"), std::string::npos);
  }
  EXPECT_THROW(mot::load_corpus(write_file(dir / "empty.txt", "")), mot::IoError);
  EXPECT_EQ(mot::load_corpus(write_file(dir / "ab.txt", "ab")), (std::vector<std::uint8_t>{'a', 'b'}));
}

TEST(Batches, DeterministicBoundedAndShifted) {
  const auto text = sample_text(500);
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  const auto a = mot::make_batches(bytes, 6, 10, 3, 7);
  const auto b = mot::make_batches(bytes, 6, 10, 3, 7);
  const auto c = mot::make_batches(bytes, 6, 10, 3, 8);
  EXPECT_EQ(a.windows, b.windows);
  EXPECT_NE(a.windows, c.windows);
  const auto in = a.inputs(), tg = a.targets();
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t t = 0; t + 1 < 10; ++t) EXPECT_EQ(tg[r * 10 + t], in[r * 10 + t + 1]);
    // each window is a contiguous slice of the corpus
    const std::string window(a.windows.begin() + r * 11, a.windows.begin() + (r + 1) * 11);
    EXPECT_NE(text.find(window), std::string::npos);
  }
  for (auto v : a.windows) EXPECT_TRUE(v >= 0 && v < 256);
}

TEST(Batches, CorpusTooShort) {
  const std::vector<std::uint8_t> bytes(11, 'x');
  EXPECT_THROW(mot::make_batches(bytes, 1, 10, 0, 0), mot::ContractError);
  EXPECT_NO_THROW(mot::make_batches(std::vector<std::uint8_t>(12, 'x'), 1, 10, 0, 0));
}

TEST(Schedule, KeyPoints) {
  const double peak = 2e-3;
  EXPECT_EQ(mot::lr_schedule(0, 1000, peak, 0.01, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(mot::lr_schedule(10, 1000, peak, 0.01, 0.1), peak);
  EXPECT_NEAR(mot::lr_schedule(1000, 1000, peak, 0.01, 0.1), 0.1 * peak, 1e-18);
  EXPECT_NEAR(mot::lr_schedule(505, 1000, peak, 0.01, 0.1), 0.55 * peak, 1e-15);
  EXPECT_DOUBLE_EQ(mot::lr_schedule(5, 1000, peak, 0.01, 0.1), 0.5 * peak);
}

TEST(Schedule, ContinuousAtWarmupAndNonincreasingAfter) {
  for (std::size_t total : {50u, 333u, 5000u}) {
    const auto warm = mot::warmup_steps(total, 0.01);
    double prev = mot::lr_schedule(warm, total, 1.0, 0.01, 0.1);
    EXPECT_DOUBLE_EQ(prev, 1.0);
    EXPECT_NEAR(mot::lr_schedule(warm - 1, total, 1.0, 0.01, 0.1), 1.0, 1.0 / warm + 1e-12);
    for (std::size_t s = warm + 1; s <= total; ++s) {
      const double lr = mot::lr_schedule(s, total, 1.0, 0.01, 0.1);
      EXPECT_LE(lr, prev);
      prev = lr;
    }
  }
}

TEST(Adam, ZeroGradientsLeaveParametersAndDecayMoments) {
  std::map<std::string, Tensor<double>> params{{"w", Tensor<double>({2}, {1.0, -2.0}, true)}};
  mot::OptimizerState<double> st;
  st.first_moment["w"] = {0.5, 0.5};
  st.second_moment["w"] = {0.25, 0.25};
  params.at("w").mutable_grad();
  mot::optimizer_step(params, st, 0.1);
  // m is nonzero, so the update is not exactly zero; check the moments and then a fresh state
  EXPECT_DOUBLE_EQ(st.first_moment["w"][0], 0.45);
  EXPECT_DOUBLE_EQ(st.second_moment["w"][0], 0.25 * 0.999);
  std::map<std::string, Tensor<double>> fresh{{"w", Tensor<double>({2}, {1.0, -2.0}, true)}};
  mot::OptimizerState<double> st2;
  fresh.at("w").mutable_grad();
  mot::optimizer_step(fresh, st2, 0.1);
  EXPECT_EQ(fresh.at("w").data()[0], 1.0);
  EXPECT_EQ(fresh.at("w").data()[1], -2.0);
}

TEST(Adam, SingleStepMatchesHandComputation) {
  std::map<std::string, Tensor<double>> params{{"w", Tensor<double>({1}, {0.3}, true)}};
  params.at("w").mutable_grad()[0] = 0.2;
  mot::OptimizerState<double> st;
  mot::optimizer_step(params, st, 0.01);
  // m_hat = g, v_hat = g^2, so the first step is lr * g / (|g| + eps)
  EXPECT_NEAR(params.at("w").data()[0], 0.3 - 0.01 * 0.2 / (0.2 + 1e-8), 1e-15);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, QuadraticConverges) {
  std::map<std::string, Tensor<double>> params{{"x", Tensor<double>::scalar(4.0, true)}};
  mot::OptimizerState<double> st;
  for (int i = 0; i < 500; ++i) {
    auto& x = params.at("x");
    x.zero_grad();
    auto d = mot::add_scalar(x, -1.5);
    mot::backward(d * d);
    mot::optimizer_step(params, st, 0.05);
  }
  EXPECT_NEAR(params.at("x").item(), 1.5, 1e-2);
}

TEST(Adam, ClipsGlobalNorm) {
  std::map<std::string, Tensor<double>> params{{"a", Tensor<double>({1}, {0.0}, true)},
                                               {"b", Tensor<double>({1}, {0.0}, true)}};
  params.at("a").mutable_grad()[0] = 30.0;
  params.at("b").mutable_grad()[0] = 40.0;
  mot::OptimizerState<double> st;
  const double norm = mot::optimizer_step(params, st, 0.1);
  EXPECT_DOUBLE_EQ(norm, 50.0);
  EXPECT_NEAR(st.first_moment["a"][0], 0.1 * 0.6, 1e-15);
  EXPECT_NEAR(st.first_moment["b"][0], 0.1 * 0.8, 1e-15);
}

TEST(Adam, NaNGradientNamesParameter) {
  std::map<std::string, Tensor<double>> params{{"block0.ff.w1", Tensor<double>({1}, {0.0}, true)}};
  params.at("block0.ff.w1").mutable_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  mot::OptimizerState<double> st;
  try {
    mot::optimizer_step(params, st, 0.1);
    FAIL();
  } catch (const mot::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("block0.ff.w1"), std::string::npos);
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = scratch_dir("ckpt");
  auto cfg = small_config(dir, mot::FeedForwardKind::mot);
  mot::Trainer trainer(cfg, mot::load_corpus(cfg.data_path));
  trainer.run(3);
  const auto path = (dir / "a.ckpt").string();
  trainer.save(path);
  const auto ck = mot::read_checkpoint(path);
  EXPECT_EQ(ck.step, 3u);
  for (const auto& [name, p] : trainer.model().parameters()) {
    ASSERT_TRUE(ck.tensors.count(name)) << name;
    const auto& t = ck.tensors.at(name);
    EXPECT_EQ(t.shape, p.shape());
    for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_EQ(t.values[i], p.data()[i]);
    EXPECT_TRUE(ck.tensors.count("optim.m." + name));
  }
  // manifest order is lexicographic
  std::string prev;
  for (const auto& [name, _] : ck.tensors) {
    EXPECT_LT(prev, name);
    prev = name;
  }
  const auto model = mot::model_from_checkpoint<float>(ck);
  for (const auto& [name, p] : model->parameters()) {
    for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_EQ(p.data()[i], trainer.model().parameters().at(name).data()[i]);
  }
}

TEST(Checkpoint, HeaderAndLittleEndianPayload) {
  const auto dir = scratch_dir("ckpt_layout");
  mot::Checkpoint ck;
  ck.config = small_config(dir, mot::FeedForwardKind::dense);
  ck.step = 4;
  ck.tensors["b"] = {{2}, {1.0f, -2.5f}};
  ck.tensors["a"] = {{1, 1}, {0.5f}};
  const auto path = (dir / "x.ckpt").string();
  mot::write_checkpoint(ck, path);
  std::ifstream in(path, std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(all.rfind("MOTCKPT 1\nconfig {", 0), 0u);
  EXPECT_NE(all.find("\nstep 4\ntensors 2\na 2 1 1 0\nb 1 2 4\nend\n"), std::string::npos);
  const auto payload = all.substr(all.size() - 12);
  // 0.5f = 0x3f000000, little endian
  EXPECT_EQ(static_cast<unsigned char>(payload[3]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(payload[0]), 0x00);
  const auto back = mot::read_checkpoint(path);
  EXPECT_EQ(back.tensors.at("b").values, (std::vector<float>{1.0f, -2.5f}));
}

TEST(Checkpoint, MalformedFilesNameTheField) {
  const auto dir = scratch_dir("ckpt_bad");
  mot::Checkpoint ck;
  ck.config = small_config(dir, mot::FeedForwardKind::dense);
  ck.tensors["w"] = {{2}, {1.0f, 2.0f}};
  const auto good = (dir / "good.ckpt").string();
  mot::write_checkpoint(ck, good);
  std::ifstream in(good, std::ios::binary);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  auto expect_error = [&](const std::string& content, const std::string& fragment) {
    const auto p = write_file(dir / "bad.ckpt", content);
    try {
      mot::read_checkpoint(p);
      ADD_FAILURE() << "no error for " << fragment;
    } catch (const mot::FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  expect_error("NOTCKPT 1\n", "magic");
  expect_error("MOTCKPT 2\n", "version");
  auto replace = [&](const std::string& from, const std::string& to) {
    auto s = text;
    s.replace(s.find(from), from.size(), to);
    return s;
  };
  expect_error(replace("\nstep 0\n", "\nstep zero\n"), "'step'");
  expect_error(replace("\ntensors 1\n", "\ntensor 1\n"), "'tensors'");
  expect_error(replace("config {", "config {\"bogus\":1,"), "'config'");
  expect_error(replace("\nw 1 2 0\n", "\nw 1 2 4\n"), "offset");
  expect_error(text.substr(0, text.size() - 2), "truncated");
  expect_error(text + "zz", "trailing");
  EXPECT_THROW(mot::read_checkpoint((dir / "none.ckpt").string()), mot::IoError);
}

TEST(Trainer, IdenticalConfigsGiveBitwiseIdenticalMetrics) {
  const auto dir = scratch_dir("determinism");
  auto cfg = small_config(dir, mot::FeedForwardKind::mot);
  cfg.out_dir = (dir / "run_a").string();
  mot::train(cfg);
  cfg.out_dir = (dir / "run_b").string();
  mot::train(cfg);
  auto a = read_lines(dir / "run_a" / "metrics.csv");
  auto b = read_lines(dir / "run_b" / "metrics.csv");
  ASSERT_EQ(a.size(), 21u);
  for (std::size_t i = 1; i < a.size(); ++i) {
    // compare everything but the throughput column
    auto strip = [](const std::string& l) {
      auto first = l.find(',');
      auto second = l.find(',', first + 1);
      auto third = l.find(',', second + 1);
      auto fourth = l.find(',', third + 1);
      return l.substr(0, third) + (fourth == std::string::npos ? "" : l.substr(fourth));
    };
    EXPECT_EQ(strip(a[i]), strip(b[i]));
  }
}

TEST(Trainer, ResumeMatchesStraightRun) {
  const auto dir = scratch_dir("resume");
  auto cfg = small_config(dir, mot::FeedForwardKind::mot);
  const auto corpus = mot::load_corpus(cfg.data_path);
  mot::Trainer straight(cfg, corpus);
  const auto full = straight.run(20);
  mot::Trainer first(cfg, corpus);
  auto part = first.run(10);
  first.save((dir / "mid.ckpt").string());
  mot::Trainer resumed(mot::read_checkpoint((dir / "mid.ckpt").string()), corpus);
  EXPECT_EQ(resumed.completed_steps(), 10u);
  for (auto& r : resumed.run(20)) part.push_back(r);
  ASSERT_EQ(part.size(), full.size());
  for (std::size_t i = 0; i < full.size(); ++i) {
    EXPECT_EQ(part[i].step, full[i].step);
    EXPECT_NEAR(part[i].train_loss, full[i].train_loss, 1e-6);
  }
}

TEST(Trainer, MetricsColumnsForMoTBlocks) {
  const auto dir = scratch_dir("metrics");
  auto cfg = small_config(dir, mot::FeedForwardKind::mot);
  cfg.model.n_blocks = 2;
  cfg.log_every = 5;
  cfg.eval_every = 10;
  const auto summary = mot::train(cfg);
  EXPECT_EQ(summary.steps, 20u);
  const auto lines = read_lines(fs::path(cfg.out_dir) / "metrics.csv");
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0], "step,train_loss,lr,tokens_per_sec,entropy_block_0,temp_block_0,entropy_block_1,temp_block_1");
  int prev = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::stringstream ss(lines[i]);
    std::vector<std::string> fields;
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    ASSERT_EQ(fields.size(), 8u);
    EXPECT_GT(std::stoi(fields[0]), prev);
    prev = std::stoi(fields[0]);
    for (const auto& f : fields) EXPECT_FALSE(f.empty());
    EXPECT_GT(std::stod(fields[5]), 0.0);
  }
  EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "checkpoint.ckpt"));
  EXPECT_TRUE(fs::exists(fs::path(cfg.out_dir) / "checkpoint_step10.ckpt"));
  EXPECT_EQ(read_lines(fs::path(cfg.out_dir) / "eval.csv").size(), 3u);
}

TEST(Trainer, DenseMetricsHaveNoBlockColumns) {
  const auto dir = scratch_dir("metrics_dense");
  auto cfg = small_config(dir, mot::FeedForwardKind::dense);
  cfg.steps = 3;
  mot::train(cfg);
  const auto lines = read_lines(fs::path(cfg.out_dir) / "metrics.csv");
  EXPECT_EQ(lines[0], "step,train_loss,lr,tokens_per_sec");
}

TEST(Trainer, NonFiniteLossReportsStep) {
  const auto dir = scratch_dir("nonfinite");
  auto cfg = small_config(dir, mot::FeedForwardKind::dense);
  mot::Trainer trainer(cfg, mot::load_corpus(cfg.data_path));
  trainer.run(2);
  auto head = trainer.model().parameters().at("head.b");
  for (auto& v : head.mutable_data()) v = std::numeric_limits<float>::quiet_NaN();
  try {
    trainer.step();
    FAIL();
  } catch (const mot::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 3"), std::string::npos) << e.what();
  }
}

TEST(Trainer, EvaluateReportsPerplexity) {
  const auto dir = scratch_dir("eval");
  auto cfg = small_config(dir, mot::FeedForwardKind::dense);
  mot::Trainer trainer(cfg, mot::load_corpus(cfg.data_path));
  const auto r = mot::evaluate(trainer.model(), trainer.corpus(), 3, 4, 8, 1);
  EXPECT_NEAR(r.loss, std::log(256.0), 0.05);
  EXPECT_DOUBLE_EQ(r.perplexity, std::exp(r.loss));
}

TEST(Trainer, LossDecreasesOnSmallCorpus) {
  const auto dir = scratch_dir("learn");
  for (auto kind : {mot::FeedForwardKind::dense, mot::FeedForwardKind::mot}) {
    auto cfg = small_config(dir, kind);
    cfg.steps = 150;
    cfg.peak_lr = 1e-2;
    mot::Trainer trainer(cfg, mot::load_corpus(cfg.data_path));
    const auto rows = trainer.run(150);
    double head = 0, tail = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      head += rows[i].train_loss;
      tail += rows[rows.size() - 1 - i].train_loss;
    }
    EXPECT_LT(tail, head - 10 * 1.5) << mot::to_string(kind);
  }
}
