#pragma once

#include <cstdint>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mot/analysis.hpp"
#include "mot/baselines.hpp"
#include "mot/gradcheck_suite.hpp"
#include "mot/model.hpp"
#include "mot/mot_layer.hpp"
#include "mot/random.hpp"
#include "mot/training.hpp"

namespace mot::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr double kEquivTolerance = 1e-6;
inline constexpr double kNearLimitTolerance = 1e-4;
inline constexpr double kNearLimitTemperature = 1e-6;
inline constexpr double kLeakTolerance = 1e-12;

struct EquivReport {
  double hard_diff = 0.0;
  double near_limit_diff = 0.0;
};

/// Random MoT parameters and groups; weights are large enough that controller
/// scores are well separated.
inline EquivReport run_equiv(std::size_t d_model, std::size_t n_experts, std::size_t group_size,
                             std::uint64_t seed, std::size_t n_groups = 4) {
  MoTConfig cfg{n_experts, 2 * d_model, group_size, TemperatureMode::hard, 1.0};
  Rng rng = make_rng(seed, 0x6571);
  auto params = MoTLayerParams<double>::init(d_model, cfg, rng);
  params.controller = random_normal<double>({d_model, n_experts}, rng, 1.0);
  params.controller_bias = random_normal<double>({n_experts}, rng, 0.1);
  params.expert_w1 = random_normal<double>({n_experts, d_model, cfg.expert_hidden}, rng, 0.3);
  params.expert_b1 = random_normal<double>({n_experts, cfg.expert_hidden}, rng, 0.1);
  params.expert_w2 = random_normal<double>({n_experts, cfg.expert_hidden, d_model}, rng, 0.3);
  params.expert_b2 = random_normal<double>({n_experts, d_model}, rng, 0.1);
  const auto groups = random_normal<double>({n_groups, group_size, d_model}, rng, 1.0);
  return {analysis::equivalence_check(params, groups),
          analysis::equivalence_check(params, groups, std::optional<double>(kNearLimitTemperature))};
}

struct LeakReport {
  double causal = 0.0;
  double same_sequence = 0.0;
  double cross_sequence = 0.0;
  std::size_t group_size = 0;

  bool passed() const {
    return causal <= kLeakTolerance && same_sequence <= kLeakTolerance &&
           (group_size < 2 || cross_sequence > 0.0);
  }
};

/// Model used by leakcheck when no config is given.
inline RunConfig default_leak_config() {
  RunConfig cfg;
  cfg.model = {2, 32, 64, 4, 256, 16, FeedForwardKind::mot};
  cfg.mot = MoTConfig{8, 16, 4, TemperatureMode::learnable, 1.0};
  cfg.batch_size = 8;
  cfg.context_length = 8;
  return cfg;
}

/// Perturbation checks on a random-weight model in double precision. The
/// causal check runs on the full language model; the sequence checks run on
/// the first MoT layer in isolation.
inline LeakReport run_leakcheck(const RunConfig& cfg, std::uint64_t seed) {
  const std::size_t L = std::min<std::size_t>(cfg.context_length, cfg.model.context_length);
  if (L < 2) throw ConfigError("leakcheck: context_length must be at least 2");
  MoTConfig mot_cfg = cfg.mot.value_or(default_leak_config().mot.value());
  const std::size_t g = mot_cfg.group_size;
  const std::size_t batch = 2 * g;
  Rng rng = make_rng(seed, 0x6c65616b);
  std::uniform_int_distribution<std::size_t> pick_seq(0, batch - 1);
  std::uniform_int_distribution<std::size_t> pick_probe(0, L - 2);

  Model<double> model(cfg.model, cfg.mot, seed);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(cfg.model.vocab_size) - 1);
  std::vector<std::int32_t> ids(batch * L);
  for (auto& id : ids) id = tok(rng);

  LeakReport report;
  report.group_size = g;
  {
    analysis::LeakProbe probe;
    probe.probe_seq = probe.perturb_seq = pick_seq(rng);
    probe.probe_pos = pick_probe(rng);
    probe.perturb_pos = std::uniform_int_distribution<std::size_t>(probe.probe_pos + 1, L - 1)(rng);
    report.causal = analysis::leak_check(model, ids, batch, L, probe, analysis::LeakMode::causal);
  }

  MoTLayerParams<double> layer;
  if (cfg.model.ff_kind != FeedForwardKind::dense && !model.blocks().empty()) {
    layer = *model.blocks().front().mot;
  } else {
    layer = MoTLayerParams<double>::init(cfg.model.d_model, mot_cfg, rng);
  }
  const auto input = random_normal<double>({batch, L, cfg.model.d_model}, rng, 1.0);
  {
    analysis::LeakProbe probe;
    probe.probe_seq = probe.perturb_seq = pick_seq(rng);
    probe.probe_pos = std::uniform_int_distribution<std::size_t>(0, L - 1)(rng);
    probe.perturb_pos = (probe.probe_pos + 1 + std::uniform_int_distribution<std::size_t>(0, L - 2)(rng)) % L;
    report.same_sequence =
        analysis::leak_check(layer, mot_cfg, input, probe, analysis::LeakMode::same_sequence);
  }
  if (g >= 2) {
    analysis::LeakProbe probe;
    probe.probe_seq = pick_seq(rng);
    // Another member of the same group: same batch slice, same position.
    const std::size_t slice = probe.probe_seq / g;
    const std::size_t offset = 1 + std::uniform_int_distribution<std::size_t>(0, g - 2)(rng);
    probe.perturb_seq = slice * g + (probe.probe_seq % g + offset) % g;
    probe.probe_pos = probe.perturb_pos = std::uniform_int_distribution<std::size_t>(0, L - 1)(rng);
    report.cross_sequence =
        analysis::leak_check(layer, mot_cfg, input, probe, analysis::LeakMode::cross_sequence);
  }
  return report;
}

namespace detail {

inline void print_metrics_summary(std::ostream& out, const std::vector<BlockMetrics>& blocks) {
  if (blocks.empty()) {
    out << "no MoT blocks\n";
    return;
  }
  out << std::setprecision(9);
  for (const auto& b : blocks) {
    out << "block " << b.block << " mean_entropy=" << b.mean_entropy
        << " temperature=" << b.temperature << '\n';
  }
}

}  // namespace detail

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixture of Tokens training and verification tool", "mot_cli"};
  app.require_subcommand(1);

  std::string config_path, data_path, out_dir, checkpoint_path;
  std::optional<std::uint64_t> seed_override;
  std::uint64_t seed = 0;
  bool f64 = false;
  std::size_t batches = 8, dmodel = 16, experts = 4, group = 8;

  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON run configuration");
  train_cmd->add_option("--config", config_path, "Run configuration")->required();
  train_cmd->add_option("--data", data_path, "Corpus file, overrides data_path");
  train_cmd->add_option("--out", out_dir, "Output directory, overrides out_dir");
  train_cmd->add_option("--seed", seed_override, "Seed, overrides seed");

  auto* eval_cmd = app.add_subcommand("eval", "Mean loss and perplexity of a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  eval_cmd->add_option("--data", data_path, "Corpus file")->required();
  eval_cmd->add_option("--batches", batches, "Number of batches")->check(CLI::PositiveNumber);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad_cmd->add_option("--seed", seed, "Seed");
  grad_cmd->add_flag("--f64", f64, "Run in double precision");

  auto* equiv_cmd = app.add_subcommand("equiv", "Hard-mode MoT against Expert Choice");
  equiv_cmd->add_option("--dmodel", dmodel, "Model width")->check(CLI::PositiveNumber);
  equiv_cmd->add_option("--experts", experts, "Number of experts")->check(CLI::PositiveNumber);
  equiv_cmd->add_option("--group", group, "Group size")->check(CLI::PositiveNumber);
  equiv_cmd->add_option("--seed", seed, "Seed");

  auto* leak_cmd = app.add_subcommand("leakcheck", "Causal and grouping isolation checks");
  leak_cmd->add_option("--config", config_path, "Run configuration (optional)");
  leak_cmd->add_option("--seed", seed, "Seed");

  auto* flops_cmd = app.add_subcommand("flops", "Parameter and FLOP cost report");
  flops_cmd->add_option("--config", config_path, "Run configuration with a mot section")->required();

  auto* inspect_cmd = app.add_subcommand("inspect", "Per-block mixing entropy and temperature");
  inspect_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  inspect_cmd->add_option("--data", data_path, "Corpus file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (*train_cmd) {
      auto cfg = load_run_config(config_path);
      if (!data_path.empty()) cfg.data_path = data_path;
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (seed_override) cfg.seed = *seed_override;
      if (cfg.data_path.empty()) throw ConfigError("config field 'data_path': no corpus given");
      const auto summary = train(cfg);
      out << "steps=" << summary.steps << '\n'
          << "final_train_loss=" << std::setprecision(9) << summary.final_loss << '\n'
          << "checkpoint=" << summary.checkpoint_path << '\n';
      return kExitOk;
    }
    if (*eval_cmd) {
      const auto ck = read_checkpoint(checkpoint_path);
      auto model = model_from_checkpoint<float>(ck);
      const auto corpus = load_corpus(data_path);
      const auto r = evaluate(*model, corpus, batches, ck.config.batch_size,
                              ck.config.context_length, ck.config.seed);
      out << std::setprecision(9) << "loss=" << r.loss << '\n' << "perplexity=" << r.perplexity << '\n';
      return kExitOk;
    }
    if (*grad_cmd) {
      const auto cases = f64 ? run_gradcheck_suite<double>(seed) : run_gradcheck_suite<float>(seed);
      bool all = true;
      out << "precision=" << (f64 ? "f64" : "f32") << '\n';
      for (const auto& c : cases) {
        out << std::left << std::setw(28) << c.name << " max_rel_error=" << std::scientific
            << std::setprecision(3) << c.max_rel_error << " threshold=" << c.threshold << ' '
            << (c.passed ? "PASS" : "FAIL") << '\n'
            << std::defaultfloat;
        all = all && c.passed;
      }
      out << (all ? "all cases passed" : "some cases failed") << '\n';
      return all ? kExitOk : kExitFailure;
    }
    if (*equiv_cmd) {
      const auto r = run_equiv(dmodel, experts, group, seed);
      out << std::scientific << std::setprecision(3) << "max_diff_hard=" << r.hard_diff << '\n'
          << "max_diff_tau_1e-6=" << r.near_limit_diff << '\n';
      return r.hard_diff < kEquivTolerance ? kExitOk : kExitFailure;
    }
    if (*leak_cmd) {
      const auto cfg = config_path.empty() ? default_leak_config() : load_run_config(config_path);
      const auto r = run_leakcheck(cfg, seed);
      out << std::scientific << std::setprecision(3) << "causal_delta=" << r.causal << '\n'
          << "same_sequence_delta=" << r.same_sequence << '\n'
          << "cross_sequence_delta=" << r.cross_sequence << '\n'
          << (r.passed() ? "PASS" : "FAIL") << '\n';
      return r.passed() ? kExitOk : kExitFailure;
    }
    if (*flops_cmd) {
      const auto cfg = load_run_config(config_path);
      if (!cfg.mot) throw ConfigError("config field 'mot': flops needs a mot section");
      analysis::write_cost_report(out, analysis::make_cost_report(cfg.model.d_model, cfg.model.d_ff, *cfg.mot));
      return kExitOk;
    }
    if (*inspect_cmd) {
      const auto ck = read_checkpoint(checkpoint_path);
      auto model = model_from_checkpoint<float>(ck);
      const auto corpus = load_corpus(data_path);
      const auto b = make_batches(corpus, ck.config.batch_size, ck.config.context_length,
                                  ck.config.seed, 0, kEvalStream);
      NoGradGuard no_grad;
      const auto inputs = b.inputs();
      const auto targets = b.targets();
      const auto loss = cross_entropy(model->forward(inputs, b.batch, b.length), targets);
      out << "step=" << ck.step << '\n' << "batch_loss=" << std::setprecision(9) << loss.item() << '\n';
      detail::print_metrics_summary(out, block_metrics(*model));
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace mot::cli
