// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: variance sweeps, delay simulations, toy training,
// correlation analysis, and real-socket learner/sampler endpoints.
//
// Exit codes: 0 success, 1 assertion/acceptance failure, 2 configuration
// error. Stable for CI.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "asyncrl/analysis.hpp"
#include "asyncrl/config.hpp"
#include "asyncrl/csv.hpp"
#include "asyncrl/delay_sim.hpp"
#include "asyncrl/policy.hpp"
#include "asyncrl/trainer.hpp"
#include "asyncrl/transport/endpoint.hpp"
#include "asyncrl/variance.hpp"

namespace {

using namespace asyncrl;
namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitAssertionFailure = 1;
constexpr int kExitConfigError = 2;

io::ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return io::ExperimentConfig{};
  return io::load_experiment_config(path);
}

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

int cmd_variance_sweep(const io::ExperimentConfig& cfg) {
  ensure_dir(cfg.out_dir);
  io::write_resolved_config(cfg, cfg.out_dir);
  const auto start = std::chrono::steady_clock::now();

  const auto bernoulli = variance::bernoulli_sweep(cfg.sweep.bernoulli_grid);
  // Theorem check on every discrete cell; any violation fails the command.
  std::size_t corollary_violations = 0;
  for (const auto& row : bernoulli) {
    const auto p = variance::DiscreteDist::bernoulli(row.a);
    const auto q = variance::DiscreteDist::bernoulli(row.b);
    (void)variance::appendix_quantities(p, q);  // throws on a bound violation
    if (row.kl > std::log(5.0) && !(row.var_new < row.var_std)) corollary_violations++;
  }
  analysis::sweep_table(bernoulli).save(cfg.out_dir + "/bernoulli_sweep.csv");

  const auto gaussian =
      variance::gaussian_sweep(cfg.sweep.gaussian_grid, cfg.sweep.gaussian_lo,
                               cfg.sweep.gaussian_hi);
  analysis::sweep_table(gaussian).save(cfg.out_dir + "/gaussian_sweep.csv");

  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("variance-sweep: %zu bernoulli cells, %zu gaussian cells, %.2fs, %zu corollary counterexamples\n",
              bernoulli.size(), gaussian.size(), elapsed, corollary_violations);
  return corollary_violations == 0 ? kExitOk : kExitAssertionFailure;
}

int cmd_simulate(const io::ExperimentConfig& cfg) {
  ensure_dir(cfg.out_dir);
  io::write_resolved_config(cfg, cfg.out_dir);
  for (std::uint64_t seed : cfg.seeds) {
    auto sim_config = cfg.sim_config;
    sim_config.seed = seed;
    const auto initial = ToyPolicy::random(cfg.seq, derive_seed(seed, 777), cfg.init_scale);
    const auto result = sim::run_sim(sim_config, cfg.delay, cfg.train_config.scheme, initial,
                                     parity_reward, &cfg.train_config);
    const std::string dir = cfg.out_dir + "/seed_" + std::to_string(seed);
    ensure_dir(dir);
    sim::save_trace_csv(result.trace, dir + "/trace.csv");
    sim::metrics_table(result.metrics).save(dir + "/metrics.csv");
    std::printf("simulate seed %llu: consumed=%llu dropped=%llu trace_hash=%016llx\n",
                static_cast<unsigned long long>(seed),
                static_cast<unsigned long long>(result.counters.consumed),
                static_cast<unsigned long long>(result.counters.dropped()),
                static_cast<unsigned long long>(sim::trace_hash(result.trace)));
  }
  return kExitOk;
}

int cmd_train_toy(const io::ExperimentConfig& cfg) {
  ensure_dir(cfg.out_dir);
  io::write_resolved_config(cfg, cfg.out_dir);
  for (std::uint64_t seed : cfg.seeds) {
    auto sim_config = cfg.sim_config;
    sim_config.seed = seed;
    sim_config.max_learner_steps = cfg.train_config.total_steps();
    const auto initial = ToyPolicy::random(cfg.seq, derive_seed(seed, 777), cfg.init_scale);
    const std::string dir = cfg.out_dir + "/seed_" + std::to_string(seed);
    ensure_dir(dir);

    sim::SimRun stream(sim_config, cfg.delay, initial, parity_reward);
    const auto result =
        train::run_training(initial, cfg.train_config, stream, parity_reward, dir);
    sim::metrics_table(result.metrics).save(dir + "/metrics.csv");
    io::CsvTable evals({"step", "eval_reward_mean"});
    for (const auto& e : result.evals) {
      evals.add_row({static_cast<double>(e.step), e.eval_reward_mean});
    }
    evals.save(dir + "/eval.csv");
    std::printf("train-toy seed %llu: steps=%zu final_eval=%.4f\n",
                static_cast<unsigned long long>(seed), result.metrics.size(),
                result.evals.empty() ? 0.0 : result.evals.back().eval_reward_mean);
  }
  return kExitOk;
}

int cmd_analyze(const std::string& run_dir, bool per_run, double alpha) {
  const auto series = analysis::collect_series(
      run_dir, per_run ? analysis::Granularity::PerRun : analysis::Granularity::PerStep);
  const auto reports = analysis::correlation_table(series, alpha);
  analysis::save_correlations(reports, run_dir + "/correlations.csv");
  for (const auto& r : reports) {
    if (r.degenerate) {
      std::printf("%-24s vs %-24s degenerate (constant series, n=%zu)\n", r.x_name.c_str(),
                  r.y_name.c_str(), r.n);
    } else {
      std::printf("%-24s vs %-24s r=%+.4f CI[%+.4f, %+.4f] n=%zu\n", r.x_name.c_str(),
                  r.y_name.c_str(), r.pearson_r, r.ci_low, r.ci_high, r.n);
    }
  }
  return kExitOk;
}

int cmd_serve_learner(const io::ExperimentConfig& cfg) {
  transport::LearnerEndpoint learner(cfg.topology.learner);
  std::printf("learner listening on %s:%u\n", cfg.topology.learner.host.c_str(), learner.port());
  ensure_dir(cfg.out_dir);
  io::write_resolved_config(cfg, cfg.out_dir);

  ToyPolicy policy = ToyPolicy::random(cfg.seq, derive_seed(cfg.seeds.front(), 777),
                                       cfg.init_scale);
  train::PolicyHistory history;
  history.put(policy);
  learner.broadcast_params(policy);

  std::vector<train::MetricsRow> metrics;
  const int total_steps = cfg.train_config.total_steps();
  auto last_broadcast = std::chrono::steady_clock::now();
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::minutes(30);

  while (static_cast<int>(policy.version()) < total_steps &&
         std::chrono::steady_clock::now() < deadline) {
    auto& groups = learner.drain_rollouts();
    for (auto& group : groups) {
      if (static_cast<int>(policy.version()) >= total_steps) break;
      if (group.sampler_version > policy.version()) continue;  // late joiner artifacts
      const auto staleness = sim::staleness_steps(group, policy.version());
      if (staleness > static_cast<std::uint32_t>(cfg.sim_config.max_staleness_steps)) continue;
      const RolloutGroup batch[] = {std::move(group)};
      auto [next, row] = train::learner_step(policy, batch, cfg.train_config, history,
                                             parity_reward);
      policy = std::move(next);
      history.put(policy);
      metrics.push_back(row);
      learner.broadcast_params(policy);
      last_broadcast = std::chrono::steady_clock::now();
    }
    if (groups.empty()) {
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    const auto now = std::chrono::steady_clock::now();
    if (std::chrono::duration<double>(now - last_broadcast).count() >
        cfg.topology.sync_interval_s) {
      learner.broadcast_params(policy);
      last_broadcast = now;
    }
  }
  sim::metrics_table(metrics).save(cfg.out_dir + "/metrics.csv");
  save_policy_file(policy, cfg.out_dir + "/final_policy.bin");
  std::printf("learner finished at version %u (%zu steps recorded)\n", policy.version(),
              metrics.size());
  learner.stop();
  return static_cast<int>(policy.version()) >= total_steps ? kExitOk : kExitAssertionFailure;
}

int cmd_serve_sampler(const io::ExperimentConfig& cfg, std::uint32_t node_id, int max_rollouts) {
  transport::SamplerEndpoint sampler(cfg.topology.learner, node_id);
  Rng rng(derive_seed(cfg.seeds.front(), 5000 + node_id));
  int sent = 0;
  int prompt = 0;
  while ((max_rollouts <= 0 || sent < max_rollouts) && !sampler.node_down()) {
    auto policy = sampler.latest_policy();
    if (!policy) {
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
      continue;
    }
    auto group = sample_group(*policy, prompt++ % policy->spec().prompt_count,
                              cfg.sim_config.group_size, rng);
    score_group(group, parity_reward);
    group.created_at =
        std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
            .count();
    if (!sampler.send_rollout(group)) break;
    sent++;
  }
  std::printf("sampler %u sent %d rollouts (params received: %llu)\n", node_id, sent,
              static_cast<unsigned long long>(sampler.params_received()));
  sampler.stop();
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Asynchronous RL importance-weighting laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir_override;
  std::string run_dir;
  bool per_run = false;
  double alpha = 0.05;
  std::uint32_t node_id = 1;
  int max_rollouts = 0;

  auto add_config_opts = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "JSON experiment config");
    cmd->add_option("-o,--out", out_dir_override, "output directory (overrides config)");
  };

  auto* sweep = app.add_subcommand("variance-sweep",
                                   "Bernoulli/Gaussian variance sweeps to CSV");
  add_config_opts(sweep);
  auto* simulate = app.add_subcommand("simulate", "delay-simulated training runs, trace + metrics");
  add_config_opts(simulate);
  auto* train_toy = app.add_subcommand("train-toy", "toy training against the simulator stream");
  add_config_opts(train_toy);
  auto* analyze = app.add_subcommand("analyze", "pairwise correlations over a run directory");
  analyze->add_option("run_dir", run_dir, "directory containing metrics.csv files")->required();
  analyze->add_flag("--per-run", per_run, "aggregate each metrics.csv to its mean first");
  analyze->add_option("--alpha", alpha, "confidence level is 1 - alpha (default 0.05)");
  auto* serve_l = app.add_subcommand("serve-learner", "host the learner endpoint over TCP");
  add_config_opts(serve_l);
  auto* serve_s = app.add_subcommand("serve-sampler", "run a sampler node against a learner");
  add_config_opts(serve_s);
  serve_s->add_option("--id", node_id, "sampler node id");
  serve_s->add_option("--max-rollouts", max_rollouts, "stop after N rollouts (0 = until learner stops)");

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = load_config_or_default(config_path);
    if (!out_dir_override.empty()) cfg.out_dir = out_dir_override;

    if (sweep->parsed()) return cmd_variance_sweep(cfg);
    if (simulate->parsed()) return cmd_simulate(cfg);
    if (train_toy->parsed()) return cmd_train_toy(cfg);
    if (analyze->parsed()) return cmd_analyze(run_dir, per_run, alpha);
    if (serve_l->parsed()) return cmd_serve_learner(cfg);
    if (serve_s->parsed()) return cmd_serve_sampler(cfg, node_id, max_rollouts);
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitAssertionFailure;
  }
  return kExitOk;
}
