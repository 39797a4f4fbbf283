#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Learner update loop: weighted-advantage objective with KL regularization,
 * plain gradient ascent on toy policy logits, and per-step diagnostics
 * including the exact advantage-expectation estimation error (computable here
 * because the sequence space enumerates).
 *
 * The KL penalty uses the non-negative per-sequence estimator
 * r - 1 - log r with r = exp(joint_learner - joint_sampler); it vanishes on
 * on-policy data and its gradient is (r - 1) * grad(joint).
 */

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asyncrl/errors.hpp"
#include "asyncrl/policy.hpp"
#include "asyncrl/rollout.hpp"
#include "asyncrl/weighting.hpp"

namespace asyncrl::train {

// ============================================================================
// Config and metrics
// ============================================================================

struct TrainConfig {
  // Toy default; logit tables are ~9 orders of magnitude smaller than the
  // LLM-scale setting this mirrors (which used 1e-6).
  double learning_rate = 0.05;
  double kl_coef = 0.005;
  weighting::WeightScheme scheme = weighting::Gepo{};
  int epochs = 1;
  int steps_per_epoch = 200;
  int eval_every = 32;

  void validate() const {
    if (!(learning_rate > 0.0)) throw DomainError("learning_rate must be > 0");
    if (kl_coef < 0.0) throw DomainError("kl_coef must be >= 0");
    if (epochs < 1 || steps_per_epoch < 1) throw DomainError("epochs/steps must be >= 1");
    if (eval_every < 1) throw DomainError("eval_every must be >= 1");
  }

  int total_steps() const { return epochs * steps_per_epoch; }
};

struct MetricsRow {
  int step = 0;
  double staleness = 0.0;
  double kl_exact = 0.0;
  double weight_variance = 0.0;
  double grad_norm = 0.0;
  double reward_mean = 0.0;
  double adv_expectation_error = 0.0;
  double clipped_fraction = 0.0;
};

inline const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols = {
      "step",      "staleness",   "kl_exact",              "weight_variance",
      "grad_norm", "reward_mean", "adv_expectation_error", "clipped_fraction"};
  return cols;
}

inline std::vector<double> metrics_row_values(const MetricsRow& m) {
  return {static_cast<double>(m.step), m.staleness,   m.kl_exact,
          m.weight_variance,           m.grad_norm,   m.reward_mean,
          m.adv_expectation_error,     m.clipped_fraction};
}

// ============================================================================
// Policy history
// ============================================================================

/// Recent published policies keyed by version. Samplers only ever hold
/// versions the learner published, so this is enough to recover the exact
/// sampler distribution behind any incoming rollout.
class PolicyHistory {
 public:
  explicit PolicyHistory(std::size_t capacity = 4096) : capacity_(capacity) {}

  void put(const ToyPolicy& policy) { put(std::make_shared<const ToyPolicy>(policy)); }

  void put(std::shared_ptr<const ToyPolicy> policy) {
    const std::uint32_t v = policy->version();
    if (by_version_.emplace(v, std::move(policy)).second) {
      order_.push_back(v);
      while (order_.size() > capacity_) {
        by_version_.erase(order_.front());
        order_.pop_front();
      }
    }
  }

  std::shared_ptr<const ToyPolicy> find(std::uint32_t version) const {
    auto it = by_version_.find(version);
    return it == by_version_.end() ? nullptr : it->second;
  }

  const ToyPolicy& require(std::uint32_t version) const {
    auto p = find(version);
    if (!p) {
      throw TrainingError("sampler policy version " + std::to_string(version) +
                          " not in history");
    }
    return *p;
  }

 private:
  std::size_t capacity_;
  std::map<std::uint32_t, std::shared_ptr<const ToyPolicy>> by_version_;
  std::deque<std::uint32_t> order_;
};

// ============================================================================
// Losses and diagnostics
// ============================================================================

/// Non-negative per-sequence KL penalty r - 1 - log r, r the joint ratio.
inline double sequence_kl_penalty(double learner_joint_lp, double sampler_joint_lp) {
  const double log_r = learner_joint_lp - sampler_joint_lp;
  return std::exp(log_r) - 1.0 - log_r;
}

/**
 * |exact - estimate| for the group's advantage expectation under the scheme:
 * exact sums p(y) * (reward(y) - baseline) over the whole sequence space,
 * estimate is the scheme's weighted group mean (1/G) sum w_i A_i.
 */
inline double adv_expectation_error(const ToyPolicy& learner, const ToyPolicy& sampler,
                                    int prompt, const RolloutGroup& group,
                                    const weighting::WeightScheme& scheme,
                                    const RewardFn& reward) {
  learner.spec().require_enumerable();
  if (!(learner.spec() == sampler.spec())) throw DomainError("policies must share a spec");

  const auto stats = weighting::group_stats(group);
  const auto dist = enumerate_dist(learner, prompt);
  double exact = 0.0;
  std::vector<int> tokens;
  for (std::int64_t idx = 0; idx < static_cast<std::int64_t>(dist.size()); ++idx) {
    index_to_tokens(idx, learner.spec().vocab_size, learner.spec().max_len, tokens);
    exact += dist[static_cast<std::size_t>(idx)] * (reward(prompt, tokens) - stats.baseline);
  }

  const auto obj = weighting::weighted_objective(group, learner, scheme);
  return std::abs(exact - obj.value);
}

// ============================================================================
// learner_step
// ============================================================================

struct StepDiagnostics {
  double objective = 0.0;
  double kl_penalty = 0.0;
};

/**
 * One ascent step on mean(weighted objective) - kl_coef * mean(KL penalty)
 * over the batch. Returns the updated policy (version + 1) and the metrics
 * row measured against the pre-update policy.
 */
inline std::pair<ToyPolicy, MetricsRow> learner_step(const ToyPolicy& policy,
                                                     std::span<const RolloutGroup> batch,
                                                     const TrainConfig& config,
                                                     const PolicyHistory& history,
                                                     const RewardFn& reward,
                                                     StepDiagnostics* diag = nullptr) {
  config.validate();
  if (batch.empty()) throw TrainingError("empty batch");

  std::vector<double> grad(policy.param_count(), 0.0);
  MetricsRow row;
  double objective = 0.0, penalty = 0.0;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const RolloutGroup& group = batch[b];
    if (group.sampler_version > policy.version()) {
      throw TrainingError("sampler version ahead of learner in group " + std::to_string(b));
    }

    const auto obj = weighting::weighted_objective(group, policy, config.scheme);
    if (!std::isfinite(obj.value)) {
      throw TrainingError("non-finite objective in group " + std::to_string(b));
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (!std::isfinite(obj.grad[i])) {
        throw TrainingError("non-finite gradient in group " + std::to_string(b));
      }
      grad[i] += obj.grad[i] * inv_b;
    }
    objective += obj.value * inv_b;

    if (config.kl_coef > 0.0) {
      const int G = group.group_size();
      const int T = policy.spec().max_len;
      std::vector<double> coef(T);
      for (int i = 0; i < G; ++i) {
        const auto lp = seq_logprob(policy, group.prompt, group.responses[i]);
        double sampler_joint = 0.0;
        for (double l : group.sampler_token_logprobs[i]) sampler_joint += l;
        penalty += sequence_kl_penalty(lp.joint_logprob, sampler_joint) * inv_b / G;
        // d(r - 1 - log r) = (r - 1) * d(joint)
        const double r = std::exp(lp.joint_logprob - sampler_joint);
        if (!std::isfinite(r)) {
          throw TrainingError("non-finite KL penalty ratio in group " + std::to_string(b));
        }
        const double c = -config.kl_coef * (r - 1.0) * inv_b / G;
        std::fill(coef.begin(), coef.end(), c);
        accumulate_logprob_grad(policy, group.prompt, group.responses[i], coef, grad);
      }
    }

    // Diagnostics against the pre-update policy.
    row.staleness +=
        static_cast<double>(policy.version() - group.sampler_version) * inv_b;
    row.weight_variance += obj.weight_variance * inv_b;
    row.clipped_fraction += obj.clipped_fraction * inv_b;
    double reward_sum = 0.0;
    for (double r : group.rewards) reward_sum += r;
    row.reward_mean += reward_sum / group.group_size() * inv_b;
    if (policy.spec().enumerable()) {
      const ToyPolicy& sampler = history.require(group.sampler_version);
      row.kl_exact += exact_kl(policy, sampler, group.prompt) * inv_b;
      row.adv_expectation_error +=
          adv_expectation_error(policy, sampler, group.prompt, group, config.scheme, reward) *
          inv_b;
    }
  }

  double norm_sq = 0.0;
  for (std::size_t i = 0; i < grad.size(); ++i) norm_sq += grad[i] * grad[i];
  row.grad_norm = std::sqrt(norm_sq);

  ToyPolicy next = policy.updated(grad, config.learning_rate);
  row.step = static_cast<int>(next.version());
  if (diag) {
    diag->objective = objective;
    diag->kl_penalty = penalty;
  }
  return {std::move(next), row};
}

// ============================================================================
// Training loop
// ============================================================================

/// Source of rollout batches: the simulator or a transport endpoint.
/// next() may advance internal clocks; on_published() feeds the updated
/// policy back (version-stamped) so stale samplers can catch up.
struct BatchStream {
  virtual ~BatchStream() = default;
  virtual std::optional<RolloutGroup> next(const ToyPolicy& current) = 0;
  virtual void on_published(const ToyPolicy& /*updated*/) {}
};

struct EvalPoint {
  int step = 0;
  double eval_reward_mean = 0.0;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::vector<EvalPoint> evals;
  ToyPolicy final_policy;
};

/// Exact expected reward under the policy, averaged over all prompts.
inline double exact_expected_reward(const ToyPolicy& policy, const RewardFn& reward) {
  policy.spec().require_enumerable();
  double total = 0.0;
  std::vector<int> tokens;
  for (int prompt = 0; prompt < policy.spec().prompt_count; ++prompt) {
    const auto dist = enumerate_dist(policy, prompt);
    double ev = 0.0;
    for (std::int64_t idx = 0; idx < static_cast<std::int64_t>(dist.size()); ++idx) {
      index_to_tokens(idx, policy.spec().vocab_size, policy.spec().max_len, tokens);
      ev += dist[static_cast<std::size_t>(idx)] * reward(prompt, tokens);
    }
    total += ev;
  }
  return total / policy.spec().prompt_count;
}

/**
 * Iterates learner_step over the batch stream for epochs * steps_per_epoch
 * steps (or until the stream ends), evaluating and checkpointing every
 * eval_every steps. checkpoint_dir empty disables checkpoints.
 */
inline TrainResult run_training(ToyPolicy initial, const TrainConfig& config, BatchStream& stream,
                                const RewardFn& reward, const std::string& checkpoint_dir = "") {
  config.validate();
  TrainResult result;
  result.final_policy = initial;
  PolicyHistory history;
  history.put(initial);

  auto checkpoint = [&](const ToyPolicy& p) {
    if (!checkpoint_dir.empty()) {
      save_policy_file(p, checkpoint_dir + "/ckpt_v" + std::to_string(p.version()) + ".bin");
    }
  };

  ToyPolicy policy = std::move(initial);
  const int total = config.total_steps();
  for (int step = 0; step < total; ++step) {
    auto group = stream.next(policy);
    if (!group) break;  // stream exhausted (time budget or shutdown)
    const RolloutGroup batch[] = {std::move(*group)};
    auto [next, row] = learner_step(policy, batch, config, history, reward);
    policy = std::move(next);
    history.put(policy);
    stream.on_published(policy);
    result.metrics.push_back(row);
    if ((step + 1) % config.eval_every == 0 || step + 1 == total) {
      result.evals.push_back({static_cast<int>(policy.version()),
                              exact_expected_reward(policy, reward)});
      checkpoint(policy);
    }
  }
  result.final_policy = policy;
  return result;
}

}  // namespace asyncrl::train
