#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Importance-weight schemes and group-relative advantages.
 *
 * Four schemes share one objective shape, mean over the group of
 * weight * advantage; they differ only in how the weight is built:
 *
 *   grpo_token   clamp(p_t/q_t) per token, averaged over positions
 *   gspo_seq     clamp((p(y)/q(y))^(1/T)) per sequence
 *   gepo         p(y) / E_hat_q[q], the group-expectation denominator
 *   gepo_def     p(y) / (eps*p(y) + (1-eps)*E_hat_q[q]), denominator
 *                held constant under differentiation, eps driven by Var(q)
 *
 * Sequence-level p and q are length-normalized probabilities exp(joint/T).
 * Two distinct epsilons exist on purpose: the clip half-width of the token
 * and sequence schemes, and the defensive smoothing coefficient.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "asyncrl/errors.hpp"
#include "asyncrl/policy.hpp"
#include "asyncrl/rollout.hpp"

namespace asyncrl::weighting {

// ============================================================================
// Scheme tags
// ============================================================================

struct GrpoToken {
  double clip_eps = 0.2;
};

struct GspoSeq {
  double clip_eps = 0.2;
};

struct Gepo {
  // Post-clamp is an ablation knob; the reference weight is unclipped.
  bool post_clip = false;
  double clip_eps = 0.2;
};

struct GepoDefensive {
  double smooth_scale = 1e-3;  // c in eps = Var(q) / (Var(q) + c)
  double eps_min = 0.0;
  double eps_max = 0.9;
  // Pins eps to a constant instead of deriving it from Var(q); used by the
  // eps=0 / eps=1 limit checks and ablations.
  std::optional<double> eps_override;

  void validate() const {
    if (smooth_scale <= 0.0) throw DomainError("smooth_scale must be positive");
    if (!(0.0 <= eps_min && eps_min < eps_max && eps_max <= 1.0)) {
      throw DomainError("need 0 <= eps_min < eps_max <= 1");
    }
    if (eps_override && (*eps_override < 0.0 || *eps_override > 1.0)) {
      throw DomainError("eps_override must lie in [0, 1]");
    }
  }
};

using WeightScheme = std::variant<GrpoToken, GspoSeq, Gepo, GepoDefensive>;

inline const char* scheme_name(const WeightScheme& scheme) {
  struct Visitor {
    const char* operator()(const GrpoToken&) const { return "grpo_token"; }
    const char* operator()(const GspoSeq&) const { return "gspo_seq"; }
    const char* operator()(const Gepo&) const { return "gepo"; }
    const char* operator()(const GepoDefensive&) const { return "gepo_defensive"; }
  };
  return std::visit(Visitor{}, scheme);
}

// ============================================================================
// Advantages
// ============================================================================

/// Mean-baseline advantages: baseline = mean(rewards), advantage_i = r_i - baseline.
/// No division by the group standard deviation.
inline std::pair<double, std::vector<double>> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw DomainError("advantages need G >= 2 rewards");
  double baseline = 0.0;
  for (double r : rewards) {
    if (!std::isfinite(r)) throw DomainError("non-finite reward");
    baseline += r;
  }
  baseline /= static_cast<double>(rewards.size());
  std::vector<double> adv(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = rewards[i] - baseline;
  return {baseline, std::move(adv)};
}

// ============================================================================
// Per-scheme weights
// ============================================================================

struct TokenWeights {
  std::vector<std::vector<double>> weights;     // clamped ratios, G x T
  std::vector<std::vector<double>> raw;         // unclamped ratios, G x T
  std::vector<std::vector<std::uint8_t>> clipped;
};

/// Token-level clipped ratios w_t = clamp(exp(lp_learner - lp_sampler), 1-eps, 1+eps).
/// Clipped tokens carry zero gradient contribution under differentiation.
inline TokenWeights grpo_token_weights(const std::vector<std::vector<double>>& learner_lp,
                                       const std::vector<std::vector<double>>& sampler_lp,
                                       double clip_eps) {
  if (clip_eps <= 0.0 || clip_eps >= 1.0) throw DomainError("clip_eps must lie in (0, 1)");
  if (learner_lp.size() != sampler_lp.size()) throw DomainError("log-prob shape mismatch");
  TokenWeights out;
  out.weights.resize(learner_lp.size());
  out.raw.resize(learner_lp.size());
  out.clipped.resize(learner_lp.size());
  for (std::size_t i = 0; i < learner_lp.size(); ++i) {
    if (learner_lp[i].size() != sampler_lp[i].size()) throw DomainError("log-prob shape mismatch");
    out.weights[i].resize(learner_lp[i].size());
    out.raw[i].resize(learner_lp[i].size());
    out.clipped[i].resize(learner_lp[i].size());
    for (std::size_t t = 0; t < learner_lp[i].size(); ++t) {
      if (!std::isfinite(learner_lp[i][t]) || !std::isfinite(sampler_lp[i][t])) {
        throw DomainError("non-finite log-prob");
      }
      const double r = std::exp(learner_lp[i][t] - sampler_lp[i][t]);
      out.raw[i][t] = r;
      const double w = std::clamp(r, 1.0 - clip_eps, 1.0 + clip_eps);
      out.weights[i][t] = w;
      out.clipped[i][t] = (w != r) ? 1 : 0;
    }
  }
  return out;
}

/// Sequence-level ratio s = exp((joint_learner - joint_sampler)/T), clamped.
/// Equals the ratio of length-normalized probabilities.
inline double gspo_seq_weight(double learner_joint_lp, double sampler_joint_lp, int seq_len,
                              double clip_eps, bool* clipped = nullptr, double* raw = nullptr) {
  if (seq_len < 1) throw DomainError("sequence length must be >= 1");
  if (clip_eps <= 0.0) throw DomainError("clip_eps must be positive");
  if (!std::isfinite(learner_joint_lp) || !std::isfinite(sampler_joint_lp)) {
    throw DomainError("non-finite joint log-prob");
  }
  const double s = std::exp((learner_joint_lp - sampler_joint_lp) / seq_len);
  if (raw) *raw = s;
  const double w = std::clamp(s, 1.0 - clip_eps, 1.0 + clip_eps);
  if (clipped) *clipped = (w != s);
  return w;
}

/// Group-expectation denominator E_hat_q[q] = sum(q_i^2) / sum(q_i), the
/// within-group normalized-probability-weighted mean of q.
inline double group_expectation(std::span<const double> q_seq) {
  if (q_seq.empty()) throw DomainError("empty group");
  double sum_q = 0.0, sum_q2 = 0.0;
  for (double q : q_seq) {
    if (!(q > 0.0) || !std::isfinite(q)) throw DomainError("sequence probabilities must be > 0");
    sum_q += q;
    sum_q2 += q * q;
  }
  return sum_q2 / sum_q;
}

/// Unclipped group-expectation weight p / E_hat_q[q].
inline double gepo_weight(double p_seq, std::span<const double> q_seq_group) {
  if (!(p_seq > 0.0) || !std::isfinite(p_seq)) throw DomainError("p_seq must be > 0");
  return p_seq / group_expectation(q_seq_group);
}

/// Population variance of the group's sequence probabilities.
inline double group_q_variance(std::span<const double> q_seq) {
  if (q_seq.empty()) throw DomainError("empty group");
  double mean = 0.0;
  for (double q : q_seq) mean += q;
  mean /= static_cast<double>(q_seq.size());
  double var = 0.0;
  for (double q : q_seq) var += (q - mean) * (q - mean);
  return var / static_cast<double>(q_seq.size());
}

inline double defensive_epsilon(double q_variance, const GepoDefensive& scheme) {
  scheme.validate();
  if (scheme.eps_override) return *scheme.eps_override;
  return std::clamp(q_variance / (q_variance + scheme.smooth_scale), scheme.eps_min,
                    scheme.eps_max);
}

struct DefensiveWeight {
  double value = 0.0;
  double epsilon = 0.0;
  // Constant under differentiation: the induced gradient of value*A is
  // A * grad(p) / denominator, so at eps = 1 it reduces to A * grad(log p).
  double denominator = 0.0;
};

/// Defensive weight p / (eps*p + (1-eps)*E_hat_q[q]) with eps saturating in
/// Var(q): eps = clamp(Var/(Var + c), eps_min, eps_max).
inline DefensiveWeight defensive_weight(double p_seq, std::span<const double> q_seq_group,
                                        const GepoDefensive& scheme) {
  if (!(p_seq > 0.0) || !std::isfinite(p_seq)) throw DomainError("p_seq must be > 0");
  DefensiveWeight out;
  out.epsilon = defensive_epsilon(group_q_variance(q_seq_group), scheme);
  const double expectation = group_expectation(q_seq_group);
  out.denominator = out.epsilon * p_seq + (1.0 - out.epsilon) * expectation;
  out.value = p_seq / out.denominator;
  return out;
}

// ============================================================================
// Group statistics
// ============================================================================

struct GroupStats {
  double baseline = 0.0;
  std::vector<double> advantages;
  std::vector<double> q_seq;          // length-normalized sampler probabilities
  double group_expectation = 0.0;
  double q_variance = 0.0;
};

inline GroupStats group_stats(const RolloutGroup& group) {
  GroupStats stats;
  auto [baseline, adv] = group_advantages(group.rewards);
  stats.baseline = baseline;
  stats.advantages = std::move(adv);
  stats.q_seq.reserve(group.responses.size());
  for (const auto& lps : group.sampler_token_logprobs) {
    double joint = 0.0;
    for (double lp : lps) joint += lp;
    stats.q_seq.push_back(std::exp(joint / static_cast<double>(lps.size())));
  }
  stats.group_expectation = group_expectation(stats.q_seq);
  stats.q_variance = group_q_variance(stats.q_seq);
  return stats;
}

// ============================================================================
// Weighted objective
// ============================================================================

struct ObjectiveResult {
  double value = 0.0;
  std::vector<double> sample_weights;  // effective per-sample weight (token mean for grpo)
  std::vector<double> grad;            // same shape as the policy logit table
  // Diagnostics over raw (pre-clip) weights, matching what "importance weight
  // variance" tracks; clipping is reported separately.
  double weight_mean = 0.0;
  double weight_variance = 0.0;
  double clipped_fraction = 0.0;
};

namespace detail {
inline void finish_diagnostics(ObjectiveResult& out, std::span<const double> raw_weights,
                               std::size_t clipped, std::size_t total) {
  double mean = 0.0;
  for (double w : raw_weights) mean += w;
  mean /= static_cast<double>(raw_weights.size());
  double var = 0.0;
  for (double w : raw_weights) var += (w - mean) * (w - mean);
  out.weight_mean = mean;
  out.weight_variance = var / static_cast<double>(raw_weights.size());
  out.clipped_fraction = total == 0 ? 0.0 : static_cast<double>(clipped) / total;
}
}  // namespace detail

/**
 * Objective value, per-sample weights, and the gradient of the objective with
 * respect to the learner's logits.
 *
 * objective = mean_i w_i * A_i (token schemes additionally average positions).
 * Gradient flows through the learner probabilities only; clipped tokens and
 * gradient-stopped denominators contribute zero.
 */
inline ObjectiveResult weighted_objective(const RolloutGroup& group, const ToyPolicy& learner,
                                          const WeightScheme& scheme) {
  group.validate(learner.spec().vocab_size, learner.spec().max_len);
  const int G = group.group_size();
  const int T = learner.spec().max_len;
  const auto stats = group_stats(group);

  ObjectiveResult out;
  out.grad.assign(learner.param_count(), 0.0);
  out.sample_weights.resize(G);

  // Learner-side per-token and joint log-probs.
  std::vector<SequenceProb> learner_probs;
  learner_probs.reserve(G);
  for (int i = 0; i < G; ++i) {
    learner_probs.push_back(seq_logprob(learner, group.prompt, group.responses[i]));
  }

  std::vector<double> coef(T);
  const double inv_g = 1.0 / static_cast<double>(G);

  if (const auto* grpo = std::get_if<GrpoToken>(&scheme)) {
    std::vector<std::vector<double>> learner_lp(G);
    for (int i = 0; i < G; ++i) learner_lp[i] = learner_probs[i].token_logprobs;
    const auto tw = grpo_token_weights(learner_lp, group.sampler_token_logprobs, grpo->clip_eps);
    std::vector<double> raw_all;
    raw_all.reserve(static_cast<std::size_t>(G) * T);
    std::size_t clipped = 0;
    for (int i = 0; i < G; ++i) {
      const double a = stats.advantages[i];
      double mean_w = 0.0;
      for (int t = 0; t < T; ++t) {
        mean_w += tw.weights[i][t];
        raw_all.push_back(tw.raw[i][t]);
        clipped += tw.clipped[i][t];
        coef[t] = tw.clipped[i][t] ? 0.0 : a * tw.raw[i][t] * inv_g / T;
      }
      mean_w /= T;
      out.sample_weights[i] = mean_w;
      out.value += a * mean_w * inv_g;
      accumulate_logprob_grad(learner, group.prompt, group.responses[i], coef, out.grad);
    }
    detail::finish_diagnostics(out, raw_all, clipped, raw_all.size());
    return out;
  }

  if (const auto* gspo = std::get_if<GspoSeq>(&scheme)) {
    std::vector<double> raw_all(G);
    std::size_t clipped_count = 0;
    for (int i = 0; i < G; ++i) {
      double sampler_joint = 0.0;
      for (double lp : group.sampler_token_logprobs[i]) sampler_joint += lp;
      bool clipped = false;
      double raw = 0.0;
      const double w = gspo_seq_weight(learner_probs[i].joint_logprob, sampler_joint, T,
                                       gspo->clip_eps, &clipped, &raw);
      raw_all[i] = raw;
      clipped_count += clipped ? 1 : 0;
      out.sample_weights[i] = w;
      const double a = stats.advantages[i];
      out.value += a * w * inv_g;
      const double c = clipped ? 0.0 : a * raw * inv_g / T;
      std::fill(coef.begin(), coef.end(), c);
      accumulate_logprob_grad(learner, group.prompt, group.responses[i], coef, out.grad);
    }
    detail::finish_diagnostics(out, raw_all, clipped_count, raw_all.size());
    return out;
  }

  // Sequence-level schemes with a gradient-stopped denominator.
  std::vector<double> raw_all(G);
  std::size_t clipped_count = 0;
  for (int i = 0; i < G; ++i) {
    const double p_seq = learner_probs[i].length_norm_prob;
    double denom;
    if (const auto* def = std::get_if<GepoDefensive>(&scheme)) {
      const double eps = defensive_epsilon(stats.q_variance, *def);
      denom = eps * p_seq + (1.0 - eps) * stats.group_expectation;
    } else {
      denom = stats.group_expectation;
    }
    const double raw = p_seq / denom;
    raw_all[i] = raw;
    double w = raw;
    bool clipped = false;
    if (const auto* gepo = std::get_if<Gepo>(&scheme); gepo && gepo->post_clip) {
      w = std::clamp(raw, 1.0 - gepo->clip_eps, 1.0 + gepo->clip_eps);
      clipped = (w != raw);
      clipped_count += clipped ? 1 : 0;
    }
    out.sample_weights[i] = w;
    const double a = stats.advantages[i];
    out.value += a * w * inv_g;
    // d/dtheta (p/denom) = (p/denom) * (1/T) * d(joint)/dtheta with denom constant.
    const double c = clipped ? 0.0 : a * w * inv_g / T;
    std::fill(coef.begin(), coef.end(), c);
    accumulate_logprob_grad(learner, group.prompt, group.responses[i], coef, out.grad);
  }
  detail::finish_diagnostics(out, raw_all, clipped_count, raw_all.size());
  return out;
}

}  // namespace asyncrl::weighting
