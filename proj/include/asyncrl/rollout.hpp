#pragma once
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "asyncrl/errors.hpp"

namespace asyncrl {

/**
 * One group of G responses to a single prompt, as produced by a (possibly
 * stale) sampler. Token values are 1..V; every response has the same fixed
 * length T. Log-probabilities are the sampler's own, recorded at generation
 * time so the learner can reweight without re-running the sampler policy.
 */
struct RolloutGroup {
  int prompt = 0;
  std::vector<std::vector<int>> responses;                   // G x T
  std::vector<std::vector<double>> sampler_token_logprobs;   // G x T
  std::vector<double> rewards;                               // G
  std::uint32_t sampler_version = 0;
  double created_at = 0.0;  // simulated-clock seconds

  int group_size() const { return static_cast<int>(responses.size()); }

  void validate(int vocab_size, int max_len) const {
    const std::size_t g = responses.size();
    if (g < 2) throw DomainError("rollout group needs G >= 2");
    if (sampler_token_logprobs.size() != g || rewards.size() != g) {
      throw DomainError("rollout group field lengths disagree");
    }
    for (std::size_t i = 0; i < g; ++i) {
      if (responses[i].size() != static_cast<std::size_t>(max_len) ||
          sampler_token_logprobs[i].size() != static_cast<std::size_t>(max_len)) {
        throw DomainError("rollout group token lists must all have length T");
      }
      for (int tok : responses[i]) {
        if (tok < 1 || tok > vocab_size) throw DomainError("token out of vocabulary");
      }
      for (double lp : sampler_token_logprobs[i]) {
        if (!std::isfinite(lp)) throw DomainError("non-finite sampler log-prob");
      }
      if (!std::isfinite(rewards[i])) throw DomainError("non-finite reward");
    }
  }
};

using RewardFn = std::function<double(int prompt, std::span<const int> tokens)>;

/// Binary toy reward: 1 when the token-sum parity matches the prompt parity.
inline double parity_reward(int prompt, std::span<const int> tokens) {
  long long sum = 0;
  for (int t : tokens) sum += t;
  return (sum % 2 + 2) % 2 == (prompt % 2 + 2) % 2 ? 1.0 : 0.0;
}

inline void score_group(RolloutGroup& group, const RewardFn& reward) {
  for (int i = 0; i < group.group_size(); ++i) {
    group.rewards[i] = reward(group.prompt, group.responses[i]);
  }
}

}  // namespace asyncrl
