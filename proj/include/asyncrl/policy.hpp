#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Exactly-enumerable toy autoregressive policies.
 *
 * A ToyPolicy is an order-1 autoregressive categorical model over sequences
 * of fixed length T with vocabulary 1..V: each next-token distribution is a
 * softmax over a logit row indexed by (prompt, position, previous token),
 * where previous-token index 0 stands for begin-of-sequence. The full
 * sequence space (V^T outcomes) is small enough to enumerate, which gives
 * exact distributions, exact KL divergences, and analytic gradients against
 * which every estimator in this codebase can be checked.
 *
 * Probabilities are carried in log domain; the length-normalized (geometric
 * mean) probability exp(joint/|y|) is materialized only where sequence-level
 * weights need it.
 *
 * Policies are immutable after construction: an update step produces a new
 * value with version + 1. Sampling requires a caller-owned seeded Rng.
 */

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "asyncrl/errors.hpp"
#include "asyncrl/rng.hpp"
#include "asyncrl/rollout.hpp"

namespace asyncrl {

// ============================================================================
// SequenceSpec
// ============================================================================

/// Dimensions of the sequence model. Exact oracles (enumeration, exact KL)
/// require V^T <= enum_cap.
struct SequenceSpec {
  int vocab_size = 2;    // V >= 2
  int max_len = 1;       // T >= 1
  int prompt_count = 1;
  std::int64_t enum_cap = 1000000;

  void validate() const {
    if (vocab_size < 2) throw DomainError("vocab_size must be >= 2");
    if (max_len < 1) throw DomainError("max_len must be >= 1");
    if (prompt_count < 1) throw DomainError("prompt_count must be >= 1");
    if (enum_cap < 1) throw DomainError("enum_cap must be >= 1");
  }

  /// V^T, saturating at int64 max.
  std::int64_t sequence_count() const {
    std::int64_t n = 1;
    const std::int64_t lim = std::numeric_limits<std::int64_t>::max();
    for (int t = 0; t < max_len; ++t) {
      if (n > lim / vocab_size) return lim;
      n *= vocab_size;
    }
    return n;
  }

  bool enumerable() const { return sequence_count() <= enum_cap; }

  void require_enumerable() const {
    if (!enumerable()) {
      throw ResourceError("sequence space V^T exceeds enumeration cap (" +
                          std::to_string(enum_cap) + ")");
    }
  }

  bool operator==(const SequenceSpec&) const = default;
};

// ============================================================================
// SequenceProb
// ============================================================================

/// Joint and length-normalized probability of one sequence under one policy.
struct SequenceProb {
  double joint_logprob = 0.0;       // sum of token log-probs
  double length_norm_prob = 0.0;    // exp(joint / |y|), in (0, 1]
  std::vector<double> token_logprobs;
};

// ============================================================================
// ToyPolicy
// ============================================================================

class ToyPolicy {
 public:
  ToyPolicy() = default;

  /// Constant-logit policy (uniform conditionals when init is constant).
  explicit ToyPolicy(SequenceSpec spec, double init = 0.0) : spec_(spec) {
    spec_.validate();
    logits_.assign(table_size(spec_), init);
  }

  /// Policy with i.i.d. normal logits of the given scale.
  static ToyPolicy random(const SequenceSpec& spec, std::uint64_t seed, double scale = 1.0) {
    ToyPolicy p(spec);
    Rng rng(seed);
    for (double& l : p.logits_) l = scale * rng.normal();
    return p;
  }

  static ToyPolicy from_logits(SequenceSpec spec, std::vector<double> logits,
                               std::uint32_t version) {
    spec.validate();
    if (logits.size() != table_size(spec)) throw DomainError("logit table size mismatch");
    for (double l : logits) {
      if (!std::isfinite(l)) throw DomainError("non-finite logit");
    }
    ToyPolicy p;
    p.spec_ = spec;
    p.logits_ = std::move(logits);
    p.version_ = version;
    return p;
  }

  const SequenceSpec& spec() const { return spec_; }
  std::uint32_t version() const { return version_; }
  std::size_t param_count() const { return logits_.size(); }
  std::span<const double> logits() const { return logits_; }

  static std::size_t table_size(const SequenceSpec& spec) {
    return static_cast<std::size_t>(spec.prompt_count) * spec.max_len *
           (spec.vocab_size + 1) * spec.vocab_size;
  }

  /// Offset of the logit row for (prompt, position t, previous token).
  /// prev is 0 for begin-of-sequence, else the previous token value in 1..V.
  std::size_t row_offset(int prompt, int t, int prev) const {
    check_row(prompt, t, prev);
    return ((static_cast<std::size_t>(prompt) * spec_.max_len + t) *
                (spec_.vocab_size + 1) +
            prev) *
           spec_.vocab_size;
  }

  std::span<const double> row(int prompt, int t, int prev) const {
    return std::span<const double>(logits_).subspan(row_offset(prompt, t, prev),
                                                    spec_.vocab_size);
  }

  /// Logit of next token (1..V) given (prompt, t, prev).
  double logit(int prompt, int t, int prev, int next) const {
    if (next < 1 || next > spec_.vocab_size) throw DomainError("token out of vocabulary");
    return logits_[row_offset(prompt, t, prev) + (next - 1)];
  }

  /// Log-softmax of one conditional row (max-shifted, stable).
  std::vector<double> log_probs_row(int prompt, int t, int prev) const {
    auto r = row(prompt, t, prev);
    std::vector<double> out(r.begin(), r.end());
    double m = *std::max_element(out.begin(), out.end());
    double sum = 0.0;
    for (double v : out) sum += std::exp(v - m);
    double log_z = m + std::log(sum);
    for (double& v : out) v -= log_z;
    return out;
  }

  std::vector<double> probs_row(int prompt, int t, int prev) const {
    auto lp = log_probs_row(prompt, t, prev);
    for (double& v : lp) v = std::exp(v);
    return lp;
  }

  /// One gradient-ascent step over the whole table; version advances by 1.
  ToyPolicy updated(std::span<const double> grad, double learning_rate) const {
    if (grad.size() != logits_.size()) throw DomainError("gradient shape mismatch");
    std::vector<double> next(logits_.begin(), logits_.end());
    for (std::size_t i = 0; i < next.size(); ++i) {
      next[i] += learning_rate * grad[i];
      if (!std::isfinite(next[i])) throw TrainingError("update produced non-finite logit");
    }
    return from_logits(spec_, std::move(next), version_ + 1);
  }

 private:
  void check_row(int prompt, int t, int prev) const {
    if (prompt < 0 || prompt >= spec_.prompt_count) throw DomainError("prompt id out of range");
    if (t < 0 || t >= spec_.max_len) throw DomainError("position out of range");
    if (prev < 0 || prev > spec_.vocab_size) throw DomainError("previous token out of range");
  }

  SequenceSpec spec_;
  std::vector<double> logits_;
  std::uint32_t version_ = 0;
};

// ============================================================================
// Sequence indexing
// ============================================================================

/// Rank of a token sequence in lexicographic enumeration order
/// (position 0 most significant).
inline std::int64_t tokens_to_index(std::span<const int> tokens, int vocab_size) {
  std::int64_t idx = 0;
  for (int tok : tokens) {
    if (tok < 1 || tok > vocab_size) throw DomainError("token out of vocabulary");
    idx = idx * vocab_size + (tok - 1);
  }
  return idx;
}

inline void index_to_tokens(std::int64_t index, int vocab_size, int max_len,
                            std::vector<int>& out) {
  out.assign(max_len, 1);
  for (int t = max_len - 1; t >= 0; --t) {
    out[t] = static_cast<int>(index % vocab_size) + 1;
    index /= vocab_size;
  }
}

// ============================================================================
// Operations
// ============================================================================

namespace detail {
inline void check_tokens(const ToyPolicy& policy, std::span<const int> y) {
  if (y.empty()) throw DomainError("empty sequence");
  if (y.size() > static_cast<std::size_t>(policy.spec().max_len)) {
    throw DomainError("sequence longer than max_len");
  }
  for (int tok : y) {
    if (tok < 1 || tok > policy.spec().vocab_size) throw DomainError("token out of vocabulary");
  }
}
}  // namespace detail

/// Joint log-probability, per-token log-probs, and the length-normalized
/// probability exp(joint/|y|) of a sequence under the policy.
inline SequenceProb seq_logprob(const ToyPolicy& policy, int prompt, std::span<const int> y) {
  detail::check_tokens(policy, y);
  SequenceProb out;
  out.token_logprobs.reserve(y.size());
  int prev = 0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    auto lp = policy.log_probs_row(prompt, static_cast<int>(t), prev);
    out.token_logprobs.push_back(lp[y[t] - 1]);
    out.joint_logprob += lp[y[t] - 1];
    prev = y[t];
  }
  out.length_norm_prob = std::exp(out.joint_logprob / static_cast<double>(y.size()));
  return out;
}

/**
 * G ancestral samples from the policy with recorded sampler log-probs.
 * Deterministic given the Rng state. top_k > 0 truncates each conditional to
 * its top_k most likely tokens and renormalizes (off by default; truncation
 * inflates within-group probability sums).
 */
inline RolloutGroup sample_group(const ToyPolicy& policy, int prompt, int group_size, Rng& rng,
                                 int top_k = 0) {
  if (group_size < 2) throw DomainError("group size must be >= 2");
  const int T = policy.spec().max_len;
  const int V = policy.spec().vocab_size;
  if (top_k < 0 || top_k > V) throw DomainError("top_k out of range");

  RolloutGroup group;
  group.prompt = prompt;
  group.sampler_version = policy.version();
  group.responses.assign(group_size, std::vector<int>(T));
  group.sampler_token_logprobs.assign(group_size, std::vector<double>(T));
  group.rewards.assign(group_size, 0.0);

  std::vector<double> probs;
  std::vector<int> order;
  for (int i = 0; i < group_size; ++i) {
    int prev = 0;
    for (int t = 0; t < T; ++t) {
      probs = policy.probs_row(prompt, t, prev);
      if (top_k > 0 && top_k < V) {
        order.resize(V);
        for (int v = 0; v < V; ++v) order[v] = v;
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return probs[a] > probs[b]; });
        double kept = 0.0;
        for (int k = 0; k < top_k; ++k) kept += probs[order[k]];
        std::vector<double> trunc(V, 0.0);
        for (int k = 0; k < top_k; ++k) trunc[order[k]] = probs[order[k]] / kept;
        probs = std::move(trunc);
      }
      int next = rng.categorical(probs) + 1;
      group.responses[i][t] = next;
      group.sampler_token_logprobs[i][t] = std::log(probs[next - 1]);
      prev = next;
    }
  }
  return group;
}

/// Exact distribution over all V^T sequences, indexed by tokens_to_index.
inline std::vector<double> enumerate_dist(const ToyPolicy& policy, int prompt) {
  policy.spec().require_enumerable();
  const int T = policy.spec().max_len;
  const int V = policy.spec().vocab_size;
  const std::int64_t n = policy.spec().sequence_count();

  // Precompute every conditional log-prob row once.
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(T) * (V + 1));
  for (int t = 0; t < T; ++t) {
    for (int prev = 0; prev <= V; ++prev) {
      rows[static_cast<std::size_t>(t) * (V + 1) + prev] = policy.log_probs_row(prompt, t, prev);
    }
  }

  std::vector<double> dist(static_cast<std::size_t>(n));
  std::vector<int> tokens;
  for (std::int64_t idx = 0; idx < n; ++idx) {
    index_to_tokens(idx, V, T, tokens);
    double lp = 0.0;
    int prev = 0;
    for (int t = 0; t < T; ++t) {
      lp += rows[static_cast<std::size_t>(t) * (V + 1) + prev][tokens[t] - 1];
      prev = tokens[t];
    }
    dist[static_cast<std::size_t>(idx)] = std::exp(lp);
  }
  return dist;
}

/// Exact KL(p || q) over the full sequence space of a shared spec.
inline double exact_kl(const ToyPolicy& p, const ToyPolicy& q, int prompt) {
  if (!(p.spec() == q.spec())) throw DomainError("policies must share a SequenceSpec");
  p.spec().require_enumerable();
  const int T = p.spec().max_len;
  const int V = p.spec().vocab_size;
  const std::int64_t n = p.spec().sequence_count();

  std::vector<std::vector<double>> rows_p(static_cast<std::size_t>(T) * (V + 1));
  std::vector<std::vector<double>> rows_q(rows_p.size());
  for (int t = 0; t < T; ++t) {
    for (int prev = 0; prev <= V; ++prev) {
      rows_p[static_cast<std::size_t>(t) * (V + 1) + prev] = p.log_probs_row(prompt, t, prev);
      rows_q[static_cast<std::size_t>(t) * (V + 1) + prev] = q.log_probs_row(prompt, t, prev);
    }
  }

  double kl = 0.0;
  std::vector<int> tokens;
  for (std::int64_t idx = 0; idx < n; ++idx) {
    index_to_tokens(idx, V, T, tokens);
    double lp = 0.0, lq = 0.0;
    int prev = 0;
    for (int t = 0; t < T; ++t) {
      const std::size_t r = static_cast<std::size_t>(t) * (V + 1) + prev;
      lp += rows_p[r][tokens[t] - 1];
      lq += rows_q[r][tokens[t] - 1];
      prev = tokens[t];
    }
    kl += std::exp(lp) * (lp - lq);
  }
  return std::max(kl, 0.0);
}

/**
 * Gradient of the sequence log-probability with respect to the logit table:
 * (one-hot - softmax) on each visited (prompt, t, prev) row, zero elsewhere.
 */
inline std::vector<double> grad_logprob(const ToyPolicy& policy, int prompt,
                                        std::span<const int> y) {
  detail::check_tokens(policy, y);
  std::vector<double> grad(policy.param_count(), 0.0);
  int prev = 0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const std::size_t off = policy.row_offset(prompt, static_cast<int>(t), prev);
    auto probs = policy.probs_row(prompt, static_cast<int>(t), prev);
    for (int v = 0; v < policy.spec().vocab_size; ++v) grad[off + v] -= probs[v];
    grad[off + (y[t] - 1)] += 1.0;
    prev = y[t];
  }
  return grad;
}

/// Adds coef_t * d(log pi(y_t))/d(logits) for each position onto grad.
/// Shared accumulation path for every weighting scheme's objective gradient.
inline void accumulate_logprob_grad(const ToyPolicy& policy, int prompt, std::span<const int> y,
                                    std::span<const double> per_token_coef,
                                    std::vector<double>& grad) {
  detail::check_tokens(policy, y);
  if (per_token_coef.size() != y.size()) throw DomainError("coefficient shape mismatch");
  int prev = 0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const double c = per_token_coef[t];
    if (c != 0.0) {
      const std::size_t off = policy.row_offset(prompt, static_cast<int>(t), prev);
      auto probs = policy.probs_row(prompt, static_cast<int>(t), prev);
      for (int v = 0; v < policy.spec().vocab_size; ++v) grad[off + v] -= c * probs[v];
      grad[off + (y[t] - 1)] += c;
    }
    prev = y[t];
  }
}

// ============================================================================
// Binary serialization
// ============================================================================
//
// Flat little-endian layout, shared by checkpoints and the transport module:
//   u32 vocab_size, u32 max_len, u32 prompt_count, u32 version,
//   then f64 logits in (prompt, t, prev, next) row-major order.

namespace detail {
inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

inline std::uint32_t get_u32le(std::span<const std::uint8_t> in, std::size_t off) {
  return static_cast<std::uint32_t>(in[off]) | (static_cast<std::uint32_t>(in[off + 1]) << 8) |
         (static_cast<std::uint32_t>(in[off + 2]) << 16) |
         (static_cast<std::uint32_t>(in[off + 3]) << 24);
}

inline void put_f64le(std::vector<std::uint8_t>& out, double d) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline double get_f64le(std::span<const std::uint8_t> in, std::size_t off) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(in[off + i]) << (8 * i);
  return std::bit_cast<double>(bits);
}
}  // namespace detail

inline std::vector<std::uint8_t> serialize_policy(const ToyPolicy& policy) {
  std::vector<std::uint8_t> out;
  out.reserve(16 + 8 * policy.param_count());
  detail::put_u32le(out, static_cast<std::uint32_t>(policy.spec().vocab_size));
  detail::put_u32le(out, static_cast<std::uint32_t>(policy.spec().max_len));
  detail::put_u32le(out, static_cast<std::uint32_t>(policy.spec().prompt_count));
  detail::put_u32le(out, policy.version());
  for (double l : policy.logits()) detail::put_f64le(out, l);
  return out;
}

inline ToyPolicy deserialize_policy(std::span<const std::uint8_t> bytes,
                                    std::int64_t enum_cap = 1000000) {
  if (bytes.size() < 16) throw ProtocolError("policy blob truncated header");
  SequenceSpec spec;
  spec.vocab_size = static_cast<int>(detail::get_u32le(bytes, 0));
  spec.max_len = static_cast<int>(detail::get_u32le(bytes, 4));
  spec.prompt_count = static_cast<int>(detail::get_u32le(bytes, 8));
  spec.enum_cap = enum_cap;
  spec.validate();
  const std::uint32_t version = detail::get_u32le(bytes, 12);
  const std::size_t count = ToyPolicy::table_size(spec);
  if (bytes.size() != 16 + 8 * count) throw ProtocolError("policy blob size mismatch");
  std::vector<double> logits(count);
  for (std::size_t i = 0; i < count; ++i) logits[i] = detail::get_f64le(bytes, 16 + 8 * i);
  return ToyPolicy::from_logits(spec, std::move(logits), version);
}

inline void save_policy_file(const ToyPolicy& policy, const std::string& path) {
  auto bytes = serialize_policy(policy);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ResourceError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ResourceError("short write to " + path);
}

inline ToyPolicy load_policy_file(const std::string& path, std::int64_t enum_cap = 1000000) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ResourceError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_policy(bytes, enum_cap);
}

}  // namespace asyncrl
