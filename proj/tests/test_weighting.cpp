#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "asyncrl/policy.hpp"
#include "asyncrl/weighting.hpp"

using namespace asyncrl;
using namespace asyncrl::weighting;

namespace {

RolloutGroup make_group(const ToyPolicy& sampler, int prompt, int g, std::uint64_t seed,
                        const RewardFn& reward = parity_reward) {
  Rng rng(seed);
  auto group = sample_group(sampler, prompt, g, rng);
  score_group(group, reward);
  return group;
}

// Objective value recomputed from first principles with frozen denominators,
// evaluated on an arbitrary logit table. Independent oracle for the gradient
// checks: probabilities via direct normalization, denominators passed in as
// constants.
double oracle_objective(const SequenceSpec& spec, const std::vector<double>& logits,
                        const RolloutGroup& group, const WeightScheme& scheme,
                        const std::vector<double>& frozen_denoms) {
  const auto policy = ToyPolicy::from_logits(spec, logits, 0);
  auto [baseline, adv] = group_advantages(group.rewards);
  const int g = group.group_size();
  const int t_len = spec.max_len;
  double value = 0.0;
  for (int i = 0; i < g; ++i) {
    // Token log-probs by direct normalization.
    std::vector<double> lp(t_len);
    int prev = 0;
    for (int t = 0; t < t_len; ++t) {
      double z = 0.0;
      for (int v = 1; v <= spec.vocab_size; ++v) {
        z += std::exp(policy.logit(group.prompt, t, prev, v));
      }
      lp[t] = policy.logit(group.prompt, t, prev, group.responses[i][t]) - std::log(z);
      prev = group.responses[i][t];
    }
    double joint = 0.0;
    for (double l : lp) joint += l;

    if (const auto* grpo = std::get_if<GrpoToken>(&scheme)) {
      double mean_w = 0.0;
      for (int t = 0; t < t_len; ++t) {
        const double r = std::exp(lp[t] - group.sampler_token_logprobs[i][t]);
        mean_w += std::clamp(r, 1.0 - grpo->clip_eps, 1.0 + grpo->clip_eps);
      }
      value += adv[i] * mean_w / t_len / g;
    } else if (const auto* gspo = std::get_if<GspoSeq>(&scheme)) {
      double sampler_joint = 0.0;
      for (double l : group.sampler_token_logprobs[i]) sampler_joint += l;
      const double s = std::exp((joint - sampler_joint) / t_len);
      value += adv[i] * std::clamp(s, 1.0 - gspo->clip_eps, 1.0 + gspo->clip_eps) / g;
    } else {
      const double p_seq = std::exp(joint / t_len);
      value += adv[i] * (p_seq / frozen_denoms[i]) / g;
    }
  }
  return value;
}

std::vector<double> oracle_fd_objective_grad(const SequenceSpec& spec, const ToyPolicy& at,
                                             const RolloutGroup& group,
                                             const WeightScheme& scheme, double step = 1e-6) {
  // Freeze denominators at the evaluation point for the stop-gradient schemes.
  const auto stats = group_stats(group);
  std::vector<double> frozen(group.group_size(), stats.group_expectation);
  if (const auto* def = std::get_if<GepoDefensive>(&scheme)) {
    const double eps = defensive_epsilon(stats.q_variance, *def);
    for (int i = 0; i < group.group_size(); ++i) {
      const double p_seq =
          seq_logprob(at, group.prompt, group.responses[i]).length_norm_prob;
      frozen[i] = eps * p_seq + (1.0 - eps) * stats.group_expectation;
    }
  }
  std::vector<double> logits(at.logits().begin(), at.logits().end());
  std::vector<double> grad(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double saved = logits[k];
    logits[k] = saved + step;
    const double up = oracle_objective(spec, logits, group, scheme, frozen);
    logits[k] = saved - step;
    const double down = oracle_objective(spec, logits, group, scheme, frozen);
    logits[k] = saved;
    grad[k] = (up - down) / (2.0 * step);
  }
  return grad;
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  // Both gradients vanishing (e.g. a fully clipped group) counts as agreement;
  // the finite-difference side only carries truncation noise there.
  if (std::max(na, nb) < 1e-14) return 0.0;
  return std::sqrt(diff) / std::max(std::sqrt(na), std::sqrt(nb));
}

}  // namespace

TEST_CASE("group_advantages arithmetic") {
  const std::vector<double> r1{1, 0, 0, 1};
  auto [b1, a1] = group_advantages(r1);
  CHECK(b1 == doctest::Approx(0.5));
  CHECK(a1 == std::vector<double>{0.5, -0.5, -0.5, 0.5});

  const std::vector<double> equal{0.7, 0.7, 0.7};
  auto [b2, a2] = group_advantages(equal);
  CHECK(b2 == doctest::Approx(0.7));
  for (double a : a2) CHECK(a == doctest::Approx(0.0));

  const std::vector<double> r8{1, 0, 0, 0, 0, 0, 0, 0};
  auto [b3, a3] = group_advantages(r8);
  CHECK(b3 == doctest::Approx(0.125));
  CHECK(a3[0] == doctest::Approx(0.875));

  const std::vector<double> tiny{1.0};
  CHECK_THROWS_AS((void)group_advantages(tiny), DomainError);
}

TEST_CASE("advantages always sum to zero") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> rewards(2 + rng.next_u64() % 14);
    for (double& r : rewards) r = rng.normal() * 3.0;
    auto [baseline, adv] = group_advantages(rewards);
    (void)baseline;
    double sum = 0.0;
    for (double a : adv) sum += a;
    CHECK(std::abs(sum) < 1e-9);
  }
}

TEST_CASE("grpo_token_weights clamps and flags") {
  const std::vector<std::vector<double>> learner{{0.0, std::log(1.5), std::log(0.5)}};
  const std::vector<std::vector<double>> sampler{{0.0, 0.0, 0.0}};
  const auto tw = grpo_token_weights(learner, sampler, 0.2);
  CHECK(tw.weights[0][0] == doctest::Approx(1.0));
  CHECK(tw.clipped[0][0] == 0);
  CHECK(tw.weights[0][1] == doctest::Approx(1.2));
  CHECK(tw.clipped[0][1] == 1);
  CHECK(tw.weights[0][2] == doctest::Approx(0.8));
  CHECK(tw.clipped[0][2] == 1);
  CHECK(tw.raw[0][1] == doctest::Approx(1.5));

  const std::vector<std::vector<double>> bad{{std::numeric_limits<double>::infinity()}};
  const std::vector<std::vector<double>> zero{{0.0}};
  CHECK_THROWS_AS((void)grpo_token_weights(bad, zero, 0.2), DomainError);
}

TEST_CASE("gspo_seq_weight closed form and clamp") {
  CHECK(gspo_seq_weight(-3.0, -3.0, 4, 0.2) == doctest::Approx(1.0));
  // (e^{-2} / e^{-4})^{1/2} = e
  CHECK(gspo_seq_weight(-2.0, -4.0, 2, 3.0) == doctest::Approx(std::exp(1.0)).epsilon(1e-9));
  CHECK(std::abs(gspo_seq_weight(-2.0, -4.0, 2, 3.0) - 2.718282) < 1e-6);
  bool clipped = false;
  CHECK(gspo_seq_weight(-2.0, -4.0, 2, 0.2, &clipped) == doctest::Approx(1.2));
  CHECK(clipped);
  CHECK_THROWS_AS((void)gspo_seq_weight(std::nan(""), 0.0, 2, 0.2), DomainError);
}

TEST_CASE("clamp is idempotent and bounded") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const double eps = 0.05 + 0.9 * rng.uniform();
    const double lp = rng.normal();
    const double lq = rng.normal();
    const double once = gspo_seq_weight(lp, lq, 1, eps);
    bool dummy = false;
    const double twice = gspo_seq_weight(std::log(once), 0.0, 1, eps, &dummy);
    CHECK(once >= 1.0 - eps);
    CHECK(once <= 1.0 + eps);
    CHECK(twice == doctest::Approx(once).epsilon(1e-12));
  }
}

TEST_CASE("group_expectation hand values") {
  const std::vector<double> constant{0.3, 0.3, 0.3};
  CHECK(group_expectation(constant) == doctest::Approx(0.3).epsilon(1e-12));

  const std::vector<double> q1{0.5, 0.3, 0.2};
  CHECK(group_expectation(q1) == doctest::Approx(0.38).epsilon(1e-12));

  const std::vector<double> q2{0.9, 0.1};
  CHECK(group_expectation(q2) == doctest::Approx(0.82).epsilon(1e-12));

  const std::vector<double> bad{0.5, 0.0};
  CHECK_THROWS_AS((void)group_expectation(bad), DomainError);
}

TEST_CASE("group_expectation stays inside [min q, max q]") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> q(2 + rng.next_u64() % 10);
    for (double& v : q) v = std::exp(-3.0 * rng.uniform());
    const double e = group_expectation(q);
    CHECK(e >= *std::min_element(q.begin(), q.end()) - 1e-15);
    CHECK(e <= *std::max_element(q.begin(), q.end()) + 1e-15);
  }
}

TEST_CASE("gepo_weight hand values and listing-form equivalence") {
  const std::vector<double> q{0.5, 0.3, 0.2};
  CHECK(gepo_weight(0.4, q) == doctest::Approx(0.4 / 0.38).epsilon(1e-12));
  CHECK(std::abs(gepo_weight(0.4, q) - 1.052632) < 1e-6);
  CHECK(gepo_weight(0.38, q) == doctest::Approx(1.0).epsilon(1e-12));

  const std::vector<double> degenerate{0.4, 0.4, 0.4};
  CHECK(gepo_weight(0.4, degenerate) == doctest::Approx(1.0).epsilon(1e-12));

  // Listing form: p / sum(normalized_q * q) with normalized_q = q / sum(q).
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> qs(2 + rng.next_u64() % 8);
    for (double& v : qs) v = std::exp(-2.0 + 2.0 * rng.normal() * 0.3);
    const double p = std::exp(-1.0 + rng.normal() * 0.3);
    double sum_q = 0.0;
    for (double v : qs) sum_q += v;
    double listing_denom = 0.0;
    for (double v : qs) listing_denom += (v / sum_q) * v;
    CHECK(gepo_weight(p, qs) == doctest::Approx(p / listing_denom).epsilon(1e-12));
  }
}

TEST_CASE("defensive_weight limits and hand value") {
  const std::vector<double> q{0.5, 0.3, 0.2};

  GepoDefensive forced1;
  forced1.eps_override = 1.0;
  const auto w1 = defensive_weight(0.4, q, forced1);
  CHECK(w1.value == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w1.epsilon == doctest::Approx(1.0));

  GepoDefensive forced0;
  forced0.eps_override = 0.0;
  const auto w0 = defensive_weight(0.4, q, forced0);
  CHECK(w0.value == doctest::Approx(gepo_weight(0.4, q)).epsilon(1e-12));

  GepoDefensive half;
  half.eps_override = 0.5;
  const auto wh = defensive_weight(0.4, q, half);
  CHECK(wh.value == doctest::Approx(0.4 / 0.39).epsilon(1e-12));
  CHECK(std::abs(wh.value - 1.025641) < 1e-6);
}

TEST_CASE("defensive weight interpolates monotonically in epsilon") {
  const std::vector<double> q{0.5, 0.3, 0.2};
  for (double p : {0.1, 0.38, 0.9}) {
    double prev = gepo_weight(p, q);
    for (int k = 1; k <= 20; ++k) {
      GepoDefensive s;
      s.eps_override = k / 20.0;
      const double w = defensive_weight(p, q, s).value;
      if (p > group_expectation(q)) {
        CHECK(w <= prev + 1e-12);  // decreasing toward 1
      } else if (p < group_expectation(q)) {
        CHECK(w >= prev - 1e-12);  // increasing toward 1
      }
      prev = w;
    }
    CHECK(prev == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("defensive epsilon saturates in Var(q)") {
  GepoDefensive s;  // c = 1e-3, eps in [0, 0.9]
  CHECK(defensive_epsilon(0.0, s) == doctest::Approx(0.0));
  CHECK(defensive_epsilon(1e-3, s) == doctest::Approx(0.5));
  CHECK(defensive_epsilon(1e3, s) == doctest::Approx(0.9));  // clamped at eps_max
  GepoDefensive bad;
  bad.eps_min = 0.5;
  bad.eps_max = 0.5;
  CHECK_THROWS_AS((void)defensive_epsilon(0.1, bad), DomainError);
}

TEST_CASE("weighted_objective: zero advantages give zero gradient") {
  SequenceSpec spec{2, 3, 1};
  const auto policy = ToyPolicy::random(spec, 21);
  auto group = make_group(policy, 0, 6, 99);
  for (double& r : group.rewards) r = 0.5;  // constant rewards
  for (const WeightScheme scheme :
       {WeightScheme{GrpoToken{}}, WeightScheme{GspoSeq{}}, WeightScheme{Gepo{}},
        WeightScheme{GepoDefensive{}}}) {
    const auto res = weighted_objective(group, policy, scheme);
    CHECK(res.value == doctest::Approx(0.0));
    for (double g : res.grad) CHECK(g == 0.0);
  }
}

TEST_CASE("weighted_objective: on-policy GSPO weights are exactly 1") {
  SequenceSpec spec{3, 2, 1};
  const auto policy = ToyPolicy::random(spec, 8);
  const auto group = make_group(policy, 0, 8, 11);
  const auto res = weighted_objective(group, policy, GspoSeq{});
  for (double w : res.sample_weights) CHECK(w == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(res.value == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(res.clipped_fraction == 0.0);
}

TEST_CASE("on-policy GEPO identity: q-weighted mean weight is 1") {
  SequenceSpec spec{2, 3, 1};
  const auto policy = ToyPolicy::random(spec, 13);
  const auto group = make_group(policy, 0, 8, 29);
  const auto res = weighted_objective(group, policy, Gepo{});
  const auto stats = group_stats(group);
  double sum_q = 0.0;
  for (double q : stats.q_seq) sum_q += q;
  double weighted_mean = 0.0;
  for (int i = 0; i < group.group_size(); ++i) {
    // On-policy weights are q_i / E_hat, not 1.
    CHECK(res.sample_weights[i] ==
          doctest::Approx(stats.q_seq[i] / stats.group_expectation).epsilon(1e-10));
    weighted_mean += (stats.q_seq[i] / sum_q) * res.sample_weights[i];
  }
  CHECK(weighted_mean == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("objective gradients match frozen-denominator finite differences") {
  Rng meta(2025);
  const std::vector<WeightScheme> schemes{GrpoToken{0.3}, GspoSeq{0.4}, Gepo{},
                                          GepoDefensive{}};
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    SequenceSpec spec{2, 1 + static_cast<int>(meta.next_u64() % 2), 1};
    const auto sampler = ToyPolicy::random(spec, meta.next_u64(), 0.7);
    const auto learner = ToyPolicy::random(spec, meta.next_u64(), 0.7);
    const auto group = make_group(sampler, 0, 4, meta.next_u64());
    const auto& scheme = schemes[trial % schemes.size()];

    // Skip instances sitting exactly on a clip boundary; the derivative is
    // one-sided there.
    const auto res = weighted_objective(group, learner, scheme);
    bool on_boundary = false;
    if (const auto* grpo = std::get_if<GrpoToken>(&scheme)) {
      for (int i = 0; i < group.group_size(); ++i) {
        for (int t = 0; t < spec.max_len; ++t) {
          const double raw = std::exp(
              seq_logprob(learner, 0, group.responses[i]).token_logprobs[t] -
              group.sampler_token_logprobs[i][t]);
          if (std::abs(raw - (1.0 - grpo->clip_eps)) < 1e-4 ||
              std::abs(raw - (1.0 + grpo->clip_eps)) < 1e-4) {
            on_boundary = true;
          }
        }
      }
    }
    if (on_boundary) continue;

    const auto fd = oracle_fd_objective_grad(spec, learner, group, scheme);
    CHECK(rel_err(res.grad, fd) < 1e-5);
    checked++;
  }
  CHECK(checked >= 30);
}

TEST_CASE("theorem instantiation: GEPO weight variance beats standard ratios at high KL") {
  // V=2, T=1 policies are Bernoulli pairs; over the enumerated space the
  // group expectation is exact (sum q^2), and when KL > log 5 the
  // group-expectation weight must have strictly smaller variance than p/q.
  SequenceSpec one{2, 1, 1};
  ToyPolicy base(one);
  const std::size_t off = base.row_offset(0, 0, 0);
  int tested = 0;
  Rng rng(404);
  while (tested < 25) {
    const double a = 0.02 + 0.96 * rng.uniform();
    const double b = 0.02 + 0.96 * rng.uniform();
    std::vector<double> la(ToyPolicy::table_size(one), 0.0);
    std::vector<double> lb(ToyPolicy::table_size(one), 0.0);
    la[off] = std::log(a);
    la[off + 1] = std::log1p(-a);
    lb[off] = std::log(b);
    lb[off + 1] = std::log1p(-b);
    const auto p = ToyPolicy::from_logits(one, la, 0);
    const auto q = ToyPolicy::from_logits(one, lb, 0);
    if (exact_kl(p, q, 0) <= std::log(5.0)) continue;
    tested++;

    const auto dist_p = enumerate_dist(p, 0);
    const auto dist_q = enumerate_dist(q, 0);
    const double e_hat = dist_q[0] * dist_q[0] + dist_q[1] * dist_q[1];  // sum q^2
    auto var_under_q = [&](auto weight) {
      double mean = 0.0, second = 0.0;
      for (int i = 0; i < 2; ++i) {
        mean += dist_q[i] * weight(i);
        second += dist_q[i] * weight(i) * weight(i);
      }
      return second - mean * mean;
    };
    const double var_std =
        var_under_q([&](int i) { return dist_p[i] / dist_q[i]; });
    const double var_gepo = var_under_q([&](int i) { return dist_p[i] / e_hat; });
    CHECK(var_gepo < var_std);
  }
}

TEST_CASE("weighted_objective validates shape") {
  SequenceSpec spec{2, 2, 1};
  const auto policy = ToyPolicy::random(spec, 3);
  auto group = make_group(policy, 0, 4, 4);
  group.rewards.pop_back();
  CHECK_THROWS_AS((void)weighted_objective(group, policy, Gepo{}), DomainError);
}
