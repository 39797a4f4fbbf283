#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Deterministic discrete-event simulation of the star-topology asynchronous
 * system: one learner, K samplers, stochastic model-sync delays.
 *
 * Protocol per simulated cycle:
 *   - each sampler generates one rollout group every rollout_duration seconds
 *     using the policy snapshot it held when generation began; transmission is
 *     instantaneous (rollout latency is folded into the model-sync delay);
 *   - after a freshly drawn delay elapses, a sampler fetches the newest
 *     published policy (a version-stamped snapshot registry stands in for the
 *     shared model path); the sampler never idles;
 *   - the learner consumes arrived rollouts strictly in arrival order,
 *     dropping (and counting) any that exceed the staleness cap or the
 *     eligibility window, and publishes version + 1 when its step completes.
 *
 * The simulator is single-threaded and bit-deterministic for a fixed
 * (config, seed): the event queue is totally ordered by (time, sequence),
 * with sequence assigned at insertion.
 */

#include <cmath>
#include <cstdint>
#include <deque>
#include <memory>
#include <optional>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include "asyncrl/csv.hpp"
#include "asyncrl/errors.hpp"
#include "asyncrl/policy.hpp"
#include "asyncrl/rng.hpp"
#include "asyncrl/rollout.hpp"
#include "asyncrl/trainer.hpp"

namespace asyncrl::sim {

// ============================================================================
// Delay model
// ============================================================================

enum class DelayKind { LogNormal, Weibull, Exponential, Fixed };

/**
 * Stochastic network delay, clamped to [min_s, max_s]. The Fixed kind is the
 * degenerate constant (zero included) used for synchronous baselines and the
 * hold-one-delay mode; it bypasses the clamp. When calibrate is set, the
 * distribution is rescaled so its calibrate_quantile point lands exactly on
 * max_s before clamping.
 */
struct DelayModel {
  DelayKind kind = DelayKind::LogNormal;
  double a = 0.0;  // mu | shape | rate | fixed value
  double b = 0.0;  // sigma | scale | unused
  double min_s = 60.0;
  double max_s = 1800.0;
  double calibrate_quantile = 0.995;
  bool calibrate = false;

  static DelayModel log_normal(double mu, double sigma, double min_s = 60.0,
                               double max_s = 1800.0) {
    DelayModel m{DelayKind::LogNormal, mu, sigma, min_s, max_s};
    m.validate();
    return m;
  }

  static DelayModel weibull(double shape, double scale, double min_s = 60.0,
                            double max_s = 1800.0) {
    DelayModel m{DelayKind::Weibull, shape, scale, min_s, max_s};
    m.validate();
    return m;
  }

  static DelayModel exponential(double rate, double min_s = 60.0, double max_s = 1800.0) {
    DelayModel m{DelayKind::Exponential, rate, 0.0, min_s, max_s};
    m.validate();
    return m;
  }

  static DelayModel fixed(double seconds) {
    DelayModel m{DelayKind::Fixed, seconds, 0.0, 0.0, seconds};
    m.validate();
    return m;
  }

  /// Median 120 s, 99.5% quantile pinned to the 1800 s bound.
  static DelayModel default_log_normal() {
    const double mu = std::log(120.0);
    const double sigma = std::log(1800.0 / 120.0) / inv_normal_cdf(0.995);
    return log_normal(mu, sigma);
  }

  void validate() const {
    switch (kind) {
      case DelayKind::LogNormal:
        if (!(b > 0.0)) throw DomainError("log-normal sigma must be positive");
        break;
      case DelayKind::Weibull:
        if (!(a > 0.0) || !(b > 0.0)) throw DomainError("weibull parameters must be positive");
        break;
      case DelayKind::Exponential:
        if (!(a > 0.0)) throw DomainError("exponential rate must be positive");
        break;
      case DelayKind::Fixed:
        if (a < 0.0) throw DomainError("fixed delay must be >= 0");
        return;
    }
    if (!(min_s > 0.0 && min_s < max_s)) throw DomainError("need 0 < min_s < max_s");
    if (!(calibrate_quantile > 0.0 && calibrate_quantile < 1.0)) {
      throw DomainError("calibrate_quantile must lie in (0, 1)");
    }
  }

  /// Analytic quantile of the raw (pre-clamp) distribution.
  double quantile(double p) const {
    switch (kind) {
      case DelayKind::LogNormal:
        return std::exp(a + b * inv_normal_cdf(p));
      case DelayKind::Weibull:
        return b * std::pow(-std::log(1.0 - p), 1.0 / a);
      case DelayKind::Exponential:
        return -std::log(1.0 - p) / a;
      case DelayKind::Fixed:
        return a;
    }
    return 0.0;
  }

  /// Copy with the scale multiplied by mult (bounds unchanged).
  DelayModel scaled(double mult) const {
    if (!(mult > 0.0)) throw DomainError("delay multiplier must be positive");
    DelayModel m = *this;
    switch (kind) {
      case DelayKind::LogNormal:
        m.a += std::log(mult);
        break;
      case DelayKind::Weibull:
        m.b *= mult;
        break;
      case DelayKind::Exponential:
        m.a /= mult;
        break;
      case DelayKind::Fixed:
        m.a *= mult;
        m.max_s = m.a;
        break;
    }
    return m;
  }

  /// Copy rescaled so quantile(calibrate_quantile) == max_s.
  DelayModel calibrated() const {
    if (kind == DelayKind::Fixed) return *this;
    const double q = quantile(calibrate_quantile);
    return scaled(max_s / q);
  }
};

/// One delay draw, clamped to [min_s, max_s] (Fixed bypasses the clamp,
/// including the rescale-then-clamp path when calibrate is set).
inline double sample_delay(const DelayModel& model, Rng& rng) {
  model.validate();
  const DelayModel m = model.calibrate ? model.calibrated() : model;
  double d = 0.0;
  switch (m.kind) {
    case DelayKind::LogNormal:
      d = rng.log_normal(m.a, m.b);
      break;
    case DelayKind::Weibull:
      d = rng.weibull(m.a, m.b);
      break;
    case DelayKind::Exponential:
      d = rng.exponential(m.a);
      break;
    case DelayKind::Fixed:
      return m.a;
  }
  return std::clamp(d, m.min_s, m.max_s);
}

// ============================================================================
// Simulation config, events, trace
// ============================================================================

struct SimConfig {
  int sampler_count = 4;
  int group_size = 8;
  int max_staleness_steps = 64;  // the studied set is {0,4,8,16,32,64}; any >= 0 works
  double eligibility_window_s = 1800.0;
  double learner_step_duration_s = 60.0;
  double sampler_rollout_duration_s = 90.0;
  std::uint64_t seed = 1;
  int max_learner_steps = 200;
  double max_sim_time_s = 36000.0;
  bool redraw_delay_per_cycle = true;  // false: each sampler holds its first draw

  void validate() const {
    if (sampler_count < 0) throw DomainError("sampler_count must be >= 0");
    if (group_size < 2) throw DomainError("group_size must be >= 2");
    if (max_staleness_steps < 0) throw DomainError("max_staleness_steps must be >= 0");
    if (!(eligibility_window_s > 0.0)) throw DomainError("eligibility window must be > 0");
    if (!(learner_step_duration_s > 0.0) || !(sampler_rollout_duration_s > 0.0)) {
      throw DomainError("durations must be > 0");
    }
    if (max_learner_steps < 1) throw DomainError("max_learner_steps must be >= 1");
    if (!(max_sim_time_s > 0.0)) throw DomainError("max_sim_time_s must be > 0");
  }
};

enum class EventKind {
  ModelPublish,
  ModelFetchComplete,
  RolloutArrival,
  LearnerStepDone,
  RolloutDrop,
};

inline const char* event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::ModelPublish: return "model_publish";
    case EventKind::ModelFetchComplete: return "model_fetch";
    case EventKind::RolloutArrival: return "rollout_arrival";
    case EventKind::LearnerStepDone: return "learner_step";
    case EventKind::RolloutDrop: return "rollout_drop";
  }
  return "?";
}

struct TraceRow {
  double time_s = 0.0;
  EventKind kind = EventKind::RolloutArrival;
  int sampler_id = -1;  // -1 for learner events
  std::uint32_t version = 0;
  int staleness = 0;
  bool dropped = false;
};

struct DropCounters {
  std::uint64_t generated = 0;
  std::uint64_t consumed = 0;
  std::uint64_t dropped_stale = 0;
  std::uint64_t dropped_window = 0;

  std::uint64_t dropped() const { return dropped_stale + dropped_window; }
};

/// Version-step gap between learner and the rollout's sampler.
inline std::uint32_t staleness_steps(const RolloutGroup& rollout, std::uint32_t learner_version) {
  if (rollout.sampler_version > learner_version) {
    throw ProtocolError("sampler version ahead of learner");
  }
  return learner_version - rollout.sampler_version;
}

// ============================================================================
// Simulation engine
// ============================================================================

/**
 * Pull-based engine implementing train::BatchStream: next() advances the
 * event clock until an eligible rollout is consumed and returns it;
 * on_published() registers the learner's updated snapshot at the step's
 * completion time.
 */
class SimRun final : public train::BatchStream {
 public:
  SimRun(const SimConfig& config, const DelayModel& delay, const ToyPolicy& initial,
         RewardFn reward = parity_reward)
      : config_(config), delay_(delay), reward_(std::move(reward)) {
    config_.validate();
    delay_.validate();
    publish_snapshot(0.0, std::make_shared<const ToyPolicy>(initial));
    samplers_.reserve(config_.sampler_count);
    for (int s = 0; s < config_.sampler_count; ++s) {
      SamplerState st{Rng(derive_seed(config_.seed, 1000 + s)),
                      Rng(derive_seed(config_.seed, 2000 + s)), registry_.back().policy, 0.0};
      samplers_.push_back(std::move(st));
      schedule(0.0 + config_.sampler_rollout_duration_s, EventType::RolloutReady, s);
      const double d = sample_delay(delay_, samplers_[s].delay_rng);
      samplers_[s].held_delay = d;
      if (d > 0.0) schedule(d, EventType::FetchDue, s);
      // A zero delay means the sampler refreshes at every rollout boundary
      // instead of via timer events.
    }
  }

  // BatchStream
  std::optional<RolloutGroup> next(const ToyPolicy& current) override {
    (void)current;  // the engine tracks versions via on_published
    while (true) {
      if (consumed_steps_ >= config_.max_learner_steps) return std::nullopt;
      if (!pending_.empty()) {
        const double start = std::max(learner_free_at_, pending_.front().arrival_s);
        if (start > config_.max_sim_time_s) return std::nullopt;
        drain_events_until(start);
        Pending p = std::move(pending_.front());
        pending_.pop_front();
        const std::uint32_t stale = staleness_steps(p.group, current_version_);
        const double age = start - p.group.created_at;
        if (stale > static_cast<std::uint32_t>(config_.max_staleness_steps)) {
          counters_.dropped_stale++;
          trace_.push_back({start, EventKind::RolloutDrop, p.sampler_id, p.group.sampler_version,
                            static_cast<int>(stale), true});
          continue;
        }
        if (age > config_.eligibility_window_s) {
          counters_.dropped_window++;
          trace_.push_back({start, EventKind::RolloutDrop, p.sampler_id, p.group.sampler_version,
                            static_cast<int>(stale), true});
          continue;
        }
        counters_.consumed++;
        consumed_steps_++;
        pending_publish_time_ = start + config_.learner_step_duration_s;
        last_consumed_staleness_ = static_cast<int>(stale);
        last_consumed_sampler_ = p.sampler_id;
        return std::move(p.group);
      }
      if (!advance_one_event()) {
        std::ostringstream msg;
        msg << "simulation deadlock: no eligible rollout and no pending event at t="
            << now_ << "s (consumed=" << counters_.consumed << ", queue empty)";
        throw TrainingError(msg.str());
      }
      if (now_ > config_.max_sim_time_s) return std::nullopt;
    }
  }

  void on_published(const ToyPolicy& updated) override {
    drain_events_until(pending_publish_time_);
    auto snap = std::make_shared<const ToyPolicy>(updated);
    publish_snapshot(pending_publish_time_, snap);
    trace_.push_back({pending_publish_time_, EventKind::LearnerStepDone, last_consumed_sampler_,
                      updated.version(), last_consumed_staleness_, false});
    trace_.push_back(
        {pending_publish_time_, EventKind::ModelPublish, -1, updated.version(), 0, false});
    learner_free_at_ = pending_publish_time_;
  }

  const std::vector<TraceRow>& trace() const { return trace_; }
  const DropCounters& counters() const { return counters_; }
  std::uint64_t in_flight() const { return pending_.size(); }

 private:
  enum class EventType { RolloutReady, FetchDue };

  struct Event {
    double time;
    std::uint64_t seq;
    EventType type;
    int sampler;
    bool operator>(const Event& other) const {
      return time != other.time ? time > other.time : seq > other.seq;
    }
  };

  struct SamplerState {
    Rng delay_rng;
    Rng content_rng;
    std::shared_ptr<const ToyPolicy> policy;  // snapshot generating the current rollout
    double held_delay = 0.0;
    std::uint64_t rollouts_started = 0;
  };

  struct Pending {
    RolloutGroup group;
    double arrival_s;
    int sampler_id;
  };

  struct Snapshot {
    double time;
    std::shared_ptr<const ToyPolicy> policy;
  };

  void schedule(double time, EventType type, int sampler) {
    events_.push({time, next_seq_++, type, sampler});
  }

  void publish_snapshot(double time, std::shared_ptr<const ToyPolicy> policy) {
    current_version_ = policy->version();
    registry_.push_back({time, std::move(policy)});
  }

  std::shared_ptr<const ToyPolicy> latest_at(double time) const {
    // Registry times are nondecreasing; scan back from the newest.
    for (auto it = registry_.rbegin(); it != registry_.rend(); ++it) {
      if (it->time <= time) return it->policy;
    }
    return registry_.front().policy;
  }

  bool advance_one_event() {
    if (events_.empty()) return false;
    const Event ev = events_.top();
    events_.pop();
    now_ = ev.time;
    SamplerState& st = samplers_[ev.sampler];
    if (ev.type == EventType::RolloutReady) {
      const int prompt =
          static_cast<int>(st.rollouts_started % st.policy->spec().prompt_count);
      st.rollouts_started++;
      RolloutGroup group =
          sample_group(*st.policy, prompt, config_.group_size, st.content_rng);
      group.created_at = ev.time;
      score_group(group, reward_);
      counters_.generated++;
      trace_.push_back({ev.time, EventKind::RolloutArrival, ev.sampler, group.sampler_version,
                        static_cast<int>(current_version_ - group.sampler_version), false});
      pending_.push_back({std::move(group), ev.time, ev.sampler});
      // Zero-delay samplers refresh to the newest snapshot at every rollout
      // boundary; delayed samplers keep their last fetched snapshot.
      if (st.held_delay <= 0.0) st.policy = latest_at(ev.time);
      schedule(ev.time + config_.sampler_rollout_duration_s, EventType::RolloutReady, ev.sampler);
    } else {
      st.policy = latest_at(ev.time);
      trace_.push_back({ev.time, EventKind::ModelFetchComplete, ev.sampler,
                        st.policy->version(), 0, false});
      const double d = config_.redraw_delay_per_cycle ? sample_delay(delay_, st.delay_rng)
                                                      : st.held_delay;
      if (config_.redraw_delay_per_cycle) st.held_delay = d;
      if (d > 0.0) schedule(ev.time + d, EventType::FetchDue, ev.sampler);
    }
    return true;
  }

  void drain_events_until(double time) {
    while (!events_.empty() && events_.top().time < time) {
      advance_one_event();
    }
  }

  SimConfig config_;
  DelayModel delay_;
  RewardFn reward_;
  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> events_;
  std::uint64_t next_seq_ = 0;
  std::vector<SamplerState> samplers_;
  std::deque<Pending> pending_;
  std::vector<Snapshot> registry_;
  std::uint32_t current_version_ = 0;
  double now_ = 0.0;
  double learner_free_at_ = 0.0;
  double pending_publish_time_ = 0.0;
  int consumed_steps_ = 0;
  int last_consumed_staleness_ = 0;
  int last_consumed_sampler_ = -1;
  std::vector<TraceRow> trace_;
  DropCounters counters_;
};

// ============================================================================
// run_sim
// ============================================================================

struct SimResult {
  std::vector<TraceRow> trace;
  std::vector<train::MetricsRow> metrics;
  std::vector<train::EvalPoint> evals;
  DropCounters counters;
  std::uint64_t in_flight = 0;
  ToyPolicy final_policy;
};

/// Full event loop: the trainer consumes eligible rollouts in arrival order,
/// one group per learner step; every step publishes a snapshot back.
inline SimResult run_sim(const SimConfig& config, const DelayModel& delay,
                         const weighting::WeightScheme& scheme, const ToyPolicy& initial,
                         const RewardFn& reward = parity_reward,
                         const train::TrainConfig* train_override = nullptr) {
  SimRun engine(config, delay, initial, reward);
  train::TrainConfig tc;
  if (train_override) tc = *train_override;
  tc.scheme = scheme;
  tc.epochs = 1;
  tc.steps_per_epoch = config.max_learner_steps;
  auto trained = train::run_training(initial, tc, engine, reward);

  SimResult result;
  result.trace = engine.trace();
  result.metrics = std::move(trained.metrics);
  result.evals = std::move(trained.evals);
  result.counters = engine.counters();
  result.in_flight = engine.in_flight();
  result.final_policy = std::move(trained.final_policy);
  return result;
}

// ============================================================================
// Export
// ============================================================================

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string out = "time_s,event_kind,sampler_id,version,staleness,dropped_flag\n";
  for (const auto& row : trace) {
    out += io::format_double(row.time_s);
    out += ",";
    out += event_kind_name(row.kind);
    out += "," + std::to_string(row.sampler_id) + "," + std::to_string(row.version) + "," +
           std::to_string(row.staleness) + "," + (row.dropped ? "1" : "0") + "\n";
  }
  return out;
}

inline void save_trace_csv(const std::vector<TraceRow>& trace, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ResourceError("cannot open " + path + " for writing");
  f << trace_csv(trace);
}

inline io::CsvTable metrics_table(const std::vector<train::MetricsRow>& metrics) {
  io::CsvTable table(train::metrics_columns());
  for (const auto& m : metrics) table.add_row(train::metrics_row_values(m));
  return table;
}

/// FNV-1a over the serialized trace; equal seeds must give equal hashes.
inline std::uint64_t trace_hash(const std::vector<TraceRow>& trace) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 1099511628211ull;
    }
  };
  for (const auto& row : trace) {
    mix(std::bit_cast<std::uint64_t>(row.time_s));
    mix(static_cast<std::uint64_t>(row.kind));
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(row.sampler_id)));
    mix(row.version);
    mix(static_cast<std::uint64_t>(static_cast<std::int64_t>(row.staleness)));
    mix(row.dropped ? 1 : 0);
  }
  return h;
}

}  // namespace asyncrl::sim
