#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Experiment configuration: a strict JSON schema covering the sequence spec,
 * simulator, delay model, trainer, weight scheme, transport topology, and
 * seeds. Unknown keys are rejected so a typo cannot silently fall back to a
 * default; every run writes a fully resolved copy (defaults materialized,
 * version-stamped) next to its outputs.
 */

#include <cstdlib>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "asyncrl/delay_sim.hpp"
#include "asyncrl/errors.hpp"
#include "asyncrl/policy.hpp"
#include "asyncrl/trainer.hpp"
#include "asyncrl/transport/endpoint.hpp"
#include "asyncrl/weighting.hpp"

#ifndef ASYNCRL_VERSION
#define ASYNCRL_VERSION "0.0.0"
#endif

namespace asyncrl::io {

using json = nlohmann::json;

struct VarianceSweepConfig {
  int bernoulli_grid = 50;
  int gaussian_grid = 41;
  double gaussian_lo = -2.0;
  double gaussian_hi = 2.0;
};

struct ExperimentConfig {
  SequenceSpec seq{2, 4, 1, 1000000};
  sim::SimConfig sim_config;
  sim::DelayModel delay = sim::DelayModel::default_log_normal();
  train::TrainConfig train_config;
  transport::Topology topology;
  VarianceSweepConfig sweep;
  std::vector<std::uint64_t> seeds{1};
  std::string out_dir = "runs/out";
  double init_scale = 1.5;
};

namespace detail {

inline void require_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) throw SchemaError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw SchemaError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

inline weighting::WeightScheme parse_scheme(const json& j) {
  require_keys(j, {"type", "clip_eps", "post_clip", "smooth_scale", "eps_min", "eps_max",
                   "eps_override"},
               "scheme");
  std::string type = "gepo";
  read(j, "type", type);
  if (type == "grpo_token") {
    weighting::GrpoToken s;
    read(j, "clip_eps", s.clip_eps);
    return s;
  }
  if (type == "gspo_seq") {
    weighting::GspoSeq s;
    read(j, "clip_eps", s.clip_eps);
    return s;
  }
  if (type == "gepo") {
    weighting::Gepo s;
    read(j, "post_clip", s.post_clip);
    read(j, "clip_eps", s.clip_eps);
    return s;
  }
  if (type == "gepo_defensive") {
    weighting::GepoDefensive s;
    read(j, "smooth_scale", s.smooth_scale);
    read(j, "eps_min", s.eps_min);
    read(j, "eps_max", s.eps_max);
    if (j.contains("eps_override") && !j.at("eps_override").is_null()) {
      s.eps_override = j.at("eps_override").get<double>();
    }
    s.validate();
    return s;
  }
  throw SchemaError("unknown scheme type '" + type + "'");
}

inline json scheme_to_json(const weighting::WeightScheme& scheme) {
  json j;
  j["type"] = weighting::scheme_name(scheme);
  if (const auto* s = std::get_if<weighting::GrpoToken>(&scheme)) {
    j["clip_eps"] = s->clip_eps;
  } else if (const auto* s = std::get_if<weighting::GspoSeq>(&scheme)) {
    j["clip_eps"] = s->clip_eps;
  } else if (const auto* s = std::get_if<weighting::Gepo>(&scheme)) {
    j["post_clip"] = s->post_clip;
    j["clip_eps"] = s->clip_eps;
  } else if (const auto* s = std::get_if<weighting::GepoDefensive>(&scheme)) {
    j["smooth_scale"] = s->smooth_scale;
    j["eps_min"] = s->eps_min;
    j["eps_max"] = s->eps_max;
    if (s->eps_override) j["eps_override"] = *s->eps_override;
  }
  return j;
}

inline sim::DelayModel parse_delay(const json& j) {
  require_keys(j, {"kind", "mu", "sigma", "shape", "scale", "rate", "seconds", "min_s", "max_s",
                   "calibrate_quantile", "calibrate"},
               "delay");
  std::string kind = "default";
  read(j, "kind", kind);
  sim::DelayModel m = sim::DelayModel::default_log_normal();
  if (kind == "default" || kind == "log_normal") {
    if (kind == "log_normal") {
      m.kind = sim::DelayKind::LogNormal;
      if (!j.contains("mu") || !j.contains("sigma")) {
        throw SchemaError("log_normal delay needs mu and sigma");
      }
      read(j, "mu", m.a);
      read(j, "sigma", m.b);
    }
  } else if (kind == "weibull") {
    m.kind = sim::DelayKind::Weibull;
    if (!j.contains("shape") || !j.contains("scale")) {
      throw SchemaError("weibull delay needs shape and scale");
    }
    read(j, "shape", m.a);
    read(j, "scale", m.b);
  } else if (kind == "exponential") {
    m.kind = sim::DelayKind::Exponential;
    if (!j.contains("rate")) throw SchemaError("exponential delay needs rate");
    read(j, "rate", m.a);
    m.b = 0.0;
  } else if (kind == "fixed") {
    double seconds = 0.0;
    read(j, "seconds", seconds);
    m = sim::DelayModel::fixed(seconds);
    return m;  // fixed ignores bounds/calibration
  } else {
    throw SchemaError("unknown delay kind '" + kind + "'");
  }
  read(j, "min_s", m.min_s);
  read(j, "max_s", m.max_s);
  read(j, "calibrate_quantile", m.calibrate_quantile);
  read(j, "calibrate", m.calibrate);
  m.validate();
  return m;
}

inline json delay_to_json(const sim::DelayModel& m) {
  json j;
  switch (m.kind) {
    case sim::DelayKind::LogNormal:
      j["kind"] = "log_normal";
      j["mu"] = m.a;
      j["sigma"] = m.b;
      break;
    case sim::DelayKind::Weibull:
      j["kind"] = "weibull";
      j["shape"] = m.a;
      j["scale"] = m.b;
      break;
    case sim::DelayKind::Exponential:
      j["kind"] = "exponential";
      j["rate"] = m.a;
      break;
    case sim::DelayKind::Fixed:
      j["kind"] = "fixed";
      j["seconds"] = m.a;
      return j;
  }
  j["min_s"] = m.min_s;
  j["max_s"] = m.max_s;
  j["calibrate_quantile"] = m.calibrate_quantile;
  j["calibrate"] = m.calibrate;
  return j;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const json& root) {
  // code_version is accepted so a resolved config replays as-is.
  detail::require_keys(root,
                       {"seq", "sim", "delay", "train", "scheme", "topology", "seeds", "out_dir",
                        "init_scale", "variance_sweep", "code_version"},
                       "config");
  ExperimentConfig cfg;

  if (root.contains("seq")) {
    const auto& j = root.at("seq");
    detail::require_keys(j, {"vocab_size", "max_len", "prompt_count", "enum_cap"}, "seq");
    detail::read(j, "vocab_size", cfg.seq.vocab_size);
    detail::read(j, "max_len", cfg.seq.max_len);
    detail::read(j, "prompt_count", cfg.seq.prompt_count);
    detail::read(j, "enum_cap", cfg.seq.enum_cap);
    cfg.seq.validate();
  }
  if (root.contains("sim")) {
    const auto& j = root.at("sim");
    detail::require_keys(j,
                         {"sampler_count", "group_size", "max_staleness_steps",
                          "eligibility_window_s", "learner_step_duration_s",
                          "sampler_rollout_duration_s", "max_learner_steps", "max_sim_time_s",
                          "redraw_delay_per_cycle"},
                         "sim");
    detail::read(j, "sampler_count", cfg.sim_config.sampler_count);
    detail::read(j, "group_size", cfg.sim_config.group_size);
    detail::read(j, "max_staleness_steps", cfg.sim_config.max_staleness_steps);
    detail::read(j, "eligibility_window_s", cfg.sim_config.eligibility_window_s);
    detail::read(j, "learner_step_duration_s", cfg.sim_config.learner_step_duration_s);
    detail::read(j, "sampler_rollout_duration_s", cfg.sim_config.sampler_rollout_duration_s);
    detail::read(j, "max_learner_steps", cfg.sim_config.max_learner_steps);
    detail::read(j, "max_sim_time_s", cfg.sim_config.max_sim_time_s);
    detail::read(j, "redraw_delay_per_cycle", cfg.sim_config.redraw_delay_per_cycle);
    cfg.sim_config.validate();
  }
  if (root.contains("delay")) cfg.delay = detail::parse_delay(root.at("delay"));
  if (root.contains("train")) {
    const auto& j = root.at("train");
    detail::require_keys(
        j, {"learning_rate", "kl_coef", "epochs", "steps_per_epoch", "eval_every"}, "train");
    detail::read(j, "learning_rate", cfg.train_config.learning_rate);
    detail::read(j, "kl_coef", cfg.train_config.kl_coef);
    detail::read(j, "epochs", cfg.train_config.epochs);
    detail::read(j, "steps_per_epoch", cfg.train_config.steps_per_epoch);
    detail::read(j, "eval_every", cfg.train_config.eval_every);
    cfg.train_config.validate();
  }
  if (root.contains("scheme")) {
    cfg.train_config.scheme = detail::parse_scheme(root.at("scheme"));
  }
  if (root.contains("topology")) {
    const auto& j = root.at("topology");
    detail::require_keys(j, {"learner_host", "learner_port", "sampler_count", "sync_interval_s"},
                         "topology");
    detail::read(j, "learner_host", cfg.topology.learner.host);
    int port = cfg.topology.learner.port;
    detail::read(j, "learner_port", port);
    if (port < 0 || port > 65535) throw SchemaError("learner_port out of range");
    cfg.topology.learner.port = static_cast<std::uint16_t>(port);
    detail::read(j, "sampler_count", cfg.topology.sampler_count);
    detail::read(j, "sync_interval_s", cfg.topology.sync_interval_s);
    cfg.topology.validate();
  }
  if (root.contains("seeds")) {
    cfg.seeds = root.at("seeds").get<std::vector<std::uint64_t>>();
    if (cfg.seeds.empty()) throw SchemaError("seeds must be non-empty");
  }
  detail::read(root, "out_dir", cfg.out_dir);
  detail::read(root, "init_scale", cfg.init_scale);
  if (root.contains("variance_sweep")) {
    const auto& j = root.at("variance_sweep");
    detail::require_keys(j, {"bernoulli_grid", "gaussian_grid", "gaussian_lo", "gaussian_hi"},
                         "variance_sweep");
    detail::read(j, "bernoulli_grid", cfg.sweep.bernoulli_grid);
    detail::read(j, "gaussian_grid", cfg.sweep.gaussian_grid);
    detail::read(j, "gaussian_lo", cfg.sweep.gaussian_lo);
    detail::read(j, "gaussian_hi", cfg.sweep.gaussian_hi);
  }

  // Environment overrides for serve-* deployments.
  if (const char* host = std::getenv("ASYNCRL_BIND_HOST")) cfg.topology.learner.host = host;
  if (const char* port = std::getenv("ASYNCRL_BIND_PORT")) {
    cfg.topology.learner.port = static_cast<std::uint16_t>(std::atoi(port));
  }
  if (const char* root_dir = std::getenv("ASYNCRL_OUT_ROOT")) {
    if (!cfg.out_dir.empty() && cfg.out_dir.front() != '/') {
      cfg.out_dir = std::string(root_dir) + "/" + cfg.out_dir;
    }
  }
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw SchemaError("cannot open config file " + path);
  json root;
  try {
    root = json::parse(f);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("config parse error: ") + e.what());
  }
  return parse_experiment_config(root);
}

/// Fully resolved config (all defaults materialized) plus the code version
/// stamp; written next to every run's outputs.
inline json resolved_config_json(const ExperimentConfig& cfg) {
  json root;
  root["code_version"] = ASYNCRL_VERSION;
  root["seq"] = {{"vocab_size", cfg.seq.vocab_size},
                 {"max_len", cfg.seq.max_len},
                 {"prompt_count", cfg.seq.prompt_count},
                 {"enum_cap", cfg.seq.enum_cap}};
  root["sim"] = {{"sampler_count", cfg.sim_config.sampler_count},
                 {"group_size", cfg.sim_config.group_size},
                 {"max_staleness_steps", cfg.sim_config.max_staleness_steps},
                 {"eligibility_window_s", cfg.sim_config.eligibility_window_s},
                 {"learner_step_duration_s", cfg.sim_config.learner_step_duration_s},
                 {"sampler_rollout_duration_s", cfg.sim_config.sampler_rollout_duration_s},
                 {"max_learner_steps", cfg.sim_config.max_learner_steps},
                 {"max_sim_time_s", cfg.sim_config.max_sim_time_s},
                 {"redraw_delay_per_cycle", cfg.sim_config.redraw_delay_per_cycle}};
  root["delay"] = detail::delay_to_json(cfg.delay);
  root["train"] = {{"learning_rate", cfg.train_config.learning_rate},
                   {"kl_coef", cfg.train_config.kl_coef},
                   {"epochs", cfg.train_config.epochs},
                   {"steps_per_epoch", cfg.train_config.steps_per_epoch},
                   {"eval_every", cfg.train_config.eval_every}};
  root["scheme"] = detail::scheme_to_json(cfg.train_config.scheme);
  root["topology"] = {{"learner_host", cfg.topology.learner.host},
                      {"learner_port", cfg.topology.learner.port},
                      {"sampler_count", cfg.topology.sampler_count},
                      {"sync_interval_s", cfg.topology.sync_interval_s}};
  root["seeds"] = cfg.seeds;
  root["out_dir"] = cfg.out_dir;
  root["init_scale"] = cfg.init_scale;
  root["variance_sweep"] = {{"bernoulli_grid", cfg.sweep.bernoulli_grid},
                            {"gaussian_grid", cfg.sweep.gaussian_grid},
                            {"gaussian_lo", cfg.sweep.gaussian_lo},
                            {"gaussian_hi", cfg.sweep.gaussian_hi}};
  return root;
}

inline void write_resolved_config(const ExperimentConfig& cfg, const std::string& dir) {
  std::ofstream f(dir + "/resolved_config.json", std::ios::trunc);
  if (!f) throw ResourceError("cannot write resolved config in " + dir);
  f << resolved_config_json(cfg).dump(2) << "\n";
}

}  // namespace asyncrl::io
