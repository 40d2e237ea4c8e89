#pragma once

// Model-based node environment: state is the previous-interval progress, action is
// the PCAP, the workload completes after a fixed number of heartbeats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "powercap/csv.hpp"
#include "powercap/errors.hpp"
#include "powercap/model.hpp"
#include "powercap/progress.hpp"
#include "powercap/random.hpp"

namespace powercap {

struct RewardWeights {
  double c1 = 1.052;  // per-watt penalty
  double c2 = 2.22;   // performance-per-watt weight

  void validate() const {
    if (!(c1 >= 0.0 && c2 >= 0.0)) throw InputError("reward weights must be >= 0");
    if (c1 == 0.0 && c2 == 0.0) throw InputError("reward weights must not both be zero");
  }

  friend bool operator==(const RewardWeights&, const RewardWeights&) = default;
};

/// Training reward: -c1*pcap + c2*progress/surrogate(pcap).
inline double reward(const ModelParams& model, const RewardWeights& w, double pcap,
                     double progress) {
  return -w.c1 * pcap + w.c2 * progress / measured_power_surrogate(model, pcap);
}

struct EnvConfig {
  ModelParams model;
  RewardWeights weights;
  double dt = 1.0;
  std::int64_t total_heartbeats = 10000;
  std::int64_t horizon_cap = 1200;
  double noise_sd = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    weights.validate();
    if (!(dt > 0.0)) throw InputError("env: dt must be > 0");
    if (total_heartbeats < 1) throw InputError("env: total_heartbeats must be >= 1");
    if (horizon_cap < 1) throw InputError("env: horizon_cap must be >= 1");
    if (!(noise_sd >= 0.0)) throw InputError("env: noise_sd must be >= 0");
  }
};

struct EnvState {
  double progress = 0.0;  // observation: progress over the last interval [Hz]
  std::int64_t heartbeats_done = 0;
  double work = 0.0;  // cumulative progress integral [heartbeats], fractional
  std::int64_t steps = 0;
  double elapsed = 0.0;   // [s]
  double energy_j = 0.0;  // physical accounting [J]
  bool done = false;
};

struct StepOutcome {
  EnvState next_state;
  double reward = 0.0;
  double pcap = 0.0;  // applied (range-clamped) cap
  double measured_power_surrogate = 0.0;
  double physical_power_w = 0.0;
  std::int64_t heartbeats = 0;  // completed during this step
};

class Environment {
 public:
  explicit Environment(EnvConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    reset();
  }

  const EnvState& reset() {
    rng_.seed(cfg_.seed);
    noise_ = std::normal_distribution<double>(0.0, 1.0);
    state_ = EnvState{};
    return state_;
  }

  StepOutcome step(double action_pcap) {
    if (state_.done) throw UsageError("Environment::step on a finished episode");
    const auto& m = cfg_.model;
    const double pcap = m.clamp_pcap(action_pcap);
    double next = linear_step(m, state_.progress, linearize_pcap(m, pcap), cfg_.dt);
    if (cfg_.noise_sd > 0.0) next += cfg_.noise_sd * noise_(rng_);
    next = std::max(0.0, next);

    StepOutcome out;
    out.pcap = pcap;
    out.measured_power_surrogate = measured_power_surrogate(m, pcap);
    out.physical_power_w = physical_power(m, pcap);
    out.reward = powercap::reward(m, cfg_.weights, pcap, next);

    // whole heartbeats completed; the fractional remainder carries to the next step
    state_.progress = next;
    state_.work += next * cfg_.dt;
    const auto before = state_.heartbeats_done;
    state_.heartbeats_done =
        std::min(cfg_.total_heartbeats, static_cast<std::int64_t>(std::floor(state_.work)));
    out.heartbeats = state_.heartbeats_done - before;
    state_.steps += 1;
    state_.elapsed = static_cast<double>(state_.steps) * cfg_.dt;
    state_.energy_j += out.physical_power_w * cfg_.dt;
    state_.done = state_.heartbeats_done >= cfg_.total_heartbeats || state_.steps >= cfg_.horizon_cap;
    out.next_state = state_;
    return out;
  }

  const EnvState& state() const { return state_; }
  const EnvConfig& config() const { return cfg_; }
  bool completed() const { return state_.heartbeats_done >= cfg_.total_heartbeats; }

  ProgressSample observation() const { return {state_.elapsed, state_.progress, false}; }

 private:
  EnvConfig cfg_;
  Rng rng_;
  std::normal_distribution<double> noise_;
  EnvState state_;
};

/// Source of PCAP decisions, one per control interval.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual void reset() {}
  virtual double next_action(const ProgressSample& obs) = 0;
  virtual std::string name() const = 0;
};

struct TraceRow {
  double t_s = 0.0;
  double pcap_w = 0.0;
  double progress_hz = 0.0;
  double power_w = 0.0;
  double reward = 0.0;
};

struct ExperimentRecord {
  std::string label;
  std::uint64_t seed = 0;
  RewardWeights weights;
  std::vector<TraceRow> trace;
  double execution_time_s = 0.0;
  double energy_kj = 0.0;
  double episode_reward = 0.0;
  bool truncated = false;

  double mean_pcap() const {
    if (trace.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : trace) s += r.pcap_w;
    return s / static_cast<double>(trace.size());
  }
};

inline ExperimentRecord run_episode(const EnvConfig& cfg, Controller& controller,
                                    std::string label = {}) {
  Environment env(cfg);
  controller.reset();
  ExperimentRecord rec;
  rec.label = label.empty() ? controller.name() : std::move(label);
  rec.seed = cfg.seed;
  rec.weights = cfg.weights;
  while (!env.state().done) {
    const double action = controller.next_action(env.observation());
    const auto out = env.step(action);
    rec.trace.push_back({out.next_state.elapsed, out.pcap, out.next_state.progress,
                         out.physical_power_w, out.reward});
    rec.episode_reward += out.reward;
  }
  rec.execution_time_s = env.state().elapsed;
  rec.energy_kj = env.state().energy_j / 1000.0;
  rec.truncated = !env.completed();
  return rec;
}

inline void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  csv::Writer w(path, {"t_s", "pcap_w", "progress_hz", "power_w", "reward"});
  for (const auto& r : trace) w.values(r.t_s, r.pcap_w, r.progress_hz, r.power_w, r.reward);
}

inline std::vector<TraceRow> read_trace_csv(const std::filesystem::path& path) {
  const auto table = csv::read(path);
  const std::size_t c[] = {table.column("t_s"), table.column("pcap_w"), table.column("progress_hz"),
                           table.column("power_w"), table.column("reward")};
  std::vector<TraceRow> out;
  for (const auto& row : table.rows)
    out.push_back({csv::to_double(row[c[0]]), csv::to_double(row[c[1]]), csv::to_double(row[c[2]]),
                   csv::to_double(row[c[3]]), csv::to_double(row[c[4]])});
  return out;
}

/// Summary document; `power_accounting` names the energy model used.
inline nlohmann::json summary_json(const ExperimentRecord& rec) {
  return {{"label", rec.label},
          {"execution_time_s", rec.execution_time_s},
          {"energy_kj", rec.energy_kj},
          {"truncated", rec.truncated},
          {"seed", rec.seed},
          {"weights", {{"c1", rec.weights.c1}, {"c2", rec.weights.c2}}},
          {"power_accounting", "physical"},
          {"episode_reward", rec.episode_reward}};
}

}  // namespace powercap
