#pragma once

// PCAP controllers sharing the Controller interface: trained policy, PI on the
// linearized input, and constant caps.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "powercap/errors.hpp"
#include "powercap/model.hpp"
#include "powercap/ppo.hpp"
#include "powercap/simenv.hpp"

namespace powercap {

enum class ControllerKind { rl, pi, const_min, const_max, constant };

inline std::string to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::rl: return "rl";
    case ControllerKind::pi: return "pi";
    case ControllerKind::const_min: return "min";
    case ControllerKind::const_max: return "max";
    case ControllerKind::constant: return "const";
  }
  return "?";
}

inline ControllerKind parse_controller_kind(const std::string& s) {
  if (s == "rl") return ControllerKind::rl;
  if (s == "pi") return ControllerKind::pi;
  if (s == "min" || s == "const_min") return ControllerKind::const_min;
  if (s == "max" || s == "const_max") return ControllerKind::const_max;
  if (s == "const") return ControllerKind::constant;
  throw InputError("unknown controller kind '" + s + "'");
}

struct ControllerSpec {
  ControllerKind kind = ControllerKind::const_max;
  std::filesystem::path policy_path;  // rl
  double epsilon = 0.1;               // pi: tolerated performance loss
  double tau_cl = 5.0;                // pi: desired closed-loop time constant [s]
  std::optional<double> kp, ki;       // pi: explicit gains override the synthesis
  double const_pcap_w = 80.0;         // const

  void validate(const ModelParams& model) const {
    if (kind == ControllerKind::pi) {
      if (!(epsilon >= 0.0 && epsilon <= 0.6)) throw InputError("pi: epsilon must be in [0, 0.6]");
      if (!(tau_cl > 0.0)) throw InputError("pi: tau_cl must be > 0");
    }
    if (kind == ControllerKind::constant &&
        !(const_pcap_w >= model.pcap_min && const_pcap_w <= model.pcap_max))
      throw InputError("const: pcap outside actuator range");
    if (kind == ControllerKind::rl && policy_path.empty()) throw InputError("rl: policy_path required");
  }
};

class ConstantController final : public Controller {
 public:
  ConstantController(double pcap, std::string label) : pcap_(pcap), label_(std::move(label)) {}
  double next_action(const ProgressSample&) override { return pcap_; }
  std::string name() const override { return label_; }

 private:
  double pcap_;
  std::string label_;
};

/// Deterministic trained policy; holds the previous action on empty windows.
class RlController final : public Controller {
 public:
  explicit RlController(ppo::PolicyParams policy, std::string label = "rl")
      : policy_(std::move(policy)), label_(std::move(label)) {}

  void reset() override { last_.reset(); }

  double next_action(const ProgressSample& obs) override {
    if (obs.empty && last_) return *last_;
    last_ = ppo::act_deterministic(policy_, obs.empty ? 0.0 : obs.value);
    return *last_;
  }

  std::string name() const override { return label_; }
  const ppo::PolicyParams& policy() const { return policy_; }

 private:
  ppo::PolicyParams policy_;
  std::string label_;
  std::optional<double> last_;
};

/// Progress the PI controller regulates to: (1 - epsilon) * k_l.
inline double pi_setpoint(const ModelParams& model, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw InputError("pi_setpoint: epsilon must be in [0, 1)");
  return (1.0 - epsilon) * model.k_l;
}

struct PiGains {
  double kp = 0.0;
  double ki = 0.0;
};

/// Gains for the first-order linearized plant: ki = (dt + tau) / (k_l * tau_cl * dt) and
/// kp = tau * ki, which cancels the plant pole with the controller zero.
inline PiGains pi_gains(const ModelParams& model, double dt, double tau_cl) {
  if (!(dt > 0.0 && tau_cl > 0.0)) throw InputError("pi_gains: dt and tau_cl must be > 0");
  PiGains g;
  g.ki = (dt + model.tau) / (model.k_l * tau_cl * dt);
  g.kp = model.tau * g.ki;
  return g;
}

struct PiState {
  double u_l = 0.0;         // linearized input (integral accumulator)
  double prev_error = 0.0;  // [Hz]
};

struct PiLimits {
  double u_min = 0.0;
  double u_max = 0.0;

  static PiLimits for_model(const ModelParams& m) {
    return {linearize_pcap(m, m.pcap_min), linearize_pcap(m, m.pcap_max)};
  }
};

/// Velocity-form PI step in linearized-input space, clamped to the actuator range.
inline double pi_step(const ModelParams& model, PiState& state, double setpoint, double obs,
                      const PiGains& gains, double dt, const PiLimits& limits) {
  if (!(dt > 0.0)) throw InputError("pi_step: dt must be > 0");
  const double e = setpoint - obs;
  state.u_l = std::clamp(state.u_l + gains.kp * (e - state.prev_error) + gains.ki * dt * e, limits.u_min,
                         limits.u_max);
  state.prev_error = e;
  return delinearize_pcap(model, state.u_l);
}

class PiController final : public Controller {
 public:
  PiController(ModelParams model, double epsilon, double dt, PiGains gains)
      : model_(model),
        setpoint_(pi_setpoint(model, epsilon)),
        epsilon_(epsilon),
        dt_(dt),
        gains_(gains),
        limits_(PiLimits::for_model(model)) {
    reset();
  }

  void reset() override {
    state_ = PiState{limits_.u_min, 0.0};
    last_.reset();
  }

  double next_action(const ProgressSample& obs) override {
    if (obs.empty && last_) return *last_;
    last_ = pi_step(model_, state_, setpoint_, obs.value, gains_, dt_, limits_);
    return *last_;
  }

  std::string name() const override {
    char buf[32];
    std::snprintf(buf, sizeof buf, "pi_eps%.2f", epsilon_);
    return buf;
  }

  double setpoint() const { return setpoint_; }
  const PiState& state() const { return state_; }

 private:
  ModelParams model_;
  double setpoint_;
  double epsilon_;
  double dt_;
  PiGains gains_;
  PiLimits limits_;
  PiState state_;
  std::optional<double> last_;
};

/// Builds a controller; rl policies are loaded (and validated) here, never mid-run.
inline std::unique_ptr<Controller> make_controller(const ControllerSpec& spec, const ModelParams& model,
                                                   double dt) {
  spec.validate(model);
  switch (spec.kind) {
    case ControllerKind::const_min:
      return std::make_unique<ConstantController>(model.pcap_min, "min");
    case ControllerKind::const_max:
      return std::make_unique<ConstantController>(model.pcap_max, "max");
    case ControllerKind::constant:
      return std::make_unique<ConstantController>(spec.const_pcap_w, "const");
    case ControllerKind::pi: {
      PiGains g = pi_gains(model, dt, spec.tau_cl);
      if (spec.kp) g.kp = *spec.kp;
      if (spec.ki) g.ki = *spec.ki;
      return std::make_unique<PiController>(model, spec.epsilon, dt, g);
    }
    case ControllerKind::rl: {
      auto policy = ppo::load_policy(spec.policy_path);
      if (policy.pcap_min != model.pcap_min || policy.pcap_max != model.pcap_max)
        throw FormatError("rl: policy actuator range does not match the model");
      return std::make_unique<RlController>(std::move(policy));
    }
  }
  throw InputError("unhandled controller kind");
}

}  // namespace powercap
