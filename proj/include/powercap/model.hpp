#pragma once

// Node power/performance model.
//
// Steady state:   progress = k_l * (1 - exp(-alpha * (a*pcap + b - beta)))
// Dynamics:       progress[i+1] = k_l*dt/(dt+tau) * u[i] + tau/(dt+tau) * progress[i]
//
// where u = linearize_pcap(pcap) = 1 - exp(-alpha * (a*pcap + b - beta)), so the
// fixed point of the dynamics under a constant cap is exactly the steady-state map.

#include <algorithm>
#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "powercap/errors.hpp"

namespace powercap {

struct ModelParams {
  double a = 0.95;         // RAPL slope [1]
  double b = 0.15;         // RAPL offset [W]
  double alpha = 0.041;    // profile curvature [1/W]
  double beta = 24.3;      // power offset [W]
  double k_l = 47.9;       // linear gain [Hz]
  double tau = 1.0 / 3.0;  // time constant [s]
  double pcap_min = 40.0;  // actuator range [W]
  double pcap_max = 120.0;

  /// Parameters identified on the reference Xeon Gold 6126 node.
  static ModelParams reference() { return ModelParams{}; }

  /// Cap at which the modelled progress is exactly zero.
  double knee_pcap() const { return (beta - b) / a; }

  double clamp_pcap(double pcap) const { return std::clamp(pcap, pcap_min, pcap_max); }

  void validate() const {
    auto finite = [](double v) { return std::isfinite(v); };
    if (!(finite(a) && finite(b) && finite(alpha) && finite(beta) && finite(k_l) && finite(tau) &&
          finite(pcap_min) && finite(pcap_max)))
      throw InputError("model parameters must be finite");
    if (a <= 0.0) throw InputError("model: a must be > 0");
    if (alpha <= 0.0) throw InputError("model: alpha must be > 0");
    if (k_l <= 0.0) throw InputError("model: k_l must be > 0");
    if (tau <= 0.0) throw InputError("model: tau must be > 0");
    if (beta <= b) throw InputError("model: beta must exceed b");
    if (pcap_min >= pcap_max) throw InputError("model: pcap_min must be < pcap_max");
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

inline double exponent_term(const ModelParams& p, double pcap) {
  return -p.alpha * (p.a * pcap + p.b - p.beta);
}

/// Steady-state progress [Hz]; zero below the knee.
inline double static_progress(const ModelParams& p, double pcap) {
  const double value = p.k_l * (1.0 - std::exp(exponent_term(p, pcap)));
  return std::max(0.0, value);
}

/// Dimensionless power surrogate used inside the training reward.
inline double measured_power_surrogate(const ModelParams& p, double pcap) {
  return std::exp(exponent_term(p, pcap));
}

/// Power actually drawn by the node under `pcap` [W]. Used for energy accounting.
inline double physical_power(const ModelParams& p, double pcap) { return p.a * pcap + p.b; }

inline double linearize_pcap(const ModelParams& p, double pcap) {
  return 1.0 - std::exp(exponent_term(p, pcap));
}

/// Inverse of linearize_pcap, clamped to the actuator range.
inline double delinearize_pcap(const ModelParams& p, double u_l) {
  if (!(u_l < 1.0)) throw DomainError("delinearize_pcap: u_l must be < 1");
  const double pcap = (p.beta - p.b - std::log1p(-u_l) / p.alpha) / p.a;
  return p.clamp_pcap(pcap);
}

struct LinearCoefficients {
  double input_gain;   // k_l*dt/(dt+tau)
  double state_decay;  // tau/(dt+tau)
};

inline LinearCoefficients linear_coefficients(const ModelParams& p, double dt) {
  if (!(dt > 0.0)) throw InputError("control interval must be > 0");
  return {p.k_l * dt / (dt + p.tau), p.tau / (dt + p.tau)};
}

inline double linear_step(const ModelParams& p, double progress_l, double pcap_l, double dt) {
  const auto c = linear_coefficients(p, dt);
  return c.input_gain * pcap_l + c.state_decay * progress_l;
}

inline void to_json(nlohmann::json& j, const ModelParams& p) {
  j = nlohmann::json{{"a", p.a},         {"b", p.b},
                     {"alpha", p.alpha}, {"beta", p.beta},
                     {"k_l", p.k_l},     {"tau", p.tau},
                     {"pcap_min", p.pcap_min}, {"pcap_max", p.pcap_max}};
}

inline void from_json(const nlohmann::json& j, ModelParams& p) {
  ModelParams out;
  auto get = [&](const char* key, double& dst) {
    if (j.contains(key)) dst = j.at(key).get<double>();
  };
  get("a", out.a);
  get("b", out.b);
  get("alpha", out.alpha);
  get("beta", out.beta);
  get("k_l", out.k_l);
  get("tau", out.tau);
  get("pcap_min", out.pcap_min);
  get("pcap_max", out.pcap_max);
  p = out;
}

}  // namespace powercap
