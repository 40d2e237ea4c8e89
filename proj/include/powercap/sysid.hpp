#pragma once

// Static characterization of a node: step-PCAP experiments on the simulated plant and
// a nonlinear least-squares fit of (alpha, beta, k_l) with a, b held at their
// RAPL-calibration values.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "powercap/csv.hpp"
#include "powercap/errors.hpp"
#include "powercap/model.hpp"
#include "powercap/random.hpp"

namespace powercap {

struct StepResponsePair {
  double pcap = 0.0;
  double steady_progress = 0.0;

  friend bool operator==(const StepResponsePair&, const StepResponsePair&) = default;
};

struct FitResult {
  ModelParams params;
  double residual_norm = 0.0;  // sqrt(sum r^2) [Hz]
  double gradient_norm = 0.0;  // inf-norm of J^T r at the returned point
  int iterations = 0;
  bool converged = false;
  std::vector<double> cost_history;  // 0.5*sum r^2 after each accepted step
};

struct LmOptions {
  int max_iterations = 200;
  double gradient_tolerance = 1e-10;
  // Accepted when no damping yields descent: central differences bound the attainable
  // gradient accuracy once residuals are nonzero.
  double stall_gradient_tolerance = 1e-5;
  double relative_fd_step = 1e-6;
  double initial_damping = 1e-3;
};

/// Damped Gauss-Newton (Levenberg-Marquardt with Marquardt diagonal scaling) over a
/// fixed number of parameters, central-difference Jacobian.
///
/// `Residuals` is callable as `bool(const std::array<double, N>&, std::vector<double>&)`
/// and returns false when the point is infeasible.
template <std::size_t N, typename Residuals>
class LevenbergMarquardt {
 public:
  using Vec = std::array<double, N>;
  using Mat = std::array<std::array<double, N>, N>;

  struct Result {
    Vec theta{};
    double cost = std::numeric_limits<double>::infinity();
    double gradient_norm = std::numeric_limits<double>::infinity();
    int iterations = 0;
    bool converged = false;
    std::vector<double> cost_history;
  };

  LevenbergMarquardt(Residuals residuals, LmOptions options)
      : residuals_(std::move(residuals)), options_(options) {}

  Result solve(Vec theta) const {
    Result res;
    std::vector<double> r;
    if (!evaluate(theta, r, res.cost)) return res;
    res.theta = theta;
    double lambda = options_.initial_damping;
    std::vector<std::array<double, N>> jac;
    Vec g{};
    for (res.iterations = 0; res.iterations < options_.max_iterations; ++res.iterations) {
      if (!jacobian(theta, r.size(), jac)) break;
      Mat jtj{};
      g.fill(0.0);
      for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t p = 0; p < N; ++p) {
          g[p] += jac[i][p] * r[i];
          for (std::size_t q = 0; q < N; ++q) jtj[p][q] += jac[i][p] * jac[i][q];
        }
      res.gradient_norm = inf_norm(g);
      if (res.gradient_norm <= options_.gradient_tolerance) {
        res.converged = true;
        return res;
      }
      bool accepted = false;
      while (lambda < 1e20) {
        Mat damped = jtj;
        for (std::size_t p = 0; p < N; ++p) damped[p][p] += lambda * std::max(jtj[p][p], 1e-300);
        Vec step{};
        Vec rhs{};
        for (std::size_t p = 0; p < N; ++p) rhs[p] = -g[p];
        if (solve_linear(damped, rhs, step)) {
          Vec trial = theta;
          for (std::size_t p = 0; p < N; ++p) trial[p] += step[p];
          std::vector<double> r_trial;
          double cost_trial = 0.0;
          if (evaluate(trial, r_trial, cost_trial) && cost_trial < res.cost) {
            theta = trial;
            r = std::move(r_trial);
            res.cost = cost_trial;
            res.theta = theta;
            res.cost_history.push_back(cost_trial);
            lambda = std::max(lambda / 3.0, 1e-15);
            accepted = true;
            break;
          }
        }
        lambda *= 4.0;
      }
      if (!accepted) {
        // no descent possible at working precision
        res.converged = res.gradient_norm <= options_.stall_gradient_tolerance;
        return res;
      }
    }
    if (jacobian(theta, r.size(), jac)) {
      g.fill(0.0);
      for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t p = 0; p < N; ++p) g[p] += jac[i][p] * r[i];
      res.gradient_norm = inf_norm(g);
      res.converged = res.gradient_norm <= options_.gradient_tolerance;
    }
    return res;
  }

 private:
  static double inf_norm(const Vec& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
  }

  bool evaluate(const Vec& theta, std::vector<double>& r, double& cost) const {
    if (!residuals_(theta, r)) return false;
    cost = 0.0;
    for (double v : r) {
      if (!std::isfinite(v)) return false;
      cost += v * v;
    }
    cost *= 0.5;
    return true;
  }

  bool jacobian(const Vec& theta, std::size_t m, std::vector<std::array<double, N>>& jac) const {
    jac.assign(m, {});
    std::vector<double> plus, minus;
    for (std::size_t p = 0; p < N; ++p) {
      const double h = options_.relative_fd_step * std::max(1.0, std::abs(theta[p]));
      Vec tp = theta, tm = theta;
      tp[p] += h;
      tm[p] -= h;
      if (!residuals_(tp, plus) || !residuals_(tm, minus)) return false;
      for (std::size_t i = 0; i < m; ++i) jac[i][p] = (plus[i] - minus[i]) / (2.0 * h);
    }
    return true;
  }

  // Gaussian elimination with partial pivoting.
  static bool solve_linear(Mat a, Vec b, Vec& x) {
    for (std::size_t col = 0; col < N; ++col) {
      std::size_t piv = col;
      for (std::size_t row = col + 1; row < N; ++row)
        if (std::abs(a[row][col]) > std::abs(a[piv][col])) piv = row;
      if (!(std::abs(a[piv][col]) > 0.0)) return false;
      std::swap(a[piv], a[col]);
      std::swap(b[piv], b[col]);
      for (std::size_t row = col + 1; row < N; ++row) {
        const double f = a[row][col] / a[col][col];
        for (std::size_t k = col; k < N; ++k) a[row][k] -= f * a[col][k];
        b[row] -= f * b[col];
      }
    }
    for (std::size_t i = N; i-- > 0;) {
      double s = b[i];
      for (std::size_t k = i + 1; k < N; ++k) s -= a[i][k] * x[k];
      x[i] = s / a[i][i];
    }
    for (double v : x)
      if (!std::isfinite(v)) return false;
    return true;
  }

  Residuals residuals_;
  LmOptions options_;
};

/// Minimum number of settle steps for the dynamics at control interval dt.
inline int min_settle_steps(const ModelParams& model, double dt) {
  return static_cast<int>(std::ceil(10.0 * model.tau / dt - 1e-12));
}

/// Applies each level as a step input to the linear plant (levels in sequence, plant
/// state carried over), averages the last quarter of the settle window and records
/// the pair. Deterministic given `seed`.
inline std::vector<StepResponsePair> run_step_experiment(const ModelParams& true_model,
                                                         std::span<const double> pcap_levels,
                                                         int settle_steps, double noise_sd,
                                                         std::uint64_t seed, double dt = 1.0) {
  true_model.validate();
  if (pcap_levels.empty()) throw InputError("run_step_experiment: no PCAP levels");
  if (!(dt > 0.0)) throw InputError("run_step_experiment: dt must be > 0");
  if (settle_steps < min_settle_steps(true_model, dt))
    throw InputError("run_step_experiment: settle_steps below 10*tau/dt");
  if (noise_sd < 0.0) throw InputError("run_step_experiment: noise_sd must be >= 0");
  for (double p : pcap_levels)
    if (p < true_model.pcap_min || p > true_model.pcap_max)
      throw InputError("run_step_experiment: PCAP level outside actuator range");

  Rng rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<StepResponsePair> out;
  out.reserve(pcap_levels.size());
  double progress = 0.0;
  const int tail = std::max(1, settle_steps / 4);
  for (double level : pcap_levels) {
    const double u = linearize_pcap(true_model, level);
    double sum = 0.0;
    for (int k = 0; k < settle_steps; ++k) {
      progress = linear_step(true_model, progress, u, dt);
      if (k >= settle_steps - tail) {
        double sample = progress;
        if (noise_sd > 0.0) sample += noise_sd * noise(rng);
        sum += std::max(0.0, sample);
      }
    }
    out.push_back({level, sum / tail});
  }
  return out;
}

/// `count` evenly spaced levels covering [lo, hi].
inline std::vector<double> step_levels(double lo, double hi, int count) {
  if (count < 2) throw InputError("step_levels: need at least two levels");
  std::vector<double> levels(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    levels[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (count - 1);
  return levels;
}

/// Fits (alpha, beta, k_l) of the steady-state map with a, b fixed. Multi-start over a
/// small grid plus the caller's guess; the lowest-residual solution wins (ties: lower
/// alpha).
inline FitResult fit_static_model(std::span<const StepResponsePair> pairs_in, double known_a,
                                  double known_b, const ModelParams& init,
                                  const LmOptions& options = {}) {
  if (pairs_in.size() < 4) throw InputError("fit_static_model: need at least 4 pairs");
  if (!(known_a > 0.0)) throw InputError("fit_static_model: a must be > 0");
  std::vector<StepResponsePair> pairs(pairs_in.begin(), pairs_in.end());
  std::sort(pairs.begin(), pairs.end(), [](const auto& l, const auto& r) {
    return l.pcap != r.pcap ? l.pcap < r.pcap : l.steady_progress < r.steady_progress;
  });
  const double pmin = pairs.front().pcap;
  const double pmax = pairs.back().pcap;
  if (pmin == pmax) throw InputError("fit_static_model: all PCAP values are equal");
  if (!(pmin > 0.0) || pmax < 2.0 * pmin)
    throw InputError("fit_static_model: PCAP values must span at least a 2:1 ratio");

  auto residuals = [&](const std::array<double, 3>& th, std::vector<double>& r) {
    const double alpha = th[0], beta = th[1], k_l = th[2];
    if (!(alpha > 0.0)) return false;
    r.resize(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const double y = known_a * pairs[i].pcap + known_b;
      r[i] = pairs[i].steady_progress - std::max(0.0, k_l * (1.0 - std::exp(-alpha * (y - beta))));
    }
    return true;
  };
  LevenbergMarquardt<3, decltype(residuals)> solver(residuals, options);

  double max_progress = 0.0;
  for (const auto& p : pairs) max_progress = std::max(max_progress, p.steady_progress);
  const double y_min = known_a * pmin + known_b;

  std::vector<std::array<double, 3>> starts{{init.alpha, init.beta, init.k_l}};
  for (double alpha0 : {0.01, 0.05, 0.1})
    for (double beta0 : {y_min - 10.0, y_min - 25.0, y_min - 50.0})
      starts.push_back({alpha0, beta0, std::max(max_progress, 1e-3)});

  FitResult best;
  best.residual_norm = std::numeric_limits<double>::infinity();
  bool have = false;
  for (const auto& s : starts) {
    auto res = solver.solve(s);
    if (!std::isfinite(res.cost)) continue;
    const double norm = std::sqrt(2.0 * res.cost);
    const bool better = !have || norm < best.residual_norm ||
                        (norm == best.residual_norm && res.theta[0] < best.params.alpha);
    if (!better) continue;
    have = true;
    best.params = init;
    best.params.a = known_a;
    best.params.b = known_b;
    best.params.alpha = res.theta[0];
    best.params.beta = res.theta[1];
    best.params.k_l = res.theta[2];
    best.residual_norm = norm;
    best.gradient_norm = res.gradient_norm;
    best.iterations = res.iterations;
    best.converged = res.converged;
    best.cost_history = std::move(res.cost_history);
  }
  if (!have) best.converged = false;
  return best;
}

/// Attaches the time constant to fitted statics, producing the full plant model.
inline ModelParams derive_linear_model(const FitResult& fit, double tau = 1.0 / 3.0,
                                       double dt = 1.0) {
  if (!fit.converged) throw InputError("derive_linear_model: fit did not converge");
  if (!(tau > 0.0)) throw InputError("derive_linear_model: tau must be > 0");
  if (!(dt > 0.0)) throw InputError("derive_linear_model: dt must be > 0");
  ModelParams out = fit.params;
  out.tau = tau;
  out.validate();
  return out;
}

inline std::vector<StepResponsePair> read_step_csv(const std::filesystem::path& path) {
  const auto table = csv::read(path);
  const auto pc = table.column("pcap_w");
  const auto pr = table.column("progress_hz");
  std::vector<StepResponsePair> out;
  for (const auto& row : table.rows) out.push_back({csv::to_double(row[pc]), csv::to_double(row[pr])});
  return out;
}

inline void write_step_csv(const std::filesystem::path& path,
                           std::span<const StepResponsePair> pairs) {
  csv::Writer w(path, {"pcap_w", "progress_hz"});
  for (const auto& p : pairs) w.values(p.pcap, p.steady_progress);
}

}  // namespace powercap
