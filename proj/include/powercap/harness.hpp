#pragma once

// Experiment orchestration: reward-weight sweep with its Pareto frontier, PI vs RL
// comparison, repeatability on one node or on perturbed nodes, and the tables and
// gnuplot data files they produce.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "powercap/config.hpp"
#include "powercap/controllers.hpp"
#include "powercap/csv.hpp"
#include "powercap/errors.hpp"
#include "powercap/model.hpp"
#include "powercap/ppo.hpp"
#include "powercap/random.hpp"
#include "powercap/simenv.hpp"
#include "powercap/sysid.hpp"

namespace powercap::harness {

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be stored by
/// index; the first exception is rethrown after all workers stop.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// --------------------------------------------------------------------------
// Statistics

struct SummaryStats {
  double mean_time_s = 0.0;
  double sd_time_s = 0.0;
  double mean_energy_kj = 0.0;
  double sd_energy_kj = 0.0;
  std::size_t n = 0;
};

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_sd(std::span<const double> xs) {
  if (xs.empty()) throw InputError("mean_sd: no values");
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

inline SummaryStats summarize(std::span<const ExperimentRecord> records) {
  if (records.empty()) throw InputError("summarize: no records");
  std::vector<double> t, e;
  for (const auto& r : records) {
    t.push_back(r.execution_time_s);
    e.push_back(r.energy_kj);
  }
  // sort so the result does not depend on input order at the last bit
  std::sort(t.begin(), t.end());
  std::sort(e.begin(), e.end());
  SummaryStats s;
  std::tie(s.mean_time_s, s.sd_time_s) = mean_sd(t);
  std::tie(s.mean_energy_kj, s.sd_energy_kj) = mean_sd(e);
  s.n = records.size();
  return s;
}

// --------------------------------------------------------------------------
// Pareto frontier over (time, energy), both minimized.

struct Point2 {
  double time = 0.0;
  double energy = 0.0;
};

inline bool dominates(const Point2& a, const Point2& b) {
  return a.time <= b.time && a.energy <= b.energy && (a.time < b.time || a.energy < b.energy);
}

/// Marks points not dominated by any other included point. Excluded points are
/// neither on the frontier nor able to dominate.
inline std::vector<bool> pareto_frontier(std::span<const Point2> pts, const std::vector<bool>& include = {}) {
  const auto in = [&](std::size_t i) { return include.empty() || include[i]; };
  std::vector<bool> front(pts.size(), false);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!in(i)) continue;
    bool dominated = false;
    for (std::size_t j = 0; j < pts.size() && !dominated; ++j)
      dominated = j != i && in(j) && dominates(pts[j], pts[i]);
    front[i] = !dominated;
  }
  return front;
}

/// True if no frontier point beats `p` by more than the relative tolerance on both axes.
inline bool within_frontier_tolerance(const Point2& p, std::span<const Point2> pts,
                                      const std::vector<bool>& frontier, double tol) {
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (frontier[i] && pts[i].time * (1.0 + tol) < p.time && pts[i].energy * (1.0 + tol) < p.energy)
      return false;
  return true;
}

// --------------------------------------------------------------------------
// Reward sweep

struct SweepCell {
  double c1 = 0.0;
  double c2 = 0.0;
};

struct SweepRow {
  std::size_t index = 0;
  double c1 = 0.0;
  double c2 = 0.0;
  std::uint64_t seed = 0;
  double execution_time_s = std::numeric_limits<double>::quiet_NaN();
  double energy_kj = std::numeric_limits<double>::quiet_NaN();
  double mean_pcap_w = std::numeric_limits<double>::quiet_NaN();
  bool truncated = false;
  bool diverged = false;
  bool frontier = false;
};

inline std::vector<double> grid_axis(double lo, double hi, double step) {
  const auto n = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9));
  std::vector<double> out;
  for (std::size_t i = 0; i <= n; ++i) out.push_back(lo + static_cast<double>(i) * step);
  return out;
}

/// Grid cells (c1-major) without (0, 0), followed by the extra cells not already present.
inline std::vector<SweepCell> sweep_grid(const ExperimentSettings& ex) {
  const double step = ex.full_grid ? 0.1 : ex.sweep_step;
  std::vector<SweepCell> cells;
  for (double c1 : grid_axis(ex.sweep_c1_min, ex.sweep_c1_max, step))
    for (double c2 : grid_axis(ex.sweep_c2_min, ex.sweep_c2_max, step))
      if (c1 != 0.0 || c2 != 0.0) cells.push_back({c1, c2});
  for (const auto& [c1, c2] : ex.sweep_extra_cells) {
    const bool present = std::any_of(cells.begin(), cells.end(), [&](const SweepCell& c) {
      return std::abs(c.c1 - c1) < 1e-9 && std::abs(c.c2 - c2) < 1e-9;
    });
    if (!present) cells.push_back({c1, c2});
  }
  return cells;
}

inline ExperimentRecord evaluate_policy(const EnvConfig& env, const ppo::PolicyParams& policy,
                                        std::string label = "rl") {
  RlController rl(policy, std::move(label));
  return run_episode(env, rl);
}

inline std::vector<Point2> points_of(const std::vector<SweepRow>& rows) {
  std::vector<Point2> pts;
  for (const auto& r : rows) pts.push_back({r.execution_time_s, r.energy_kj});
  return pts;
}

/// Diverged and truncated rows are kept in the table but excluded from the frontier.
inline void mark_frontier(std::vector<SweepRow>& rows) {
  const auto pts = points_of(rows);
  std::vector<bool> ok;
  for (const auto& r : rows) ok.push_back(!r.diverged && !r.truncated);
  const auto front = pareto_frontier(pts, ok);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].frontier = front[i];
}

/// Trains one policy per cell and evaluates it noise-free. Row order follows the cell
/// order regardless of the thread count.
inline std::vector<SweepRow> sweep_rewards(const EnvConfig& base, const std::vector<SweepCell>& cells,
                                           const ppo::PpoConfig& ppo_cfg, std::uint64_t seed,
                                           unsigned threads = 1,
                                           const std::function<void(const SweepRow&)>& on_row = {}) {
  base.validate();
  ppo_cfg.validate();
  std::vector<SweepRow> rows(cells.size());
  std::mutex report;
  parallel_for(cells.size(), threads, [&](std::size_t i) {
    SweepRow row;
    row.index = i;
    row.c1 = cells[i].c1;
    row.c2 = cells[i].c2;
    row.seed = derive_seed(seed, i);
    EnvConfig env = base;
    env.weights = {row.c1, row.c2};
    env.noise_sd = 0.0;
    ppo::PpoConfig cfg = ppo_cfg;
    cfg.seed = row.seed;
    const auto trained = ppo::train(env, cfg);
    row.diverged = trained.diverged;
    if (!row.diverged) {
      env.seed = row.seed;
      const auto rec = evaluate_policy(env, trained.policy);
      row.execution_time_s = rec.execution_time_s;
      row.energy_kj = rec.energy_kj;
      row.mean_pcap_w = rec.mean_pcap();
      row.truncated = rec.truncated;
    }
    rows[i] = row;
    if (on_row) {
      std::lock_guard lock(report);
      on_row(row);
    }
  });
  mark_frontier(rows);
  return rows;
}

inline const SweepRow* find_cell(const std::vector<SweepRow>& rows, double c1, double c2) {
  for (const auto& r : rows)
    if (std::abs(r.c1 - c1) < 1e-9 && std::abs(r.c2 - c2) < 1e-9) return &r;
  return nullptr;
}

inline bool row_near_frontier(const std::vector<SweepRow>& rows, const SweepRow& row, double tol) {
  std::vector<bool> front;
  for (const auto& r : rows) front.push_back(r.frontier);
  return within_frontier_tolerance({row.execution_time_s, row.energy_kj}, points_of(rows), front, tol);
}

inline void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  csv::Writer w(path, {"c1", "c2", "execution_time_s", "energy_kj", "mean_pcap_w", "truncated", "diverged",
                       "frontier", "seed"});
  for (const auto& r : rows)
    w.values(r.c1, r.c2, r.execution_time_s, r.energy_kj, r.mean_pcap_w, r.truncated, r.diverged, r.frontier,
             static_cast<unsigned long long>(r.seed));
}

// --------------------------------------------------------------------------
// PI vs RL

struct CompareRow {
  std::string family;  // "pi" or "rl"
  std::string label;
  double epsilon = std::numeric_limits<double>::quiet_NaN();  // pi only
  double execution_time_s = 0.0;
  double energy_kj = 0.0;
  bool truncated = false;
};

struct LabeledPolicy {
  std::string label;
  ppo::PolicyParams policy;
};

/// PI at each epsilon and each RL policy, all on the same episode seed.
inline std::vector<CompareRow> compare_pi_rl(const EnvConfig& env, const std::vector<double>& epsilons,
                                             const std::vector<LabeledPolicy>& policies, double tau_cl,
                                             std::uint64_t seed) {
  if (epsilons.empty() && policies.empty()) throw InputError("compare: nothing to compare");
  EnvConfig cfg = env;
  cfg.seed = seed;
  std::vector<CompareRow> rows;
  const auto gains = pi_gains(env.model, env.dt, tau_cl);
  for (double eps : epsilons) {
    PiController pi(env.model, eps, env.dt, gains);
    const auto rec = run_episode(cfg, pi);
    rows.push_back({"pi", pi.name(), eps, rec.execution_time_s, rec.energy_kj, rec.truncated});
  }
  for (const auto& p : policies) {
    const auto rec = evaluate_policy(cfg, p.policy, p.label);
    rows.push_back({"rl", p.label, std::numeric_limits<double>::quiet_NaN(), rec.execution_time_s,
                    rec.energy_kj, rec.truncated});
  }
  return rows;
}

/// Position of `row` among the PI rows ordered by execution time (0 = fastest).
/// Ties share the better rank.
inline std::size_t pi_speed_rank(const std::vector<CompareRow>& rows, const CompareRow& row) {
  std::size_t rank = 0;
  for (const auto& r : rows)
    if (r.family == "pi" && r.execution_time_s < row.execution_time_s) ++rank;
  return rank;
}

inline void write_compare_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows) {
  csv::Writer w(path, {"family", "label", "epsilon", "execution_time_s", "energy_kj", "truncated"});
  for (const auto& r : rows) {
    const std::string eps = std::isnan(r.epsilon) ? std::string() : csv::format_number(r.epsilon);
    w.values(r.family, r.label, eps, r.execution_time_s, r.energy_kj, r.truncated);
  }
}

// --------------------------------------------------------------------------
// Repeatability

struct RepeatRun {
  std::string controller;
  std::size_t node = 0;
  std::size_t run = 0;
  ExperimentRecord record;
};

struct RepeatResult {
  std::vector<RepeatRun> runs;
  std::vector<std::pair<std::string, SummaryStats>> summary;  // in controller order
  std::vector<ModelParams> nodes;

  const SummaryStats& stats(const std::string& controller) const {
    for (const auto& [name, s] : summary)
      if (name == controller) return s;
    throw InputError("repeat: no controller '" + controller + "'");
  }
};

/// Multiplies alpha, beta and k_l by independent factors in [1 - jitter, 1 + jitter].
inline ModelParams perturb_node(const ModelParams& base, double jitter, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-jitter, jitter);
  ModelParams m = base;
  m.alpha *= 1.0 + u(rng);
  m.beta *= 1.0 + u(rng);
  m.k_l *= 1.0 + u(rng);
  return m;
}

struct NamedController {
  std::string name;
  std::function<std::unique_ptr<Controller>(const ModelParams&)> make;
};

/// Standard set: min, max and the given policy.
inline std::vector<NamedController> repeat_controllers(const ppo::PolicyParams& policy) {
  return {
      {"min", [](const ModelParams& m) { return std::make_unique<ConstantController>(m.pcap_min, "min"); }},
      {"max", [](const ModelParams& m) { return std::make_unique<ConstantController>(m.pcap_max, "max"); }},
      {"rl", [policy](const ModelParams&) { return std::make_unique<RlController>(policy); }},
  };
}

/// Same-node mode when `nodes` == 1 and jitter is unused; otherwise each node is a
/// perturbed model. Every controller sees the same episode seeds.
inline RepeatResult repeatability(const EnvConfig& base, const std::vector<NamedController>& controllers,
                                  std::size_t nodes, std::size_t runs_per_node, double noise_sd,
                                  double jitter, std::uint64_t seed) {
  if (runs_per_node * nodes < 2) throw InputError("repeat: need at least two runs per controller");
  RepeatResult out;
  for (std::size_t k = 0; k < nodes; ++k)
    out.nodes.push_back(nodes == 1 ? base.model : perturb_node(base.model, jitter, derive_seed(derive_seed(seed, "node"), k)));
  for (const auto& c : controllers) {
    std::vector<ExperimentRecord> recs;
    for (std::size_t k = 0; k < nodes; ++k) {
      EnvConfig env = base;
      env.model = out.nodes[k];
      env.noise_sd = noise_sd;
      auto controller = c.make(env.model);
      for (std::size_t r = 0; r < runs_per_node; ++r) {
        env.seed = derive_seed(derive_seed(seed, k), r);
        auto rec = run_episode(env, *controller, c.name);
        recs.push_back(rec);
        out.runs.push_back({c.name, k, r, std::move(rec)});
      }
    }
    out.summary.emplace_back(c.name, summarize(recs));
  }
  return out;
}

inline void write_repeat_runs_csv(const std::filesystem::path& path, const RepeatResult& res) {
  csv::Writer w(path, {"controller", "node", "run", "seed", "execution_time_s", "energy_kj", "mean_pcap_w",
                       "truncated"});
  for (const auto& r : res.runs)
    w.values(r.controller, static_cast<unsigned long long>(r.node), static_cast<unsigned long long>(r.run),
             static_cast<unsigned long long>(r.record.seed), r.record.execution_time_s, r.record.energy_kj,
             r.record.mean_pcap(), r.record.truncated);
}

inline void write_repeat_summary_csv(const std::filesystem::path& path, const RepeatResult& res) {
  csv::Writer w(path, {"controller", "mean_time_s", "sd_time_s", "mean_energy_kj", "sd_energy_kj", "n"});
  for (const auto& [name, s] : res.summary)
    w.values(name, s.mean_time_s, s.sd_time_s, s.mean_energy_kj, s.sd_energy_kj, static_cast<unsigned long long>(s.n));
}

inline void write_nodes_csv(const std::filesystem::path& path, const std::vector<ModelParams>& nodes) {
  csv::Writer w(path, {"node", "alpha", "beta", "k_l"});
  for (std::size_t k = 0; k < nodes.size(); ++k)
    w.values(static_cast<unsigned long long>(k), nodes[k].alpha, nodes[k].beta, nodes[k].k_l);
}

// --------------------------------------------------------------------------
// gnuplot data files: whitespace columns, '#' comments, two blank lines between
// data blocks (addressable with `index`).

class DatWriter {
 public:
  DatWriter(const std::filesystem::path& path, const std::string& title) : out_(path) {
    if (!out_) throw FormatError("cannot write " + path.string());
    out_ << "# " << title << '\n';
  }

  void block(const std::string& name, const std::vector<std::string>& columns) {
    if (blocks_++ > 0) out_ << "\n\n";
    out_ << "# " << name << '\n' << "#";
    for (const auto& c : columns) out_ << ' ' << c;
    out_ << '\n';
  }

  template <class... Ts>
  void row(const Ts&... xs) {
    bool first = true;
    ((out_ << (first ? "" : " ") << cell(xs), first = false), ...);
    out_ << '\n';
  }

 private:
  static std::string cell(double v) { return csv::format_number(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(std::size_t v) { return std::to_string(v); }
  static std::string cell(bool v) { return v ? "1" : "0"; }
  static std::string cell(const std::string& v) { return "\"" + v + "\""; }

  std::ofstream out_;
  int blocks_ = 0;
};

/// Step-response pairs next to the fitted curve, in both nonlinear and linearized form.
inline void write_static_characterization_dat(const std::filesystem::path& path,
                                              const std::vector<StepResponsePair>& pairs,
                                              const ModelParams& fitted) {
  DatWriter d(path, "static characterization");
  d.block("measured", {"pcap_w", "progress_hz", "linearized_pcap"});
  for (const auto& p : pairs) d.row(p.pcap, p.steady_progress, linearize_pcap(fitted, p.pcap));
  d.block("fit", {"pcap_w", "progress_hz", "linearized_pcap"});
  for (int i = 0; i <= 160; ++i) {
    const double pcap = fitted.pcap_min + (fitted.pcap_max - fitted.pcap_min) * i / 160.0;
    d.row(pcap, static_progress(fitted, pcap), linearize_pcap(fitted, pcap));
  }
}

inline void write_pareto_dat(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
  DatWriter d(path, "reward sweep: energy vs execution time");
  d.block("all", {"energy_kj", "execution_time_s", "c1", "c2"});
  for (const auto& r : rows)
    if (!r.diverged) d.row(r.energy_kj, r.execution_time_s, r.c1, r.c2);
  d.block("frontier", {"energy_kj", "execution_time_s", "c1", "c2"});
  std::vector<SweepRow> front;
  for (const auto& r : rows)
    if (r.frontier) front.push_back(r);
  std::sort(front.begin(), front.end(),
            [](const SweepRow& a, const SweepRow& b) { return a.energy_kj < b.energy_kj; });
  for (const auto& r : front) d.row(r.energy_kj, r.execution_time_s, r.c1, r.c2);
}

inline void write_compare_dat(const std::filesystem::path& path, const std::vector<CompareRow>& rows) {
  DatWriter d(path, "PI setpoints vs RL policies");
  d.block("pi", {"energy_kj", "execution_time_s", "one_minus_epsilon"});
  for (const auto& r : rows)
    if (r.family == "pi") d.row(r.energy_kj, r.execution_time_s, 1.0 - r.epsilon);
  d.block("rl", {"energy_kj", "execution_time_s", "label"});
  for (const auto& r : rows)
    if (r.family == "rl") d.row(r.energy_kj, r.execution_time_s, r.label);
}

inline void write_repeat_dat(const std::filesystem::path& path, const RepeatResult& res, const std::string& title) {
  DatWriter d(path, title);
  for (const auto& [name, s] : res.summary) {
    d.block(name, {"energy_kj", "execution_time_s", "node", "run"});
    for (const auto& r : res.runs)
      if (r.controller == name) d.row(r.record.energy_kj, r.record.execution_time_s, r.node, r.run);
  }
}

/// Per-step power of the first run of each controller.
inline void write_power_traces_dat(const std::filesystem::path& path, const RepeatResult& res) {
  DatWriter d(path, "instantaneous power per control step");
  for (const auto& [name, s] : res.summary) {
    const auto it = std::find_if(res.runs.begin(), res.runs.end(),
                                 [&](const RepeatRun& r) { return r.controller == name; });
    if (it == res.runs.end()) continue;
    d.block(name, {"step", "pcap_w", "power_w", "progress_hz"});
    for (std::size_t k = 0; k < it->record.trace.size(); ++k) {
      const auto& t = it->record.trace[k];
      d.row(k + 1, t.pcap_w, t.power_w, t.progress_hz);
    }
  }
}

inline nlohmann::json stats_json(const SummaryStats& s) {
  return {{"mean_time_s", s.mean_time_s},
          {"sd_time_s", s.sd_time_s},
          {"mean_energy_kj", s.mean_energy_kj},
          {"sd_energy_kj", s.sd_energy_kj},
          {"n", s.n}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace powercap::harness
