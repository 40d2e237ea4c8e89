// powercap: command-line entry point for fitting, training, evaluation, the
// experiment suites, and the daemon/workload pair.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "powercap/config.hpp"
#include "powercap/controllers.hpp"
#include "powercap/harness.hpp"
#include "powercap/nrmd.hpp"
#include "powercap/ppo.hpp"
#include "powercap/simenv.hpp"
#include "powercap/sysid.hpp"

namespace fs = std::filesystem;
using namespace powercap;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
};

RunConfig load(const Globals& g) {
  RunConfig cfg = g.config.empty() ? RunConfig{} : load_config(g.config);
  if (g.seed) cfg.experiment.seed = *g.seed;
  return cfg;
}

fs::path out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / name;
}

void note(const std::string& s) { std::cerr << s << '\n'; }

ppo::PolicyParams train_policy(const RunConfig& cfg, std::uint64_t root, const Globals& g, bool write_curve) {
  ppo::PpoConfig p = cfg.ppo;
  p.seed = derive_seed(root, "train");
  note("training policy (c1=" + csv::format_number(cfg.env.weights.c1) +
       ", c2=" + csv::format_number(cfg.env.weights.c2) + ", " + std::to_string(p.total_updates) + " updates)");
  auto result = ppo::train(cfg.env, p);
  if (result.diverged) throw std::runtime_error("training diverged");
  if (write_curve) ppo::write_curve_csv(out_path(g, "learning_curve.csv"), result.curve);
  return std::move(result.policy);
}

std::vector<harness::LabeledPolicy> policies_from(const std::vector<std::string>& paths, const RunConfig& cfg,
                                                  std::uint64_t root, const Globals& g) {
  std::vector<harness::LabeledPolicy> out;
  for (const auto& p : paths) out.push_back({fs::path(p).stem().string(), ppo::load_policy(p)});
  if (out.empty()) out.push_back({"rl", train_policy(cfg, root, g, false)});
  return out;
}

int cmd_fit(const Globals& g, const std::string& input, std::optional<double> a, std::optional<double> b,
            const std::string& out) {
  const auto cfg = load(g);
  std::vector<StepResponsePair> pairs;
  if (input.empty()) {
    const auto& ex = cfg.experiment;
    const auto levels = step_levels(cfg.env.model.pcap_min, cfg.env.model.pcap_max, static_cast<int>(ex.step_count));
    pairs = run_step_experiment(cfg.env.model, levels, std::max(ex.settle_steps, min_settle_steps(cfg.env.model, cfg.env.dt)),
                                ex.step_noise_sd, derive_seed(ex.seed, "fit"), cfg.env.dt);
    write_step_csv(out_path(g, "steps.csv"), pairs);
  } else {
    pairs = read_step_csv(input);
  }
  ModelParams init = cfg.env.model;
  const auto fit = fit_static_model(pairs, a.value_or(init.a), b.value_or(init.b), init);
  const auto model = derive_linear_model(fit, init.tau, cfg.env.dt);
  const fs::path model_path = out.empty() ? out_path(g, "model.json") : fs::path(out);
  harness::write_json(model_path, json(model));
  harness::write_static_characterization_dat(out_path(g, "static_characterization.dat"), pairs, model);
  std::printf("alpha=%.6g beta=%.6g k_l=%.6g residual=%.3g iterations=%d\n", model.alpha, model.beta, model.k_l,
              fit.residual_norm, fit.iterations);
  return 0;
}

int cmd_train(const Globals& g, const std::string& out) {
  const auto cfg = load(g);
  const auto policy = train_policy(cfg, cfg.experiment.seed, g, true);
  const fs::path path = out.empty() ? out_path(g, "policy.json") : fs::path(out);
  ppo::save_policy(path, policy);
  EnvConfig env = cfg.env;
  env.seed = derive_seed(cfg.experiment.seed, "run");
  const auto rec = harness::evaluate_policy(env, policy);
  harness::write_json(out_path(g, "train_summary.json"), summary_json(rec));
  std::printf("policy: %s  time=%.6g s  energy=%.6g kJ  mean_pcap=%.6g W\n", path.c_str(), rec.execution_time_s,
              rec.energy_kj, rec.mean_pcap());
  return 0;
}

int cmd_run(const Globals& g, const RunConfig& cfg) {
  cfg.controller.validate(cfg.env.model);
  auto controller = make_controller(cfg.controller, cfg.env.model, cfg.env.dt);
  EnvConfig env = cfg.env;
  env.seed = derive_seed(cfg.experiment.seed, "run");
  const auto rec = run_episode(env, *controller);
  write_trace_csv(out_path(g, "trace.csv"), rec.trace);
  harness::write_json(out_path(g, "summary.json"), summary_json(rec));
  std::printf("%s: time=%.6g s  energy=%.6g kJ  truncated=%d\n", rec.label.c_str(), rec.execution_time_s,
              rec.energy_kj, rec.truncated ? 1 : 0);
  return 0;
}

int cmd_sweep(const Globals& g) {
  const auto cfg = load(g);
  const auto cells = harness::sweep_grid(cfg.experiment);
  note("sweep: " + std::to_string(cells.size()) + " cells");
  std::size_t done = 0;
  const auto rows = harness::sweep_rewards(cfg.env, cells, cfg.experiment.sweep_ppo,
                                           derive_seed(cfg.experiment.seed, "sweep"), cfg.experiment.threads,
                                           [&](const harness::SweepRow&) {
                                             if (++done % 50 == 0) note("  " + std::to_string(done) + " cells done");
                                           });
  harness::write_sweep_csv(out_path(g, "sweep.csv"), rows);
  harness::write_pareto_dat(out_path(g, "pareto.dat"), rows);
  std::size_t frontier = 0, diverged = 0;
  for (const auto& r : rows) {
    frontier += r.frontier;
    diverged += r.diverged;
  }
  json summary = {{"cells", rows.size()}, {"frontier", frontier}, {"diverged", diverged}};
  for (const auto& [c1, c2] : cfg.experiment.sweep_extra_cells)
    if (const auto* r = harness::find_cell(rows, c1, c2))
      summary["cells_of_interest"].push_back({{"c1", c1},
                                              {"c2", c2},
                                              {"execution_time_s", r->execution_time_s},
                                              {"energy_kj", r->energy_kj},
                                              {"near_frontier", harness::row_near_frontier(rows, *r, 0.05)}});
  harness::write_json(out_path(g, "sweep_summary.json"), summary);
  std::printf("sweep: %zu rows, %zu on the frontier, %zu diverged\n", rows.size(), frontier, diverged);
  return 0;
}

int cmd_compare(const Globals& g, const std::vector<std::string>& policy_paths) {
  const auto cfg = load(g);
  const auto policies = policies_from(policy_paths, cfg, cfg.experiment.seed, g);
  const auto rows = harness::compare_pi_rl(cfg.env, cfg.experiment.epsilons, policies, cfg.controller.tau_cl,
                                           derive_seed(cfg.experiment.seed, "compare"));
  harness::write_compare_csv(out_path(g, "compare.csv"), rows);
  harness::write_compare_dat(out_path(g, "pi_vs_rl.dat"), rows);
  for (const auto& r : rows)
    std::printf("%-4s %-12s time=%-8.6g energy=%.6g\n", r.family.c_str(), r.label.c_str(), r.execution_time_s,
                r.energy_kj);
  return 0;
}

int cmd_repeat(const Globals& g, const std::string& policy_path, bool cross_node) {
  const auto cfg = load(g);
  const std::uint64_t root = cfg.experiment.seed;
  const auto policy = policy_path.empty() ? train_policy(cfg, root, g, false) : ppo::load_policy(policy_path);
  const auto& ex = cfg.experiment;
  const auto controllers = harness::repeat_controllers(policy);
  const auto res = cross_node ? harness::repeatability(cfg.env, controllers, ex.nodes, ex.runs_per_node,
                                                       ex.repeat_noise_sd, ex.node_jitter,
                                                       derive_seed(root, "repeat.cross_node"))
                              : harness::repeatability(cfg.env, controllers, 1, ex.repeat_runs, ex.repeat_noise_sd,
                                                       0.0, derive_seed(root, "repeat.same_node"));
  const std::string tag = cross_node ? "cross_node" : "same_node";
  harness::write_repeat_runs_csv(out_path(g, "repeat_" + tag + "_runs.csv"), res);
  harness::write_repeat_summary_csv(out_path(g, "repeat_" + tag + "_summary.csv"), res);
  harness::write_repeat_dat(out_path(g, "repeat_" + tag + ".dat"), res,
                            cross_node ? "perturbed nodes: energy vs execution time" : "one node: energy vs execution time");
  if (cross_node) harness::write_nodes_csv(out_path(g, "nodes.csv"), res.nodes);
  else harness::write_power_traces_dat(out_path(g, "power_traces.dat"), res);
  const auto& mx = res.stats("max");
  const auto& rl = res.stats("rl");
  json summary;
  for (const auto& [name, s] : res.summary) summary["controllers"][name] = harness::stats_json(s);
  summary["rl_energy_reduction_vs_max"] = 1.0 - rl.mean_energy_kj / mx.mean_energy_kj;
  summary["rl_time_overhead_vs_max"] = rl.mean_time_s / mx.mean_time_s - 1.0;
  harness::write_json(out_path(g, "repeat_" + tag + "_summary.json"), summary);
  for (const auto& [name, s] : res.summary)
    std::printf("%-4s time %.6g +- %.3g s  energy %.6g +- %.3g kJ  (n=%zu)\n", name.c_str(), s.mean_time_s,
                s.sd_time_s, s.mean_energy_kj, s.sd_energy_kj, s.n);
  return 0;
}

int cmd_daemon(const Globals& g, const RunConfig& cfg, const std::string& socket, bool wall_clock,
               std::int64_t max_steps, double accept_timeout) {
  cfg.controller.validate(cfg.env.model);
  nrmd::DaemonOptions opts;
  opts.socket = socket;
  opts.model = cfg.env.model;
  opts.weights = cfg.env.weights;
  opts.dt = cfg.env.dt;
  opts.wall_clock = wall_clock;
  opts.max_steps = max_steps;
  opts.seed = derive_seed(cfg.experiment.seed, "run");
  opts.accept_timeout_s = accept_timeout;
  nrmd::DaemonCore core(opts, make_controller(cfg.controller, cfg.env.model, cfg.env.dt));
  note("daemon listening on " + socket);
  const auto rec = nrmd::serve(core);
  write_trace_csv(out_path(g, "daemon_trace.csv"), rec.trace);
  harness::write_json(out_path(g, "daemon_summary.json"), summary_json(rec));
  std::printf("daemon: %zu control steps, energy=%.6g kJ\n", rec.trace.size(), rec.energy_kj);
  return 0;
}

int cmd_workload(const Globals& g, const std::string& socket, bool poisson, bool wall_clock, double timeout) {
  const auto cfg = load(g);
  nrmd::WorkloadOptions opts;
  opts.socket = socket;
  opts.env = cfg.env;
  opts.env.seed = derive_seed(cfg.experiment.seed, "run");
  opts.poisson = poisson;
  opts.wall_clock = wall_clock;
  opts.connect_timeout_s = timeout;
  const auto summary = nrmd::run_workload(opts);
  write_heartbeat_csv(out_path(g, "heartbeats.csv"), summary.heartbeats);
  harness::write_json(out_path(g, "workload_summary.json"), summary.summary_json());
  std::printf("workload: time=%.6g s  heartbeats=%zu  partial=%d\n", summary.record.execution_time_s,
              summary.heartbeats.size(), summary.partial ? 1 : 0);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Power-capping controllers: model fitting, PPO training, experiments, daemon"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "Run configuration (INI, or .json)");
  auto* seed_opt = app.add_option("--seed", seed, "Root seed (overrides [experiment] seed)");
  app.add_option("--out-dir", g.out_dir, "Directory for output files");

  std::string fit_input, fit_out, out, socket = "/tmp/powercap.sock";
  std::optional<double> fit_a, fit_b;
  auto* fit = app.add_subcommand("fit", "Fit the static model to step-response pairs");
  fit->add_option("--input", fit_input, "CSV with pcap_w,progress_hz (default: synthesize from [model])");
  fit->add_option("--a", fit_a, "Known power slope a");
  fit->add_option("--b", fit_b, "Known power offset b");
  fit->add_option("--out", fit_out, "Model document path (default: <out-dir>/model.json)");

  auto* train = app.add_subcommand("train", "Train a PPO policy on the model environment");
  train->add_option("--out", out, "Policy path (default: <out-dir>/policy.json)");

  std::string controller, policy;
  std::optional<double> epsilon;
  auto* run = app.add_subcommand("run", "Run one episode with the configured controller");
  for (auto* sub : {run, app.add_subcommand("daemon", "Serve one workload client over a Unix socket")}) {
    sub->add_option("--controller", controller, "rl | pi | max | min | const");
    sub->add_option("--policy", policy, "Policy file for the rl controller");
    sub->add_option("--epsilon", epsilon, "PI tolerated performance loss");
  }
  auto* daemon = app.get_subcommand("daemon");
  bool wall_clock = false, poisson = false, cross_node = false;
  std::int64_t max_steps = 0;
  double accept_timeout = 0.0, connect_timeout = 5.0;
  daemon->add_option("--socket", socket, "Socket path");
  daemon->add_flag("--wall-clock", wall_clock, "Use the daemon clock instead of client time");
  daemon->add_option("--max-steps", max_steps, "Stop the client after this many control steps");
  daemon->add_option("--accept-timeout", accept_timeout, "Seconds to wait for a client (0: forever)");

  auto* sweep = app.add_subcommand("sweep", "Reward-weight sweep and Pareto frontier");
  std::vector<std::string> policies;
  auto* compare = app.add_subcommand("compare", "PI setpoints against RL policies");
  compare->add_option("--policy", policies, "Policy files (default: train one)");
  auto* repeat = app.add_subcommand("repeat", "Repeatability of min, max and rl");
  repeat->add_option("--policy", policy, "Policy file (default: train one)");
  repeat->add_flag("--cross-node", cross_node, "Perturb the model per node");

  auto* workload = app.add_subcommand("workload", "Synthetic application client");
  workload->add_option("--socket", socket, "Socket path");
  workload->add_flag("--poisson", poisson, "Random arrival times within each interval");
  workload->add_flag("--wall-clock", wall_clock, "Emit heartbeats in real time");
  workload->add_option("--connect-timeout", connect_timeout, "Seconds to retry connecting");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) g.seed = seed;

  try {
    if (*fit) return cmd_fit(g, fit_input, fit_a, fit_b, fit_out);
    if (*train) return cmd_train(g, out);
    if (*sweep) return cmd_sweep(g);
    if (*compare) return cmd_compare(g, policies);
    if (*repeat) return cmd_repeat(g, policy, cross_node);
    if (*workload) return cmd_workload(g, socket, poisson, wall_clock, connect_timeout);
    RunConfig cfg = load(g);
    if (!controller.empty()) cfg.controller.kind = parse_controller_kind(controller);
    if (!policy.empty()) cfg.controller.policy_path = policy;
    if (epsilon) cfg.controller.epsilon = *epsilon;
    if (*run) return cmd_run(g, cfg);
    return cmd_daemon(g, cfg, socket, wall_clock, max_steps, accept_timeout);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const ConnectionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
