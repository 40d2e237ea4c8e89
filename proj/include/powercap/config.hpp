#pragma once

// Run configuration: flat key-value sections [model] [env] [ppo] [controller]
// [experiment], read from an INI file or the equivalent JSON object of objects.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "powercap/controllers.hpp"
#include "powercap/errors.hpp"
#include "powercap/model.hpp"
#include "powercap/ppo.hpp"
#include "powercap/simenv.hpp"

namespace powercap {

struct ExperimentSettings {
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0: hardware concurrency

  // static characterization
  std::size_t step_count = 17;
  double step_noise_sd = 0.0;
  int settle_steps = 20;

  // reward sweep
  double sweep_c1_min = 0.0, sweep_c1_max = 10.0;
  double sweep_c2_min = 0.0, sweep_c2_max = 10.0;
  double sweep_step = 0.5;
  bool full_grid = false;  // step 0.1
  std::vector<std::pair<double, double>> sweep_extra_cells{{0.0, 4.44}, {1.052, 2.22}};
  ppo::PpoConfig sweep_ppo = default_sweep_ppo();

  // PI comparison
  std::vector<double> epsilons{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};

  // repeatability
  std::size_t repeat_runs = 10;
  double repeat_noise_sd = 0.5;
  std::size_t nodes = 7;
  std::size_t runs_per_node = 3;
  double node_jitter = 0.05;

  static ppo::PpoConfig default_sweep_ppo() {
    ppo::PpoConfig c;
    c.hidden_width = 16;
    c.rollout_steps = 1024;
    c.minibatch_size = 128;
    c.epochs = 5;
    c.total_updates = 30;
    c.learning_rate = 3e-3;
    return c;
  }

  void validate() const {
    if (step_count < 4) throw InputError("experiment: step_count must be >= 4");
    if (!(step_noise_sd >= 0.0)) throw InputError("experiment: step_noise_sd must be >= 0");
    if (!(sweep_step > 0.0)) throw InputError("experiment: sweep_step must be > 0");
    if (!(sweep_c1_min >= 0.0 && sweep_c1_min <= sweep_c1_max && sweep_c2_min >= 0.0 &&
          sweep_c2_min <= sweep_c2_max))
      throw InputError("experiment: invalid sweep range");
    if (epsilons.empty()) throw InputError("experiment: epsilons must not be empty");
    if (repeat_runs < 2 || runs_per_node < 2) throw InputError("experiment: repeat counts must be >= 2");
    if (nodes < 1) throw InputError("experiment: nodes must be >= 1");
    if (!(node_jitter >= 0.0 && node_jitter < 1.0)) throw InputError("experiment: node_jitter must be in [0, 1)");
    if (!(repeat_noise_sd >= 0.0)) throw InputError("experiment: repeat_noise_sd must be >= 0");
    sweep_ppo.validate();
  }
};

struct RunConfig {
  EnvConfig env;  // carries the model and reward weights
  ppo::PpoConfig ppo;
  ControllerSpec controller;
  ExperimentSettings experiment;

  void validate() const {
    env.validate();
    ppo.validate();
    controller.validate(env.model);
    experiment.validate();
  }
};

namespace config_detail {

inline nlohmann::json infer_scalar(const std::string& raw) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  if (raw.empty()) return raw;
  std::size_t pos = 0;
  try {
    const double v = std::stod(raw, &pos);
    if (pos == raw.size()) {
      if (raw.find_first_of(".eE") == std::string::npos && raw.find_first_not_of("0123456789-+") == std::string::npos)
        return std::stoll(raw);
      return v;
    }
  } catch (const std::exception&) {
  }
  return raw;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

/// Typed reads from one section; keys never read are reported as unknown.
class Section {
 public:
  Section(const nlohmann::json& doc, std::string name) : name_(std::move(name)) {
    if (doc.contains(name_)) {
      obj_ = doc.at(name_);
      if (!obj_.is_object()) throw InputError("config: [" + name_ + "] must be a section");
    } else {
      obj_ = nlohmann::json::object();
    }
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  void get(const std::string& key, double& out) {
    if (!take(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number()) fail(key, "a number");
    out = v.get<double>();
  }
  template <class Int>
    requires std::is_integral_v<Int> && (!std::is_same_v<Int, bool>)
  void get(const std::string& key, Int& out) {
    if (!take(key)) return;
    const auto& v = obj_.at(key);
    if (!v.is_number_integer()) fail(key, "an integer");
    if (std::is_unsigned_v<Int> && v.get<long long>() < 0) fail(key, "a non-negative integer");
    out = v.get<Int>();
  }
  void get(const std::string& key, bool& out) {
    if (!take(key)) return;
    const auto& v = obj_.at(key);
    if (v.is_boolean()) out = v.get<bool>();
    else if (v.is_number_integer() && (v == 0 || v == 1)) out = v.get<int>() == 1;
    else fail(key, "a boolean");
  }
  void get(const std::string& key, std::string& out) {
    if (!take(key)) return;
    const auto& v = obj_.at(key);
    out = v.is_string() ? v.get<std::string>() : v.dump();
  }
  void get(const std::string& key, std::vector<double>& out) {
    if (!take(key)) return;
    const auto& v = obj_.at(key);
    out.clear();
    if (v.is_array()) {
      for (const auto& x : v) {
        if (!x.is_number()) fail(key, "a list of numbers");
        out.push_back(x.get<double>());
      }
    } else if (v.is_number()) {
      out.push_back(v.get<double>());
    } else if (v.is_string()) {
      for (const auto& item : split(v.get<std::string>(), ',')) {
        const auto x = infer_scalar(item);
        if (!x.is_number()) fail(key, "a list of numbers");
        out.push_back(x.get<double>());
      }
    } else {
      fail(key, "a list of numbers");
    }
  }
  /// Pairs as "c1:c2, c1:c2" or [[c1, c2], ...].
  void get(const std::string& key, std::vector<std::pair<double, double>>& out) {
    if (!take(key)) return;
    const auto& v = obj_.at(key);
    out.clear();
    if (v.is_array()) {
      for (const auto& x : v) {
        if (!x.is_array() || x.size() != 2 || !x[0].is_number() || !x[1].is_number())
          fail(key, "a list of number pairs");
        out.emplace_back(x[0].get<double>(), x[1].get<double>());
      }
    } else if (v.is_string()) {
      for (const auto& item : split(v.get<std::string>(), ',')) {
        const auto parts = split(item, ':');
        if (parts.size() != 2) fail(key, "pairs written as a:b");
        const auto a = infer_scalar(parts[0]), b = infer_scalar(parts[1]);
        if (!a.is_number() || !b.is_number()) fail(key, "pairs written as a:b");
        out.emplace_back(a.get<double>(), b.get<double>());
      }
    } else {
      fail(key, "a list of number pairs");
    }
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items())
      if (!used_.count(key)) throw InputError("config: unknown key '" + key + "' in [" + name_ + "]");
  }

 private:
  bool take(const std::string& key) {
    used_.insert(key);
    return obj_.contains(key);
  }
  [[noreturn]] void fail(const std::string& key, const char* what) const {
    throw InputError("config: [" + name_ + "] " + key + " must be " + what);
  }

  std::string name_;
  nlohmann::json obj_;
  std::set<std::string> used_;
};

inline void read_ppo(Section& s, ppo::PpoConfig& c, const std::string& prefix) {
  s.get(prefix + "gamma", c.gamma);
  s.get(prefix + "gae_lambda", c.gae_lambda);
  s.get(prefix + "clip", c.clip);
  s.get(prefix + "ent_coef", c.ent_coef);
  s.get(prefix + "vf_coef", c.vf_coef);
  s.get(prefix + "learning_rate", c.learning_rate);
  s.get(prefix + "max_grad_norm", c.max_grad_norm);
  s.get(prefix + "rollout_steps", c.rollout_steps);
  s.get(prefix + "minibatch_size", c.minibatch_size);
  s.get(prefix + "epochs", c.epochs);
  s.get(prefix + "total_updates", c.total_updates);
  s.get(prefix + "hidden_width", c.hidden_width);
  s.get(prefix + "hidden_layers", c.hidden_layers);
  s.get(prefix + "log_std_init", c.log_std_init);
  s.get(prefix + "normalize_reward", c.normalize_reward);
}

}  // namespace config_detail

/// INI text to the JSON shape {section: {key: value}}, with scalar types inferred.
inline nlohmann::json ini_to_json(std::istream& in) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw InputError(std::string("config: ") + e.what());
  }
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw InputError("config: key '" + section + "' outside a section");
    auto& obj = doc[section] = nlohmann::json::object();
    for (const auto& [key, value] : body) obj[key] = config_detail::infer_scalar(value.data());
  }
  return doc;
}

inline RunConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw InputError("config: top level must be an object of sections");
  static const std::set<std::string> known{"model", "env", "ppo", "controller", "experiment"};
  for (const auto& [name, body] : doc.items())
    if (!known.count(name)) throw InputError("config: unknown section [" + name + "]");

  RunConfig cfg;
  using config_detail::Section;

  Section m(doc, "model");
  auto& model = cfg.env.model;
  m.get("a", model.a);
  m.get("b", model.b);
  m.get("alpha", model.alpha);
  m.get("beta", model.beta);
  m.get("k_l", model.k_l);
  m.get("tau", model.tau);
  m.get("pcap_min", model.pcap_min);
  m.get("pcap_max", model.pcap_max);
  m.finish();

  Section e(doc, "env");
  e.get("dt", cfg.env.dt);
  e.get("total_heartbeats", cfg.env.total_heartbeats);
  e.get("horizon_cap", cfg.env.horizon_cap);
  e.get("noise_sd", cfg.env.noise_sd);
  e.get("c1", cfg.env.weights.c1);
  e.get("c2", cfg.env.weights.c2);
  e.finish();

  Section p(doc, "ppo");
  config_detail::read_ppo(p, cfg.ppo, "");
  p.finish();

  Section c(doc, "controller");
  std::string kind = to_string(cfg.controller.kind);
  c.get("controller", kind);
  cfg.controller.kind = parse_controller_kind(kind);
  std::string policy_path;
  c.get("policy_path", policy_path);
  cfg.controller.policy_path = policy_path;
  c.get("epsilon", cfg.controller.epsilon);
  c.get("tau_cl", cfg.controller.tau_cl);
  if (c.has("kp")) {
    double v = 0.0;
    c.get("kp", v);
    cfg.controller.kp = v;
  }
  if (c.has("ki")) {
    double v = 0.0;
    c.get("ki", v);
    cfg.controller.ki = v;
  }
  c.get("const_pcap_w", cfg.controller.const_pcap_w);
  c.finish();

  Section x(doc, "experiment");
  auto& ex = cfg.experiment;
  x.get("seed", ex.seed);
  x.get("threads", ex.threads);
  x.get("step_count", ex.step_count);
  x.get("step_noise_sd", ex.step_noise_sd);
  x.get("settle_steps", ex.settle_steps);
  x.get("sweep_c1_min", ex.sweep_c1_min);
  x.get("sweep_c1_max", ex.sweep_c1_max);
  x.get("sweep_c2_min", ex.sweep_c2_min);
  x.get("sweep_c2_max", ex.sweep_c2_max);
  x.get("sweep_step", ex.sweep_step);
  x.get("full_grid", ex.full_grid);
  x.get("sweep_extra_cells", ex.sweep_extra_cells);
  config_detail::read_ppo(x, ex.sweep_ppo, "sweep_");
  x.get("epsilons", ex.epsilons);
  x.get("repeat_runs", ex.repeat_runs);
  x.get("repeat_noise_sd", ex.repeat_noise_sd);
  x.get("nodes", ex.nodes);
  x.get("runs_per_node", ex.runs_per_node);
  x.get("node_jitter", ex.node_jitter);
  x.finish();

  // the controller may be incomplete until the CLI fills in a policy path
  cfg.env.validate();
  cfg.ppo.validate();
  ex.validate();
  return cfg;
}

/// Reads `.json` files as JSON and anything else as INI.
inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("config: cannot open " + path.string());
  if (path.extension() == ".json") {
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw InputError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(doc);
  }
  return config_from_json(ini_to_json(in));
}

}  // namespace powercap
