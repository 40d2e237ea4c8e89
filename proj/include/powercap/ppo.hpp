#pragma once

// Proximal policy optimization for the one-dimensional power-capping MDP.
//
// Actor and critic are separate tanh MLPs. The actor emits the mean of a Gaussian
// over a pre-squash variable z; the cap is pcap_mid + pcap_half * tanh(z). Gradients
// are computed by explicit backpropagation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "powercap/csv.hpp"
#include "powercap/errors.hpp"
#include "powercap/random.hpp"
#include "powercap/simenv.hpp"

namespace powercap::ppo {

inline constexpr int kPolicyFormatVersion = 1;
inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

// --------------------------------------------------------------------------
// Multilayer perceptron: tanh hidden layers, linear scalar output.

class Mlp {
 public:
  struct Cache {
    // activations[0] is the input, activations[l+1] the output of layer l.
    std::vector<std::vector<double>> activations;
  };

  Mlp() = default;

  explicit Mlp(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2 || sizes_.back() != 1) throw InputError("Mlp: need >= 2 layers, scalar output");
    for (auto s : sizes_)
      if (s == 0) throw InputError("Mlp: zero-width layer");
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) total += sizes_[l + 1] * (sizes_[l] + 1);
    params_.assign(total, 0.0);
  }

  /// Glorot-uniform weights, zero biases; the output layer is scaled by `output_gain`.
  static Mlp glorot(std::vector<std::size_t> sizes, Rng& rng, double output_gain) {
    Mlp net(std::move(sizes));
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      const double in = static_cast<double>(net.sizes_[l]);
      const double out = static_cast<double>(net.sizes_[l + 1]);
      double limit = std::sqrt(6.0 / (in + out));
      if (l + 1 == net.num_layers()) limit *= output_gain;
      std::uniform_real_distribution<double> u(-limit, limit);
      auto w = net.weights(l);
      for (auto& v : w) v = u(rng);
    }
    return net;
  }

  std::size_t num_layers() const { return sizes_.size() - 1; }
  const std::vector<std::size_t>& sizes() const { return sizes_; }
  std::size_t num_params() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::size_t weight_offset(std::size_t layer) const {
    std::size_t off = 0;
    for (std::size_t l = 0; l < layer; ++l) off += sizes_[l + 1] * (sizes_[l] + 1);
    return off;
  }
  std::span<double> weights(std::size_t l) {
    return std::span<double>(params_).subspan(weight_offset(l), sizes_[l + 1] * sizes_[l]);
  }
  std::span<const double> weights(std::size_t l) const {
    return std::span<const double>(params_).subspan(weight_offset(l), sizes_[l + 1] * sizes_[l]);
  }
  std::span<double> biases(std::size_t l) {
    return std::span<double>(params_).subspan(weight_offset(l) + sizes_[l + 1] * sizes_[l], sizes_[l + 1]);
  }
  std::span<const double> biases(std::size_t l) const {
    return std::span<const double>(params_).subspan(weight_offset(l) + sizes_[l + 1] * sizes_[l],
                                                    sizes_[l + 1]);
  }

  double forward(std::span<const double> x, Cache* cache = nullptr) const {
    if (x.size() != sizes_.front()) throw InputError("Mlp::forward: input width mismatch");
    std::vector<double> cur(x.begin(), x.end());
    if (cache) {
      cache->activations.resize(sizes_.size());
      cache->activations[0] = cur;
    }
    for (std::size_t l = 0; l < num_layers(); ++l) {
      const auto w = weights(l);
      const auto b = biases(l);
      const std::size_t in = sizes_[l], out = sizes_[l + 1];
      std::vector<double> next(out);
      for (std::size_t o = 0; o < out; ++o) {
        double s = b[o];
        const double* row = w.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) s += row[i] * cur[i];
        next[o] = (l + 1 < num_layers()) ? std::tanh(s) : s;
      }
      cur = std::move(next);
      if (cache) cache->activations[l + 1] = cur;
    }
    return cur[0];
  }

  /// Accumulates d(out)/d(params) * dout into `grad` (same layout as params()).
  void backward(const Cache& cache, double dout, std::span<double> grad) const {
    std::vector<double> delta{dout};  // dL/d(pre-activation) of current layer
    for (std::size_t l = num_layers(); l-- > 0;) {
      const std::size_t in = sizes_[l], out = sizes_[l + 1];
      const auto& input = cache.activations[l];
      const std::size_t woff = weight_offset(l);
      const std::size_t boff = woff + out * in;
      const auto w = weights(l);
      for (std::size_t o = 0; o < out; ++o) {
        double* grow = grad.data() + woff + o * in;
        for (std::size_t i = 0; i < in; ++i) grow[i] += delta[o] * input[i];
        grad[boff + o] += delta[o];
      }
      if (l == 0) break;
      std::vector<double> prev(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        const double* row = w.data() + o * in;
        for (std::size_t i = 0; i < in; ++i) prev[i] += row[i] * delta[o];
      }
      for (std::size_t i = 0; i < in; ++i) prev[i] *= 1.0 - input[i] * input[i];  // tanh'
      delta = std::move(prev);
    }
  }

 private:
  std::vector<std::size_t> sizes_;
  std::vector<double> params_;  // per layer: W (out x in, row-major) then b (out)
};

// --------------------------------------------------------------------------

/// Running mean/variance (parallel Welford merge).
struct RunningNorm {
  double mean = 0.0;
  double var = 1.0;
  double count = 1e-4;

  void update(double x) {
    const double batch_count = 1.0;
    const double delta = x - mean;
    const double total = count + batch_count;
    const double new_mean = mean + delta * batch_count / total;
    const double m2 = var * count + delta * delta * count * batch_count / total;
    mean = new_mean;
    var = m2 / total;
    count = total;
  }

  double normalize(double x) const { return std::clamp((x - mean) / std::sqrt(var + 1e-8), -10.0, 10.0); }
};

struct PpoConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip = 0.2;
  double ent_coef = 0.01;
  double vf_coef = 0.5;
  double learning_rate = 3e-4;
  double max_grad_norm = 0.5;
  std::size_t rollout_steps = 2048;
  std::size_t minibatch_size = 64;
  std::size_t epochs = 10;
  std::size_t total_updates = 120;
  std::size_t hidden_width = 64;
  std::size_t hidden_layers = 2;
  double log_std_init = 0.0;
  bool normalize_reward = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw InputError("ppo: gamma must be in (0, 1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw InputError("ppo: lambda must be in [0, 1]");
    if (!(clip > 0.0)) throw InputError("ppo: clip must be > 0");
    if (!(learning_rate >= 0.0)) throw InputError("ppo: learning rate must be >= 0");
    if (minibatch_size == 0 || rollout_steps < minibatch_size)
      throw InputError("ppo: rollout length must be >= minibatch size");
    if (hidden_width == 0 || hidden_layers == 0) throw InputError("ppo: empty network");
  }
};

inline void to_json(nlohmann::json& j, const PpoConfig& c) {
  j = {{"gamma", c.gamma},
       {"gae_lambda", c.gae_lambda},
       {"clip", c.clip},
       {"ent_coef", c.ent_coef},
       {"vf_coef", c.vf_coef},
       {"learning_rate", c.learning_rate},
       {"max_grad_norm", c.max_grad_norm},
       {"rollout_steps", c.rollout_steps},
       {"minibatch_size", c.minibatch_size},
       {"epochs", c.epochs},
       {"total_updates", c.total_updates},
       {"hidden_width", c.hidden_width},
       {"hidden_layers", c.hidden_layers},
       {"log_std_init", c.log_std_init},
       {"normalize_reward", c.normalize_reward},
       {"seed", c.seed}};
}

struct PolicyParams {
  Mlp actor;
  double log_std = 0.0;
  Mlp critic;
  RunningNorm obs_norm;
  double pcap_min = 40.0;
  double pcap_max = 120.0;
  PpoConfig config;  // echo of the training configuration

  static PolicyParams init(const PpoConfig& cfg, double pcap_min, double pcap_max, Rng& rng) {
    std::vector<std::size_t> sizes{1};
    for (std::size_t l = 0; l < cfg.hidden_layers; ++l) sizes.push_back(cfg.hidden_width);
    sizes.push_back(1);
    PolicyParams p;
    p.actor = Mlp::glorot(sizes, rng, 0.01);
    p.critic = Mlp::glorot(sizes, rng, 1.0);
    p.log_std = std::clamp(cfg.log_std_init, kLogStdMin, kLogStdMax);
    p.pcap_min = pcap_min;
    p.pcap_max = pcap_max;
    p.config = cfg;
    return p;
  }

  double half_range() const { return 0.5 * (pcap_max - pcap_min); }
  double mid() const { return 0.5 * (pcap_max + pcap_min); }
  double squash(double z) const { return mid() + half_range() * std::tanh(z); }

  std::size_t num_params() const { return actor.num_params() + 1 + critic.num_params(); }

  /// Layout: actor params, log_std, critic params.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(num_params());
    out.insert(out.end(), actor.params().begin(), actor.params().end());
    out.push_back(log_std);
    out.insert(out.end(), critic.params().begin(), critic.params().end());
    return out;
  }

  void unflatten(std::span<const double> flat) {
    if (flat.size() != num_params()) throw InputError("PolicyParams::unflatten: size mismatch");
    auto a = actor.params();
    std::copy_n(flat.begin(), a.size(), a.begin());
    log_std = flat[a.size()];
    auto c = critic.params();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(a.size() + 1), c.size(), c.begin());
  }

  bool finite() const {
    for (double v : flatten())
      if (!std::isfinite(v)) return false;
    return std::isfinite(obs_norm.mean) && std::isfinite(obs_norm.var);
  }

  double value(double normalized_obs) const {
    const double x[1] = {normalized_obs};
    return critic.forward(x);
  }
  double mean(double normalized_obs) const {
    const double x[1] = {normalized_obs};
    return actor.forward(x);
  }
};

/// log density of the cap implied by pre-squash sample z, under N(mu, exp(log_std)).
inline double log_prob(double mu, double log_std, double z, double half_range) {
  const double sigma = std::exp(log_std);
  const double u = (z - mu) / sigma;
  const double gaussian = -0.5 * u * u - log_std - 0.5 * std::log(2.0 * std::numbers::pi);
  const double az = std::abs(z);
  // log(1 - tanh(z)^2), stable for large |z|
  const double log_dtanh = 2.0 * (std::numbers::ln2 - az - std::log1p(std::exp(-2.0 * az)));
  return gaussian - log_dtanh - std::log(half_range);
}

inline double gaussian_entropy(double log_std) {
  return 0.5 + 0.5 * std::log(2.0 * std::numbers::pi) + log_std;
}

struct ActResult {
  double pcap = 0.0;
  double raw = 0.0;  // pre-squash z
  double log_prob = 0.0;
  double value = 0.0;
  double normalized_obs = 0.0;
};

inline ActResult act(const PolicyParams& policy, double obs, bool stochastic, Rng& rng) {
  ActResult r;
  r.normalized_obs = policy.obs_norm.normalize(obs);
  const double mu = policy.mean(r.normalized_obs);
  if (stochastic) {
    std::normal_distribution<double> n(0.0, 1.0);
    r.raw = mu + std::exp(policy.log_std) * n(rng);
  } else {
    r.raw = mu;
  }
  r.pcap = std::clamp(policy.squash(r.raw), policy.pcap_min, policy.pcap_max);
  r.log_prob = log_prob(mu, policy.log_std, r.raw, policy.half_range());
  r.value = policy.value(r.normalized_obs);
  return r;
}

inline double act_deterministic(const PolicyParams& policy, double obs) {
  return std::clamp(policy.squash(policy.mean(policy.obs_norm.normalize(obs))), policy.pcap_min,
                    policy.pcap_max);
}

// --------------------------------------------------------------------------

struct Trajectory {
  std::vector<double> obs;  // normalized observation fed to the networks
  std::vector<double> raw_action;
  std::vector<double> pcap;
  std::vector<double> log_prob;
  std::vector<double> reward;  // reward used for learning (possibly scaled)
  std::vector<double> value;
  std::vector<std::uint8_t> done;  // episode ended after this step
  double bootstrap_value = 0.0;    // V(s_T) for the state after the last step

  std::size_t size() const { return obs.size(); }
  void clear() { *this = Trajectory{}; }
  void push(double o, double z, double pc, double lp, double r, double v, bool d) {
    obs.push_back(o);
    raw_action.push_back(z);
    pcap.push_back(pc);
    log_prob.push_back(lp);
    reward.push_back(r);
    value.push_back(v);
    done.push_back(d ? 1 : 0);
  }
};

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// Generalized advantage estimation; returns = advantages + values (before normalization).
inline Advantages compute_gae(std::span<const double> rewards, std::span<const double> values,
                              std::span<const std::uint8_t> dones, double bootstrap_value,
                              double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (n == 0 || values.size() != n || dones.size() != n)
    throw InputError("compute_gae: inconsistent trajectory lengths");
  Advantages out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_adv = 0.0;
  double next_value = bootstrap_value;
  for (std::size_t t = n; t-- > 0;) {
    const double nonterminal = dones[t] ? 0.0 : 1.0;
    const double delta = rewards[t] + gamma * next_value * nonterminal - values[t];
    next_adv = delta + gamma * lambda * nonterminal * next_adv;
    out.advantages[t] = next_adv;
    out.returns[t] = next_adv + values[t];
    next_value = values[t];
  }
  return out;
}

inline Advantages compute_gae(const Trajectory& traj, double gamma, double lambda) {
  return compute_gae(traj.reward, traj.value, traj.done, traj.bootstrap_value, gamma, lambda);
}

/// Normalizes to mean 0, sample sd 1 (no-op scaling for a single element).
inline void normalize_advantages(std::vector<double>& adv) {
  const double n = static_cast<double>(adv.size());
  if (adv.empty()) return;
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double ss = 0.0;
  for (double a : adv) ss += (a - mean) * (a - mean);
  const double sd = adv.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  for (double& a : adv) a = (a - mean) / (sd + 1e-12);
  // second pass removes the residual mean left by floating-point rounding
  const double residual = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  for (double& a : adv) a -= residual;
}

struct LossTerms {
  double total = 0.0;
  double policy = 0.0;   // -mean clipped surrogate
  double value = 0.0;    // mean squared value error
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
};

/// Loss over the samples `idx` of `rollout`:
///   total = -mean(min(rho*A, clip(rho)*A)) + vf_coef*mean((V-R)^2) - ent_coef*H
/// If `grad` is non-null, d(total)/d(params) is accumulated into it (flatten() layout).
inline LossTerms ppo_loss(const PolicyParams& policy, const Trajectory& rollout,
                          std::span<const std::size_t> idx, std::span<const double> advantages,
                          std::span<const double> returns, const PpoConfig& cfg,
                          std::vector<double>* grad) {
  LossTerms out;
  const double m = static_cast<double>(idx.size());
  if (idx.empty()) return out;
  const std::size_t na = policy.actor.num_params();
  const double sigma = std::exp(policy.log_std);
  std::span<double> g_actor, g_critic;
  if (grad) {
    grad->assign(policy.num_params(), 0.0);
    g_actor = std::span<double>(*grad).subspan(0, na);
    g_critic = std::span<double>(*grad).subspan(na + 1);
  }
  Mlp::Cache actor_cache, critic_cache;
  double d_log_std = 0.0;
  for (std::size_t i : idx) {
    const double x[1] = {rollout.obs[i]};
    const double mu = policy.actor.forward(x, grad ? &actor_cache : nullptr);
    const double v = policy.critic.forward(x, grad ? &critic_cache : nullptr);
    const double z = rollout.raw_action[i];
    const double lp = log_prob(mu, policy.log_std, z, policy.half_range());
    const double log_ratio = lp - rollout.log_prob[i];
    const double ratio = std::exp(log_ratio);
    const double adv = advantages[i];
    const double unclipped = ratio * adv;
    const double clipped = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv;
    const bool through = unclipped <= clipped;
    out.policy -= std::min(unclipped, clipped) / m;
    const double err = v - returns[i];
    out.value += err * err / m;
    out.approx_kl += ((ratio - 1.0) - log_ratio) / m;
    if (std::abs(ratio - 1.0) > cfg.clip) out.clip_fraction += 1.0 / m;
    if (grad) {
      const double dl_dlp = through ? -(ratio * adv) / m : 0.0;
      const double u = (z - mu) / sigma;
      policy.actor.backward(actor_cache, dl_dlp * (z - mu) / (sigma * sigma), g_actor);
      d_log_std += dl_dlp * (u * u - 1.0);
      policy.critic.backward(critic_cache, cfg.vf_coef * 2.0 * err / m, g_critic);
    }
  }
  out.entropy = gaussian_entropy(policy.log_std);
  out.total = out.policy + cfg.vf_coef * out.value - cfg.ent_coef * out.entropy;
  if (grad) (*grad)[na] = d_log_std - cfg.ent_coef;
  return out;
}

/// Adam over a flat parameter vector.
class Adam {
 public:
  explicit Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(n, 0.0), v_(n, 0.0), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(std::span<double> params, std::span<const double> grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
  }

 private:
  std::vector<double> m_, v_;
  double lr_, b1_, b2_, eps_;
  long long t_ = 0;
};

struct UpdateDiagnostics {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  bool aborted = false;  // non-finite loss encountered; policy left at last finite state
};

/// Runs cfg.epochs passes of shuffled minibatch gradient steps on `rollout`.
inline UpdateDiagnostics update(PolicyParams& policy, const Trajectory& rollout, const PpoConfig& cfg,
                                Adam& optimizer, Rng& rng) {
  cfg.validate();
  if (rollout.size() < cfg.minibatch_size) throw InputError("update: rollout shorter than minibatch");
  auto adv = compute_gae(rollout, cfg.gamma, cfg.gae_lambda);
  const std::vector<double> returns = adv.returns;
  normalize_advantages(adv.advantages);

  std::vector<std::size_t> order(rollout.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  UpdateDiagnostics diag;
  std::size_t batches = 0;
  std::vector<double> grad;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start + cfg.minibatch_size <= order.size(); start += cfg.minibatch_size) {
      std::span<const std::size_t> idx(order.data() + start, cfg.minibatch_size);
      const auto loss = ppo_loss(policy, rollout, idx, adv.advantages, returns, cfg, &grad);
      bool finite = std::isfinite(loss.total);
      for (double g : grad) finite = finite && std::isfinite(g);
      if (!finite) {
        diag.aborted = true;
        return diag;
      }
      double norm = 0.0;
      for (double g : grad) norm += g * g;
      norm = std::sqrt(norm);
      if (cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm)
        for (double& g : grad) g *= cfg.max_grad_norm / norm;
      auto flat = policy.flatten();
      optimizer.step(flat, grad);
      policy.unflatten(flat);
      policy.log_std = std::clamp(policy.log_std, kLogStdMin, kLogStdMax);
      diag.policy_loss += loss.policy;
      diag.value_loss += loss.value;
      diag.entropy += loss.entropy;
      diag.approx_kl += loss.approx_kl;
      diag.clip_fraction += loss.clip_fraction;
      ++batches;
    }
  }
  if (batches > 0) {
    const double b = static_cast<double>(batches);
    diag.policy_loss /= b;
    diag.value_loss /= b;
    diag.entropy /= b;
    diag.approx_kl /= b;
    diag.clip_fraction /= b;
  }
  return diag;
}

// --------------------------------------------------------------------------

/// Scales rewards by the running standard deviation of the discounted return.
class RewardScaler {
 public:
  explicit RewardScaler(double gamma) : gamma_(gamma) {}

  double scale(double r, bool done) {
    ret_ = ret_ * gamma_ + r;
    stats_.update(ret_);
    const double out = std::clamp(r / std::sqrt(stats_.var + 1e-8), -10.0, 10.0);
    if (done) ret_ = 0.0;
    return out;
  }

 private:
  double gamma_;
  double ret_ = 0.0;
  RunningNorm stats_{0.0, 1.0, 1e-4};
};

struct CurvePoint {
  std::size_t update = 0;
  double mean_episode_reward = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
};

struct TrainResult {
  PolicyParams policy;
  std::vector<CurvePoint> curve;
  bool diverged = false;
};

/// Alternates rollout collection on the model environment with PPO updates.
/// Deterministic given ppo_cfg.seed (environment episodes are seeded from it).
inline TrainResult train(const EnvConfig& env_cfg, const PpoConfig& cfg,
                         const std::function<void(const CurvePoint&)>& on_update = {}) {
  cfg.validate();
  env_cfg.validate();
  Rng rng(derive_seed(cfg.seed, "ppo.train"));
  TrainResult result;
  result.policy = PolicyParams::init(cfg, env_cfg.model.pcap_min, env_cfg.model.pcap_max, rng);
  auto& policy = result.policy;
  Adam optimizer(policy.num_params(), cfg.learning_rate);
  RewardScaler scaler(cfg.gamma);

  std::uint64_t episode = 0;
  auto episode_cfg = [&](std::uint64_t k) {
    EnvConfig c = env_cfg;
    c.seed = derive_seed(derive_seed(cfg.seed, "ppo.episode"), k);
    return c;
  };
  Environment env(episode_cfg(episode));
  double episode_reward = 0.0;
  double last_mean = std::numeric_limits<double>::quiet_NaN();
  Trajectory traj;

  for (std::size_t u = 0; u < cfg.total_updates; ++u) {
    traj.clear();
    double ep_sum = 0.0;
    std::size_t ep_count = 0;
    for (std::size_t t = 0; t < cfg.rollout_steps; ++t) {
      const double obs = env.state().progress;
      policy.obs_norm.update(obs);
      const auto a = act(policy, obs, true, rng);
      const auto out = env.step(a.pcap);
      episode_reward += out.reward;
      const bool done = out.next_state.done;
      const double r = cfg.normalize_reward ? scaler.scale(out.reward, done) : out.reward;
      traj.push(a.normalized_obs, a.raw, a.pcap, a.log_prob, r, a.value, done);
      if (done) {
        ep_sum += episode_reward;
        ++ep_count;
        episode_reward = 0.0;
        env = Environment(episode_cfg(++episode));
      }
    }
    traj.bootstrap_value = policy.value(policy.obs_norm.normalize(env.state().progress));
    if (ep_count > 0) last_mean = ep_sum / static_cast<double>(ep_count);

    const auto diag = update(policy, traj, cfg, optimizer, rng);
    CurvePoint point{u, last_mean, diag.policy_loss, diag.value_loss, diag.entropy, diag.approx_kl};
    result.curve.push_back(point);
    if (on_update) on_update(point);
    if (diag.aborted || !policy.finite()) {
      result.diverged = true;
      break;
    }
  }
  return result;
}

inline void write_curve_csv(const std::filesystem::path& path, const std::vector<CurvePoint>& curve) {
  csv::Writer w(path, {"update", "mean_ep_reward", "policy_loss", "value_loss", "entropy", "approx_kl"});
  for (const auto& c : curve)
    w.values(static_cast<unsigned long long>(c.update), c.mean_episode_reward, c.policy_loss,
             c.value_loss, c.entropy, c.approx_kl);
}

// --------------------------------------------------------------------------
// Policy file (versioned JSON).

namespace detail {

inline nlohmann::json mlp_to_json(const Mlp& net) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto w = net.weights(l);
    const auto b = net.biases(l);
    layers.push_back({{"in", net.sizes()[l]},
                      {"out", net.sizes()[l + 1]},
                      {"activation", l + 1 < net.num_layers() ? "tanh" : "linear"},
                      {"w", std::vector<double>(w.begin(), w.end())},
                      {"b", std::vector<double>(b.begin(), b.end())}});
  }
  return layers;
}

inline Mlp mlp_from_json(const nlohmann::json& layers) {
  if (!layers.is_array() || layers.empty()) throw FormatError("policy: network has no layers");
  std::vector<std::size_t> sizes{layers.front().at("in").get<std::size_t>()};
  for (const auto& l : layers) {
    if (l.at("in").get<std::size_t>() != sizes.back()) throw FormatError("policy: layer dimension mismatch");
    sizes.push_back(l.at("out").get<std::size_t>());
  }
  if (sizes.front() != 1 || sizes.back() != 1) throw FormatError("policy: expected scalar input and output");
  Mlp net(sizes);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto w = layers[i].at("w").get<std::vector<double>>();
    const auto b = layers[i].at("b").get<std::vector<double>>();
    auto dw = net.weights(i);
    auto db = net.biases(i);
    if (w.size() != dw.size() || b.size() != db.size())
      throw FormatError("policy: weight array size does not match layer dimensions");
    std::copy(w.begin(), w.end(), dw.begin());
    std::copy(b.begin(), b.end(), db.begin());
  }
  return net;
}

}  // namespace detail

inline nlohmann::json policy_to_json(const PolicyParams& p) {
  return {{"format", "powercap-policy"},
          {"version", kPolicyFormatVersion},
          {"pcap_min", p.pcap_min},
          {"pcap_max", p.pcap_max},
          {"log_std", p.log_std},
          {"actor", detail::mlp_to_json(p.actor)},
          {"critic", detail::mlp_to_json(p.critic)},
          {"obs_norm", {{"mean", p.obs_norm.mean}, {"var", p.obs_norm.var}, {"count", p.obs_norm.count}}},
          {"config", p.config}};
}

inline PolicyParams policy_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kPolicyFormatVersion) throw FormatError("policy: unsupported version");
    PolicyParams p;
    p.pcap_min = j.at("pcap_min").get<double>();
    p.pcap_max = j.at("pcap_max").get<double>();
    if (!(p.pcap_min < p.pcap_max)) throw FormatError("policy: invalid actuator range");
    p.log_std = j.at("log_std").get<double>();
    p.actor = detail::mlp_from_json(j.at("actor"));
    p.critic = detail::mlp_from_json(j.at("critic"));
    const auto& n = j.at("obs_norm");
    p.obs_norm = {n.at("mean").get<double>(), n.at("var").get<double>(), n.at("count").get<double>()};
    if (j.contains("config")) {
      const auto& c = j.at("config");
      p.config.hidden_width = c.value("hidden_width", p.config.hidden_width);
      p.config.hidden_layers = c.value("hidden_layers", p.config.hidden_layers);
      p.config.seed = c.value("seed", p.config.seed);
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("policy: ") + e.what());
  }
}

inline void save_policy(const std::filesystem::path& path, const PolicyParams& p) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write policy to " + path.string());
  out << policy_to_json(p).dump(1) << '\n';
}

inline PolicyParams load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open policy " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("policy " + path.string() + ": " + e.what());
  }
  return policy_from_json(j);
}

}  // namespace powercap::ppo
