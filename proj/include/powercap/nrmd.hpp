#pragma once

// Local control daemon and synthetic workload client speaking newline-delimited
// JSON over a Unix stream socket.
//
// client -> daemon   hello | heartbeat {timestamp_s, n} | progress_report {window_end_s}
//                    | shutdown {completed}
// daemon -> client   ack {of, ...} | error {message} for every client line, plus the
//                    pushes pcap_set {t_s, pcap_w} and shutdown {reason}
//
// In simulated time the client's progress_report closes the window ending at
// window_end_s; pushes caused by a line are sent before its ack. In wall-clock
// mode the daemon stamps heartbeats on arrival and closes windows on its own timer.

#include <poll.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/un.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "powercap/errors.hpp"
#include "powercap/model.hpp"
#include "powercap/progress.hpp"
#include "powercap/random.hpp"
#include "powercap/simenv.hpp"

namespace powercap::nrmd {

using Json = nlohmann::json;

inline constexpr std::size_t kMaxLineBytes = 1 << 20;

// --------------------------------------------------------------------------
// Socket plumbing

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Fd() { reset(); }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  int get() const { return fd_; }
  explicit operator bool() const { return fd_ >= 0; }

 private:
  int fd_ = -1;
};

inline sockaddr_un socket_address(const std::filesystem::path& path) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  const std::string s = path.string();
  if (s.empty() || s.size() >= sizeof(addr.sun_path)) throw InputError("socket path empty or too long: " + s);
  std::memcpy(addr.sun_path, s.c_str(), s.size() + 1);
  return addr;
}

inline std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

inline void send_line(int fd, const Json& msg) {
  std::string line = msg.dump();
  line.push_back('\n');
  std::size_t off = 0;
  while (off < line.size()) {
    const ssize_t n = ::send(fd, line.data() + off, line.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw ConnectionError(errno_text("send"));
    }
    off += static_cast<std::size_t>(n);
  }
}

/// Buffered newline splitter over a stream socket.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}

  /// Next complete line; nullopt on EOF. Waits at most `timeout_ms` (-1: forever);
  /// an expired wait returns an empty optional with timed_out() set.
  std::optional<std::string> next(int timeout_ms = -1) {
    timed_out_ = false;
    for (;;) {
      if (auto line = pop()) return line;
      if (eof_) return std::nullopt;
      pollfd p{fd_, POLLIN, 0};
      const int r = ::poll(&p, 1, timeout_ms);
      if (r < 0) {
        if (errno == EINTR) continue;
        throw ConnectionError(errno_text("poll"));
      }
      if (r == 0) {
        timed_out_ = true;
        return std::nullopt;
      }
      fill();
    }
  }

  /// Reads whatever is available without blocking.
  void fill() {
    char buf[8192];
    const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) return;
      throw ConnectionError(errno_text("recv"));
    }
    if (n == 0) eof_ = true;
    buf_.append(buf, static_cast<std::size_t>(n));
  }

  /// A complete buffered line, if any. Oversized partial lines are returned
  /// truncated so the caller can reject them.
  std::optional<std::string> pop() {
    const auto nl = buf_.find('\n');
    if (nl == std::string::npos) {
      if (buf_.size() > kMaxLineBytes || (eof_ && !buf_.empty())) {
        std::string line = std::move(buf_);
        buf_.clear();
        return line;
      }
      return std::nullopt;
    }
    std::string line = buf_.substr(0, nl);
    buf_.erase(0, nl + 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  }

  bool eof() const { return eof_ && buf_.empty(); }
  bool timed_out() const { return timed_out_; }

 private:
  int fd_;
  std::string buf_;
  bool eof_ = false;
  bool timed_out_ = false;
};

// --------------------------------------------------------------------------
// Daemon

struct DaemonOptions {
  std::filesystem::path socket;
  ModelParams model;       // power and reward accounting
  RewardWeights weights;
  double dt = 1.0;
  bool wall_clock = false;
  std::int64_t max_steps = 0;  // 0: unlimited
  std::uint64_t seed = 0;      // echoed in the summary
  double accept_timeout_s = 0.0;  // 0: wait forever

  void validate() const {
    model.validate();
    weights.validate();
    if (!(dt > 0.0)) throw InputError("daemon: dt must be > 0");
    if (max_steps < 0) throw InputError("daemon: max_steps must be >= 0");
  }
};

/// Protocol state machine, independent of the transport.
class DaemonCore {
 public:
  DaemonCore(DaemonOptions opts, std::unique_ptr<Controller> controller)
      : opts_(std::move(opts)), controller_(std::move(controller)) {
    opts_.validate();
    if (!controller_) throw InputError("daemon: controller required");
    record_.label = controller_->name();
    record_.seed = opts_.seed;
    record_.weights = opts_.weights;
  }

  /// Messages to send for one client line, in order; the last one is the reply.
  /// `now` is the daemon clock (wall-clock mode only).
  std::vector<Json> handle_line(std::string_view line, double now = 0.0) {
    std::vector<Json> out;
    handle(line, now, out);
    return out;
  }

  /// Closes the window ending at `window_end` (wall-clock timer); returns pushes.
  std::vector<Json> tick(double window_end) {
    std::vector<Json> out;
    if (hello_ && !finished_) close_window(window_end, out);
    return out;
  }

  double next_window_end() const { return static_cast<double>(steps_ + 1) * opts_.dt; }
  bool started() const { return hello_; }
  bool finished() const { return finished_; }
  std::int64_t steps() const { return steps_; }
  const DaemonOptions& options() const { return opts_; }

  ExperimentRecord record() const {
    ExperimentRecord r = record_;
    r.execution_time_s = static_cast<double>(steps_) * opts_.dt;
    r.truncated = !client_completed_;
    return r;
  }

 private:
  static Json error(std::string message) { return {{"type", "error"}, {"message", std::move(message)}}; }

  void handle(std::string_view line, double now, std::vector<Json>& out) {
    if (line.size() > kMaxLineBytes) return out.push_back(error("line too long"));
    Json msg;
    try {
      msg = Json::parse(line);
    } catch (const Json::exception&) {
      return out.push_back(error("malformed JSON"));
    }
    if (!msg.is_object()) return out.push_back(error("message must be a JSON object"));
    const auto type_it = msg.find("type");
    if (type_it == msg.end() || !type_it->is_string()) return out.push_back(error("missing message type"));
    const std::string type = type_it->get<std::string>();

    if (type == "pcap_set" || type == "ack" || type == "error")
      return out.push_back(error("unexpected message type '" + type + "'"));
    if (type != "hello" && type != "heartbeat" && type != "progress_report" && type != "shutdown")
      return out.push_back(error("unknown message type '" + type + "'"));
    if (finished_) return out.push_back(error("episode finished"));

    if (type == "hello") {
      if (hello_) return out.push_back(error("duplicate hello"));
      hello_ = true;
      controller_->reset();
      action_ = controller_->next_action({0.0, 0.0, false});
      out.push_back({{"type", "pcap_set"}, {"t_s", 0.0}, {"pcap_w", action_}});
      out.push_back({{"type", "ack"},
                     {"of", "hello"},
                     {"dt", opts_.dt},
                     {"mode", opts_.wall_clock ? "wall_clock" : "simulated"}});
      return;
    }
    if (type == "shutdown") {
      const auto c = msg.find("completed");
      client_completed_ = c != msg.end() && c->is_boolean() && c->get<bool>();
      finished_ = true;
      out.push_back({{"type", "ack"}, {"of", "shutdown"}});
      return;
    }
    if (!hello_) return out.push_back(error("hello required first"));

    if (type == "heartbeat") {
      const auto ts = msg.find("timestamp_s");
      const auto n = msg.find("n");
      if (!opts_.wall_clock && (ts == msg.end() || !ts->is_number()))
        return out.push_back(error("heartbeat: timestamp_s must be a number"));
      HeartbeatRecord hb{opts_.wall_clock ? now : ts->get<double>(), 1};
      if (n != msg.end()) {
        if (!n->is_number_integer() || n->get<std::int64_t>() < 1)
          return out.push_back(error("heartbeat: n must be a positive integer"));
        hb.count = n->get<std::int64_t>();
      }
      if (!std::isfinite(hb.timestamp)) return out.push_back(error("heartbeat: timestamp_s not finite"));
      if (hb.timestamp <= closed_until_) return out.push_back(error("heartbeat: window already closed"));
      if (!window_.append(hb)) return out.push_back(error("heartbeat: timestamps must increase"));
      out.push_back({{"type", "ack"}, {"of", "heartbeat"}});
      return;
    }

    // progress_report
    if (opts_.wall_clock) return out.push_back(error("progress_report: daemon runs on wall-clock time"));
    const auto we = msg.find("window_end_s");
    if (we == msg.end() || !we->is_number()) return out.push_back(error("progress_report: window_end_s must be a number"));
    const double expected = next_window_end();
    if (std::abs(we->get<double>() - expected) > 1e-9 * std::max(1.0, expected))
      return out.push_back(error("progress_report: expected window_end_s " + csv::format_number(expected)));
    const auto sample = close_window(expected, out);
    out.push_back({{"type", "ack"},
                   {"of", "progress_report"},
                   {"window_end_s", expected},
                   {"progress_hz", sample.value},
                   {"empty", sample.empty}});
  }

  ProgressSample close_window(double window_end, std::vector<Json>& out) {
    const auto sample = window_.close(window_end - opts_.dt, window_end);
    closed_until_ = window_end;
    const double power = physical_power(opts_.model, action_);
    record_.trace.push_back({window_end, action_, sample.value, power,
                             reward(opts_.model, opts_.weights, action_, sample.value)});
    record_.episode_reward += record_.trace.back().reward;
    record_.energy_kj += power * opts_.dt / 1000.0;
    ++steps_;
    if (opts_.max_steps > 0 && steps_ >= opts_.max_steps) {
      finished_ = true;
      out.push_back({{"type", "shutdown"}, {"reason", "max_steps"}});
      return sample;
    }
    action_ = controller_->next_action(sample);
    out.push_back({{"type", "pcap_set"}, {"t_s", window_end}, {"pcap_w", action_}});
    return sample;
  }

  DaemonOptions opts_;
  std::unique_ptr<Controller> controller_;
  HeartbeatWindow window_;
  ExperimentRecord record_;
  double action_ = 0.0;
  double closed_until_ = -std::numeric_limits<double>::infinity();
  std::int64_t steps_ = 0;
  bool hello_ = false;
  bool finished_ = false;
  bool client_completed_ = false;
};

inline Fd listen_on(const std::filesystem::path& path) {
  const auto addr = socket_address(path);
  std::error_code ec;
  if (std::filesystem::is_socket(path, ec)) std::filesystem::remove(path, ec);
  Fd fd(::socket(AF_UNIX, SOCK_STREAM, 0));
  if (!fd) throw ConnectionError(errno_text("socket"));
  if (::bind(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) < 0)
    throw ConnectionError(errno_text(("bind " + path.string()).c_str()));
  if (::listen(fd.get(), 1) < 0) throw ConnectionError(errno_text("listen"));
  return fd;
}

/// Serves one client on an already listening socket until shutdown or disconnect.
inline ExperimentRecord serve(const Fd& listener, DaemonCore& core) {
  const auto& opts = core.options();
  pollfd lp{listener.get(), POLLIN, 0};
  const int accept_ms = opts.accept_timeout_s > 0.0 ? static_cast<int>(opts.accept_timeout_s * 1000.0) : -1;
  int r;
  do r = ::poll(&lp, 1, accept_ms);
  while (r < 0 && errno == EINTR);
  if (r == 0) throw ConnectionError("daemon: no client connected");
  if (r < 0) throw ConnectionError(errno_text("poll"));
  Fd client(::accept(listener.get(), nullptr, nullptr));
  if (!client) throw ConnectionError(errno_text("accept"));

  using Clock = std::chrono::steady_clock;
  std::optional<Clock::time_point> start;
  const auto since_start = [&] { return std::chrono::duration<double>(Clock::now() - *start).count(); };
  LineReader reader(client.get());
  auto send_all = [&](const std::vector<Json>& msgs) {
    for (const auto& m : msgs) send_line(client.get(), m);
  };

  try {
    while (!core.finished()) {
      int timeout = -1;
      if (opts.wall_clock && start) {
        const double wait = core.next_window_end() - since_start();
        timeout = std::max(0, static_cast<int>(std::ceil(wait * 1000.0)));
      }
      const auto line = reader.next(timeout);
      if (opts.wall_clock && start) {
        while (!core.finished() && since_start() >= core.next_window_end())
          send_all(core.tick(core.next_window_end()));
      }
      if (line) {
        const double now = start ? since_start() : 0.0;
        const bool was_started = core.started();
        send_all(core.handle_line(*line, now));
        if (!was_started && core.started()) start = Clock::now();
      } else if (!reader.timed_out()) {
        break;  // client disconnected
      }
    }
  } catch (const ConnectionError&) {
    // peer vanished mid-reply; the episode is closed with what was recorded
  }
  return core.record();
}

inline ExperimentRecord serve(DaemonCore& core) {
  const Fd listener = listen_on(core.options().socket);
  auto rec = serve(listener, core);
  std::error_code ec;
  std::filesystem::remove(core.options().socket, ec);
  return rec;
}

// --------------------------------------------------------------------------
// Workload client

struct WorkloadOptions {
  std::filesystem::path socket;
  EnvConfig env;  // model, total heartbeats, noise and seed of the simulated application
  bool poisson = false;  // uniform order statistics instead of evenly spaced arrivals
  bool wall_clock = false;
  double connect_timeout_s = 5.0;
};

struct WorkloadSummary {
  ExperimentRecord record;  // client-side view of its own simulated execution
  std::vector<HeartbeatRecord> heartbeats;
  std::vector<double> pcap_set_times;  // t_s of received pcap_set (simulated) or arrival time (wall-clock)
  std::size_t errors = 0;             // error replies received
  bool partial = false;               // stopped by a daemon shutdown

  Json summary_json() const {
    Json j = powercap::summary_json(record);
    j["partial"] = partial;
    j["heartbeats_sent"] = heartbeats.size();
    return j;
  }
};

inline Fd connect_to(const std::filesystem::path& path, double timeout_s) {
  const auto addr = socket_address(path);
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_s);
  for (;;) {
    Fd fd(::socket(AF_UNIX, SOCK_STREAM, 0));
    if (!fd) throw ConnectionError(errno_text("socket"));
    if (::connect(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) return fd;
    if (std::chrono::steady_clock::now() >= deadline)
      throw ConnectionError(errno_text(("connect " + path.string()).c_str()));
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
}

/// Arrival times of the heartbeats completed in one control interval. Heartbeat m
/// completes when the accumulated work reaches m; within the interval the rate is
/// the constant `progress`.
inline std::vector<double> interval_arrivals(const EnvState& before, const StepOutcome& step, double dt,
                                             bool poisson, Rng& rng) {
  std::vector<double> ts;
  const double t0 = before.elapsed;
  const double t1 = step.next_state.elapsed;
  const double p = step.next_state.progress;
  const std::int64_t h = step.heartbeats;
  if (h <= 0) return ts;
  if (poisson) {
    std::uniform_real_distribution<double> u(0.0, dt);
    for (std::int64_t j = 0; j < h; ++j) ts.push_back(t0 + u(rng));
    std::sort(ts.begin(), ts.end());
  } else {
    for (std::int64_t j = 1; j <= h; ++j) {
      const double m = static_cast<double>(before.heartbeats_done + j);
      ts.push_back(t0 + (m - before.work) / p);
    }
  }
  for (std::size_t j = 0; j < ts.size(); ++j) {
    ts[j] = std::min(std::max(ts[j], t0), t1);
    if (ts[j] <= t0) ts[j] = std::nextafter(t0, t1);
    if (j > 0 && ts[j] <= ts[j - 1]) ts[j] = std::nextafter(ts[j - 1], t1 + dt);
  }
  // nudging may push the tail past the window end; those arrivals are dropped
  while (!ts.empty() && ts.back() > t1) ts.pop_back();
  return ts;
}

class WorkloadClient {
 public:
  explicit WorkloadClient(WorkloadOptions opts)
      : opts_(std::move(opts)),
        fd_(connect_to(opts_.socket, opts_.connect_timeout_s)),
        reader_(fd_.get()),
        env_(opts_.env),
        arrivals_(derive_seed(opts_.env.seed, "arrivals")) {}

  WorkloadSummary run() {
    summary_.record.label = "workload";
    summary_.record.seed = opts_.env.seed;
    summary_.record.weights = opts_.env.weights;
    request({{"type", "hello"}});
    if (!action_) throw FormatError("workload: daemon sent no initial pcap_set");
    start_ = std::chrono::steady_clock::now();

    while (!env_.state().done && !summary_.partial) {
      const EnvState before = env_.state();
      const auto step = env_.step(*action_);
      summary_.record.trace.push_back({step.next_state.elapsed, step.pcap, step.next_state.progress,
                                       step.physical_power_w, step.reward});
      summary_.record.episode_reward += step.reward;
      for (double t : interval_arrivals(before, step, opts_.env.dt, opts_.poisson, arrivals_)) {
        if (opts_.wall_clock) wait_until(t);
        summary_.heartbeats.push_back({t, 1});
        request({{"type", "heartbeat"}, {"timestamp_s", t}, {"n", 1}});
        if (summary_.partial) break;
      }
      if (summary_.partial) break;
      if (opts_.wall_clock) {
        wait_until(step.next_state.elapsed);
      } else {
        request({{"type", "progress_report"}, {"window_end_s", step.next_state.elapsed}});
      }
    }
    if (!summary_.partial) request({{"type", "shutdown"}, {"completed", env_.completed()}});
    summary_.record.execution_time_s = env_.state().elapsed;
    summary_.record.energy_kj = env_.state().energy_j / 1000.0;
    summary_.record.truncated = !env_.completed();
    fd_.reset();
    return summary_;
  }

 private:
  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  void handle(const Json& msg) {
    const std::string type = msg.value("type", "");
    if (type == "pcap_set") {
      action_ = msg.at("pcap_w").get<double>();
      summary_.pcap_set_times.push_back(opts_.wall_clock ? elapsed() : msg.at("t_s").get<double>());
    } else if (type == "shutdown") {
      summary_.partial = true;
    } else if (type == "ack" || type == "error") {
      if (type == "error") ++summary_.errors;
      --outstanding_;
    }
  }

  bool drain(int timeout_ms) {
    const auto line = reader_.next(timeout_ms);
    if (!line) {
      if (reader_.timed_out()) return false;
      throw ConnectionError("workload: daemon closed the connection");
    }
    Json msg;
    try {
      msg = Json::parse(*line);
    } catch (const Json::exception& e) {
      throw FormatError(std::string("workload: bad daemon line: ") + e.what());
    }
    handle(msg);
    return true;
  }

  /// Sends one line. In simulated mode waits for its reply; in wall-clock mode
  /// replies are consumed as they come.
  void request(const Json& msg) {
    send_line(fd_.get(), msg);
    ++outstanding_;
    const bool blocking = !opts_.wall_clock || msg.at("type") == "hello" || msg.at("type") == "shutdown";
    if (blocking) {
      while (outstanding_ > 0) drain(-1);
    } else {
      while (drain(0)) {
      }
    }
  }

  void wait_until(double t) {
    for (;;) {
      const double wait = t - elapsed();
      if (wait <= 0.0 || summary_.partial) return;
      drain(static_cast<int>(std::ceil(wait * 1000.0)));
    }
  }

  WorkloadOptions opts_;
  Fd fd_;
  LineReader reader_;
  Environment env_;
  Rng arrivals_;
  WorkloadSummary summary_;
  std::optional<double> action_;
  std::int64_t outstanding_ = 0;
  std::chrono::steady_clock::time_point start_;
};

inline WorkloadSummary run_workload(const WorkloadOptions& opts) { return WorkloadClient(opts).run(); }

}  // namespace powercap::nrmd
