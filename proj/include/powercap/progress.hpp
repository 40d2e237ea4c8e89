#pragma once

// Heartbeat-based progress estimation: the progress over a window is the median
// of the per-arrival rates n_k / (t_k - t_{k-1}), where t_{k-1} is the previous
// arrival in the trace (possibly in an earlier window).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "powercap/csv.hpp"
#include "powercap/errors.hpp"

namespace powercap {

struct HeartbeatRecord {
  double timestamp = 0.0;  // seconds, strictly increasing within a trace
  std::int64_t count = 1;  // messages delivered at this instant
};

struct ProgressSample {
  double window_end = 0.0;
  double value = 0.0;  // Hz
  bool empty = false;  // no rate could be formed in the window
};

namespace detail {

inline double median_in_place(std::vector<double>& v) {
  const std::size_t n = v.size();
  const std::size_t mid = n / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double upper = v[mid];
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lower + upper);
}

}  // namespace detail

inline void validate_trace(std::span<const HeartbeatRecord> trace) {
  for (std::size_t i = 0; i < trace.size(); ++i) {
    if (trace[i].count < 1) throw InputError("heartbeat batch count must be >= 1");
    if (!std::isfinite(trace[i].timestamp)) throw InputError("heartbeat timestamp not finite");
    if (i > 0 && !(trace[i].timestamp > trace[i - 1].timestamp))
      throw InputError("heartbeat timestamps must be strictly increasing");
  }
}

/// Median arrival rate over arrivals in (window_start, window_end].
/// An arrival without predecessor contributes no rate; a window without rates is
/// reported as value 0 with `empty` set.
inline ProgressSample compute_progress(std::span<const HeartbeatRecord> trace, double window_start,
                                       double window_end) {
  if (!(window_start < window_end)) throw InputError("window_start must be < window_end");
  auto first = std::upper_bound(trace.begin(), trace.end(), window_start,
                                [](double t, const HeartbeatRecord& r) { return t < r.timestamp; });
  std::vector<double> rates;
  for (auto it = first; it != trace.end() && it->timestamp <= window_end; ++it) {
    if (it == trace.begin()) continue;
    const auto& prev = *std::prev(it);
    rates.push_back(static_cast<double>(it->count) / (it->timestamp - prev.timestamp));
  }
  if (rates.empty()) return {window_end, 0.0, true};
  return {window_end, detail::median_in_place(rates), false};
}

/// Applies compute_progress over consecutive windows (origin + k*dt, origin + (k+1)*dt]
/// covering the whole trace.
inline std::vector<ProgressSample> stream_progress(std::span<const HeartbeatRecord> trace, double dt,
                                                   double origin = 0.0) {
  if (!(dt > 0.0)) throw InputError("stream_progress: dt must be > 0");
  std::vector<ProgressSample> out;
  if (trace.empty()) return out;
  const double span = trace.back().timestamp - origin;
  if (span <= 0.0) return out;
  const auto windows = static_cast<std::size_t>(std::ceil(span / dt));
  out.reserve(windows);
  for (std::size_t k = 0; k < windows; ++k) {
    const double start = origin + static_cast<double>(k) * dt;
    const double end = origin + static_cast<double>(k + 1) * dt;
    out.push_back(compute_progress(trace, start, end));
  }
  return out;
}

/// Incremental form used by the daemon: heartbeats are appended as they arrive and
/// each close() consumes one window. Only the last arrival of a closed window is
/// retained, as predecessor for the next.
class HeartbeatWindow {
 public:
  /// Returns false (and ignores the record) if it violates trace ordering.
  bool append(const HeartbeatRecord& r) {
    if (r.count < 1 || !std::isfinite(r.timestamp)) return false;
    if (last_ && !(r.timestamp > last_->timestamp)) return false;
    pending_.push_back(r);
    last_ = r;
    return true;
  }

  ProgressSample close(double window_start, double window_end) {
    std::vector<HeartbeatRecord> trace;
    if (predecessor_) trace.push_back(*predecessor_);
    std::size_t consumed = 0;
    for (const auto& r : pending_) {
      if (r.timestamp > window_end) break;
      trace.push_back(r);
      ++consumed;
    }
    auto sample = compute_progress(trace, window_start, window_end);
    if (consumed > 0) predecessor_ = pending_[consumed - 1];
    pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(consumed));
    return sample;
  }

  std::size_t pending() const { return pending_.size(); }

 private:
  std::vector<HeartbeatRecord> pending_;
  std::optional<HeartbeatRecord> predecessor_;
  std::optional<HeartbeatRecord> last_;
};

inline std::vector<HeartbeatRecord> read_heartbeat_csv(const std::filesystem::path& path) {
  const auto table = csv::read(path);
  const auto ts = table.column("timestamp_s");
  const auto n = table.column("n");
  std::vector<HeartbeatRecord> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows)
    out.push_back({csv::to_double(row[ts]), static_cast<std::int64_t>(csv::to_double(row[n]))});
  validate_trace(out);
  return out;
}

inline void write_heartbeat_csv(const std::filesystem::path& path,
                                std::span<const HeartbeatRecord> trace) {
  csv::Writer w(path, {"timestamp_s", "n"});
  for (const auto& r : trace) w.values(r.timestamp, static_cast<long long>(r.count));
}

inline void write_progress_csv(const std::filesystem::path& path,
                               std::span<const ProgressSample> samples) {
  csv::Writer w(path, {"window_end_s", "progress_hz", "empty"});
  for (const auto& s : samples) w.values(s.window_end, s.value, s.empty);
}

}  // namespace powercap
