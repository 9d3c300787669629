#pragma once

// Machine-type communication layer: shifted-exponential delay, Bernoulli loss
// with timeout-driven retransmission, latency-budget audits and meter-report
// aggregation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pem/core.hpp"
#include "pem/rng.hpp"

namespace pem {

enum class ChannelClass { URLLC, mMTC };

inline const char* to_string(ChannelClass c) { return c == ChannelClass::URLLC ? "urllc" : "mmtc"; }

enum class MessageKind { PacketRequest, Grant, Reject, MeterReport, TripSignal };

inline constexpr std::array<MessageKind, 5> kAllMessageKinds{MessageKind::PacketRequest, MessageKind::Grant,
                                                             MessageKind::Reject, MessageKind::MeterReport,
                                                             MessageKind::TripSignal};

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::PacketRequest: return "packet_request";
    case MessageKind::Grant: return "grant";
    case MessageKind::Reject: return "reject";
    case MessageKind::MeterReport: return "meter_report";
    case MessageKind::TripSignal: return "trip_signal";
  }
  return "unknown";
}

struct ChannelProfile {
  ChannelClass cls = ChannelClass::URLLC;
  double offset_ms = 1.0;
  /// Overall mean delay; the exponential part has mean (mean_ms - offset_ms).
  double mean_ms = 5.0;
  double loss_prob = 0.001;
  double retransmit_timeout_ms = 20.0;
  int max_attempts = 5;
  /// Constant delay of mean_ms instead of sampling.
  bool deterministic = false;

  void validate() const {
    if (!(offset_ms >= 0.0)) throw Error(ErrorKind::InvalidScenario, "channel offset must be >= 0");
    if (!(mean_ms >= offset_ms)) throw Error(ErrorKind::InvalidScenario, "channel mean must be >= offset");
    if (!(loss_prob >= 0.0 && loss_prob <= 1.0))
      throw Error(ErrorKind::InvalidScenario, "channel loss must be in [0, 1]");
    if (!(retransmit_timeout_ms >= 0.0)) throw Error(ErrorKind::InvalidScenario, "retransmit timeout must be >= 0");
    if (max_attempts < 1) throw Error(ErrorKind::InvalidScenario, "max_attempts must be >= 1");
  }

  /// Lossless and instantaneous.
  bool is_null() const { return loss_prob == 0.0 && mean_ms == 0.0; }

  static ChannelProfile urllc() { return ChannelProfile{ChannelClass::URLLC, 1.0, 5.0, 0.001, 20.0, 5, false}; }
  static ChannelProfile mmtc() { return ChannelProfile{ChannelClass::mMTC, 10.0, 100.0, 0.05, 500.0, 4, false}; }
  static ChannelProfile null_channel(ChannelClass c = ChannelClass::URLLC) {
    return ChannelProfile{c, 0.0, 0.0, 0.0, 0.0, 1, false};
  }

  friend bool operator==(const ChannelProfile&, const ChannelProfile&) = default;
};

struct MessageEnvelope {
  std::uint64_t id = 0;
  MessageKind kind = MessageKind::PacketRequest;
  /// Device or node the message concerns.
  std::string subject;
  double sent_at_ms = 0.0;
  double size = 1.0;  // not used by the delay model
  double value = 0.0;
};

/// Fixed class for protection and metering traffic; control messages follow
/// their configured profile.
inline std::optional<ChannelClass> required_class(MessageKind k) {
  if (k == MessageKind::TripSignal) return ChannelClass::URLLC;
  if (k == MessageKind::MeterReport) return ChannelClass::mMTC;
  return std::nullopt;
}

inline double sample_delay(const ChannelProfile& p, Rng& rng) {
  if (p.deterministic) return p.mean_ms;
  return p.offset_ms + rng.exponential(p.mean_ms - p.offset_ms);
}

struct Delivered {
  double at_ms = 0.0;
  int attempts = 1;
};

struct Dropped {
  int attempts = 0;
};

using TransmitResult = std::variant<Delivered, Dropped>;

/// Each attempt is lost with loss_prob; a lost attempt is retried after the
/// retransmit timeout, up to max_attempts.
inline TransmitResult transmit(const MessageEnvelope& m, const ChannelProfile& p, Rng& rng) {
  double waited = 0.0;
  for (int attempt = 1; attempt <= p.max_attempts; ++attempt) {
    const bool lost = p.loss_prob > 0.0 && rng.uniform() < p.loss_prob;
    if (!lost) return Delivered{m.sent_at_ms + waited + sample_delay(p, rng), attempt};
    waited += p.retransmit_timeout_ms;
  }
  return Dropped{p.max_attempts};
}

/// Per-message stream so outcomes do not depend on evaluation order.
inline TransmitResult transmit(const MessageEnvelope& m, const ChannelProfile& p, std::uint64_t seed) {
  Rng rng(seed, Stream::Channel, m.id);
  return transmit(m, p, rng);
}

// ---------------------------------------------------------------------------
// Budgets

struct LatencyBudget {
  std::map<MessageKind, double> budget_ms{{MessageKind::TripSignal, 100.0},
                                          {MessageKind::PacketRequest, 10.0},
                                          {MessageKind::Grant, 10.0},
                                          {MessageKind::Reject, 10.0},
                                          {MessageKind::MeterReport, 1000.0}};

  double of(MessageKind k) const {
    auto it = budget_ms.find(k);
    return it == budget_ms.end() ? std::numeric_limits<double>::infinity() : it->second;
  }

  void validate() const {
    for (const auto& [k, b] : budget_ms)
      if (!(b > 0.0)) throw Error(ErrorKind::InvalidScenario, std::string("budget for ") + to_string(k) + " must be > 0");
  }

  friend bool operator==(const LatencyBudget&, const LatencyBudget&) = default;
};

struct DeliveryRecord {
  MessageEnvelope message;
  ChannelClass cls = ChannelClass::URLLC;
  bool delivered = false;
  double delivered_at_ms = 0.0;
  int attempts = 0;

  double latency_ms() const { return delivered_at_ms - message.sent_at_ms; }
};

/// Fraction of delivered messages per kind whose end-to-end time exceeds the
/// budget. Every kind is present in the result; kinds with no traffic read 0.
inline std::map<MessageKind, double> audit_budget(std::span<const DeliveryRecord> log, const LatencyBudget& budget) {
  std::map<MessageKind, std::pair<std::size_t, std::size_t>> counts;
  for (auto k : kAllMessageKinds) counts[k] = {0, 0};
  for (const auto& r : log) {
    if (!r.delivered) continue;
    auto& [n, late] = counts[r.message.kind];
    ++n;
    if (r.latency_ms() > budget.of(r.message.kind)) ++late;
  }
  std::map<MessageKind, double> rates;
  for (const auto& [k, c] : counts) rates[k] = c.first == 0 ? 0.0 : static_cast<double>(c.second) / c.first;
  return rates;
}

// ---------------------------------------------------------------------------
// Aggregation

struct AggregationWindow {
  enum class Policy { Periodic, EventBased };
  double window_ms = 600'000.0;
  Policy policy = Policy::Periodic;
  /// Event-based: emit only when |sum - last emitted| >= threshold.
  double threshold_w = 0.0;

  void validate() const {
    if (!(window_ms > 0.0)) throw Error(ErrorKind::InvalidScenario, "aggregation window must be > 0");
    if (!(threshold_w >= 0.0)) throw Error(ErrorKind::InvalidScenario, "aggregation threshold must be >= 0");
  }

  friend bool operator==(const AggregationWindow&, const AggregationWindow&) = default;
};

struct MeterReport {
  std::string device_id;
  double at_ms = 0.0;
  double value_w = 0.0;
};

struct AggregatedReport {
  double window_start_ms = 0.0;
  std::size_t count = 0;
  double sum_w = 0.0;
  double min_w = 0.0;
  double max_w = 0.0;
};

/// Collapses the reports of one window into a single envelope.
inline AggregatedReport aggregate_reports(std::span<const MeterReport> reports, double window_start_ms = 0.0) {
  AggregatedReport a;
  a.window_start_ms = window_start_ms;
  for (const auto& r : reports) {
    if (a.count == 0) {
      a.min_w = a.max_w = r.value_w;
    } else {
      a.min_w = std::min(a.min_w, r.value_w);
      a.max_w = std::max(a.max_w, r.value_w);
    }
    a.sum_w += r.value_w;
    ++a.count;
  }
  return a;
}

/// Stateful event filter for the event-based policy.
class EventGate {
 public:
  explicit EventGate(double threshold) : threshold_(threshold) {}
  bool admit(double value) {
    if (last_ && std::abs(value - *last_) < threshold_) return false;
    last_ = value;
    return true;
  }

 private:
  double threshold_;
  std::optional<double> last_;
};

/// Buckets reports by window (by report time) and applies the window policy.
/// Periodic output conserves the total of all reports.
inline std::vector<AggregatedReport> aggregate_stream(std::span<const MeterReport> reports, const AggregationWindow& w) {
  std::map<long long, std::vector<MeterReport>> buckets;
  for (const auto& r : reports) buckets[static_cast<long long>(std::floor(r.at_ms / w.window_ms))].push_back(r);
  std::vector<AggregatedReport> out;
  EventGate gate(w.threshold_w);
  for (const auto& [index, bucket] : buckets) {
    auto agg = aggregate_reports(bucket, static_cast<double>(index) * w.window_ms);
    if (w.policy == AggregationWindow::Policy::EventBased && !gate.admit(agg.sum_w)) continue;
    out.push_back(agg);
  }
  return out;
}

}  // namespace pem
