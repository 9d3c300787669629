#pragma once

// Time grid, energy packets and the request/grant vocabulary shared by every
// other part of the simulator.

#include <charconv>
#include <compare>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace pem {

enum class ErrorKind {
  MalformedRequest,
  WindowInfeasible,
  CapacityExceeded,
  InfeasibleDeadline,
  ContiguityViolation,
  CapacityViolation,
  UnderSupply,
  InvalidScenario,
  InvariantViolation,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::MalformedRequest: return "MalformedRequest";
    case ErrorKind::WindowInfeasible: return "WindowInfeasible";
    case ErrorKind::CapacityExceeded: return "CapacityExceeded";
    case ErrorKind::InfeasibleDeadline: return "InfeasibleDeadline";
    case ErrorKind::ContiguityViolation: return "ContiguityViolation";
    case ErrorKind::CapacityViolation: return "CapacityViolation";
    case ErrorKind::UnderSupply: return "UnderSupply";
    case ErrorKind::InvalidScenario: return "InvalidScenario";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what, int slot = -1)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind), slot_(slot) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Slot the failure refers to, or -1 when it is not slot-specific.
  int slot() const noexcept { return slot_; }

  /// Errors the engine raises when its own bookkeeping is inconsistent.
  bool is_internal() const noexcept {
    return kind_ == ErrorKind::CapacityViolation || kind_ == ErrorKind::ContiguityViolation ||
           kind_ == ErrorKind::InvariantViolation || kind_ == ErrorKind::UnderSupply;
  }

 private:
  ErrorKind kind_;
  int slot_;
};

// ---------------------------------------------------------------------------
// Clock strings

/// Parses "HH:MM" into minutes. Hours may exceed 23 ("24:00" is midnight at
/// the end of the day).
inline int parse_clock(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos || colon == 0 || colon + 3 != text.size())
    throw Error(ErrorKind::InvalidScenario, "time '" + std::string(text) + "' is not HH:MM");
  int hours = 0;
  int minutes = 0;
  auto h = std::from_chars(text.data(), text.data() + colon, hours);
  auto m = std::from_chars(text.data() + colon + 1, text.data() + text.size(), minutes);
  if (h.ec != std::errc{} || h.ptr != text.data() + colon || m.ec != std::errc{} ||
      m.ptr != text.data() + text.size() || hours < 0 || minutes < 0 || minutes > 59)
    throw Error(ErrorKind::InvalidScenario, "time '" + std::string(text) + "' is not HH:MM");
  return hours * 60 + minutes;
}

inline std::string format_clock(int minutes) {
  const int h = minutes / 60;
  const int m = minutes % 60;
  std::string out;
  if (h < 10) out += '0';
  out += std::to_string(h);
  out += ':';
  if (m < 10) out += '0';
  out += std::to_string(m);
  return out;
}

// ---------------------------------------------------------------------------
// TimeGrid

/// Slot s covers [epoch_start + s*slot_len, epoch_start + (s+1)*slot_len).
/// Boundaries run from 0 to horizon inclusive; deadlines may sit on the last
/// boundary.
struct TimeGrid {
  int epoch_start_min = 0;
  int slot_len_min = 10;
  int horizon = 1;

  static TimeGrid make(int epoch_start_min, int slot_len_min, int horizon) {
    TimeGrid g{epoch_start_min, slot_len_min, horizon};
    g.validate();
    return g;
  }

  void validate() const {
    if (slot_len_min <= 0) throw Error(ErrorKind::InvalidScenario, "slot length must be positive");
    if (horizon < 1) throw Error(ErrorKind::InvalidScenario, "horizon must be at least one slot");
    if (epoch_start_min < 0) throw Error(ErrorKind::InvalidScenario, "epoch start must be non-negative");
  }

  double slot_hours() const { return slot_len_min / 60.0; }
  double slot_ms() const { return slot_len_min * 60'000.0; }
  int minute_of(int slot) const { return epoch_start_min + slot * slot_len_min; }
  std::string clock(int slot) const { return format_clock(minute_of(slot)); }
  bool is_boundary(int slot) const { return slot >= 0 && slot <= horizon; }

  /// Boundary index for an absolute minute-of-day; the minute must sit on the grid.
  int slot_of_minute(int minute) const {
    const int offset = minute - epoch_start_min;
    if (offset % slot_len_min != 0)
      throw Error(ErrorKind::InvalidScenario,
                  format_clock(minute) + " is not a multiple of the " + std::to_string(slot_len_min) +
                      "-minute slot");
    const int slot = offset / slot_len_min;
    if (!is_boundary(slot))
      throw Error(ErrorKind::InvalidScenario, format_clock(minute) + " lies outside the horizon");
    return slot;
  }

  int slot_of(std::string_view hhmm) const { return slot_of_minute(parse_clock(hhmm)); }

  /// First slot boundary at or after a channel time measured from the epoch start.
  int slot_at_or_after_ms(double ms) const {
    if (ms <= 0.0) return 0;
    return static_cast<int>(std::ceil(ms / slot_ms()));
  }

  friend bool operator==(const TimeGrid&, const TimeGrid&) = default;
};

// ---------------------------------------------------------------------------
// Energy packets

struct PacketSpec {
  double power_w = 0.0;
  int duration_slots = 1;
  double energy_wh = 0.0;

  friend bool operator==(const PacketSpec&, const PacketSpec&) = default;
};

inline PacketSpec make_packet(double power_w, int duration_slots, int slot_len_min) {
  if (!(power_w > 0.0) || !std::isfinite(power_w))
    throw Error(ErrorKind::MalformedRequest, "packet power must be positive");
  if (duration_slots < 1) throw Error(ErrorKind::MalformedRequest, "packet duration must be at least one slot");
  if (slot_len_min <= 0) throw Error(ErrorKind::MalformedRequest, "slot length must be positive");
  // One rounding only: the integer minute count is exact.
  const double minutes = static_cast<double>(duration_slots) * slot_len_min;
  return PacketSpec{power_w, duration_slots, power_w * minutes / 60.0};
}

/// One-slot packet of the given power.
inline PacketSpec quantize(double power_w, int slot_len_min) { return make_packet(power_w, 1, slot_len_min); }

// ---------------------------------------------------------------------------
// Requests and decisions

/// Lower level = more important. Ties are broken by the server's seeded shuffle.
struct Priority {
  int level = 0;
  friend auto operator<=>(const Priority&, const Priority&) = default;
};

/// All-or-nothing contiguous run of a fixed per-slot profile.
struct FixedProfile {
  std::vector<double> profile_w;
  int earliest_start = 0;
  int latest_start = 0;
  friend bool operator==(const FixedProfile&, const FixedProfile&) = default;
};

/// Energy that may be spread over [available_from, deadline) at up to p_max.
struct FlexibleTotal {
  double energy_wh = 0.0;
  double p_max_w = 0.0;
  int available_from = 0;
  int deadline = 0;
  friend bool operator==(const FlexibleTotal&, const FlexibleTotal&) = default;
};

/// Reach target_temp by service_start and hold it until service_end.
struct ThermalTarget {
  double target_temp_c = 0.0;
  int service_start = 0;
  int service_end = 0;
  int preheat_from = 0;
  int force_check_at = 0;
  friend bool operator==(const ThermalTarget&, const ThermalTarget&) = default;
};

using RequestKind = std::variant<FixedProfile, FlexibleTotal, ThermalTarget>;

struct LoadRequest {
  std::string device_id;
  RequestKind kind;
  Priority priority;
  int issued_at = 0;
};

inline const char* kind_name(const RequestKind& k) {
  switch (k.index()) {
    case 0: return "fixed_profile";
    case 1: return "flexible_total";
    default: return "thermal_target";
  }
}

enum class RejectReason { CapacityExceeded, WindowInfeasible, MalformedRequest };

inline const char* to_string(RejectReason r) {
  switch (r) {
    case RejectReason::CapacityExceeded: return "CapacityExceeded";
    case RejectReason::WindowInfeasible: return "WindowInfeasible";
    case RejectReason::MalformedRequest: return "MalformedRequest";
  }
  return "Unknown";
}

struct Accept {
  /// Maximum power the device may draw in each slot of the horizon.
  std::vector<double> envelope_w;
  int forced_start = 0;
};

struct Reject {
  RejectReason reason = RejectReason::MalformedRequest;
  /// First violating slot for CapacityExceeded, -1 otherwise.
  int slot = -1;
  std::string detail;
};

struct GrantDecision {
  std::variant<Accept, Reject> outcome;

  bool accepted() const { return std::holds_alternative<Accept>(outcome); }
  const Accept& accept() const { return std::get<Accept>(outcome); }
  const Reject& reject() const { return std::get<Reject>(outcome); }
};

struct RequestError {
  RejectReason reason;
  std::string detail;
};

/// Absolute slack for energy comparisons: needs are resolved to 0.1 Wh.
inline constexpr double kEnergyToleranceWh = 0.05;

/// Structural check of a request against the grid. Capacity is not looked at here.
inline std::optional<RequestError> validate_request(const LoadRequest& r, const TimeGrid& grid) {
  auto malformed = [](std::string d) { return RequestError{RejectReason::MalformedRequest, std::move(d)}; };
  auto window = [](std::string d) { return RequestError{RejectReason::WindowInfeasible, std::move(d)}; };
  auto on_grid = [&](int s) { return grid.is_boundary(s); };

  if (r.device_id.empty()) return malformed("empty device id");
  if (r.issued_at < 0 || r.issued_at >= grid.horizon) return malformed("issue slot outside the horizon");

  if (const auto* f = std::get_if<FixedProfile>(&r.kind)) {
    if (f->profile_w.empty()) return malformed("empty profile");
    for (double w : f->profile_w)
      if (!(w >= 0.0) || !std::isfinite(w)) return malformed("negative or non-finite profile power");
    if (!on_grid(f->earliest_start) || !on_grid(f->latest_start)) return malformed("start window outside the horizon");
    if (f->latest_start < f->earliest_start) return window("latest start precedes earliest start");
    const auto len = static_cast<int>(f->profile_w.size());
    if (f->latest_start + len > grid.horizon) return window("profile would run past the horizon");
    return std::nullopt;
  }
  if (const auto* x = std::get_if<FlexibleTotal>(&r.kind)) {
    if (!(x->energy_wh >= 0.0) || !std::isfinite(x->energy_wh)) return malformed("negative energy need");
    if (!(x->p_max_w > 0.0) || !std::isfinite(x->p_max_w)) return malformed("maximum power must be positive");
    if (!on_grid(x->available_from) || !on_grid(x->deadline)) return malformed("window outside the horizon");
    if (x->deadline <= x->available_from) return window("deadline not after availability");
    const double reachable = x->p_max_w * (x->deadline - x->available_from) * grid.slot_hours();
    if (x->energy_wh > reachable + kEnergyToleranceWh) return window("energy need exceeds p_max over the window");
    return std::nullopt;
  }
  const auto& t = std::get<ThermalTarget>(r.kind);
  if (!std::isfinite(t.target_temp_c)) return malformed("non-finite target temperature");
  for (int s : {t.preheat_from, t.force_check_at, t.service_start, t.service_end})
    if (!on_grid(s)) return malformed("thermal window outside the horizon");
  if (t.service_start <= t.preheat_from) return window("service start not after preheat start");
  if (t.service_end <= t.service_start) return window("service end not after service start");
  if (t.force_check_at < t.preheat_from || t.force_check_at > t.service_start)
    return window("force check outside the preheat window");
  return std::nullopt;
}

}  // namespace pem
