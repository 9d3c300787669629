#pragma once

// Appliance state machines: lumped thermal loads (sauna, water heater), EV
// batteries, fixed-cycle appliances, the renewable trace and the shared
// storage asset. All transitions are pure (state, input) -> state.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "pem/core.hpp"
#include "pem/rng.hpp"

namespace pem {

// ---------------------------------------------------------------------------
// Thermal loads: first-order lumped node, explicit Euler once per slot.

struct ThermalLoadState {
  double temp_c = 20.0;
  double ambient_c = 20.0;
  double capacitance_wh_per_c = 60.0;
  double loss_w_per_c = 10.0;
  double rated_power_w = 3600.0;
  double efficiency = 1.0;

  void validate() const {
    if (!(capacitance_wh_per_c > 0.0)) throw Error(ErrorKind::InvalidScenario, "thermal capacitance must be positive");
    if (!(loss_w_per_c >= 0.0)) throw Error(ErrorKind::InvalidScenario, "thermal loss coefficient must be >= 0");
    if (!(rated_power_w > 0.0)) throw Error(ErrorKind::InvalidScenario, "rated power must be positive");
    if (!(efficiency > 0.0 && efficiency <= 1.0)) throw Error(ErrorKind::InvalidScenario, "efficiency must be in (0, 1]");
    if (!std::isfinite(temp_c) || !std::isfinite(ambient_c)) throw Error(ErrorKind::InvalidScenario, "non-finite temperature");
  }

  friend bool operator==(const ThermalLoadState&, const ThermalLoadState&) = default;
};

inline ThermalLoadState step_thermal(const ThermalLoadState& s, double applied_w, double dt_min) {
  const double p = std::clamp(applied_w, 0.0, s.rated_power_w);
  ThermalLoadState next = s;
  next.temp_c = s.temp_c + (dt_min / 60.0) * (s.efficiency * p - s.loss_w_per_c * (s.temp_c - s.ambient_c)) /
                               s.capacitance_wh_per_c;
  return next;
}

/// Power that lands the next Euler step exactly on `target_c` (unclamped).
inline double thermal_power_to_reach(const ThermalLoadState& s, double target_c, double dt_min) {
  const double h = dt_min / 60.0;
  return (s.capacitance_wh_per_c * (target_c - s.temp_c) / h + s.loss_w_per_c * (s.temp_c - s.ambient_c)) /
         s.efficiency;
}

/// Per-step contraction of the Euler recurrence toward its fixed point.
inline double thermal_step_ratio(const ThermalLoadState& s, double dt_min) {
  return 1.0 - (dt_min / 60.0) * s.loss_w_per_c / s.capacitance_wh_per_c;
}

/// Temperature after `slots` unpowered steps (closed form of the recurrence).
inline double thermal_idle_temp(const ThermalLoadState& s, int slots, double dt_min) {
  if (slots <= 0) return s.temp_c;
  const double r = thermal_step_ratio(s, dt_min);
  return s.ambient_c + (s.temp_c - s.ambient_c) * std::pow(r, slots);
}

/// Fewest full-power steps that reach `target_c` from `temp_c`, or nullopt if
/// the fixed point never gets there.
inline std::optional<int> thermal_full_power_steps(const ThermalLoadState& s, double temp_c, double target_c,
                                                   double dt_min) {
  if (temp_c >= target_c) return 0;
  const double h = dt_min / 60.0;
  const double gain = s.efficiency * s.rated_power_w;
  if (s.loss_w_per_c == 0.0) {
    const double per_step = h * gain / s.capacitance_wh_per_c;
    return static_cast<int>(std::ceil((target_c - temp_c) / per_step - 1e-12));
  }
  const double fixed_point = s.ambient_c + gain / s.loss_w_per_c;
  if (fixed_point <= target_c) return std::nullopt;
  const double r = thermal_step_ratio(s, dt_min);
  if (r <= 0.0) return 1;  // overshoots the fixed point in one step
  // fixed_point - (fixed_point - temp) r^n >= target
  const double n = std::log((fixed_point - target_c) / (fixed_point - temp_c)) / std::log(r);
  int steps = std::max(1, static_cast<int>(std::ceil(n - 1e-12)));
  // Guard the closed form against rounding at the boundary.
  auto reach = [&](int k) { return fixed_point - (fixed_point - temp_c) * std::pow(r, k); };
  while (steps > 1 && reach(steps - 1) >= target_c) --steps;
  while (reach(steps) < target_c) ++steps;
  return steps;
}

// ---------------------------------------------------------------------------
// Batteries

struct BatteryLoadState {
  double soc_wh = 0.0;
  double capacity_wh = 30'000.0;
  double p_max_w = 5000.0;
  int arrival_slot = 0;

  friend bool operator==(const BatteryLoadState&, const BatteryLoadState&) = default;
};

struct BatteryStep {
  BatteryLoadState state;
  double absorbed_wh = 0.0;
};

inline BatteryStep step_battery(const BatteryLoadState& s, double applied_w, double dt_min) {
  const double p = std::clamp(applied_w, 0.0, s.p_max_w);
  BatteryStep out{s, 0.0};
  out.state.soc_wh = std::min(s.capacity_wh, s.soc_wh + p * dt_min / 60.0);
  out.absorbed_wh = out.state.soc_wh - s.soc_wh;
  return out;
}

// ---------------------------------------------------------------------------
// Fixed cycles

struct FixedCycleState {
  std::vector<double> profile_w;
  std::optional<int> started_at;
  int progress = 0;

  bool finished() const { return progress >= static_cast<int>(profile_w.size()); }
  bool running() const { return started_at.has_value() && !finished(); }

  friend bool operator==(const FixedCycleState&, const FixedCycleState&) = default;
};

struct CycleStep {
  FixedCycleState state;
  double consumed_w = 0.0;
};

/// Advances one slot. An in-progress cycle must be granted every slot until done.
inline CycleStep step_cycle(const FixedCycleState& s, bool granted, int slot) {
  CycleStep out{s, 0.0};
  if (s.finished()) return out;
  if (!granted) {
    if (s.started_at) throw Error(ErrorKind::ContiguityViolation, "running cycle was not granted", slot);
    return out;
  }
  if (!s.started_at) out.state.started_at = slot;
  out.consumed_w = s.profile_w[static_cast<std::size_t>(s.progress)];
  out.state.progress = s.progress + 1;
  return out;
}

// ---------------------------------------------------------------------------
// Water heater fleet

struct WaterHeaterParams {
  double t_low_c = 50.0;
  double t_high_c = 60.0;
  double override_margin_c = 2.0;
  double request_rate_max = 0.3;
  /// Thermal node of a single tank; temp_c is ignored (per-heater state).
  ThermalLoadState thermal{55.0, 20.0, 232.0, 2.0, 4500.0, 1.0};
  /// Per-epoch probability of a hot-water draw and its maximum temperature drop.
  double draw_probability = 0.77;
  double draw_max_c = 0.82;
  /// Packet length in epochs.
  int packet_epochs = 5;

  void validate() const {
    if (!(t_low_c < t_high_c)) throw Error(ErrorKind::InvalidScenario, "deadband requires t_low < t_high");
    if (!(request_rate_max > 0.0 && request_rate_max <= 1.0))
      throw Error(ErrorKind::InvalidScenario, "request_rate_max must be in (0, 1]");
    if (!(override_margin_c >= 0.0)) throw Error(ErrorKind::InvalidScenario, "override margin must be >= 0");
    if (!(draw_probability >= 0.0 && draw_probability <= 1.0))
      throw Error(ErrorKind::InvalidScenario, "draw probability must be in [0, 1]");
    if (!(draw_max_c >= 0.0)) throw Error(ErrorKind::InvalidScenario, "draw size must be >= 0");
    if (packet_epochs < 1) throw Error(ErrorKind::InvalidScenario, "packet_epochs must be >= 1");
    thermal.validate();
  }

  friend bool operator==(const WaterHeaterParams&, const WaterHeaterParams&) = default;
};

/// Per-epoch request probability, linear in the position inside the deadband.
inline double fleet_request_probability(double temp_c, const WaterHeaterParams& p) {
  const double x = (p.t_high_c - temp_c) / (p.t_high_c - p.t_low_c);
  return p.request_rate_max * std::clamp(x, 0.0, 1.0);
}

enum class Override { ForceOn, ForceOff, Normal };

inline Override local_override(double temp_c, const WaterHeaterParams& p) {
  if (temp_c < p.t_low_c - p.override_margin_c) return Override::ForceOn;
  if (temp_c > p.t_high_c) return Override::ForceOff;
  return Override::Normal;
}

// ---------------------------------------------------------------------------
// Renewable supply

struct RenewableSpec {
  enum class Kind { None, Fixed, RandomWalk };
  Kind kind = Kind::None;
  std::vector<double> values_w;  // Fixed; shorter traces hold the last value
  double mean_w = 0.0;           // RandomWalk
  double volatility_w = 0.0;
  double reversion = 0.2;
  double max_w = 0.0;  // 0 = unbounded above
  double initial_w = 0.0;

  void validate() const {
    for (double v : values_w)
      if (!(v >= 0.0) || !std::isfinite(v)) throw Error(ErrorKind::InvalidScenario, "renewable values must be >= 0");
    if (kind == Kind::Fixed && values_w.empty()) throw Error(ErrorKind::InvalidScenario, "fixed renewable trace is empty");
    if (kind == Kind::RandomWalk) {
      if (!(mean_w >= 0.0) || !(volatility_w >= 0.0) || !(initial_w >= 0.0) || !(max_w >= 0.0))
        throw Error(ErrorKind::InvalidScenario, "random-walk parameters must be >= 0");
      if (!(reversion >= 0.0 && reversion <= 1.0)) throw Error(ErrorKind::InvalidScenario, "reversion must be in [0, 1]");
    }
  }

  friend bool operator==(const RenewableSpec&, const RenewableSpec&) = default;
};

/// Per-slot available power. Random walks are mean-reverting and clipped to
/// [0, max_w]; equal seeds give identical traces.
inline std::vector<double> generate_renewable(const RenewableSpec& spec, int horizon, std::uint64_t seed) {
  std::vector<double> out(static_cast<std::size_t>(horizon), 0.0);
  switch (spec.kind) {
    case RenewableSpec::Kind::None:
      break;
    case RenewableSpec::Kind::Fixed:
      for (int i = 0; i < horizon; ++i)
        out[static_cast<std::size_t>(i)] =
            spec.values_w[std::min(static_cast<std::size_t>(i), spec.values_w.size() - 1)];
      break;
    case RenewableSpec::Kind::RandomWalk: {
      Rng rng(seed, Stream::Renewable);
      const double hi = spec.max_w > 0.0 ? spec.max_w : INFINITY;
      double x = std::clamp(spec.initial_w, 0.0, hi);
      for (int i = 0; i < horizon; ++i) {
        out[static_cast<std::size_t>(i)] = x;
        x += spec.reversion * (spec.mean_w - x) + spec.volatility_w * rng.normal();
        x = std::clamp(x, 0.0, hi);
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Storage

struct StorageAsset {
  double soc_wh = 0.0;
  double capacity_wh = 0.0;
  double p_charge_max_w = 0.0;
  double p_discharge_max_w = 0.0;
  /// Applied on charge only.
  double efficiency = 1.0;

  void validate() const {
    if (!(capacity_wh >= 0.0) || !(soc_wh >= 0.0) || soc_wh > capacity_wh)
      throw Error(ErrorKind::InvalidScenario, "storage soc must lie in [0, capacity]");
    if (!(p_charge_max_w >= 0.0) || !(p_discharge_max_w >= 0.0))
      throw Error(ErrorKind::InvalidScenario, "storage power limits must be >= 0");
    if (!(efficiency > 0.0 && efficiency <= 1.0)) throw Error(ErrorKind::InvalidScenario, "storage efficiency must be in (0, 1]");
  }

  double max_charge_w(double dt_min) const {
    const double h = dt_min / 60.0;
    return std::max(0.0, std::min(p_charge_max_w, (capacity_wh - soc_wh) / (efficiency * h)));
  }
  double max_discharge_w(double dt_min) const {
    const double h = dt_min / 60.0;
    return std::max(0.0, std::min(p_discharge_max_w, soc_wh / h));
  }

  friend bool operator==(const StorageAsset&, const StorageAsset&) = default;
};

struct StorageStep {
  StorageAsset state;
  /// Signed power actually exchanged: > 0 charging, < 0 discharging.
  double actual_w = 0.0;
};

inline StorageStep step_storage(const StorageAsset& s, double command_w, double dt_min) {
  const double h = dt_min / 60.0;
  StorageStep out{s, 0.0};
  if (command_w > 0.0) {
    const double p = std::min(command_w, s.max_charge_w(dt_min));
    out.actual_w = p;
    out.state.soc_wh = std::min(s.capacity_wh, s.soc_wh + p * s.efficiency * h);
  } else if (command_w < 0.0) {
    const double p = std::min(-command_w, s.max_discharge_w(dt_min));
    out.actual_w = -p;
    out.state.soc_wh = std::max(0.0, s.soc_wh - p * h);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Device descriptors as they appear in a scenario.

struct ThermalDeviceConfig {
  std::string id;
  Priority priority;
  ThermalLoadState thermal;  // temp_c is the initial temperature
  double target_temp_c = 70.0;
  /// Thermostat cut-off; heating never pushes the node above this.
  double max_temp_c = 80.0;
  int request_at = 0;
  int preheat_from = 0;
  int force_check_at = 0;
  int service_start = 0;
  int service_end = 0;

  friend bool operator==(const ThermalDeviceConfig&, const ThermalDeviceConfig&) = default;
};

struct BatteryDeviceConfig {
  std::string id;
  Priority priority;
  double capacity_wh = 30'000.0;
  double p_max_w = 5000.0;
  double packet_w = 1000.0;
  int arrival = 0;
  int deadline = 0;
  /// Fixed initial soc; when absent it is drawn uniformly from the fraction range.
  std::optional<double> initial_soc_wh;
  double initial_soc_min_fraction = 0.0;
  double initial_soc_max_fraction = 0.5;
  /// Energy level to reach by the deadline; absent = full.
  std::optional<double> target_soc_wh;

  double target() const { return target_soc_wh.value_or(capacity_wh); }

  friend bool operator==(const BatteryDeviceConfig&, const BatteryDeviceConfig&) = default;
};

struct CycleDeviceConfig {
  std::string id;
  Priority priority;
  std::vector<double> profile_w;
  int earliest_start = 0;
  int deadline = 0;
  int request_at = 0;

  int latest_start() const { return deadline - static_cast<int>(profile_w.size()); }

  friend bool operator==(const CycleDeviceConfig&, const CycleDeviceConfig&) = default;
};

struct HeaterFleetConfig {
  std::string id;
  int count = 0;
  WaterHeaterParams params;
  /// Per-epoch aggregate target; shorter lists hold the last value.
  std::vector<double> reference_w;

  double reference_at(int epoch) const {
    if (reference_w.empty()) return 0.0;
    return reference_w[std::min(static_cast<std::size_t>(std::max(epoch, 0)), reference_w.size() - 1)];
  }

  friend bool operator==(const HeaterFleetConfig&, const HeaterFleetConfig&) = default;
};

using DeviceConfig = std::variant<ThermalDeviceConfig, BatteryDeviceConfig, CycleDeviceConfig, HeaterFleetConfig>;

inline const std::string& device_id(const DeviceConfig& d) {
  return std::visit([](const auto& c) -> const std::string& { return c.id; }, d);
}

inline const char* device_type(const DeviceConfig& d) {
  switch (d.index()) {
    case 0: return "thermal";
    case 1: return "battery";
    case 2: return "cycle";
    default: return "heater_fleet";
  }
}

}  // namespace pem
