#pragma once

// Slot-driven simulation loop. Each slot runs the same seven phases:
//   1 deliver due messages   2 devices emit requests   3 server admits
//   4 server allocates       5 supply dispatch         6 device physics
//   7 metrics
// Household scenarios (thermal / battery / cycle devices) and heater-fleet
// scenarios run on separate grids and share the dispatch and audit code.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "pem/comms.hpp"
#include "pem/core.hpp"
#include "pem/devices.hpp"
#include "pem/rng.hpp"
#include "pem/scenario.hpp"
#include "pem/server.hpp"

namespace pem {

struct SlotRecord {
  int slot = 0;
  std::vector<double> granted_w;
  std::vector<double> consumed_w;
  double renewable_available_w = 0.0;
  double renewable_used_w = 0.0;
  double storage_soc_wh = 0.0;
  /// Signed: > 0 charging, < 0 discharging.
  double storage_flow_w = 0.0;
  double storage_charge_w = 0.0;
  double storage_discharge_w = 0.0;
  double imported_w = 0.0;
  double curtailed_w = 0.0;
  bool emergency = false;

  friend bool operator==(const SlotRecord&, const SlotRecord&) = default;
};

enum class RequestStatus { NotIssued, Pending, Completed, DeadlineMissed, ServiceFailed, Aborted };

inline const char* to_string(RequestStatus s) {
  switch (s) {
    case RequestStatus::NotIssued: return "not_issued";
    case RequestStatus::Pending: return "pending";
    case RequestStatus::Completed: return "completed";
    case RequestStatus::DeadlineMissed: return "deadline_missed";
    case RequestStatus::ServiceFailed: return "service_failed";
    case RequestStatus::Aborted: return "aborted";
  }
  return "unknown";
}

struct RequestOutcome {
  std::string device_id;
  std::string kind;
  int priority = 0;
  int first_issued = -1;
  /// Requests sent, including retries.
  int attempts = 0;
  int rejections = 0;
  int requests_lost = 0;
  int grants_lost = 0;
  bool accepted = false;
  /// Slot the Accept reached the device.
  int accepted_at = -1;
  int forced_start = -1;
  int first_consumption = -1;
  int completion = -1;
  int deadline = -1;
  RequestStatus status = RequestStatus::NotIssued;
  std::optional<RejectReason> last_reject;

  int retries() const { return std::max(0, attempts - 1); }
  std::optional<int> waiting_slots() const {
    if (first_issued < 0 || first_consumption < 0) return std::nullopt;
    return first_consumption - first_issued;
  }
  bool deadline_met() const { return status == RequestStatus::Completed; }

  friend bool operator==(const RequestOutcome&, const RequestOutcome&) = default;
};

struct FleetEpochRecord {
  int slot = 0;
  double reference_w = 0.0;
  double aggregate_w = 0.0;
  int requests = 0;
  int accepted = 0;
  int force_on = 0;
  int force_off = 0;
  int on = 0;
  double mean_temp_c = 0.0;
  double min_temp_c = 0.0;
  double max_temp_c = 0.0;
  int band_violations = 0;

  friend bool operator==(const FleetEpochRecord&, const FleetEpochRecord&) = default;
};

struct RunResult {
  std::uint64_t seed = 0;
  TimeGrid grid;
  std::vector<std::string> device_ids;
  std::vector<SlotRecord> slots;
  std::vector<RequestOutcome> requests;
  std::vector<FleetEpochRecord> fleet;
  /// Device state at the end of each slot: temperature (C) for thermal
  /// devices, soc (Wh) for batteries, progress (slots) for cycles, mean
  /// temperature for a fleet. initial_state holds the values before slot 0.
  std::vector<double> initial_state;
  std::vector<std::vector<double>> state_trace;
  std::vector<double> renewable_trace;
  std::optional<StorageAsset> initial_storage;
  std::optional<StorageAsset> final_storage;
  std::vector<ShedEvent> sheds;
  std::vector<DeliveryRecord> messages;
  std::vector<MeterReport> delivered_reports;
  std::vector<AggregatedReport> aggregated_reports;
  std::map<MessageKind, double> violation_rates;

  /// State of one device at boundary b (0..horizon).
  double state_at_boundary(std::size_t device, int boundary) const {
    if (boundary <= 0) return initial_state.at(device);
    return state_trace.at(static_cast<std::size_t>(boundary - 1)).at(device);
  }
  std::optional<std::size_t> device_index(const std::string& id) const {
    for (std::size_t i = 0; i < device_ids.size(); ++i)
      if (device_ids[i] == id) return i;
    return std::nullopt;
  }
};

// ---------------------------------------------------------------------------

namespace detail {

/// Neumaier-compensated accumulator.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x))
      c_ += (sum_ - t) + x;
    else
      c_ += (x - t) + sum_;
    sum_ = t;
  }
  double value() const { return sum_ + c_; }

 private:
  double sum_ = 0.0;
  double c_ = 0.0;
};

/// Message transport shared by both loops. Disabled channels deliver
/// instantly and log nothing.
class Transport {
 public:
  Transport(const Scenario& s) : cfg_(s.channels), grid_(s.grid), seed_(s.seed) {}

  bool enabled() const { return cfg_.enabled; }
  bool instantaneous(MessageKind k) const { return !cfg_.enabled || cfg_.profile(k).is_null(); }

  /// Slots between sending at a boundary and being able to act on it.
  int lag_slots(MessageKind k) const { return instantaneous(k) ? 0 : 1; }

  /// Delivery boundary, or nullopt if the message was dropped.
  std::optional<int> send(MessageKind kind, const std::string& subject, double sent_at_ms, double value = 0.0) {
    if (!cfg_.enabled) return grid_.slot_at_or_after_ms(sent_at_ms);
    MessageEnvelope m{next_id_++, kind, subject, sent_at_ms, 1.0, value};
    const ChannelProfile& p = cfg_.profile(kind);
    const auto result = transmit(m, p, seed_);
    DeliveryRecord rec{m, p.cls, false, 0.0, 0};
    std::optional<int> slot;
    if (const auto* d = std::get_if<Delivered>(&result)) {
      rec.delivered = true;
      rec.delivered_at_ms = d->at_ms;
      rec.attempts = d->attempts;
      slot = grid_.slot_at_or_after_ms(d->at_ms);
      if (kind == MessageKind::MeterReport) reports_.push_back(MeterReport{subject, d->at_ms, value});
    } else {
      rec.attempts = std::get<Dropped>(result).attempts;
    }
    log_.push_back(std::move(rec));
    return slot;
  }

  /// Synthetic protection traffic for one slot.
  void emit_trips(int slot, Rng& rng) {
    if (!cfg_.enabled || cfg_.trip_rate_per_hour <= 0.0) return;
    const int n = rng.poisson(cfg_.trip_rate_per_hour * grid_.slot_hours());
    std::vector<double> times(static_cast<std::size_t>(n));
    for (auto& t : times) t = (slot + rng.uniform()) * grid_.slot_ms();
    std::sort(times.begin(), times.end());
    for (double t : times) send(MessageKind::TripSignal, "feeder", t);
  }

  void emit_meter_report(int slot, const std::string& device, double consumed_w) {
    if (!cfg_.enabled || !cfg_.meter_reports) return;
    send(MessageKind::MeterReport, device, (slot + 1) * grid_.slot_ms(), consumed_w);
  }

  void finish(RunResult& out) {
    out.violation_rates = audit_budget(log_, cfg_.budget);
    out.aggregated_reports = aggregate_stream(reports_, cfg_.aggregation);
    out.delivered_reports = std::move(reports_);
    out.messages = std::move(log_);
  }

 private:
  const ChannelConfig& cfg_;
  TimeGrid grid_;
  std::uint64_t seed_;
  std::uint64_t next_id_ = 1;
  std::vector<DeliveryRecord> log_;
  std::vector<MeterReport> reports_;
};

struct SlotSupply {
  Dispatch dispatch;
  bool emergency = false;
};

inline void fill_supply(SlotRecord& rec, const Dispatch& d, const std::optional<StorageAsset>& storage) {
  rec.renewable_used_w = d.renewable_used_w;
  rec.storage_charge_w = d.storage_charge_w;
  rec.storage_discharge_w = d.storage_discharge_w;
  rec.storage_flow_w = d.storage_charge_w - d.storage_discharge_w;
  rec.imported_w = d.imported_w;
  rec.curtailed_w = d.curtailed_w;
  rec.storage_soc_wh = storage ? storage->soc_wh : 0.0;
}

// ---------------------------------------------------------------------------
// Household loop

class HouseholdRun {
 public:
  explicit HouseholdRun(const Scenario& s)
      : s_(s),
        grid_(s.grid),
        h_(s.grid.slot_hours()),
        ledger_(s.grid.horizon),
        transport_(s),
        alloc_rng_(s.seed, Stream::Server, 0),
        admit_rng_(s.seed, Stream::Server, 1),
        trip_rng_(s.seed, Stream::Trips),
        storage_(s.storage) {
    Rng init_rng(s.seed, Stream::DeviceInit);
    for (std::size_t i = 0; i < s.devices.size(); ++i) {
      Device d;
      d.config = &s.devices[i];
      d.id = device_id(s.devices[i]);
      d.backoff_rng = Rng(s.seed, Stream::Backoff, i);
      d.outcome.device_id = d.id;
      if (const auto* t = std::get_if<ThermalDeviceConfig>(d.config)) {
        d.priority = t->priority;
        d.thermal = t->thermal;
        d.next_request = t->request_at;
        d.outcome.kind = "thermal_target";
        d.outcome.deadline = t->service_start;
      } else if (const auto* b = std::get_if<BatteryDeviceConfig>(d.config)) {
        d.priority = b->priority;
        double soc = 0.0;
        if (b->initial_soc_wh)
          soc = *b->initial_soc_wh;
        else
          soc = b->capacity_wh * init_rng.uniform(b->initial_soc_min_fraction, b->initial_soc_max_fraction);
        d.battery = BatteryLoadState{soc, b->capacity_wh, b->p_max_w, b->arrival};
        d.next_request = b->arrival;
        d.outcome.kind = "flexible_total";
        d.outcome.deadline = b->deadline;
      } else {
        const auto& c = std::get<CycleDeviceConfig>(*d.config);
        d.priority = c.priority;
        d.cycle.profile_w = c.profile_w;
        d.next_request = c.request_at;
        d.outcome.kind = "fixed_profile";
        d.outcome.deadline = c.deadline;
      }
      d.outcome.priority = d.priority.level;
      devices_.push_back(std::move(d));
    }
  }

  RunResult run() {
    RunResult out;
    out.seed = s_.seed;
    out.grid = grid_;
    for (const auto& d : devices_) out.device_ids.push_back(d.id);
    out.renewable_trace = generate_renewable(s_.renewable, grid_.horizon, s_.seed);
    out.initial_storage = storage_;
    out.initial_state = state_vector();

    for (int t = 0; t < grid_.horizon; ++t) {
      deliver(t);
      emit_requests(t);
      admit_queued(t);
      auto demands = build_demands(t);
      SupplyView supply{out.renewable_trace[static_cast<std::size_t>(t)], storage_, s_.import_allowed,
                        s_.feeder_capacity_w};
      auto alloc = allocate_slot(ledger_, demands.items, supply, AllocationPolicy{s_.policy.renewable_first},
                                 alloc_rng_, t);
      check_capacity(alloc, t);

      SlotRecord rec;
      rec.slot = t;
      rec.granted_w.assign(devices_.size(), 0.0);
      rec.consumed_w.assign(devices_.size(), 0.0);
      rec.renewable_available_w = supply.renewable_w;
      std::vector<bool> forced(devices_.size(), false);
      for (std::size_t k = 0; k < demands.items.size(); ++k) {
        rec.granted_w[demands.owner[k]] = alloc.granted_w[k];
        forced[demands.owner[k]] = alloc.forced[k] || demands.items[k].forced_w > 0.0;
      }
      std::vector<double> applied = consumption(rec.granted_w, demands, alloc, t);

      auto dispatch = dispatch_supply(sum(applied), supply, grid_.slot_len_min);
      if (dispatch.unmet_w > 1e-9) {
        rec.emergency = true;
        if (!s_.policy.emergency_shedding)
          throw Error(ErrorKind::UnderSupply,
                      std::to_string(dispatch.unmet_w) + " W uncovered with import disallowed", t);
        shed(applied, forced, dispatch.unmet_w, t, out);
        dispatch = dispatch_supply(sum(applied), supply, grid_.slot_len_min);
      }
      storage_ = dispatch.storage_after;
      fill_supply(rec, dispatch, storage_);
      rec.consumed_w = applied;

      step_physics(applied, rec.granted_w, t);
      out.state_trace.push_back(state_vector());
      for (std::size_t i = 0; i < devices_.size(); ++i) transport_.emit_meter_report(t, devices_[i].id, applied[i]);
      transport_.emit_trips(t, trip_rng_);
      out.slots.push_back(std::move(rec));
    }
    close_out();
    for (auto& d : devices_) out.requests.push_back(d.outcome);
    out.sheds.insert(out.sheds.end(), sheds_.begin(), sheds_.end());
    out.final_storage = storage_;
    transport_.finish(out);
    return out;
  }

 private:
  enum class Phase { Idle, InFlight, Active, Done };

  struct Device {
    const DeviceConfig* config = nullptr;
    std::string id;
    Priority priority;
    ThermalLoadState thermal;
    BatteryLoadState battery;
    FixedCycleState cycle;
    Phase phase = Phase::Idle;
    int next_request = -1;
    int active_from = -1;
    Rng backoff_rng{0};
    RequestOutcome outcome;
  };

  struct Demands {
    std::vector<SlotDemand> items;
    std::vector<std::size_t> owner;
  };

  static double sum(const std::vector<double>& v) {
    CompensatedSum s;
    for (double x : v) s.add(x);
    return s.value();
  }

  std::vector<double> state_vector() const {
    std::vector<double> v;
    for (const auto& d : devices_) {
      switch (d.config->index()) {
        case 0: v.push_back(d.thermal.temp_c); break;
        case 1: v.push_back(d.battery.soc_wh); break;
        default: v.push_back(static_cast<double>(d.cycle.progress)); break;
      }
    }
    return v;
  }

  int request_lag() const { return transport_.lag_slots(MessageKind::PacketRequest); }
  int grant_lag() const { return transport_.lag_slots(MessageKind::Grant); }

  /// Latest slot at which a fresh request could still be admitted.
  int last_viable_slot(const Device& d, int now) const {
    const int lags = request_lag() + grant_lag();
    if (const auto* t = std::get_if<ThermalDeviceConfig>(d.config)) {
      const auto s = detail::thermal_latest_start(d.thermal, t->target_temp_c, now, std::max(now, t->preheat_from),
                                                  t->service_start, grid_.slot_len_min);
      return s ? *s - lags : -1;
    }
    if (const auto* b = std::get_if<BatteryDeviceConfig>(d.config)) {
      try {
        return compute_forced_start(std::max(0.0, b->target() - d.battery.soc_wh), b->p_max_w, b->deadline, grid_,
                                    0) -
               lags;
      } catch (const Error&) {
        return -1;
      }
    }
    return std::get<CycleDeviceConfig>(*d.config).latest_start() - lags;
  }

  LoadRequest make_request(const Device& d, int now) const {
    LoadRequest r;
    r.device_id = d.id;
    r.priority = d.priority;
    r.issued_at = now;
    if (const auto* t = std::get_if<ThermalDeviceConfig>(d.config)) {
      r.kind = ThermalTarget{t->target_temp_c, t->service_start, t->service_end, t->preheat_from, t->force_check_at};
    } else if (const auto* b = std::get_if<BatteryDeviceConfig>(d.config)) {
      r.kind = FlexibleTotal{std::max(0.0, b->target() - d.battery.soc_wh), b->p_max_w, std::max(b->arrival, now),
                             b->deadline};
    } else {
      const auto& c = std::get<CycleDeviceConfig>(*d.config);
      r.kind = FixedProfile{c.profile_w, c.earliest_start, c.latest_start()};
    }
    return r;
  }

  void fail(Device& d, RequestStatus status) {
    d.phase = Phase::Done;
    d.outcome.status = status;
    ledger_.release(d.id);
  }

  void schedule_retry(Device& d, int from) {
    const auto next = handle_rejection_retry(from, last_viable_slot(d, from), RetryPolicy{s_.policy.backoff_max},
                                             d.backoff_rng);
    if (!next) {
      fail(d, RequestStatus::ServiceFailed);
      return;
    }
    d.phase = Phase::Idle;
    d.next_request = *next;
  }

  // Phase 1
  void deliver(int t) {
    auto range = arrivals_.equal_range(t);
    for (auto it = range.first; it != range.second; ++it) queue_.push_back(it->second);
    arrivals_.erase(range.first, range.second);
  }

  // Phase 2
  void emit_requests(int t) {
    for (std::size_t i = 0; i < devices_.size(); ++i) {
      Device& d = devices_[i];
      if (d.phase != Phase::Idle || d.next_request != t) continue;
      if (d.outcome.first_issued < 0) d.outcome.first_issued = t;
      d.outcome.status = RequestStatus::Pending;
      ++d.outcome.attempts;
      d.phase = Phase::InFlight;
      const auto at = transport_.send(MessageKind::PacketRequest, d.id, t * grid_.slot_ms());
      if (!at) {
        ++d.outcome.requests_lost;
        schedule_retry(d, t);
      } else if (*at == t) {
        queue_.push_back(i);
      } else {
        arrivals_.emplace(*at, i);
      }
    }
  }

  // Phase 3
  void admit_queued(int t) {
    if (queue_.empty()) return;
    std::vector<std::size_t> order = queue_;
    queue_.clear();
    std::shuffle(order.begin(), order.end(), admit_rng_);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return devices_[a].priority < devices_[b].priority; });
    for (std::size_t i : order) {
      Device& d = devices_[i];
      if (d.phase != Phase::InFlight) continue;
      AdmissionContext ctx{grid_, t, t + grant_lag(), std::nullopt};
      if (std::holds_alternative<ThermalDeviceConfig>(*d.config)) ctx.thermal = d.thermal;
      const auto decision = admit(make_request(d, t), ledger_, s_.feeder_capacity_w, ctx);
      const double sent = t * grid_.slot_ms();
      if (decision.accepted()) {
        const auto at = transport_.send(MessageKind::Grant, d.id, sent);
        if (!at || *at > ctx.start_floor) {
          // The server never sees an acknowledgement and frees the slot.
          ledger_.release(d.id);
          ++d.outcome.grants_lost;
          schedule_retry(d, t);
          continue;
        }
        d.phase = Phase::Active;
        d.active_from = *at;
        d.outcome.accepted = true;
        d.outcome.accepted_at = *at;
        d.outcome.forced_start = decision.accept().forced_start;
        d.outcome.last_reject.reset();
      } else {
        const auto& rej = decision.reject();
        ++d.outcome.rejections;
        d.outcome.last_reject = rej.reason;
        const auto at = transport_.send(MessageKind::Reject, d.id, sent);
        if (rej.reason != RejectReason::CapacityExceeded) {
          fail(d, RequestStatus::ServiceFailed);
          continue;
        }
        schedule_retry(d, at.value_or(t));
      }
    }
  }

  // Phase 4 input
  Demands build_demands(int t) {
    Demands out;
    for (std::size_t i = 0; i < devices_.size(); ++i) {
      Device& d = devices_[i];
      if (d.phase != Phase::Active || t < d.active_from) continue;
      SlotDemand dem;
      dem.device_id = d.id;
      dem.priority = d.priority;
      const ForcedProfile* committed = ledger_.find(d.id);
      const bool in_forced_window = committed && t >= committed->start && t < committed->end();

      if (const auto* b = std::get_if<BatteryDeviceConfig>(d.config)) {
        const double remaining = b->target() - d.battery.soc_wh;
        if (remaining <= kEnergyToleranceWh || t >= b->deadline) continue;
        const double tail_w = remaining / h_;
        dem.packet_w = b->packet_w;
        if (in_forced_window) {
          dem.forced_w = std::min(b->p_max_w, tail_w);
        } else {
          const double packets_w = std::floor(b->p_max_w / b->packet_w) * b->packet_w;
          dem.want_w = std::min(packets_w, tail_w);
        }
      } else if (const auto* c = std::get_if<CycleDeviceConfig>(d.config)) {
        if (d.cycle.finished()) continue;
        const double next_w = c->profile_w[static_cast<std::size_t>(d.cycle.progress)];
        dem.packet_w = *std::max_element(c->profile_w.begin(), c->profile_w.end());
        if (d.cycle.running() || t >= c->latest_start()) {
          dem.forced_w = next_w;
          cycle_runs_.insert(i);
        } else if (t >= c->earliest_start) {
          dem.want_w = next_w;
          dem.start_profile = ForcedProfile{t, c->profile_w};
        } else {
          continue;
        }
      } else {
        const auto& th = std::get<ThermalDeviceConfig>(*d.config);
        if (t < th.preheat_from || t >= th.service_end) continue;
        dem.packet_w = th.thermal.rated_power_w;
        const double idle_next = step_thermal(d.thermal, 0.0, grid_.slot_len_min).temp_c;
        bool must_heat = false;
        if (t < th.service_start) {
          const auto steps = thermal_full_power_steps(d.thermal, idle_next, th.target_temp_c, grid_.slot_len_min);
          must_heat = !steps || t + 1 + *steps > th.service_start;
        } else {
          must_heat = idle_next < th.target_temp_c;
        }
        if (must_heat && in_forced_window) {
          dem.forced_w = th.thermal.rated_power_w;
        } else if (thermal_power_to_reach(d.thermal, th.max_temp_c, grid_.slot_len_min) > 0.0) {
          dem.want_w = th.thermal.rated_power_w;
        } else {
          continue;
        }
      }
      out.items.push_back(std::move(dem));
      out.owner.push_back(i);
    }
    return out;
  }

  void check_capacity(const Allocation& alloc, int t) const {
    const double total = sum(alloc.granted_w);
    if (total > s_.feeder_capacity_w * (1.0 + 1e-9))
      throw Error(ErrorKind::CapacityViolation, "granted " + std::to_string(total) + " W over feeder capacity", t);
  }

  // Phase 5 input
  std::vector<double> consumption(const std::vector<double>& granted, const Demands& demands, const Allocation&,
                                  int t) {
    std::vector<double> applied(devices_.size(), 0.0);
    for (std::size_t k = 0; k < demands.items.size(); ++k) {
      const std::size_t i = demands.owner[k];
      Device& d = devices_[i];
      const double g = granted[i];
      if (const auto* b = std::get_if<BatteryDeviceConfig>(d.config)) {
        const double room = std::max(0.0, std::min(b->target(), d.battery.capacity_wh) - d.battery.soc_wh) / h_;
        applied[i] = std::clamp(std::min(g, room), 0.0, b->p_max_w);
      } else if (std::holds_alternative<CycleDeviceConfig>(*d.config)) {
        if (cycle_runs_.count(i) || g > 0.0) {
          cycle_runs_.insert(i);
          applied[i] = d.cycle.profile_w[static_cast<std::size_t>(d.cycle.progress)];
        }
      } else {
        const auto& th = std::get<ThermalDeviceConfig>(*d.config);
        const double to_cap = thermal_power_to_reach(d.thermal, th.max_temp_c, grid_.slot_len_min);
        applied[i] = std::clamp(std::min(g, to_cap), 0.0, th.thermal.rated_power_w);
      }
    }
    (void)t;
    return applied;
  }

  void shed(std::vector<double>& applied, const std::vector<bool>& forced, double deficit, int t, RunResult&) {
    std::vector<SheddableLoad> loads;
    for (std::size_t i = 0; i < devices_.size(); ++i)
      loads.push_back(SheddableLoad{devices_[i].id, devices_[i].priority, applied[i], forced[i]});
    for (std::size_t i : choose_shedding(loads, deficit)) {
      sheds_.push_back(ShedEvent{t, devices_[i].id, applied[i], forced[i]});
      applied[i] = 0.0;
      if (cycle_runs_.count(i)) {
        cycle_runs_.erase(i);
        // A cycle cannot pause; dropping it ends the job.
        fail(devices_[i], RequestStatus::Aborted);
      }
    }
  }

  // Phase 6
  void step_physics(const std::vector<double>& applied, const std::vector<double>& granted, int t) {
    const int next = t + 1;
    for (std::size_t i = 0; i < devices_.size(); ++i) {
      Device& d = devices_[i];
      if (applied[i] > 0.0 && d.outcome.first_consumption < 0) d.outcome.first_consumption = t;
      if (const auto* b = std::get_if<BatteryDeviceConfig>(d.config)) {
        d.battery = step_battery(d.battery, applied[i], grid_.slot_len_min).state;
        if (d.phase != Phase::Active) continue;
        const double remaining = b->target() - d.battery.soc_wh;
        if (remaining <= kEnergyToleranceWh) {
          complete(d, next);
        } else if (next >= b->deadline) {
          fail(d, RequestStatus::DeadlineMissed);
        } else if (next >= d.active_from) {
          int fs = next;
          try {
            fs = compute_forced_start(remaining, b->p_max_w, b->deadline, grid_, 0);
          } catch (const Error&) {
          }
          ledger_.trim_before(d.id, std::max(fs, next));
        }
      } else if (const auto* c = std::get_if<CycleDeviceConfig>(d.config)) {
        const bool runs = cycle_runs_.count(i) != 0;
        if (d.phase == Phase::Active && runs) {
          d.cycle = step_cycle(d.cycle, true, t).state;
          if (d.cycle.finished()) {
            cycle_runs_.erase(i);
            complete(d, next);
          } else {
            ledger_.trim_before(d.id, next);
          }
        } else if (d.phase == Phase::Active && d.cycle.running()) {
          throw Error(ErrorKind::ContiguityViolation, "cycle '" + d.id + "' not granted mid-run", t);
        } else if (d.phase == Phase::Active && next > c->latest_start()) {
          fail(d, RequestStatus::DeadlineMissed);
        }
      } else {
        const auto& th = std::get<ThermalDeviceConfig>(*d.config);
        d.thermal = step_thermal(d.thermal, applied[i], grid_.slot_len_min);
        if (d.phase != Phase::Active) continue;
        if (next >= th.service_start && next <= th.service_end && d.thermal.temp_c < th.target_temp_c - 1e-6)
          d.outcome.status = RequestStatus::DeadlineMissed;
        if (next >= th.service_end) {
          if (d.outcome.status == RequestStatus::DeadlineMissed)
            fail(d, RequestStatus::DeadlineMissed);
          else
            complete(d, next);
        } else {
          ledger_.trim_before(d.id, next);
        }
      }
    }
    (void)granted;
  }

  void complete(Device& d, int at) {
    d.phase = Phase::Done;
    d.outcome.status = RequestStatus::Completed;
    d.outcome.completion = at;
    ledger_.release(d.id);
  }

  void close_out() {
    for (auto& d : devices_) {
      if (d.phase == Phase::Done) continue;
      if (d.phase == Phase::Active)
        fail(d, RequestStatus::DeadlineMissed);
      else if (d.outcome.first_issued >= 0)
        fail(d, RequestStatus::ServiceFailed);
    }
  }

  const Scenario& s_;
  TimeGrid grid_;
  double h_;
  CommitmentLedger ledger_;
  Transport transport_;
  Rng alloc_rng_;
  Rng admit_rng_;
  Rng trip_rng_;
  std::optional<StorageAsset> storage_;
  std::vector<Device> devices_;
  std::multimap<int, std::size_t> arrivals_;
  std::vector<std::size_t> queue_;
  std::set<std::size_t> cycle_runs_;
  std::vector<ShedEvent> sheds_;
};

// ---------------------------------------------------------------------------
// Heater fleet loop

class FleetRun {
 public:
  explicit FleetRun(const Scenario& s)
      : s_(s),
        grid_(s.grid),
        cfg_(std::get<HeaterFleetConfig>(s.devices.front())),
        p_(cfg_.params),
        packet_(make_packet(p_.thermal.rated_power_w, p_.packet_epochs, s.grid.slot_len_min)),
        transport_(s),
        request_rng_(s.seed, Stream::Fleet),
        draw_rng_(s.seed, Stream::FleetDraws),
        track_rng_(s.seed, Stream::Server, 0),
        trip_rng_(s.seed, Stream::Trips),
        storage_(s.storage) {
    Rng init(s.seed, Stream::DeviceInit);
    heaters_.resize(static_cast<std::size_t>(cfg_.count));
    for (auto& h : heaters_) h.temp_c = init.uniform(p_.t_low_c, p_.t_high_c);
    const double h = grid_.slot_hours();
    lower_bound_c_ = p_.t_low_c - p_.override_margin_c -
                     (p_.draw_max_c + h * p_.thermal.loss_w_per_c * std::max(0.0, p_.t_high_c - p_.thermal.ambient_c) /
                                          p_.thermal.capacitance_wh_per_c);
    upper_bound_c_ =
        p_.t_high_c + h * p_.thermal.efficiency * p_.thermal.rated_power_w / p_.thermal.capacitance_wh_per_c;
  }

  RunResult run() {
    RunResult out;
    out.seed = s_.seed;
    out.grid = grid_;
    out.device_ids = {cfg_.id};
    out.renewable_trace = generate_renewable(s_.renewable, grid_.horizon, s_.seed);
    out.initial_storage = storage_;
    out.initial_state = {mean_temp()};
    const double P = p_.thermal.rated_power_w;

    for (int t = 0; t < grid_.horizon; ++t) {
      FleetEpochRecord fr;
      fr.slot = t;
      fr.reference_w = std::min(cfg_.reference_at(t), s_.feeder_capacity_w);

      // 1: grants and requests due now
      auto grants = grant_arrivals_.equal_range(t);
      for (auto it = grants.first; it != grants.second; ++it) {
        Heater& h = heaters_[it->second];
        h.granted_inflight = false;
        if (local_override(h.temp_c, p_) != Override::ForceOff) h.packet_left = p_.packet_epochs;
      }
      grant_arrivals_.erase(grants.first, grants.second);
      auto reqs = request_arrivals_.equal_range(t);
      for (auto it = reqs.first; it != reqs.second; ++it) queue_.push_back(it->second);
      request_arrivals_.erase(reqs.first, reqs.second);

      // 2: overrides and fresh requests
      int force_on = 0;
      int force_off = 0;
      for (std::size_t i = 0; i < heaters_.size(); ++i) {
        Heater& h = heaters_[i];
        h.mode = local_override(h.temp_c, p_);
        if (h.mode == Override::ForceOff) {
          ++force_off;
          h.packet_left = 0;
        } else if (h.mode == Override::ForceOn) {
          ++force_on;
        }
        if (h.mode != Override::Normal || h.packet_left > 0 || h.pending || h.granted_inflight) continue;
        if (!request_rng_.bernoulli(fleet_request_probability(h.temp_c, p_))) continue;
        h.pending = true;
        ++fr.requests;
        const auto at = transport_.send(MessageKind::PacketRequest, cfg_.id, t * grid_.slot_ms());
        if (!at)
          h.pending = false;
        else if (*at == t)
          queue_.push_back(i);
        else
          request_arrivals_.emplace(*at, i);
      }

      // 3-4: admission by reference tracking
      std::vector<std::size_t> eligible;
      for (std::size_t i : queue_) {
        Heater& h = heaters_[i];
        h.pending = false;
        if (h.mode == Override::Normal && h.packet_left == 0 && !h.granted_inflight) eligible.push_back(i);
      }
      queue_.clear();
      int committed = 0;
      for (const auto& h : heaters_)
        if (h.packet_left > 0 || h.granted_inflight || h.mode == Override::ForceOn) ++committed;
      const auto accepted =
          track_reference<std::size_t>(eligible, fr.reference_w, committed * P, packet_, track_rng_);
      fr.accepted = static_cast<int>(accepted.size());
      for (std::size_t i : accepted) {
        const auto at = transport_.send(MessageKind::Grant, cfg_.id, t * grid_.slot_ms());
        if (!at) continue;
        if (*at == t) {
          heaters_[i].packet_left = p_.packet_epochs;
        } else {
          heaters_[i].granted_inflight = true;
          grant_arrivals_.emplace(*at, i);
        }
      }

      // 5: consumption and dispatch
      std::vector<std::size_t> on;
      for (std::size_t i = 0; i < heaters_.size(); ++i)
        if (heaters_[i].packet_left > 0 || heaters_[i].mode == Override::ForceOn) on.push_back(i);
      SupplyView supply{out.renewable_trace[static_cast<std::size_t>(t)], storage_, s_.import_allowed,
                        s_.feeder_capacity_w};
      SlotRecord rec;
      rec.slot = t;
      rec.renewable_available_w = supply.renewable_w;
      double load = static_cast<double>(on.size()) * P;
      rec.granted_w = {load};
      auto dispatch = dispatch_supply(load, supply, grid_.slot_len_min);
      if (dispatch.unmet_w > 1e-9) {
        rec.emergency = true;
        if (!s_.policy.emergency_shedding)
          throw Error(ErrorKind::UnderSupply, std::to_string(dispatch.unmet_w) + " W uncovered with import disallowed",
                      t);
        // Packet holders go first, highest index first; forced heaters last.
        std::stable_sort(on.begin(), on.end(), [&](std::size_t a, std::size_t b) {
          const bool fa = heaters_[a].mode == Override::ForceOn;
          const bool fb = heaters_[b].mode == Override::ForceOn;
          if (fa != fb) return !fa;
          return a > b;
        });
        double shed_w = 0.0;
        std::size_t dropped = 0;
        while (dropped < on.size() && shed_w < dispatch.unmet_w - 1e-9) {
          Heater& h = heaters_[on[dropped]];
          h.packet_left = 0;
          h.shed = true;
          shed_w += P;
          ++dropped;
        }
        sheds_.push_back(ShedEvent{t, cfg_.id, shed_w, false});
        on.erase(on.begin(), on.begin() + static_cast<std::ptrdiff_t>(dropped));
        load = static_cast<double>(on.size()) * P;
        dispatch = dispatch_supply(load, supply, grid_.slot_len_min);
      }
      storage_ = dispatch.storage_after;
      fill_supply(rec, dispatch, storage_);
      rec.consumed_w = {load};
      fr.aggregate_w = load;
      fr.on = static_cast<int>(on.size());
      fr.force_on = force_on;
      fr.force_off = force_off;

      // 6: physics
      std::vector<bool> is_on(heaters_.size(), false);
      for (std::size_t i : on) is_on[i] = true;
      double tmin = INFINITY;
      double tmax = -INFINITY;
      CompensatedSum tsum;
      for (std::size_t i = 0; i < heaters_.size(); ++i) {
        Heater& h = heaters_[i];
        ThermalLoadState node = p_.thermal;
        node.temp_c = h.temp_c;
        node = step_thermal(node, is_on[i] ? P : 0.0, grid_.slot_len_min);
        double drop = 0.0;
        if (draw_rng_.bernoulli(p_.draw_probability)) drop = draw_rng_.uniform(0.0, p_.draw_max_c);
        h.temp_c = node.temp_c - drop;
        if (h.packet_left > 0) --h.packet_left;
        h.shed = false;
        if (h.temp_c < lower_bound_c_ || h.temp_c > upper_bound_c_) ++fr.band_violations;
        tmin = std::min(tmin, h.temp_c);
        tmax = std::max(tmax, h.temp_c);
        tsum.add(h.temp_c);
        transport_.emit_meter_report(t, cfg_.id, is_on[i] ? P : 0.0);
      }
      fr.mean_temp_c = heaters_.empty() ? 0.0 : tsum.value() / static_cast<double>(heaters_.size());
      fr.min_temp_c = heaters_.empty() ? 0.0 : tmin;
      fr.max_temp_c = heaters_.empty() ? 0.0 : tmax;

      // 7: metrics
      transport_.emit_trips(t, trip_rng_);
      out.state_trace.push_back({fr.mean_temp_c});
      out.slots.push_back(std::move(rec));
      out.fleet.push_back(fr);
    }
    out.sheds = sheds_;
    out.final_storage = storage_;
    transport_.finish(out);
    return out;
  }

  double lower_bound_c() const { return lower_bound_c_; }
  double upper_bound_c() const { return upper_bound_c_; }

 private:
  struct Heater {
    double temp_c = 0.0;
    int packet_left = 0;
    bool pending = false;
    bool granted_inflight = false;
    bool shed = false;
    Override mode = Override::Normal;
  };

  double mean_temp() const {
    if (heaters_.empty()) return 0.0;
    CompensatedSum s;
    for (const auto& h : heaters_) s.add(h.temp_c);
    return s.value() / static_cast<double>(heaters_.size());
  }

  const Scenario& s_;
  TimeGrid grid_;
  const HeaterFleetConfig& cfg_;
  const WaterHeaterParams& p_;
  PacketSpec packet_;
  Transport transport_;
  Rng request_rng_;
  Rng draw_rng_;
  Rng track_rng_;
  Rng trip_rng_;
  std::optional<StorageAsset> storage_;
  std::vector<Heater> heaters_;
  std::multimap<int, std::size_t> request_arrivals_;
  std::multimap<int, std::size_t> grant_arrivals_;
  std::vector<std::size_t> queue_;
  std::vector<ShedEvent> sheds_;
  double lower_bound_c_ = 0.0;
  double upper_bound_c_ = 0.0;
};

}  // namespace detail

/// Runs one scenario. Identical scenarios (seed included) give identical results.
inline RunResult run_scenario(const Scenario& s) {
  s.validate();
  if (s.is_fleet()) return detail::FleetRun(s).run();
  return detail::HouseholdRun(s).run();
}

// ---------------------------------------------------------------------------
// Conservation audit

struct ConservationViolation {
  /// Offending slot, or -1 for the whole-run integral.
  int slot = -1;
  std::string what;
};

/// Checks per slot that renewable_used + storage discharge + imported equals
/// total consumption, that renewable is fully accounted for, and that storage
/// soc follows its flows; then checks the same identities over the whole run.
/// Tolerance is 1e-6 relative (floored at 1e-6 Wh).
inline std::optional<ConservationViolation> audit_conservation(const RunResult& r) {
  const double h = r.grid.slot_hours();
  const double eff = r.initial_storage ? r.initial_storage->efficiency : 1.0;
  auto close = [](double a, double b) {
    return std::abs(a - b) <= 1e-6 * std::max({1.0, std::abs(a), std::abs(b)});
  };
  detail::CompensatedSum consumed_total, renewable_total, import_total, discharge_total, charge_total;
  double soc = r.initial_storage ? r.initial_storage->soc_wh : 0.0;
  for (const auto& rec : r.slots) {
    detail::CompensatedSum consumed;
    for (double c : rec.consumed_w) {
      if (c < -1e-9) return ConservationViolation{rec.slot, "negative consumption"};
      consumed.add(c * h);
    }
    const double supplied = (rec.renewable_used_w + rec.storage_discharge_w + rec.imported_w) * h;
    if (!close(consumed.value(), supplied))
      return ConservationViolation{rec.slot, "supply does not match consumption"};
    if (rec.imported_w < -1e-9) return ConservationViolation{rec.slot, "negative import"};
    if (rec.curtailed_w < -1e-9) return ConservationViolation{rec.slot, "negative curtailment"};
    if (rec.storage_charge_w > 1e-9 && rec.storage_discharge_w > 1e-9)
      return ConservationViolation{rec.slot, "storage charged and discharged in one slot"};
    if (!close(rec.renewable_available_w * h, (rec.renewable_used_w + rec.storage_charge_w + rec.curtailed_w) * h))
      return ConservationViolation{rec.slot, "renewable not fully accounted for"};
    if (!close(rec.storage_flow_w, rec.storage_charge_w - rec.storage_discharge_w))
      return ConservationViolation{rec.slot, "storage flow inconsistent"};
    if (r.initial_storage) {
      const double expected = soc + (eff * rec.storage_charge_w - rec.storage_discharge_w) * h;
      if (!close(expected, rec.storage_soc_wh)) return ConservationViolation{rec.slot, "storage soc drift"};
      if (rec.storage_soc_wh < -1e-9 || rec.storage_soc_wh > r.initial_storage->capacity_wh + 1e-6)
        return ConservationViolation{rec.slot, "storage soc out of bounds"};
      soc = rec.storage_soc_wh;
    }
    consumed_total.add(consumed.value());
    renewable_total.add(rec.renewable_used_w * h);
    import_total.add(rec.imported_w * h);
    discharge_total.add(rec.storage_discharge_w * h);
    charge_total.add(rec.storage_charge_w * h);
  }
  const double supplied_total = renewable_total.value() + import_total.value() + discharge_total.value();
  if (!close(consumed_total.value(), supplied_total))
    return ConservationViolation{-1, "run integral of supply does not match consumption"};
  if (r.initial_storage) {
    const double net = eff * charge_total.value() - discharge_total.value();
    if (!close(r.initial_storage->soc_wh + net, soc)) return ConservationViolation{-1, "storage integral drift"};
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Summaries and batches

/// Minutes of fleet operation excluded from tracking statistics.
inline constexpr int kFleetWarmupMin = 30;

struct RunSummary {
  std::uint64_t seed = 0;
  std::optional<std::string> error;
  int error_exit_code = 0;

  int requests = 0;
  int accepted = 0;
  int rejections = 0;
  int completed = 0;
  int deadline_misses = 0;
  int service_failed = 0;
  int aborted = 0;
  double mean_waiting_slots = 0.0;

  double consumed_wh = 0.0;
  double renewable_available_wh = 0.0;
  double renewable_used_wh = 0.0;
  double imported_wh = 0.0;
  double curtailed_wh = 0.0;
  double storage_charge_wh = 0.0;
  double storage_discharge_wh = 0.0;
  int emergency_slots = 0;
  int shed_events = 0;
  double peak_load_w = 0.0;

  int messages = 0;
  int messages_dropped = 0;
  std::map<MessageKind, double> violation_rates;

  double fleet_mean_abs_error_w = 0.0;
  int fleet_band_violations = 0;

  bool conservation_ok = true;

  friend bool operator==(const RunSummary&, const RunSummary&) = default;
};

inline RunSummary summarize(const RunResult& r) {
  RunSummary s;
  s.seed = r.seed;
  const double h = r.grid.slot_hours();
  detail::CompensatedSum consumed, avail, used, imported, curtailed, charge, discharge;
  for (const auto& rec : r.slots) {
    double load = 0.0;
    for (double c : rec.consumed_w) {
      consumed.add(c * h);
      load += c;
    }
    s.peak_load_w = std::max(s.peak_load_w, load);
    avail.add(rec.renewable_available_w * h);
    used.add(rec.renewable_used_w * h);
    imported.add(rec.imported_w * h);
    curtailed.add(rec.curtailed_w * h);
    charge.add(rec.storage_charge_w * h);
    discharge.add(rec.storage_discharge_w * h);
    if (rec.emergency) ++s.emergency_slots;
  }
  s.consumed_wh = consumed.value();
  s.renewable_available_wh = avail.value();
  s.renewable_used_wh = used.value();
  s.imported_wh = imported.value();
  s.curtailed_wh = curtailed.value();
  s.storage_charge_wh = charge.value();
  s.storage_discharge_wh = discharge.value();
  s.shed_events = static_cast<int>(r.sheds.size());

  int waited = 0;
  double wait_sum = 0.0;
  for (const auto& o : r.requests) {
    if (o.first_issued >= 0) ++s.requests;
    if (o.accepted) ++s.accepted;
    s.rejections += o.rejections;
    switch (o.status) {
      case RequestStatus::Completed: ++s.completed; break;
      case RequestStatus::DeadlineMissed: ++s.deadline_misses; break;
      case RequestStatus::ServiceFailed: ++s.service_failed; break;
      case RequestStatus::Aborted: ++s.aborted; break;
      default: break;
    }
    if (auto w = o.waiting_slots()) {
      ++waited;
      wait_sum += *w;
    }
  }
  s.mean_waiting_slots = waited ? wait_sum / waited : 0.0;

  s.messages = static_cast<int>(r.messages.size());
  for (const auto& m : r.messages)
    if (!m.delivered) ++s.messages_dropped;
  s.violation_rates = r.violation_rates;

  if (!r.fleet.empty()) {
    const int warmup = (kFleetWarmupMin + r.grid.slot_len_min - 1) / r.grid.slot_len_min;
    detail::CompensatedSum err;
    int n = 0;
    for (const auto& f : r.fleet) {
      s.fleet_band_violations += f.band_violations;
      if (f.slot < warmup) continue;
      err.add(std::abs(f.aggregate_w - f.reference_w));
      ++n;
    }
    s.fleet_mean_abs_error_w = n ? err.value() / n : 0.0;
  }
  s.conservation_ok = !audit_conservation(r).has_value();
  return s;
}

/// Exit-style classification used by the batch runner and the CLI.
inline int exit_code_for(const Error& e) { return e.kind() == ErrorKind::InvalidScenario ? 1 : 2; }

namespace detail {

/// Runs one scenario and folds any failure into the summary.
template <typename OnResult>
RunSummary guarded_run(const Scenario& s, OnResult&& on_result) {
  RunSummary out;
  try {
    const auto r = run_scenario(s);
    on_result(r);
    return summarize(r);
  } catch (const Error& e) {
    out.error = e.what();
    out.error_exit_code = exit_code_for(e);
  } catch (const std::exception& e) {
    out.error = e.what();
    out.error_exit_code = 2;
  }
  out.seed = s.seed;
  return out;
}

template <typename Fn>
void for_each_index(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (unsigned w = 0; w < threads; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
}

}  // namespace detail

/// Runs every seed independently. Results come back in input order and do
/// not depend on scheduling or thread count.
inline std::vector<RunSummary> run_batch(const Scenario& base, std::span<const std::uint64_t> seeds,
                                         unsigned threads = 0) {
  std::vector<RunSummary> out(seeds.size());
  detail::for_each_index(seeds.size(), threads, [&](std::size_t i) {
    Scenario s = base;
    s.seed = seeds[i];
    out[i] = detail::guarded_run(s, [](const RunResult&) {});
  });
  return out;
}

}  // namespace pem
