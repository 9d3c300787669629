#pragma once

// The energy server: latest-start admission against feeder capacity, per-slot
// packet allocation, supply dispatch, fleet reference tracking and retries.
//
// Admission rule: a job is admitted iff the superposition of every admitted
// job's forced profile (full power from its latest feasible start to its
// deadline) stays under feeder capacity. Imports cover any renewable
// shortfall, so capacity is the only hard constraint and every admitted job
// can always be run in its forced regime.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pem/core.hpp"
#include "pem/devices.hpp"
#include "pem/rng.hpp"

namespace pem {

// ---------------------------------------------------------------------------
// Forced starts

/// Latest slot t >= now with p_max * (deadline - t) * slot_hours >= remaining.
/// Rounds earlier, never later; needs within kEnergyToleranceWh of a whole
/// slot count are treated as that count.
inline int compute_forced_start(double remaining_wh, double p_max_w, int deadline, const TimeGrid& grid, int now = 0) {
  if (!(remaining_wh >= 0.0)) throw Error(ErrorKind::MalformedRequest, "remaining energy must be >= 0");
  if (!(p_max_w > 0.0)) throw Error(ErrorKind::MalformedRequest, "p_max must be positive");
  const double per_slot_wh = p_max_w * grid.slot_hours();
  const double slots_needed = std::ceil(std::max(0.0, remaining_wh - kEnergyToleranceWh) / per_slot_wh);
  const double start = static_cast<double>(deadline) - slots_needed;
  if (start < static_cast<double>(now))
    throw Error(ErrorKind::InfeasibleDeadline,
                "needs " + std::to_string(static_cast<long long>(slots_needed)) + " full-power slots before " +
                    grid.clock(deadline),
                now);
  return static_cast<int>(start);
}

inline int latest_cycle_start(std::size_t profile_len, int deadline) {
  return deadline - static_cast<int>(profile_len);
}

// ---------------------------------------------------------------------------
// Ledger

/// Power reserved for a job's forced regime, slot by slot from `start`.
struct ForcedProfile {
  int start = 0;
  std::vector<double> power_w;

  int end() const { return start + static_cast<int>(power_w.size()); }
  double at(int slot) const {
    if (slot < start || slot >= end()) return 0.0;
    return power_w[static_cast<std::size_t>(slot - start)];
  }
  bool empty() const { return power_w.empty(); }

  static ForcedProfile constant(int start, int end, double power_w) {
    ForcedProfile p{start, {}};
    if (end > start) p.power_w.assign(static_cast<std::size_t>(end - start), power_w);
    return p;
  }

  /// Drops every slot before `slot`.
  ForcedProfile from(int slot) const {
    if (slot <= start) return *this;
    if (slot >= end()) return ForcedProfile{slot, {}};
    return ForcedProfile{slot, std::vector<double>(power_w.begin() + (slot - start), power_w.end())};
  }

  friend bool operator==(const ForcedProfile&, const ForcedProfile&) = default;
};

class CommitmentLedger {
 public:
  explicit CommitmentLedger(int horizon) : committed_(static_cast<std::size_t>(std::max(horizon, 0)), 0.0) {}

  int horizon() const { return static_cast<int>(committed_.size()); }
  double committed(int slot) const {
    if (slot < 0 || slot >= horizon()) return 0.0;
    return committed_[static_cast<std::size_t>(slot)];
  }
  bool contains(const std::string& job) const { return jobs_.count(job) != 0; }
  const ForcedProfile* find(const std::string& job) const {
    auto it = jobs_.find(job);
    return it == jobs_.end() ? nullptr : &it->second;
  }
  std::size_t size() const { return jobs_.size(); }
  const std::map<std::string, ForcedProfile>& jobs() const { return jobs_; }

  /// First slot where adding `p` (optionally in place of `replacing`) exceeds cap.
  std::optional<int> first_violation(const ForcedProfile& p, double cap_w, const std::string* replacing = nullptr) const {
    const ForcedProfile* old = replacing ? find(*replacing) : nullptr;
    for (int s = p.start; s < p.end(); ++s) {
      double total = committed(s) + p.at(s);
      if (old) total -= old->at(s);
      if (total > cap_w * (1.0 + 1e-12)) return s;
      if (s < 0 || s >= horizon()) {
        if (p.at(s) > 0.0) return s;
      }
    }
    return std::nullopt;
  }

  void commit(const std::string& job, ForcedProfile p) {
    if (contains(job)) release(job);
    add(p, +1.0);
    jobs_.emplace(job, std::move(p));
  }

  void release(const std::string& job) {
    auto it = jobs_.find(job);
    if (it == jobs_.end()) return;
    add(it->second, -1.0);
    jobs_.erase(it);
  }

  /// Replaces a job's profile when the result still fits under cap.
  bool try_replace(const std::string& job, const ForcedProfile& p, double cap_w) {
    if (first_violation(p, cap_w, &job)) return false;
    commit(job, p);
    return true;
  }

  /// Shrinks a job to the slots at or after `slot`. Never grows a profile.
  void trim_before(const std::string& job, int slot) {
    auto it = jobs_.find(job);
    if (it == jobs_.end() || slot <= it->second.start) return;
    ForcedProfile trimmed = it->second.from(slot);
    commit(job, std::move(trimmed));
  }

  double max_committed() const {
    return committed_.empty() ? 0.0 : *std::max_element(committed_.begin(), committed_.end());
  }

 private:
  void add(const ForcedProfile& p, double sign) {
    for (int s = std::max(p.start, 0); s < std::min(p.end(), horizon()); ++s) {
      auto& c = committed_[static_cast<std::size_t>(s)];
      c += sign * p.at(s);
      if (std::abs(c) < 1e-9) c = 0.0;
    }
  }

  std::vector<double> committed_;
  std::map<std::string, ForcedProfile> jobs_;
};

// ---------------------------------------------------------------------------
// Admission

struct AdmissionContext {
  TimeGrid grid;
  /// Slot at which the decision is taken.
  int now = 0;
  /// Earliest slot the device can act on an Accept (decision slot + grant lag).
  int start_floor = 0;
  /// Current state of the device for ThermalTarget requests.
  std::optional<ThermalLoadState> thermal;
};

struct CompiledJob {
  ForcedProfile forced;
  std::vector<double> envelope_w;
  int forced_start = 0;
};

namespace detail {

inline std::vector<double> window_envelope(int horizon, int from, int to, double power_w) {
  std::vector<double> env(static_cast<std::size_t>(horizon), 0.0);
  for (int s = std::max(from, 0); s < std::min(to, horizon); ++s) env[static_cast<std::size_t>(s)] = power_w;
  return env;
}

/// Latest slot in [from, service_start] at which heating at full power, after
/// idling since `now`, still reaches the target by service_start.
inline std::optional<int> thermal_latest_start(const ThermalLoadState& s, double target_c, int now, int from,
                                               int service_start, double dt_min) {
  for (int start = service_start; start >= from; --start) {
    const double temp = thermal_idle_temp(s, start - now, dt_min);
    const auto steps = thermal_full_power_steps(s, temp, target_c, dt_min);
    if (steps && start + *steps <= service_start) return start;
  }
  return std::nullopt;
}

}  // namespace detail

/// Turns a request into its forced profile and published envelope.
inline std::variant<CompiledJob, Reject> compile_job(const LoadRequest& r, const AdmissionContext& ctx) {
  const TimeGrid& grid = ctx.grid;
  const int floor = std::max(ctx.start_floor, ctx.now);
  auto infeasible = [](std::string d) { return Reject{RejectReason::WindowInfeasible, -1, std::move(d)}; };

  if (const auto* f = std::get_if<FixedProfile>(&r.kind)) {
    const int earliest = std::max(f->earliest_start, floor);
    if (earliest > f->latest_start) return infeasible("latest start already passed");
    CompiledJob job;
    job.forced_start = f->latest_start;
    job.forced = ForcedProfile{f->latest_start, f->profile_w};
    job.envelope_w.assign(static_cast<std::size_t>(grid.horizon), 0.0);
    for (int anchor = earliest; anchor <= f->latest_start; ++anchor)
      for (std::size_t k = 0; k < f->profile_w.size(); ++k) {
        const auto s = static_cast<std::size_t>(anchor) + k;
        if (s < job.envelope_w.size()) job.envelope_w[s] = std::max(job.envelope_w[s], f->profile_w[k]);
      }
    return job;
  }

  if (const auto* x = std::get_if<FlexibleTotal>(&r.kind)) {
    const int from = std::max(x->available_from, floor);
    int forced_start = 0;
    try {
      forced_start = compute_forced_start(x->energy_wh, x->p_max_w, x->deadline, grid, from);
    } catch (const Error& e) {
      return infeasible(e.what());
    }
    CompiledJob job;
    job.forced_start = forced_start;
    job.forced = ForcedProfile::constant(forced_start, x->deadline, x->p_max_w);
    job.envelope_w = detail::window_envelope(grid.horizon, from, x->deadline, x->p_max_w);
    return job;
  }

  const auto& t = std::get<ThermalTarget>(r.kind);
  if (!ctx.thermal) return Reject{RejectReason::MalformedRequest, -1, "thermal request without device state"};
  const ThermalLoadState& state = *ctx.thermal;
  const int from = std::max(t.preheat_from, floor);
  if (from > t.service_start) return infeasible("preheat window already passed");
  const auto latest =
      detail::thermal_latest_start(state, t.target_temp_c, ctx.now, from, t.service_start, grid.slot_len_min);
  if (!latest) return infeasible("target temperature unreachable before service start");
  CompiledJob job;
  job.forced_start = std::min(*latest, std::max(t.force_check_at, from));
  job.forced = ForcedProfile::constant(job.forced_start, t.service_end, state.rated_power_w);
  job.envelope_w = detail::window_envelope(grid.horizon, from, t.service_end, state.rated_power_w);
  return job;
}

/// Accepts iff the request's forced profile fits on top of the ledger; on
/// Accept the ledger is extended under the request's device id.
inline GrantDecision admit(const LoadRequest& r, CommitmentLedger& ledger, double cap_w, const AdmissionContext& ctx) {
  if (auto err = validate_request(r, ctx.grid)) return GrantDecision{Reject{err->reason, -1, err->detail}};
  auto compiled = compile_job(r, ctx);
  if (auto* rej = std::get_if<Reject>(&compiled)) return GrantDecision{std::move(*rej)};
  auto& job = std::get<CompiledJob>(compiled);
  if (auto slot = ledger.first_violation(job.forced, cap_w))
    return GrantDecision{Reject{RejectReason::CapacityExceeded, *slot, "forced power exceeds feeder capacity"}};
  ledger.commit(r.device_id, job.forced);
  return GrantDecision{Accept{std::move(job.envelope_w), job.forced_start}};
}

// ---------------------------------------------------------------------------
// Slot allocation

struct SupplyView {
  double renewable_w = 0.0;
  std::optional<StorageAsset> storage;
  bool import_allowed = true;
  double feeder_capacity_w = 0.0;
};

struct AllocationPolicy {
  /// Offer spare capacity only out of renewable surplus over forced power.
  bool renewable_first = true;
};

/// One active job's position in the current slot.
struct SlotDemand {
  std::string device_id;
  Priority priority;
  /// Power the forced regime requires this slot (granted unconditionally).
  double forced_w = 0.0;
  /// Extra power the job would take if offered.
  double want_w = 0.0;
  double packet_w = 0.0;
  /// Non-empty when taking `want_w` starts a fixed cycle: the ledger entry is
  /// re-anchored to this profile, and the grant is refused if it does not fit.
  std::optional<ForcedProfile> start_profile;
};

struct Allocation {
  std::vector<double> granted_w;
  std::vector<bool> forced;
  double spare_offered_w = 0.0;
};

/// (a) forced jobs get their full need; (b) spare capacity goes to willing
/// jobs by priority, seeded-random within a level; (c) grants are whole
/// packets, or the job's whole remaining want when that fits; (d) the total
/// stays under feeder capacity. A job that is willing but gets nothing blocks
/// every lower-priority level.
inline Allocation allocate_slot(CommitmentLedger& ledger, std::span<const SlotDemand> demands, const SupplyView& supply,
                                const AllocationPolicy& policy, Rng& rng, int slot) {
  Allocation out;
  out.granted_w.assign(demands.size(), 0.0);
  out.forced.assign(demands.size(), false);

  double forced_total = 0.0;
  for (std::size_t i = 0; i < demands.size(); ++i) {
    if (demands[i].forced_w > 0.0) {
      out.granted_w[i] = demands[i].forced_w;
      out.forced[i] = true;
      forced_total += demands[i].forced_w;
    }
  }
  if (forced_total > supply.feeder_capacity_w * (1.0 + 1e-12))
    throw Error(ErrorKind::CapacityViolation,
                "forced power " + std::to_string(forced_total) + " W exceeds feeder capacity", slot);

  double spare = supply.feeder_capacity_w - forced_total;
  if (policy.renewable_first) spare = std::min(spare, std::max(0.0, supply.renewable_w - forced_total));
  spare = std::max(0.0, spare);
  out.spare_offered_w = spare;

  std::vector<std::size_t> order(demands.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return demands[a].priority < demands[b].priority; });

  std::optional<Priority> blocked;
  for (std::size_t i : order) {
    const SlotDemand& d = demands[i];
    if (out.forced[i] || d.want_w <= 0.0) continue;
    if (blocked && *blocked < d.priority) continue;
    double g = 0.0;
    if (d.want_w <= spare) {
      g = d.want_w;
    } else if (d.packet_w > 0.0 && !d.start_profile) {
      g = std::floor(spare / d.packet_w) * d.packet_w;
    }
    if (g > 0.0 && d.start_profile) {
      if (!ledger.try_replace(d.device_id, *d.start_profile, supply.feeder_capacity_w)) continue;
    }
    if (g <= 0.0) {
      if (!blocked) blocked = d.priority;
      continue;
    }
    out.granted_w[i] = g;
    spare -= g;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Supply dispatch

struct Dispatch {
  double renewable_used_w = 0.0;
  double storage_discharge_w = 0.0;
  double storage_charge_w = 0.0;
  double imported_w = 0.0;
  double curtailed_w = 0.0;
  /// Demand left uncovered when import is not allowed.
  double unmet_w = 0.0;
  std::optional<StorageAsset> storage_after;
};

/// Merit order renewable -> storage -> import; surplus renewable charges
/// storage and the rest is curtailed. renewable_used + storage_discharge +
/// imported + unmet == demand.
inline Dispatch dispatch_supply(double demand_w, const SupplyView& supply, double dt_min) {
  Dispatch d;
  d.storage_after = supply.storage;
  const double demand = std::max(0.0, demand_w);
  d.renewable_used_w = std::min(demand, supply.renewable_w);
  double deficit = demand - d.renewable_used_w;
  double surplus = supply.renewable_w - d.renewable_used_w;

  if (deficit > 0.0 && supply.storage) {
    auto step = step_storage(*supply.storage, -deficit, dt_min);
    d.storage_discharge_w = -step.actual_w;
    d.storage_after = step.state;
    deficit -= d.storage_discharge_w;
  } else if (surplus > 0.0 && supply.storage) {
    auto step = step_storage(*supply.storage, surplus, dt_min);
    d.storage_charge_w = step.actual_w;
    d.storage_after = step.state;
    surplus -= d.storage_charge_w;
  }
  if (deficit > 0.0) {
    if (supply.import_allowed)
      d.imported_w = deficit;
    else
      d.unmet_w = deficit;
  }
  d.curtailed_w = std::max(0.0, surplus);
  return d;
}

// ---------------------------------------------------------------------------
// Emergency shedding

struct SheddableLoad {
  std::string device_id;
  Priority priority;
  double consumed_w = 0.0;
  bool forced = false;
};

struct ShedEvent {
  int slot = 0;
  std::string device_id;
  double shed_w = 0.0;
  bool forced = false;
};

/// Picks loads to drop until `deficit_w` is covered: non-forced first, then
/// forced, lowest priority first inside each group. Returns indices in shed order.
inline std::vector<std::size_t> choose_shedding(std::span<const SheddableLoad> loads, double deficit_w) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < loads.size(); ++i)
    if (loads[i].consumed_w > 0.0) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (loads[a].forced != loads[b].forced) return !loads[a].forced;
    return loads[b].priority < loads[a].priority;
  });
  std::vector<std::size_t> shed;
  double covered = 0.0;
  for (std::size_t i : order) {
    if (covered >= deficit_w - 1e-9) break;
    shed.push_back(i);
    covered += loads[i].consumed_w;
  }
  return shed;
}

// ---------------------------------------------------------------------------
// Fleet reference tracking

struct ReferenceSignal {
  std::vector<double> target_w;
  double at(int epoch) const {
    if (target_w.empty()) return 0.0;
    return target_w[std::min(static_cast<std::size_t>(std::max(epoch, 0)), target_w.size() - 1)];
  }
};

/// Number of packet requests to accept this epoch.
inline std::size_t tracking_quota(std::size_t requests, double ref_w, double currently_on_w, const PacketSpec& packet) {
  const double room = std::floor((ref_w - currently_on_w) / packet.power_w);
  if (!(room > 0.0)) return 0;
  return std::min(requests, static_cast<std::size_t>(room));
}

/// Accepts a uniformly random subset of size floor((ref - on) / packet),
/// clamped to [0, #requests]. Returned in request order.
template <typename Id>
std::vector<Id> track_reference(std::span<const Id> requests, double ref_w, double currently_on_w,
                                const PacketSpec& packet, Rng& rng) {
  const std::size_t k = tracking_quota(requests.size(), ref_w, currently_on_w, packet);
  std::vector<Id> accepted;
  accepted.reserve(k);
  std::sample(requests.begin(), requests.end(), std::back_inserter(accepted), k, rng);
  return accepted;
}

// ---------------------------------------------------------------------------
// Retries

struct RetryPolicy {
  int backoff_max = 3;
};

/// Next request slot after a rejection at `reject_slot`, or nullopt
/// (ServiceFailed) when the backoff would land after `last_viable_slot`.
inline std::optional<int> handle_rejection_retry(int reject_slot, int last_viable_slot, const RetryPolicy& policy,
                                                 Rng& rng) {
  const int k = rng.uniform_int(1, std::max(1, policy.backoff_max));
  const int next = reject_slot + k;
  if (next > last_viable_slot) return std::nullopt;
  return next;
}

inline std::optional<int> handle_rejection_retry(const GrantDecision& decision, int reject_slot, int last_viable_slot,
                                                 const RetryPolicy& policy, Rng& rng) {
  if (decision.accepted()) throw Error(ErrorKind::InvariantViolation, "retry requested for an accepted request");
  if (decision.reject().reason != RejectReason::CapacityExceeded) return std::nullopt;
  return handle_rejection_retry(reject_slot, last_viable_slot, policy, rng);
}

}  // namespace pem
