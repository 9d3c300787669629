#pragma once

// Scenario description and its JSON file format. Times are "HH:MM" strings on
// the scenario's grid; power in W, energy in Wh, temperature in degrees C.

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pem/comms.hpp"
#include "pem/core.hpp"
#include "pem/devices.hpp"
#include "pem/server.hpp"

namespace pem {

struct ServerPolicy {
  int backoff_max = 3;
  bool renewable_first = true;
  bool emergency_shedding = true;

  friend bool operator==(const ServerPolicy&, const ServerPolicy&) = default;
};

struct ChannelConfig {
  /// When false, every message is delivered instantly and nothing is logged.
  bool enabled = false;
  std::map<MessageKind, ChannelProfile> profiles{{MessageKind::PacketRequest, ChannelProfile::urllc()},
                                                 {MessageKind::Grant, ChannelProfile::urllc()},
                                                 {MessageKind::Reject, ChannelProfile::urllc()},
                                                 {MessageKind::MeterReport, ChannelProfile::mmtc()},
                                                 {MessageKind::TripSignal, ChannelProfile::urllc()}};
  LatencyBudget budget;
  AggregationWindow aggregation;
  /// Synthetic protection traffic, Poisson.
  double trip_rate_per_hour = 6.0;
  bool meter_reports = true;

  const ChannelProfile& profile(MessageKind k) const { return profiles.at(k); }

  friend bool operator==(const ChannelConfig&, const ChannelConfig&) = default;
};

struct Scenario {
  TimeGrid grid;
  double feeder_capacity_w = 0.0;
  std::vector<DeviceConfig> devices;
  RenewableSpec renewable;
  std::optional<StorageAsset> storage;
  bool import_allowed = true;
  ChannelConfig channels;
  ServerPolicy policy;
  std::uint64_t seed = 0;

  bool is_fleet() const {
    for (const auto& d : devices)
      if (std::holds_alternative<HeaterFleetConfig>(d)) return true;
    return false;
  }

  void validate() const;

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::InvalidScenario, what);
}

inline bool valid_id(const std::string& id) {
  if (id.empty()) return false;
  for (char c : id)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.')) return false;
  return true;
}

}  // namespace detail

inline void Scenario::validate() const {
  using detail::require;
  grid.validate();
  require(feeder_capacity_w > 0.0, "feeder_capacity_w must be positive");
  require(policy.backoff_max >= 1, "backoff_max must be >= 1");
  renewable.validate();
  if (storage) storage->validate();

  std::set<std::string> ids;
  int fleets = 0;
  int households = 0;
  const int H = grid.horizon;
  for (const auto& dev : devices) {
    const std::string& id = device_id(dev);
    require(detail::valid_id(id), "device id '" + id + "' must be non-empty [A-Za-z0-9_.-]");
    require(ids.insert(id).second, "duplicate device id '" + id + "'");
    const std::string at = "device '" + id + "': ";
    if (const auto* t = std::get_if<ThermalDeviceConfig>(&dev)) {
      ++households;
      t->thermal.validate();
      require(t->request_at >= 0 && t->request_at < H, at + "request time outside the horizon");
      require(t->preheat_from < t->service_start, at + "preheat must start before service");
      require(t->service_start < t->service_end, at + "service end must follow service start");
      require(t->preheat_from >= 0 && t->service_end <= H, at + "service window outside the horizon");
      require(t->force_check_at >= t->preheat_from && t->force_check_at <= t->service_start,
              at + "force check must lie in the preheat window");
      require(t->request_at <= t->service_start, at + "request after service start");
      require(t->target_temp_c <= t->max_temp_c, at + "target temperature above the thermostat cut-off");
    } else if (const auto* b = std::get_if<BatteryDeviceConfig>(&dev)) {
      ++households;
      require(b->capacity_wh > 0.0, at + "capacity must be positive");
      require(b->p_max_w > 0.0 && b->packet_w > 0.0, at + "power limits must be positive");
      require(b->arrival >= 0 && b->arrival < H, at + "arrival outside the horizon");
      require(b->deadline > b->arrival, at + "deadline must follow arrival");
      require(b->deadline <= H, at + "deadline outside the horizon");
      require(b->initial_soc_min_fraction >= 0.0 && b->initial_soc_min_fraction <= b->initial_soc_max_fraction &&
                  b->initial_soc_max_fraction <= 1.0,
              at + "initial soc fraction range must satisfy 0 <= lo <= hi <= 1");
      if (b->initial_soc_wh)
        require(*b->initial_soc_wh >= 0.0 && *b->initial_soc_wh <= b->capacity_wh, at + "initial soc outside [0, capacity]");
      if (b->target_soc_wh)
        require(*b->target_soc_wh >= 0.0 && *b->target_soc_wh <= b->capacity_wh, at + "target soc outside [0, capacity]");
    } else if (const auto* c = std::get_if<CycleDeviceConfig>(&dev)) {
      ++households;
      require(!c->profile_w.empty(), at + "empty cycle profile");
      require(c->deadline <= H, at + "deadline outside the horizon");
      for (double w : c->profile_w) require(w >= 0.0 && std::isfinite(w), at + "profile power must be >= 0");
      require(c->earliest_start >= 0 && c->earliest_start <= c->latest_start(), at + "cycle window too short for its profile");
      require(c->request_at >= 0 && c->request_at < H, at + "request time outside the horizon");
      require(c->request_at <= c->latest_start(), at + "request after the latest start");
    } else {
      const auto& f = std::get<HeaterFleetConfig>(dev);
      ++fleets;
      require(f.count >= 0, at + "count must be >= 0");
      f.params.validate();
      require(!f.reference_w.empty(), at + "reference signal is empty");
      for (double r : f.reference_w) require(r >= 0.0 && std::isfinite(r), at + "reference must be >= 0");
    }
  }
  require(fleets <= 1, "at most one heater fleet per scenario");
  require(fleets == 0 || households == 0, "heater fleets and household devices run as separate scenarios");

  for (auto k : kAllMessageKinds) {
    auto it = channels.profiles.find(k);
    require(it != channels.profiles.end(), std::string("missing channel profile for ") + to_string(k));
    it->second.validate();
    if (auto cls = required_class(k))
      require(it->second.cls == *cls, std::string(to_string(k)) + " must use the " + to_string(*cls) + " class");
  }
  channels.budget.validate();
  channels.aggregation.validate();
  require(channels.trip_rate_per_hour >= 0.0, "trip_rate_per_hour must be >= 0");
}

// ---------------------------------------------------------------------------
// JSON

namespace json_io {

using nlohmann::json;

/// Reads fields from one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw Error(ErrorKind::InvalidScenario, where_ + " must be an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <typename T>
  T get(const std::string& key) {
    if (!has(key)) throw Error(ErrorKind::InvalidScenario, where_ + ": missing '" + key + "'");
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::InvalidScenario, where_ + ": bad '" + key + "': " + e.what());
    }
  }

  template <typename T>
  T get_or(const std::string& key, T fallback) {
    return has(key) ? get<T>(key) : fallback;
  }

  const json& raw(const std::string& key) {
    if (!has(key)) throw Error(ErrorKind::InvalidScenario, where_ + ": missing '" + key + "'");
    return j_.at(key);
  }

  int slot(const std::string& key, const TimeGrid& grid) {
    const auto text = get<std::string>(key);
    try {
      return grid.slot_of(text);
    } catch (const Error& e) {
      throw Error(ErrorKind::InvalidScenario, where_ + ": '" + key + "': " + e.what());
    }
  }

  int slot_or(const std::string& key, const TimeGrid& grid, int fallback) {
    return has(key) ? slot(key, grid) : fallback;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw Error(ErrorKind::InvalidScenario, where_ + ": unknown key '" + key + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline MessageKind message_kind_from(const std::string& s) {
  for (auto k : kAllMessageKinds)
    if (s == to_string(k)) return k;
  throw Error(ErrorKind::InvalidScenario, "unknown message kind '" + s + "'");
}

inline ChannelClass channel_class_from(const std::string& s) {
  if (s == "urllc") return ChannelClass::URLLC;
  if (s == "mmtc") return ChannelClass::mMTC;
  throw Error(ErrorKind::InvalidScenario, "channel class must be 'urllc' or 'mmtc', got '" + s + "'");
}

inline Priority read_priority(ObjectReader& r) { return Priority{r.get_or<int>("priority", 0)}; }

inline DeviceConfig device_from_json(const json& j, const TimeGrid& grid) {
  ObjectReader head(j, "device");
  const auto type = head.get<std::string>("type");
  const auto id = head.get<std::string>("id");
  ObjectReader r(j, "device '" + id + "'");
  r.has("type");
  r.has("id");

  if (type == "thermal") {
    ThermalDeviceConfig c;
    c.id = id;
    c.priority = read_priority(r);
    c.thermal.rated_power_w = r.get<double>("rated_power_w");
    c.thermal.capacitance_wh_per_c = r.get_or("capacitance_wh_per_c", c.thermal.capacitance_wh_per_c);
    c.thermal.loss_w_per_c = r.get_or("loss_w_per_c", c.thermal.loss_w_per_c);
    c.thermal.efficiency = r.get_or("efficiency", c.thermal.efficiency);
    c.thermal.ambient_c = r.get_or("ambient_c", c.thermal.ambient_c);
    c.thermal.temp_c = r.get_or("initial_temp_c", c.thermal.ambient_c);
    c.target_temp_c = r.get<double>("target_temp_c");
    c.max_temp_c = r.get_or("max_temp_c", c.target_temp_c + 10.0);
    c.preheat_from = r.slot("preheat_from", grid);
    c.force_check_at = r.slot_or("force_check_at", grid, c.preheat_from);
    c.service_start = r.slot("service_start", grid);
    c.service_end = r.slot("service_end", grid);
    c.request_at = r.slot_or("request_at", grid, 0);
    r.finish();
    return c;
  }
  if (type == "battery") {
    BatteryDeviceConfig c;
    c.id = id;
    c.priority = read_priority(r);
    c.capacity_wh = r.get<double>("capacity_wh");
    c.p_max_w = r.get<double>("p_max_w");
    c.packet_w = r.get_or("packet_w", c.p_max_w);
    c.arrival = r.slot("arrival", grid);
    c.deadline = r.slot("deadline", grid);
    if (r.has("initial_soc_wh")) c.initial_soc_wh = r.get<double>("initial_soc_wh");
    if (r.has("initial_soc_fraction")) {
      const auto range = r.get<std::vector<double>>("initial_soc_fraction");
      detail::require(range.size() == 2, "device '" + id + "': initial_soc_fraction must be [lo, hi]");
      c.initial_soc_min_fraction = range[0];
      c.initial_soc_max_fraction = range[1];
    }
    if (r.has("target_soc_wh")) c.target_soc_wh = r.get<double>("target_soc_wh");
    r.finish();
    return c;
  }
  if (type == "cycle") {
    CycleDeviceConfig c;
    c.id = id;
    c.priority = read_priority(r);
    if (r.has("profile_w")) {
      c.profile_w = r.get<std::vector<double>>("profile_w");
    } else {
      const double power = r.get<double>("power_w");
      const int minutes = r.get<int>("duration_min");
      detail::require(minutes > 0 && minutes % grid.slot_len_min == 0,
                      "device '" + id + "': duration_min must be a positive multiple of the slot length");
      c.profile_w.assign(static_cast<std::size_t>(minutes / grid.slot_len_min), power);
    }
    c.earliest_start = r.slot("earliest_start", grid);
    c.deadline = r.slot("deadline", grid);
    c.request_at = r.slot_or("request_at", grid, 0);
    r.finish();
    return c;
  }
  if (type == "heater_fleet") {
    HeaterFleetConfig c;
    c.id = id;
    c.count = r.get<int>("count");
    auto& p = c.params;
    p.thermal.rated_power_w = r.get_or("rated_power_w", p.thermal.rated_power_w);
    p.thermal.capacitance_wh_per_c = r.get_or("capacitance_wh_per_c", p.thermal.capacitance_wh_per_c);
    p.thermal.loss_w_per_c = r.get_or("loss_w_per_c", p.thermal.loss_w_per_c);
    p.thermal.efficiency = r.get_or("efficiency", p.thermal.efficiency);
    p.thermal.ambient_c = r.get_or("ambient_c", p.thermal.ambient_c);
    if (r.has("deadband_c")) {
      const auto band = r.get<std::vector<double>>("deadband_c");
      detail::require(band.size() == 2, "device '" + id + "': deadband_c must be [low, high]");
      p.t_low_c = band[0];
      p.t_high_c = band[1];
    }
    p.thermal.temp_c = 0.5 * (p.t_low_c + p.t_high_c);
    p.override_margin_c = r.get_or("override_margin_c", p.override_margin_c);
    p.request_rate_max = r.get_or("request_rate_max", p.request_rate_max);
    p.draw_probability = r.get_or("draw_probability", p.draw_probability);
    p.draw_max_c = r.get_or("draw_max_c", p.draw_max_c);
    p.packet_epochs = r.get_or("packet_epochs", p.packet_epochs);
    const json& ref = r.raw("reference_w");
    if (ref.is_number()) {
      c.reference_w = {ref.get<double>()};
    } else {
      try {
        c.reference_w = ref.get<std::vector<double>>();
      } catch (const json::exception&) {
        throw Error(ErrorKind::InvalidScenario, "device '" + id + "': reference_w must be a number or a list");
      }
    }
    r.finish();
    return c;
  }
  throw Error(ErrorKind::InvalidScenario, "device '" + id + "': unknown type '" + type + "'");
}

inline json device_to_json(const DeviceConfig& dev, const TimeGrid& grid) {
  json j;
  j["type"] = device_type(dev);
  j["id"] = device_id(dev);
  if (const auto* t = std::get_if<ThermalDeviceConfig>(&dev)) {
    j["priority"] = t->priority.level;
    j["rated_power_w"] = t->thermal.rated_power_w;
    j["capacitance_wh_per_c"] = t->thermal.capacitance_wh_per_c;
    j["loss_w_per_c"] = t->thermal.loss_w_per_c;
    j["efficiency"] = t->thermal.efficiency;
    j["ambient_c"] = t->thermal.ambient_c;
    j["initial_temp_c"] = t->thermal.temp_c;
    j["target_temp_c"] = t->target_temp_c;
    j["max_temp_c"] = t->max_temp_c;
    j["request_at"] = grid.clock(t->request_at);
    j["preheat_from"] = grid.clock(t->preheat_from);
    j["force_check_at"] = grid.clock(t->force_check_at);
    j["service_start"] = grid.clock(t->service_start);
    j["service_end"] = grid.clock(t->service_end);
  } else if (const auto* b = std::get_if<BatteryDeviceConfig>(&dev)) {
    j["priority"] = b->priority.level;
    j["capacity_wh"] = b->capacity_wh;
    j["p_max_w"] = b->p_max_w;
    j["packet_w"] = b->packet_w;
    j["arrival"] = grid.clock(b->arrival);
    j["deadline"] = grid.clock(b->deadline);
    if (b->initial_soc_wh) j["initial_soc_wh"] = *b->initial_soc_wh;
    j["initial_soc_fraction"] = {b->initial_soc_min_fraction, b->initial_soc_max_fraction};
    if (b->target_soc_wh) j["target_soc_wh"] = *b->target_soc_wh;
  } else if (const auto* c = std::get_if<CycleDeviceConfig>(&dev)) {
    j["priority"] = c->priority.level;
    j["profile_w"] = c->profile_w;
    j["earliest_start"] = grid.clock(c->earliest_start);
    j["deadline"] = grid.clock(c->deadline);
    j["request_at"] = grid.clock(c->request_at);
  } else {
    const auto& f = std::get<HeaterFleetConfig>(dev);
    const auto& p = f.params;
    j["count"] = f.count;
    j["rated_power_w"] = p.thermal.rated_power_w;
    j["capacitance_wh_per_c"] = p.thermal.capacitance_wh_per_c;
    j["loss_w_per_c"] = p.thermal.loss_w_per_c;
    j["efficiency"] = p.thermal.efficiency;
    j["ambient_c"] = p.thermal.ambient_c;
    j["deadband_c"] = {p.t_low_c, p.t_high_c};
    j["override_margin_c"] = p.override_margin_c;
    j["request_rate_max"] = p.request_rate_max;
    j["draw_probability"] = p.draw_probability;
    j["draw_max_c"] = p.draw_max_c;
    j["packet_epochs"] = p.packet_epochs;
    if (f.reference_w.size() == 1)
      j["reference_w"] = f.reference_w.front();
    else
      j["reference_w"] = f.reference_w;
  }
  return j;
}

inline ChannelProfile profile_from_json(const json& j, const std::string& where) {
  ObjectReader r(j, where);
  ChannelProfile p;
  p.cls = channel_class_from(r.get<std::string>("class"));
  p.offset_ms = r.get<double>("offset_ms");
  p.mean_ms = r.get<double>("mean_ms");
  p.loss_prob = r.get<double>("loss");
  p.retransmit_timeout_ms = r.get<double>("timeout_ms");
  p.max_attempts = r.get<int>("max_attempts");
  p.deterministic = r.get_or("deterministic", false);
  r.finish();
  return p;
}

inline json profile_to_json(const ChannelProfile& p) {
  json j{{"class", to_string(p.cls)},       {"offset_ms", p.offset_ms},
         {"mean_ms", p.mean_ms},            {"loss", p.loss_prob},
         {"timeout_ms", p.retransmit_timeout_ms}, {"max_attempts", p.max_attempts}};
  if (p.deterministic) j["deterministic"] = true;
  return j;
}

inline ChannelConfig channels_from_json(const json& j) {
  ChannelConfig c;
  ObjectReader r(j, "channels");
  c.enabled = r.get_or("enabled", true);
  for (auto k : kAllMessageKinds)
    if (r.has(to_string(k))) c.profiles[k] = profile_from_json(r.raw(to_string(k)), std::string("channel ") + to_string(k));
  if (r.has("budgets_ms")) {
    for (const auto& [key, value] : r.raw("budgets_ms").items()) {
      detail::require(value.is_number(), "budgets_ms." + key + " must be a number");
      c.budget.budget_ms[message_kind_from(key)] = value.get<double>();
    }
  }
  if (r.has("aggregation")) {
    ObjectReader a(r.raw("aggregation"), "channels.aggregation");
    c.aggregation.window_ms = a.get_or("window_ms", c.aggregation.window_ms);
    const auto policy = a.get_or<std::string>("policy", "periodic");
    if (policy == "periodic")
      c.aggregation.policy = AggregationWindow::Policy::Periodic;
    else if (policy == "event")
      c.aggregation.policy = AggregationWindow::Policy::EventBased;
    else
      throw Error(ErrorKind::InvalidScenario, "aggregation policy must be 'periodic' or 'event'");
    c.aggregation.threshold_w = a.get_or("threshold_w", c.aggregation.threshold_w);
    a.finish();
  }
  c.trip_rate_per_hour = r.get_or("trip_rate_per_hour", c.trip_rate_per_hour);
  c.meter_reports = r.get_or("meter_reports", c.meter_reports);
  r.finish();
  return c;
}

inline json channels_to_json(const ChannelConfig& c) {
  json j;
  j["enabled"] = c.enabled;
  for (const auto& [k, p] : c.profiles) j[to_string(k)] = profile_to_json(p);
  json budgets = json::object();
  for (const auto& [k, b] : c.budget.budget_ms) budgets[to_string(k)] = b;
  j["budgets_ms"] = budgets;
  j["aggregation"] = {{"window_ms", c.aggregation.window_ms},
                      {"policy", c.aggregation.policy == AggregationWindow::Policy::Periodic ? "periodic" : "event"},
                      {"threshold_w", c.aggregation.threshold_w}};
  j["trip_rate_per_hour"] = c.trip_rate_per_hour;
  j["meter_reports"] = c.meter_reports;
  return j;
}

inline RenewableSpec renewable_from_json(const json& j) {
  ObjectReader r(j, "renewable");
  RenewableSpec s;
  const auto type = r.get_or<std::string>("type", "none");
  if (type == "none") {
    s.kind = RenewableSpec::Kind::None;
  } else if (type == "fixed") {
    s.kind = RenewableSpec::Kind::Fixed;
    s.values_w = r.get<std::vector<double>>("values_w");
  } else if (type == "random_walk") {
    s.kind = RenewableSpec::Kind::RandomWalk;
    s.mean_w = r.get<double>("mean_w");
    s.volatility_w = r.get<double>("volatility_w");
    s.reversion = r.get_or("reversion", s.reversion);
    s.max_w = r.get_or("max_w", s.max_w);
    s.initial_w = r.get_or("initial_w", s.mean_w);
  } else {
    throw Error(ErrorKind::InvalidScenario, "renewable type must be none, fixed or random_walk");
  }
  r.finish();
  return s;
}

inline json renewable_to_json(const RenewableSpec& s) {
  switch (s.kind) {
    case RenewableSpec::Kind::None: return json{{"type", "none"}};
    case RenewableSpec::Kind::Fixed: return json{{"type", "fixed"}, {"values_w", s.values_w}};
    case RenewableSpec::Kind::RandomWalk:
      return json{{"type", "random_walk"}, {"mean_w", s.mean_w},   {"volatility_w", s.volatility_w},
                  {"reversion", s.reversion}, {"max_w", s.max_w}, {"initial_w", s.initial_w}};
  }
  return json{};
}

inline Scenario scenario_from_json(const json& j) {
  ObjectReader r(j, "scenario");
  Scenario s;
  {
    ObjectReader g(r.raw("grid"), "grid");
    const int start = parse_clock(g.get<std::string>("start"));
    const int slot_min = g.get_or("slot_min", 10);
    detail::require(slot_min > 0, "grid.slot_min must be positive");
    int horizon = 0;
    if (g.has("horizon")) {
      horizon = g.get<int>("horizon");
    } else {
      const int end = parse_clock(g.get<std::string>("end"));
      detail::require((end - start) % slot_min == 0, "grid end is not on the slot grid");
      horizon = (end - start) / slot_min;
    }
    g.finish();
    s.grid = TimeGrid::make(start, slot_min, horizon);
  }
  s.feeder_capacity_w = r.get<double>("feeder_capacity_w");
  s.import_allowed = r.get_or("import_allowed", true);
  if (r.has("devices")) {
    const json& devs = r.raw("devices");
    detail::require(devs.is_array(), "devices must be a list");
    for (const auto& d : devs) s.devices.push_back(device_from_json(d, s.grid));
  }
  if (r.has("renewable")) s.renewable = renewable_from_json(r.raw("renewable"));
  if (r.has("storage")) {
    ObjectReader st(r.raw("storage"), "storage");
    StorageAsset a;
    a.capacity_wh = st.get<double>("capacity_wh");
    a.soc_wh = st.get_or("initial_soc_wh", 0.0);
    a.p_charge_max_w = st.get<double>("p_charge_max_w");
    a.p_discharge_max_w = st.get<double>("p_discharge_max_w");
    a.efficiency = st.get_or("efficiency", 1.0);
    st.finish();
    s.storage = a;
  }
  if (r.has("channels")) s.channels = channels_from_json(r.raw("channels"));
  if (r.has("policy")) {
    ObjectReader p(r.raw("policy"), "policy");
    s.policy.backoff_max = p.get_or("backoff_max", s.policy.backoff_max);
    s.policy.renewable_first = p.get_or("renewable_first", s.policy.renewable_first);
    s.policy.emergency_shedding = p.get_or("emergency_shedding", s.policy.emergency_shedding);
    p.finish();
  }
  s.seed = r.get_or<std::uint64_t>("seed", 0);
  r.finish();
  s.validate();
  return s;
}

inline json scenario_to_json(const Scenario& s) {
  json j;
  j["grid"] = {{"start", format_clock(s.grid.epoch_start_min)},
               {"slot_min", s.grid.slot_len_min},
               {"horizon", s.grid.horizon}};
  j["feeder_capacity_w"] = s.feeder_capacity_w;
  j["import_allowed"] = s.import_allowed;
  j["devices"] = json::array();
  for (const auto& d : s.devices) j["devices"].push_back(device_to_json(d, s.grid));
  j["renewable"] = renewable_to_json(s.renewable);
  if (s.storage)
    j["storage"] = {{"capacity_wh", s.storage->capacity_wh},
                    {"initial_soc_wh", s.storage->soc_wh},
                    {"p_charge_max_w", s.storage->p_charge_max_w},
                    {"p_discharge_max_w", s.storage->p_discharge_max_w},
                    {"efficiency", s.storage->efficiency}};
  else
    j["storage"] = nullptr;
  j["channels"] = channels_to_json(s.channels);
  j["policy"] = {{"backoff_max", s.policy.backoff_max},
                 {"renewable_first", s.policy.renewable_first},
                 {"emergency_shedding", s.policy.emergency_shedding}};
  j["seed"] = s.seed;
  return j;
}

}  // namespace json_io

/// Parses scenario text. Syntax errors carry line and column.
inline Scenario parse_scenario(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::InvalidScenario, std::string("malformed JSON: ") + e.what());
  }
  return json_io::scenario_from_json(j);
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::InvalidScenario, "cannot open scenario file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_scenario(buf.str());
}

inline std::string dump_scenario(const Scenario& s) { return json_io::scenario_to_json(s).dump(2) + "\n"; }

}  // namespace pem
