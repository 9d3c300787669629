#pragma once

// Result bundle: slots.csv, requests.csv, channel.csv, fleet.csv and
// summary.json. Renderers return strings so tests can compare them directly.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>

#include <json.hpp>

#include "pem/engine.hpp"

namespace pem {

namespace detail {

inline std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  std::string s = buf;
  if (s == "-0.000") s = "0.000";
  return s;
}

inline std::string slot_or_empty(const TimeGrid& g, int slot) { return slot < 0 ? "" : g.clock(slot); }

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

}  // namespace detail

inline std::string slots_csv(const RunResult& r) {
  std::string out = "slot,clock";
  for (const auto& id : r.device_ids) out += ",granted_" + id + "_w";
  for (const auto& id : r.device_ids) out += ",consumed_" + id + "_w";
  out += ",renewable_available_w,renewable_used_w,storage_soc_wh,storage_flow_w,imported_w,curtailed_w,emergency\n";
  for (const auto& s : r.slots) {
    out += std::to_string(s.slot) + "," + r.grid.clock(s.slot);
    for (double g : s.granted_w) out += "," + detail::num(g);
    for (double c : s.consumed_w) out += "," + detail::num(c);
    out += "," + detail::num(s.renewable_available_w) + "," + detail::num(s.renewable_used_w) + "," +
           detail::num(s.storage_soc_wh) + "," + detail::num(s.storage_flow_w) + "," + detail::num(s.imported_w) +
           "," + detail::num(s.curtailed_w) + "," + (s.emergency ? "1" : "0") + "\n";
  }
  return out;
}

inline std::string requests_csv(const RunResult& r) {
  std::string out =
      "device_id,kind,priority,first_issued,attempts,retries,status,reject_reason,accepted_at,forced_start,"
      "first_consumption,completion,deadline,deadline_met,waiting_slots,grants_lost\n";
  const auto& g = r.grid;
  for (const auto& o : r.requests) {
    const auto wait = o.waiting_slots();
    out += o.device_id + "," + o.kind + "," + std::to_string(o.priority) + "," +
           detail::slot_or_empty(g, o.first_issued) + "," + std::to_string(o.attempts) + "," +
           std::to_string(o.retries()) + "," + to_string(o.status) + "," +
           (o.last_reject ? to_string(*o.last_reject) : "") + "," + detail::slot_or_empty(g, o.accepted_at) + "," +
           detail::slot_or_empty(g, o.forced_start) + "," + detail::slot_or_empty(g, o.first_consumption) + "," +
           detail::slot_or_empty(g, o.completion) + "," + detail::slot_or_empty(g, o.deadline) + "," +
           (o.deadline_met() ? "1" : "0") + "," + (wait ? std::to_string(*wait) : "") + "," +
           std::to_string(o.grants_lost) + "\n";
  }
  return out;
}

inline std::string channel_csv(const RunResult& r) {
  std::string out = "id,kind,class,subject,sent_ms,delivered_ms,attempts,status,latency_ms\n";
  for (const auto& m : r.messages) {
    out += std::to_string(m.message.id) + "," + to_string(m.message.kind) + "," + to_string(m.cls) + "," +
           m.message.subject + "," + detail::num(m.message.sent_at_ms) + "," +
           (m.delivered ? detail::num(m.delivered_at_ms) : "") + "," + std::to_string(m.attempts) + "," +
           (m.delivered ? "delivered" : "dropped") + "," + (m.delivered ? detail::num(m.latency_ms()) : "") + "\n";
  }
  return out;
}

inline std::string fleet_csv(const RunResult& r) {
  std::string out =
      "slot,clock,reference_w,aggregate_w,requests,accepted,force_on,force_off,on,mean_temp_c,min_temp_c,"
      "max_temp_c,band_violations\n";
  for (const auto& f : r.fleet) {
    out += std::to_string(f.slot) + "," + r.grid.clock(f.slot) + "," + detail::num(f.reference_w) + "," +
           detail::num(f.aggregate_w) + "," + std::to_string(f.requests) + "," + std::to_string(f.accepted) + "," +
           std::to_string(f.force_on) + "," + std::to_string(f.force_off) + "," + std::to_string(f.on) + "," +
           detail::num(f.mean_temp_c) + "," + detail::num(f.min_temp_c) + "," + detail::num(f.max_temp_c) + "," +
           std::to_string(f.band_violations) + "\n";
  }
  return out;
}

inline nlohmann::json summary_to_json(const RunSummary& s) {
  nlohmann::json j;
  j["seed"] = s.seed;
  if (s.error) {
    j["error"] = *s.error;
    j["exit_code"] = s.error_exit_code;
    return j;
  }
  j["requests"] = s.requests;
  j["accepted"] = s.accepted;
  j["rejections"] = s.rejections;
  j["completed"] = s.completed;
  j["deadline_misses"] = s.deadline_misses;
  j["service_failed"] = s.service_failed;
  j["aborted"] = s.aborted;
  j["mean_waiting_slots"] = s.mean_waiting_slots;
  j["energy_wh"] = {{"consumed", s.consumed_wh},
                    {"renewable_available", s.renewable_available_wh},
                    {"renewable_used", s.renewable_used_wh},
                    {"imported", s.imported_wh},
                    {"curtailed", s.curtailed_wh},
                    {"storage_charge", s.storage_charge_wh},
                    {"storage_discharge", s.storage_discharge_wh}};
  j["peak_load_w"] = s.peak_load_w;
  j["emergency_slots"] = s.emergency_slots;
  j["shed_events"] = s.shed_events;
  j["messages"] = s.messages;
  j["messages_dropped"] = s.messages_dropped;
  nlohmann::json rates = nlohmann::json::object();
  for (const auto& [k, v] : s.violation_rates) rates[to_string(k)] = v;
  j["budget_violation_rate"] = rates;
  j["fleet_mean_abs_error_w"] = s.fleet_mean_abs_error_w;
  j["fleet_band_violations"] = s.fleet_band_violations;
  j["conservation_ok"] = s.conservation_ok;
  return j;
}

inline std::string summary_json(const RunSummary& s) { return summary_to_json(s).dump(2) + "\n"; }

/// Writes every file of one run into `dir` (created if missing).
inline void write_bundle(const RunResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_file(dir / "slots.csv", slots_csv(r));
  if (r.fleet.empty())
    detail::write_file(dir / "requests.csv", requests_csv(r));
  else
    detail::write_file(dir / "fleet.csv", fleet_csv(r));
  detail::write_file(dir / "channel.csv", channel_csv(r));
  detail::write_file(dir / "summary.json", summary_json(summarize(r)));
}

inline std::string batch_csv(std::span<const RunSummary> runs) {
  std::string out =
      "seed,status,accepted,completed,deadline_misses,service_failed,consumed_wh,renewable_used_wh,imported_wh,"
      "curtailed_wh,emergency_slots,conservation_ok\n";
  for (const auto& s : runs) {
    out += std::to_string(s.seed) + "," + (s.error ? "error" : "ok") + "," + std::to_string(s.accepted) + "," +
           std::to_string(s.completed) + "," + std::to_string(s.deadline_misses) + "," +
           std::to_string(s.service_failed) + "," + detail::num(s.consumed_wh) + "," +
           detail::num(s.renewable_used_wh) + "," + detail::num(s.imported_wh) + "," + detail::num(s.curtailed_wh) +
           "," + std::to_string(s.emergency_slots) + "," + (s.conservation_ok ? "1" : "0") + "\n";
  }
  return out;
}

/// Runs every seed and writes DIR/seed_<N>/ plus batch.csv and
/// batch_summary.json. Workers never share an output file.
inline std::vector<RunSummary> write_batch(const Scenario& base, std::span<const std::uint64_t> seeds,
                                           const std::filesystem::path& dir, unsigned threads = 0) {
  std::filesystem::create_directories(dir);
  std::vector<RunSummary> out(seeds.size());
  detail::for_each_index(seeds.size(), threads, [&](std::size_t i) {
    Scenario s = base;
    s.seed = seeds[i];
    out[i] = detail::guarded_run(s, [&](const RunResult& r) {
      write_bundle(r, dir / ("seed_" + std::to_string(seeds[i])));
    });
  });
  nlohmann::json all = nlohmann::json::array();
  for (const auto& s : out) all.push_back(summary_to_json(s));
  detail::write_file(dir / "batch.csv", batch_csv(out));
  detail::write_file(dir / "batch_summary.json", all.dump(2) + "\n");
  return out;
}

}  // namespace pem
