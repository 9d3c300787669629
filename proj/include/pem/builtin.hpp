#pragma once

// Ready-made scenarios: the evening household with sauna, EV and dishwasher,
// and a water-heater fleet following a reference trace.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pem/scenario.hpp"

namespace pem {

inline Scenario household_scenario(std::uint64_t seed = 0) {
  Scenario s;
  s.grid = TimeGrid::make(parse_clock("16:00"), 10, 48);
  s.feeder_capacity_w = 10'000.0;
  s.seed = seed;

  ThermalDeviceConfig sauna;
  sauna.id = "sauna";
  sauna.priority = Priority{2};
  sauna.thermal = ThermalLoadState{20.0, 20.0, 60.0, 10.0, 3600.0, 1.0};
  sauna.target_temp_c = 70.0;
  sauna.max_temp_c = 80.0;
  sauna.request_at = s.grid.slot_of("16:00");
  sauna.preheat_from = s.grid.slot_of("16:30");
  sauna.force_check_at = s.grid.slot_of("18:20");
  sauna.service_start = s.grid.slot_of("19:00");
  sauna.service_end = s.grid.slot_of("20:00");

  BatteryDeviceConfig ev;
  ev.id = "ev";
  ev.priority = Priority{3};
  ev.capacity_wh = 30'000.0;
  ev.p_max_w = 5000.0;
  ev.packet_w = 1000.0;
  ev.arrival = s.grid.slot_of("16:00");
  ev.deadline = s.grid.slot_of("24:00");
  ev.initial_soc_min_fraction = 0.0;
  ev.initial_soc_max_fraction = 0.5;

  CycleDeviceConfig dishwasher;
  dishwasher.id = "dishwasher";
  dishwasher.priority = Priority{1};
  dishwasher.profile_w.assign(6, 2000.0);
  dishwasher.earliest_start = s.grid.slot_of("20:00");
  dishwasher.deadline = s.grid.slot_of("24:00");
  dishwasher.request_at = s.grid.slot_of("16:00");

  s.devices = {sauna, ev, dishwasher};

  s.renewable.kind = RenewableSpec::Kind::RandomWalk;
  s.renewable.mean_w = 3000.0;
  s.renewable.initial_w = 3000.0;
  s.renewable.volatility_w = 1000.0;
  s.renewable.reversion = 0.2;
  s.renewable.max_w = 8000.0;

  s.import_allowed = true;
  s.channels.enabled = true;
  return s;
}

/// Reads a reference trace: numbers separated by whitespace, commas or
/// newlines. Anything after '#' on a line is ignored, and so are lines that
/// hold no number (a CSV header, say).
inline std::vector<double> parse_reference(const std::string& text) {
  std::vector<double> out;
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    for (char& c : line)
      if (c == ',' || c == ';' || c == '\t' || c == '\r') c = ' ';
    std::istringstream fields(line);
    std::string tok;
    std::vector<double> row;
    bool numeric = true;
    while (fields >> tok) {
      try {
        std::size_t used = 0;
        const double v = std::stod(tok, &used);
        if (used != tok.size()) throw std::invalid_argument(tok);
        row.push_back(v);
      } catch (const std::exception&) {
        numeric = false;
      }
    }
    if (!numeric) {
      if (!out.empty() || !row.empty())
        throw Error(ErrorKind::InvalidScenario, "reference line " + std::to_string(line_no) + " is not numeric");
      continue;
    }
    for (double v : row) {
      if (!(v >= 0.0)) throw Error(ErrorKind::InvalidScenario, "reference values must be >= 0");
      out.push_back(v);
    }
  }
  if (out.empty()) throw Error(ErrorKind::InvalidScenario, "reference trace is empty");
  return out;
}

inline std::vector<double> load_reference(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::InvalidScenario, "cannot open reference file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_reference(buf.str());
}

/// 8 h of 3-minute epochs. Feeder capacity covers every heater at once.
inline Scenario fleet_scenario(int count, std::vector<double> reference_w, std::uint64_t seed = 0) {
  Scenario s;
  s.grid = TimeGrid::make(0, 3, 160);
  HeaterFleetConfig fleet;
  fleet.id = "heaters";
  fleet.count = count;
  fleet.reference_w = std::move(reference_w);
  s.feeder_capacity_w = std::max(1.0, count * fleet.params.thermal.rated_power_w);
  s.devices = {fleet};
  s.seed = seed;
  return s;
}

}  // namespace pem
