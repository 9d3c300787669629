// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any of them fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "pem/pem.hpp"
#include "support/oracles.hpp"
#include "support/random_scenario.hpp"

using namespace pem;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Check {
  bool ok = true;
  std::string detail;
  void fail(const std::string& why) {
    if (ok) detail = why;
    ok = false;
  }
  void note(const std::string& what) {
    if (ok) detail = what;
  }
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Check fig3_feasibility() {
  Check c;
  double worst_temp = 1e9, worst_time = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto t0 = Clock::now();
    const auto r = run_scenario(household_scenario(seed));
    worst_time = std::max(worst_time, seconds_since(t0));
    for (const auto& o : r.requests) {
      if (!o.accepted) c.fail("seed " + std::to_string(seed) + ": " + o.device_id + " not accepted");
      if (o.status != RequestStatus::Completed)
        c.fail("seed " + std::to_string(seed) + ": " + o.device_id + " " + to_string(o.status));
    }
    const auto sauna = *r.device_index("sauna");
    for (int b = r.grid.slot_of("19:00"); b <= r.grid.slot_of("20:00"); ++b)
      worst_temp = std::min(worst_temp, r.state_at_boundary(sauna, b));
  }
  if (worst_temp < 69.5) c.fail(fmt("sauna fell to %.3f C", worst_temp));
  if (worst_time >= 1.0) c.fail(fmt("slowest run %.3f s", worst_time));
  c.note(fmt("100 seeds, min sauna %.2f C, slowest run %.4f s", worst_temp, worst_time));
  return c;
}

Check forced_start_derivation() {
  Check c;
  const auto g = TimeGrid::make(16 * 60, 10, 48);
  const auto ev = g.clock(compute_forced_start(9166.7, 5000.0, g.slot_of("24:00"), g));
  const auto dw = g.clock(latest_cycle_start(6, g.slot_of("24:00")));
  if (ev != "22:10") c.fail("EV forced start " + ev);
  if (dw != "23:00") c.fail("dishwasher forced start " + dw);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = run_scenario(household_scenario(seed));
    for (const auto& o : r.requests)
      if (o.device_id == "dishwasher" && g.clock(o.forced_start) != "23:00")
        c.fail("engine dishwasher forced start " + g.clock(o.forced_start));
  }
  c.note("EV " + ev + ", dishwasher " + dw);
  return c;
}

Check admission_oracle() {
  Check c;
  Rng rng(derive_seed(2024, Stream::Server, 99));
  const auto t0 = Clock::now();
  int agree = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto in = pem::testing::random_small_instance(rng);
    if (pem::testing::oracle_admission(in) == pem::testing::engine_admission(in))
      ++agree;
    else
      c.fail("instance " + std::to_string(i) + " disagrees");
  }
  const double t = seconds_since(t0);
  if (t >= 10.0) c.fail(fmt("took %.2f s", t));
  c.note(std::to_string(agree) + "/1000 agree in " + fmt("%.3f s", t));
  return c;
}

Check fleet_tracking() {
  Check c;
  const auto ref = load_reference(std::string(PEM_SOURCE_DIR) + "/scenarios/fleet_reference.csv");
  const auto t0 = Clock::now();
  const auto r = run_scenario(fleet_scenario(1000, ref, 0));
  const double t = seconds_since(t0);
  const auto s = summarize(r);
  if (r.fleet.size() != 160) c.fail("expected 160 epochs");
  if (s.fleet_mean_abs_error_w > 4500.0) c.fail(fmt("mean |err| %.1f W", s.fleet_mean_abs_error_w));
  if (s.fleet_band_violations != 0) c.fail(std::to_string(s.fleet_band_violations) + " band violations");
  if (t >= 60.0) c.fail(fmt("took %.2f s", t));
  c.note(fmt("mean |err| %.1f W, 0 band violations, %.3f s", s.fleet_mean_abs_error_w, t));
  return c;
}

Check conservation() {
  Check c;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = run_scenario(pem::testing::random_scenario(1000 + seed));
    if (auto v = audit_conservation(r))
      c.fail("seed " + std::to_string(1000 + seed) + " slot " + std::to_string(v->slot) + ": " + v->what);
  }
  auto r = run_scenario(household_scenario(0));
  r.slots[20].imported_w -= 1.0 / r.grid.slot_hours();
  const auto v = audit_conservation(r);
  if (!v || v->slot != 20) c.fail("1 Wh corruption at slot 20 not detected");
  c.note("100 random scenarios balanced; 1 Wh corruption flagged at slot 20");
  return c;
}

Check channel_statistics() {
  Check c;
  ChannelProfile p = ChannelProfile::urllc();
  p.loss_prob = 0.0;
  Rng rng(derive_seed(7, Stream::Channel, 0));
  const int n = 100'000;
  int tail = 0;
  for (int i = 0; i < n; ++i) tail += sample_delay(p, rng) > p.offset_ms + 2.0 * (p.mean_ms - p.offset_ms);
  const double frac = static_cast<double>(tail) / n;
  if (std::abs(frac - std::exp(-2.0)) > 0.01) c.fail(fmt("tail %.4f", frac));

  p.loss_prob = 0.5;
  p.max_attempts = 64;
  double attempts = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto r = transmit(MessageEnvelope{static_cast<std::uint64_t>(i), MessageKind::Grant, "x", 0.0, 0.0, 0.0}, p, 11);
    if (auto* d = std::get_if<Delivered>(&r)) attempts += d->attempts;
  }
  const double mean = attempts / n;
  if (std::abs(mean - 2.0) > 0.04) c.fail(fmt("mean attempts %.4f", mean));

  const auto trip = ChannelProfile::urllc();
  std::vector<DeliveryRecord> log;
  for (int i = 0; i < n; ++i) {
    const MessageEnvelope m{static_cast<std::uint64_t>(i), MessageKind::TripSignal, "feeder", 0.0, 1.0, 0.0};
    const auto r = transmit(m, trip, 12);
    DeliveryRecord rec{m, trip.cls, false, 0.0, 0};
    if (auto* d = std::get_if<Delivered>(&r)) {
      rec.delivered = true;
      rec.delivered_at_ms = d->at_ms;
      rec.attempts = d->attempts;
    }
    log.push_back(rec);
  }
  const double viol = audit_budget(log, LatencyBudget{}).at(MessageKind::TripSignal);
  if (viol >= 1e-3) c.fail(fmt("trip violation rate %.5f", viol));
  c.note(fmt("tail %.4f (e^-2 = 0.1353), mean attempts %.4f, trip violations %.5f", frac, mean, viol));
  return c;
}

Check null_channel() {
  Check c;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto off = household_scenario(seed);
    off.channels.enabled = false;
    auto null = off;
    null.channels.enabled = true;
    for (auto k : kAllMessageKinds) null.channels.profiles[k] = ChannelProfile::null_channel(null.channels.profiles[k].cls);
    const auto a = run_scenario(off);
    const auto b = run_scenario(null);
    if (a.slots != b.slots || a.requests != b.requests || a.state_trace != b.state_trace ||
        slots_csv(a) != slots_csv(b) || requests_csv(a) != requests_csv(b))
      c.fail("seed " + std::to_string(seed) + " differs");
  }
  c.note("20 seeds identical");
  return c;
}

Check determinism() {
  Check c;
  const auto root = fs::temp_directory_path() / "pem_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::uint64_t> seeds(12);
  std::iota(seeds.begin(), seeds.end(), 40);
  auto shuffled = seeds;
  std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(3));
  const auto base = household_scenario(0);
  write_batch(base, seeds, root / "a", 1);
  write_batch(base, shuffled, root / "b", 3);
  int files = 0;
  for (auto seed : seeds) {
    const auto dir = "seed_" + std::to_string(seed);
    for (const char* f : {"slots.csv", "requests.csv", "channel.csv", "summary.json"}) {
      const auto a = slurp(root / "a" / dir / f);
      if (a.empty() || a != slurp(root / "b" / dir / f)) c.fail(dir + "/" + f + " differs");
      ++files;
    }
  }
  write_bundle(run_scenario(fleet_scenario(200, {300'000.0}, 9)), root / "fa");
  write_bundle(run_scenario(fleet_scenario(200, {300'000.0}, 9)), root / "fb");
  for (const char* f : {"slots.csv", "fleet.csv", "channel.csv", "summary.json"})
    if (slurp(root / "fa" / f) != slurp(root / "fb" / f)) c.fail(std::string("fleet ") + f + " differs");
  fs::remove_all(root);
  c.note(std::to_string(files) + " batch files byte-identical across order and thread count");
  return c;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Check()>>> criteria{
      {"fig3 feasibility", fig3_feasibility},
      {"forced start derivation", forced_start_derivation},
      {"admission oracle equivalence", admission_oracle},
      {"fleet tracking", fleet_tracking},
      {"energy conservation", conservation},
      {"channel statistics", channel_statistics},
      {"null channel equivalence", null_channel},
      {"determinism", determinism},
  };
  int failed = 0;
  int n = 0;
  for (const auto& [name, fn] : criteria) {
    ++n;
    Check c;
    try {
      c = fn();
    } catch (const std::exception& e) {
      c.fail(std::string("exception: ") + e.what());
    }
    if (!c.ok) ++failed;
    std::printf("%s %d %s: %s\n", c.ok ? "PASS" : "FAIL", n, name, c.detail.c_str());
  }
  std::printf("%d/%d criteria passed\n", n - failed, n);
  return failed ? 1 : 0;
}
