// pemsim: command-line front end for the packetized energy simulator.
//
// Exit codes: 0 success, 1 bad input (scenario, flags, malformed JSON),
// 2 the engine hit an invariant violation.

#include <charconv>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pem/pem.hpp"

namespace {

std::vector<std::uint64_t> parse_seed_range(const std::string& text) {
  const auto dots = text.find("..");
  auto number = [&](std::string_view s) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
      throw pem::Error(pem::ErrorKind::InvalidScenario, "bad seed range '" + text + "'");
    return v;
  };
  std::vector<std::uint64_t> seeds;
  if (dots == std::string::npos) {
    seeds.push_back(number(text));
    return seeds;
  }
  const auto lo = number(std::string_view(text).substr(0, dots));
  const auto hi = number(std::string_view(text).substr(dots + 2));
  if (hi < lo) throw pem::Error(pem::ErrorKind::InvalidScenario, "seed range '" + text + "' is empty");
  for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
  return seeds;
}

int run_one(const pem::Scenario& s, const std::string& out) {
  const auto result = pem::run_scenario(s);
  pem::write_bundle(result, out);
  const auto summary = pem::summarize(result);
  std::cout << "seed " << summary.seed << ": " << summary.completed << " completed, " << summary.deadline_misses
            << " missed, " << summary.service_failed << " failed, imported " << pem::detail::num(summary.imported_wh)
            << " Wh -> " << out << "\n";
  if (!summary.conservation_ok) {
    std::cerr << "error: energy conservation audit failed\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Packetized energy management simulator"};
  app.require_subcommand(1);

  std::string scenario_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::string seeds_text;
  unsigned threads = 0;
  int count = 1000;
  std::string ref_path;

  auto* run = app.add_subcommand("run", "Run one scenario");
  run->add_option("--scenario", scenario_path, "Scenario JSON file")->required();
  run->add_option("--seed", seed, "Override the scenario seed");
  run->add_option("--out", out_dir, "Output directory")->required();

  auto* batch = app.add_subcommand("batch", "Run a scenario over a seed range");
  batch->add_option("--scenario", scenario_path, "Scenario JSON file")->required();
  batch->add_option("--seeds", seeds_text, "Seed range A..B")->required();
  batch->add_option("--out", out_dir, "Output directory")->required();
  batch->add_option("--threads", threads, "Worker threads (0 = all cores)");

  auto* validate = app.add_subcommand("validate", "Check a scenario file");
  validate->add_option("--scenario", scenario_path, "Scenario JSON file")->required();

  auto* fig3 = app.add_subcommand("fig3", "Run the built-in sauna / EV / dishwasher evening");
  fig3->add_option("--seed", seed, "Seed");
  fig3->add_option("--out", out_dir, "Output directory")->required();

  auto* fleet = app.add_subcommand("fleet", "Run a water-heater fleet against a reference trace");
  fleet->add_option("--count", count, "Number of heaters")->check(CLI::PositiveNumber);
  fleet->add_option("--ref", ref_path, "Reference trace, one value (W) per 3-minute epoch")->required();
  fleet->add_option("--seed", seed, "Seed");
  fleet->add_option("--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*validate) {
      const auto s = pem::load_scenario(scenario_path);
      std::cout << "ok: " << s.devices.size() << " devices, " << s.grid.horizon << " slots of " << s.grid.slot_len_min
                << " min\n";
      return 0;
    }
    if (*run) {
      auto s = pem::load_scenario(scenario_path);
      if (seed) s.seed = *seed;
      return run_one(s, out_dir);
    }
    if (*fig3) return run_one(pem::household_scenario(seed.value_or(0)), out_dir);
    if (*fleet) return run_one(pem::fleet_scenario(count, pem::load_reference(ref_path), seed.value_or(0)), out_dir);
    if (*batch) {
      const auto s = pem::load_scenario(scenario_path);
      const auto seeds = parse_seed_range(seeds_text);
      const auto summaries = pem::write_batch(s, seeds, out_dir, threads);
      int worst = 0;
      for (const auto& sum : summaries) {
        if (sum.error) {
          std::cerr << "seed " << sum.seed << ": " << *sum.error << "\n";
          worst = std::max(worst, sum.error_exit_code);
        } else if (!sum.conservation_ok) {
          worst = 2;
        }
      }
      std::cout << summaries.size() << " runs -> " << out_dir << "\n";
      return worst;
    }
  } catch (const pem::Error& e) {
    std::cerr << "error: " << e.what();
    if (e.slot() >= 0) std::cerr << " (slot " << e.slot() << ")";
    std::cerr << "\n";
    return pem::exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
