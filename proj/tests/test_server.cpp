#include <gtest/gtest.h>

#include <map>
#include <set>

#include "pem/pem.hpp"
#include "support/oracles.hpp"

using namespace pem;

namespace {

TimeGrid evening() { return TimeGrid::make(parse_clock("16:00"), 10, 48); }

SlotDemand want(const std::string& id, int prio, double w, double packet = 0.0) {
  SlotDemand d;
  d.device_id = id;
  d.priority = Priority{prio};
  d.want_w = w;
  d.packet_w = packet;
  return d;
}

}  // namespace

TEST(ForcedStart, EvCaseLandsOn2210) {
  const auto g = evening();
  const int s = compute_forced_start(9166.7, 5000.0, g.slot_of("24:00"), g);
  EXPECT_EQ(g.clock(s), "22:10");
}

TEST(ForcedStart, DishwasherLatestStartIs2300) {
  const auto g = evening();
  EXPECT_EQ(g.clock(latest_cycle_start(6, g.slot_of("24:00"))), "23:00");
}

TEST(ForcedStart, AgreesWithWalkBackOracle) {
  const auto g = evening();
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const double e = std::round(rng.uniform(0.0, 30000.0) * 10.0) / 10.0;
    const double p = rng.uniform_int(1, 10) * 500.0;
    const int deadline = rng.uniform_int(1, 48);
    const auto want = pem::testing::oracle_forced_start(e, p, deadline, g.slot_hours(), 0);
    if (want) {
      EXPECT_EQ(compute_forced_start(e, p, deadline, g), *want) << e << " " << p << " " << deadline;
    } else {
      EXPECT_THROW(compute_forced_start(e, p, deadline, g), Error);
    }
  }
}

TEST(ForcedStart, ZeroNeedStartsAtDeadline) {
  const auto g = evening();
  EXPECT_EQ(compute_forced_start(0.0, 5000.0, 30, g), 30);
  try {
    compute_forced_start(1e6, 5000.0, 10, g, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InfeasibleDeadline);
  }
}

TEST(Ledger, CommitReleaseAndTrim) {
  CommitmentLedger l(10);
  l.commit("a", ForcedProfile::constant(2, 6, 1000.0));
  l.commit("b", ForcedProfile{4, {500.0, 500.0}});
  EXPECT_DOUBLE_EQ(l.committed(4), 1500.0);
  EXPECT_EQ(l.first_violation(ForcedProfile{3, {600.0, 600.0}}, 2000.0), 4);
  EXPECT_FALSE(l.first_violation(ForcedProfile{3, {600.0}}, 2000.0));
  l.trim_before("a", 5);
  EXPECT_DOUBLE_EQ(l.committed(4), 500.0);
  EXPECT_DOUBLE_EQ(l.committed(5), 1500.0);
  l.trim_before("a", 3);  // never grows
  EXPECT_DOUBLE_EQ(l.committed(4), 500.0);
  l.release("a");
  l.release("b");
  EXPECT_DOUBLE_EQ(l.max_committed(), 0.0);
  EXPECT_EQ(l.size(), 0u);
}

TEST(Admission, MatchesSuperpositionOracle) {
  Rng rng(2024);
  for (int i = 0; i < 500; ++i) {
    const auto in = pem::testing::random_small_instance(rng);
    EXPECT_EQ(pem::testing::engine_admission(in), pem::testing::oracle_admission(in)) << "instance " << i;
  }
}

TEST(Admission, RejectsWithFirstViolatingSlot) {
  const auto g = TimeGrid::make(0, 10, 12);
  CommitmentLedger l(12);
  AdmissionContext ctx{g, 0, 0, std::nullopt};
  auto a = admit(LoadRequest{"a", FixedProfile{{3000.0, 3000.0}, 0, 6}, Priority{0}, 0}, l, 5000.0, ctx);
  ASSERT_TRUE(a.accepted());
  EXPECT_EQ(a.accept().forced_start, 6);
  auto b = admit(LoadRequest{"b", FlexibleTotal{1000.0, 3000.0, 0, 8}, Priority{0}, 0}, l, 5000.0, ctx);
  ASSERT_FALSE(b.accepted());
  EXPECT_EQ(b.reject().reason, RejectReason::CapacityExceeded);
  EXPECT_EQ(b.reject().slot, 6);
  EXPECT_FALSE(l.contains("b"));
}

TEST(Admission, EnvelopeCoversEveryAnchor) {
  const auto g = TimeGrid::make(0, 10, 12);
  CommitmentLedger l(12);
  auto a = admit(LoadRequest{"a", FixedProfile{{1000.0, 2000.0}, 3, 5}, Priority{0}, 0}, l, 5000.0,
                 AdmissionContext{g, 0, 0, std::nullopt});
  ASSERT_TRUE(a.accepted());
  const auto& env = a.accept().envelope_w;
  EXPECT_DOUBLE_EQ(env[2], 0.0);
  EXPECT_DOUBLE_EQ(env[3], 1000.0);
  EXPECT_DOUBLE_EQ(env[4], 2000.0);
  EXPECT_DOUBLE_EQ(env[6], 2000.0);
  EXPECT_DOUBLE_EQ(env[7], 0.0);
}

TEST(Admission, ThermalForcedStartIsCheckOrLatestFeasible) {
  const auto g = evening();
  CommitmentLedger l(48);
  ThermalLoadState s{20.0, 20.0, 60.0, 10.0, 3600.0, 1.0};
  ThermalTarget t{70.0, g.slot_of("19:00"), g.slot_of("20:00"), g.slot_of("16:30"), g.slot_of("18:20")};
  auto d = admit(LoadRequest{"sauna", t, Priority{2}, 0}, l, 10'000.0, AdmissionContext{g, 0, 0, s});
  ASSERT_TRUE(d.accepted());
  // Six full-power slots are needed from 20 C, so 18:00 is the latest start.
  EXPECT_EQ(g.clock(d.accept().forced_start), "18:00");

  CommitmentLedger l2(48);
  s.temp_c = 60.0;
  d = admit(LoadRequest{"sauna", t, Priority{2}, 0}, l2, 10'000.0, AdmissionContext{g, 0, 0, s});
  ASSERT_TRUE(d.accepted());
  EXPECT_EQ(g.clock(d.accept().forced_start), "18:20");

  CommitmentLedger l3(48);
  s.temp_c = 20.0;
  s.rated_power_w = 400.0;
  d = admit(LoadRequest{"sauna", t, Priority{2}, 0}, l3, 10'000.0, AdmissionContext{g, 0, 0, s});
  ASSERT_FALSE(d.accepted());
  EXPECT_EQ(d.reject().reason, RejectReason::WindowInfeasible);
}

TEST(Admission, StartFloorPushesFeasibility) {
  const auto g = TimeGrid::make(0, 10, 12);
  CommitmentLedger l(12);
  auto d = admit(LoadRequest{"c", FixedProfile{{100.0}, 0, 3}, Priority{0}, 3}, l, 5000.0,
                 AdmissionContext{g, 3, 4, std::nullopt});
  ASSERT_FALSE(d.accepted());
  EXPECT_EQ(d.reject().reason, RejectReason::WindowInfeasible);
}

TEST(Allocation, ForcedFirstAndUnderCapacity) {
  CommitmentLedger l(4);
  SupplyView sup{0.0, std::nullopt, true, 5000.0};
  std::vector<SlotDemand> d{want("a", 0, 4000.0, 1000.0), want("b", 5, 0.0)};
  d[1].forced_w = 3000.0;
  Rng rng(1);
  auto a = allocate_slot(l, d, sup, AllocationPolicy{false}, rng, 0);
  EXPECT_DOUBLE_EQ(a.granted_w[1], 3000.0);
  EXPECT_DOUBLE_EQ(a.granted_w[0], 2000.0);  // two whole packets fit
  EXPECT_TRUE(a.forced[1]);

  d[1].forced_w = 6000.0;
  EXPECT_THROW(allocate_slot(l, d, sup, AllocationPolicy{false}, rng, 0), Error);
}

TEST(Allocation, RenewableFirstLimitsSpare) {
  CommitmentLedger l(4);
  SupplyView sup{2500.0, std::nullopt, true, 10'000.0};
  std::vector<SlotDemand> d{want("a", 0, 5000.0, 1000.0)};
  Rng rng(1);
  EXPECT_DOUBLE_EQ(allocate_slot(l, d, sup, AllocationPolicy{true}, rng, 0).granted_w[0], 2000.0);
  EXPECT_DOUBLE_EQ(allocate_slot(l, d, sup, AllocationPolicy{false}, rng, 0).granted_w[0], 5000.0);
}

TEST(Allocation, HigherPriorityAlwaysServedFirst) {
  CommitmentLedger l(4);
  SupplyView sup{0.0, std::nullopt, true, 3000.0};
  std::vector<SlotDemand> d{want("low", 2, 3000.0, 3000.0), want("high", 1, 3000.0, 3000.0)};
  Rng rng(99);
  for (int i = 0; i < 2000; ++i) {
    auto a = allocate_slot(l, d, sup, AllocationPolicy{false}, rng, 0);
    ASSERT_DOUBLE_EQ(a.granted_w[1], 3000.0);
    ASSERT_DOUBLE_EQ(a.granted_w[0], 0.0);
  }
}

TEST(Allocation, EqualPriorityTieIsFair) {
  CommitmentLedger l(4);
  SupplyView sup{0.0, std::nullopt, true, 3000.0};
  std::vector<SlotDemand> d{want("x", 1, 3000.0, 3000.0), want("y", 1, 3000.0, 3000.0)};
  Rng rng(5);
  int x_wins = 0;
  const int n = 10'000;
  for (int i = 0; i < n; ++i) x_wins += allocate_slot(l, d, sup, AllocationPolicy{false}, rng, 0).granted_w[0] > 0.0;
  EXPECT_NEAR(static_cast<double>(x_wins) / n, 0.5, 0.05);
}

TEST(Allocation, BlockedLevelStopsLowerPriorities) {
  CommitmentLedger l(4);
  SupplyView sup{0.0, std::nullopt, true, 1500.0};
  std::vector<SlotDemand> d{want("big", 0, 2000.0, 2000.0), want("small", 1, 500.0, 500.0)};
  Rng rng(3);
  auto a = allocate_slot(l, d, sup, AllocationPolicy{false}, rng, 0);
  EXPECT_DOUBLE_EQ(a.granted_w[0], 0.0);
  EXPECT_DOUBLE_EQ(a.granted_w[1], 0.0);
}

TEST(Allocation, CycleStartReanchorsLedger) {
  CommitmentLedger l(10);
  l.commit("dw", ForcedProfile{8, {2000.0, 2000.0}});
  l.commit("other", ForcedProfile::constant(3, 5, 2000.0));
  SupplyView sup{0.0, std::nullopt, true, 3000.0};
  auto d = want("dw", 0, 2000.0, 2000.0);
  d.start_profile = ForcedProfile{3, {2000.0, 2000.0}};
  Rng rng(1);
  std::vector<SlotDemand> ds{d};
  // Starting now would stack on "other" at slot 4 and break the ledger.
  auto a = allocate_slot(l, ds, sup, AllocationPolicy{false}, rng, 3);
  EXPECT_DOUBLE_EQ(a.granted_w[0], 0.0);
  EXPECT_EQ(l.find("dw")->start, 8);

  l.release("other");
  a = allocate_slot(l, ds, sup, AllocationPolicy{false}, rng, 3);
  EXPECT_DOUBLE_EQ(a.granted_w[0], 2000.0);
  EXPECT_EQ(l.find("dw")->start, 3);
  EXPECT_DOUBLE_EQ(l.committed(8), 0.0);
}

TEST(Dispatch, MeritOrderBalances) {
  StorageAsset st{5000.0, 10'000.0, 2000.0, 2000.0, 1.0};
  auto d = dispatch_supply(6000.0, SupplyView{3000.0, st, true, 10'000.0}, 60.0);
  EXPECT_DOUBLE_EQ(d.renewable_used_w, 3000.0);
  EXPECT_DOUBLE_EQ(d.storage_discharge_w, 2000.0);
  EXPECT_DOUBLE_EQ(d.imported_w, 1000.0);
  EXPECT_DOUBLE_EQ(d.storage_after->soc_wh, 3000.0);

  d = dispatch_supply(1000.0, SupplyView{5000.0, st, true, 10'000.0}, 60.0);
  EXPECT_DOUBLE_EQ(d.storage_charge_w, 2000.0);
  EXPECT_DOUBLE_EQ(d.curtailed_w, 2000.0);

  d = dispatch_supply(6000.0, SupplyView{3000.0, std::nullopt, false, 10'000.0}, 60.0);
  EXPECT_DOUBLE_EQ(d.unmet_w, 3000.0);
  EXPECT_DOUBLE_EQ(d.imported_w, 0.0);
}

TEST(Shedding, NonForcedLowestPriorityFirst) {
  std::vector<SheddableLoad> loads{{"a", Priority{1}, 1000.0, false},
                                   {"b", Priority{3}, 1000.0, false},
                                   {"c", Priority{5}, 3000.0, true},
                                   {"d", Priority{2}, 0.0, false}};
  EXPECT_EQ(choose_shedding(loads, 1500.0), (std::vector<std::size_t>{1, 0}));
  EXPECT_EQ(choose_shedding(loads, 2500.0), (std::vector<std::size_t>{1, 0, 2}));
  EXPECT_TRUE(choose_shedding(loads, 0.0).empty());
}

TEST(Tracking, QuotaExamples) {
  const auto pk = make_packet(4500.0, 5, 3);
  EXPECT_EQ(tracking_quota(7, 20'000.0, 10'000.0, pk), 2u);
  EXPECT_EQ(tracking_quota(1, 20'000.0, 10'000.0, pk), 1u);
  EXPECT_EQ(tracking_quota(7, 10'000.0, 12'000.0, pk), 0u);
}

TEST(Tracking, SubsetIsUniform) {
  const auto pk = make_packet(4500.0, 5, 3);
  std::vector<int> ids{0, 1, 2, 3, 4, 5, 6};
  Rng rng(11);
  std::map<std::set<int>, int> seen;
  std::vector<int> per_id(7, 0);
  const int n = 42'000;
  for (int i = 0; i < n; ++i) {
    auto picked = track_reference<int>(ids, 20'000.0, 10'000.0, pk, rng);
    ASSERT_EQ(picked.size(), 2u);
    seen[std::set<int>(picked.begin(), picked.end())]++;
    for (int p : picked) per_id[static_cast<std::size_t>(p)]++;
  }
  EXPECT_EQ(seen.size(), 21u);
  for (const auto& [subset, count] : seen) EXPECT_NEAR(count, n / 21.0, 0.1 * n / 21.0);
  for (int c : per_id) EXPECT_NEAR(c, 2.0 * n / 7.0, 0.05 * 2.0 * n / 7.0);
}

TEST(Retry, BackoffStaysInRangeAndGivesUp) {
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    auto next = handle_rejection_retry(10, 100, RetryPolicy{3}, rng);
    ASSERT_TRUE(next);
    EXPECT_GE(*next, 11);
    EXPECT_LE(*next, 13);
  }
  EXPECT_FALSE(handle_rejection_retry(10, 10, RetryPolicy{3}, rng));

  GrantDecision window{Reject{RejectReason::WindowInfeasible, -1, ""}};
  EXPECT_FALSE(handle_rejection_retry(window, 0, 100, RetryPolicy{3}, rng));
  GrantDecision ok{Accept{{}, 0}};
  EXPECT_THROW(handle_rejection_retry(ok, 0, 100, RetryPolicy{3}, rng), Error);
}

TEST(Retry, PersistentBlockEndsWithinWindow) {
  // With backoff >= 1 slot, a blocked request retries at most window times.
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    int slot = 0;
    int retries = 0;
    while (auto next = handle_rejection_retry(slot, 20, RetryPolicy{3}, rng)) {
      slot = *next;
      ++retries;
    }
    EXPECT_LE(retries, 20);
  }
}
