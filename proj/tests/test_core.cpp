#include <gtest/gtest.h>

#include "pem/core.hpp"

using namespace pem;

TEST(Clock, ParsesAndFormats) {
  EXPECT_EQ(parse_clock("16:00"), 960);
  EXPECT_EQ(parse_clock("24:00"), 1440);
  EXPECT_EQ(parse_clock("00:05"), 5);
  EXPECT_EQ(format_clock(1330), "22:10");
  EXPECT_EQ(format_clock(1440), "24:00");
  for (const char* bad : {"1600", "16:0", "16:60", "ab:cd", ":30", "16:00x"})
    EXPECT_THROW(parse_clock(bad), Error) << bad;
}

TEST(TimeGrid, SlotsAndBoundaries) {
  const auto g = TimeGrid::make(parse_clock("16:00"), 10, 48);
  EXPECT_EQ(g.slot_of("16:00"), 0);
  EXPECT_EQ(g.slot_of("22:10"), 37);
  EXPECT_EQ(g.slot_of("24:00"), 48);
  EXPECT_EQ(g.clock(37), "22:10");
  EXPECT_THROW(g.slot_of("16:05"), Error);
  EXPECT_THROW(g.slot_of("24:10"), Error);
  EXPECT_THROW(g.slot_of("15:50"), Error);
  EXPECT_DOUBLE_EQ(g.slot_hours(), 1.0 / 6.0);
}

TEST(TimeGrid, ChannelTimeMapsToFirstBoundaryAtOrAfter) {
  const auto g = TimeGrid::make(0, 10, 10);
  EXPECT_EQ(g.slot_at_or_after_ms(0.0), 0);
  EXPECT_EQ(g.slot_at_or_after_ms(1.0), 1);
  EXPECT_EQ(g.slot_at_or_after_ms(600'000.0), 1);
  EXPECT_EQ(g.slot_at_or_after_ms(600'000.5), 2);
  EXPECT_EQ(g.slot_at_or_after_ms(3 * 600'000.0), 3);
}

TEST(TimeGrid, RejectsBadShapes) {
  EXPECT_THROW(TimeGrid::make(0, 0, 10), Error);
  EXPECT_THROW(TimeGrid::make(0, 10, 0), Error);
}

TEST(Packet, EnergyIsPowerTimesDuration) {
  const auto p = make_packet(4500.0, 5, 3);
  EXPECT_DOUBLE_EQ(p.energy_wh, 4500.0 * 15.0 / 60.0);
  EXPECT_DOUBLE_EQ(quantize(1000.0, 10).energy_wh, 1000.0 / 6.0);
}

TEST(Priority, LowerLevelIsMoreImportant) {
  EXPECT_LT(Priority{1}, Priority{2});
  EXPECT_EQ(Priority{3}, Priority{3});
}

TEST(ValidateRequest, CatchesMalformedAndInfeasible) {
  const auto g = TimeGrid::make(0, 10, 12);
  LoadRequest r{"x", FixedProfile{{100.0, 100.0}, 2, 5}, Priority{0}, 0};
  EXPECT_FALSE(validate_request(r, g));

  r.kind = FixedProfile{{}, 0, 0};
  EXPECT_EQ(validate_request(r, g)->reason, RejectReason::MalformedRequest);
  r.kind = FixedProfile{{100.0}, 5, 2};
  EXPECT_EQ(validate_request(r, g)->reason, RejectReason::WindowInfeasible);
  r.kind = FixedProfile{{100.0, 100.0, 100.0}, 0, 10};
  EXPECT_EQ(validate_request(r, g)->reason, RejectReason::WindowInfeasible);

  r.kind = FlexibleTotal{1000.0, 1000.0, 0, 6};
  EXPECT_FALSE(validate_request(r, g));
  r.kind = FlexibleTotal{1000.1, 1000.0, 0, 6};
  EXPECT_EQ(validate_request(r, g)->reason, RejectReason::WindowInfeasible);
  r.kind = FlexibleTotal{-1.0, 1000.0, 0, 6};
  EXPECT_EQ(validate_request(r, g)->reason, RejectReason::MalformedRequest);

  r.kind = ThermalTarget{70.0, 8, 10, 2, 5};
  EXPECT_FALSE(validate_request(r, g));
  r.kind = ThermalTarget{70.0, 8, 10, 2, 9};
  EXPECT_EQ(validate_request(r, g)->reason, RejectReason::WindowInfeasible);

  r.device_id.clear();
  EXPECT_EQ(validate_request(r, g)->reason, RejectReason::MalformedRequest);
}

TEST(ErrorType, CarriesKindAndSlot) {
  const Error e(ErrorKind::CapacityViolation, "over", 7);
  EXPECT_EQ(e.kind(), ErrorKind::CapacityViolation);
  EXPECT_EQ(e.slot(), 7);
  EXPECT_TRUE(e.is_internal());
  EXPECT_FALSE(Error(ErrorKind::InvalidScenario, "x").is_internal());
}
