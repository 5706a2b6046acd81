#include <doctest.h>

#include <vector>

#include "gnnpipe/protocol.hpp"
#include "gnnpipe/rng.hpp"
#include "gnnpipe/serverless.hpp"

using namespace gnnpipe;

TEST_CASE("per-lambda bandwidth follows the shared-link curve") {
  NetworkModel net;
  CHECK(net.bandwidth_mbps(100) == doctest::Approx(200.0));
  CHECK(net.bandwidth_mbps(1) == doctest::Approx(800.0));
  CHECK(net.bandwidth_mbps(50) == doctest::Approx(400.0));
  CHECK(net.bandwidth_mbps(10) == doctest::Approx(800.0));  // capped at peak
  CHECK(net.bandwidth_mbps(0) > 0.0);
}

TEST_CASE("invocation duration model") {
  LambdaSpec spec;
  NetworkModel net;
  // 1 MB in, 1 MB out, 1 MFLOP at fleet size 1: 5ms + 10ms + ~2.27ms + 10ms.
  const uint64_t mb = 1'000'000;
  const VirtualNs d = invocation_duration_ns(spec, net, 1, mb, 1e6, mb, false);
  const VirtualNs expect = net.base_latency_ns + 2 * net.transfer_ns(mb, 1) +
                           seconds_to_ns(1e6 / spec.compute_rate_flops());
  CHECK(d == expect);

  // Streaming overlaps the second input half with compute.
  const VirtualNs streamed = invocation_duration_ns(spec, net, 1, mb, 1e6, mb, true);
  const VirtualNs half = net.transfer_ns(mb / 2, 1);
  const VirtualNs compute = seconds_to_ns(1e6 / spec.compute_rate_flops());
  CHECK(streamed == net.base_latency_ns + half + std::max(half, compute) + net.transfer_ns(mb, 1));
  CHECK(streamed < d);

  // Straggler slowdown applies to the compute term only.
  const VirtualNs slow = invocation_duration_ns(spec, net, 1, mb, 1e6, mb, false, 5.0);
  const VirtualNs slow_compute = seconds_to_ns(1e6 * 5.0 / spec.compute_rate_flops());
  CHECK(slow == expect - compute + slow_compute);
}

TEST_CASE("straggler selection is deterministic and fraction-bounded") {
  StragglerModel none{0.0, 5.0, 1};
  CHECK(none.slowdown_for(1, 0) == 1.0);
  StragglerModel identity{0.5, 1.0, 1};
  CHECK(identity.slowdown_for(1, 0) == 1.0);

  StragglerModel model{0.10, 5.0, 42};
  int slowed = 0;
  for (uint64_t t = 0; t < 10000; ++t) {
    const double s1 = model.slowdown_for(t, 0);
    CHECK(s1 == model.slowdown_for(t, 0));
    CHECK(model.slowdown_for(t, 1) == 1.0);  // relaunches run clean
    if (s1 == 5.0) ++slowed;
  }
  CHECK(slowed > 800);
  CHECK(slowed < 1200);
}

TEST_CASE("timeout tracker scales with the p95") {
  TimeoutTracker t;
  CHECK(t.timeout_ns() == TimeoutTracker::kMinTimeoutNs);
  for (int i = 0; i < 100; ++i) t.record(10'000'000);  // 10 ms
  CHECK(t.timeout_ns() == TimeoutTracker::kMinTimeoutNs);  // 5*p95 below the 1s floor
  for (int i = 0; i < 200; ++i) t.record(400'000'000);  // 400 ms
  CHECK(t.timeout_ns() == 2'000'000'000);
}

TEST_CASE("autotuner initial sizing and steps") {
  CHECK(initial_fleet_size(40) == 40);
  CHECK(initial_fleet_size(200) == 100);
  CHECK(initial_fleet_size(0) == 1);

  Autotuner tuner;
  tuner.size = 100;
  tuner.max_size = 100;
  for (uint64_t q : {5, 7, 9, 11, 13, 15, 17, 19, 21, 23}) tuner.observe(q);
  CHECK(tuner.step() == 80);

  Autotuner flat;
  flat.size = 50;
  for (uint64_t q : {5, 5, 5, 5, 5, 5, 5, 5, 5, 5}) flat.observe(q);
  CHECK(flat.step() == 50);

  Autotuner shrink;
  shrink.size = 90;
  shrink.max_size = 100;
  for (uint64_t q : {20, 18, 16, 14, 12, 10, 8, 6, 4, 2}) shrink.observe(q);
  CHECK(shrink.step() == 100);  // ceil(90*1.25) capped at max

  Autotuner small;
  small.size = 1;
  for (uint64_t q : {1, 2, 3, 4, 5, 6, 7, 8, 9, 10}) small.observe(q);
  CHECK(small.step() == 1);  // never below one lambda
}

TEST_CASE("wire frame layout") {
  Message empty;
  empty.type = MsgType::chunk_request;
  empty.epoch = 3;
  empty.layer = 1;
  empty.interval = 7;
  auto bytes = encode_message(empty);
  CHECK(bytes.size() == 22);
  CHECK(bytes[0] == 'A');
  CHECK(bytes[1] == 'N');
  CHECK(bytes[2] == 'T');
  CHECK(bytes[3] == 'P');
  CHECK(decode_message(bytes) == empty);
}

TEST_CASE("wire round-trip is bitwise on random messages") {
  Rng rng(123);
  for (int i = 0; i < 1000; ++i) {
    Message m;
    m.type = static_cast<MsgType>(1 + rng.next_below(8));
    m.epoch = static_cast<uint32_t>(rng.next_u64());
    m.layer = static_cast<uint8_t>(rng.next_below(256));
    m.interval = static_cast<uint32_t>(rng.next_u64());
    m.payload.resize(rng.next_below(64));
    for (auto& f : m.payload) f = static_cast<float>(rng.next_uniform(-1e6, 1e6));
    auto bytes = encode_message(m);
    CHECK(decode_message(bytes) == m);
  }
}

TEST_CASE("decode rejects malformed frames") {
  Message m;
  m.payload = {1.0f, 2.0f};
  auto bytes = encode_message(m);
  auto corrupted = bytes;
  corrupted[0] = 'X';
  CHECK_THROWS_AS(decode_message(corrupted), ProtocolError);

  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_message(truncated), ProtocolError);

  std::vector<uint8_t> tiny(10, 0);
  CHECK_THROWS_AS(decode_message(tiny), ProtocolError);
}
