#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <thread>
#include <vector>

#include "asyncrl/policy.hpp"
#include "asyncrl/rng.hpp"
#include "asyncrl/transport/endpoint.hpp"
#include "asyncrl/transport/frame.hpp"
#include "asyncrl/transport/queue.hpp"
#include "asyncrl/transport/reassembly.hpp"
#include "asyncrl/transport/wire.hpp"

using namespace asyncrl;
using namespace asyncrl::transport;

#ifndef ASYNCRL_GOLDEN_DIR
#define ASYNCRL_GOLDEN_DIR "tests/golden"
#endif

namespace {

std::vector<std::uint8_t> random_payload(Rng& rng, std::size_t min_len, std::size_t max_len) {
  std::vector<std::uint8_t> out(min_len + rng.next_u64() % (max_len - min_len + 1));
  for (auto& b : out) b = static_cast<std::uint8_t>(rng.next_u64());
  return out;
}

// Reference reassembler: a plain map of (msg_id, chunk_index) -> bytes.
struct ReferenceReassembler {
  std::map<std::uint64_t, std::map<std::uint32_t, std::vector<std::uint8_t>>> parts;
  std::map<std::uint64_t, std::uint32_t> counts;
  std::map<std::uint64_t, std::vector<std::uint8_t>> completed;

  void feed(const Frame& f) {
    if (completed.count(f.msg_id)) return;
    counts[f.msg_id] = f.chunk_count;
    parts[f.msg_id][f.chunk_index] = f.payload;
    if (parts[f.msg_id].size() == counts[f.msg_id]) {
      std::vector<std::uint8_t> whole;
      for (auto& [idx, bytes] : parts[f.msg_id]) {
        whole.insert(whole.end(), bytes.begin(), bytes.end());
      }
      completed[f.msg_id] = std::move(whole);
      parts.erase(f.msg_id);
    }
  }
};

}  // namespace

TEST_CASE("crc32 matches the standard test vector") {
  const std::vector<std::uint8_t> v{'1', '2', '3', '4', '5', '6', '7', '8', '9'};
  CHECK(crc32_ieee(v) == 0xCBF43926u);
  CHECK(crc32_ieee({}) == 0x00000000u);
}

TEST_CASE("chunk count arithmetic") {
  std::vector<std::uint8_t> payload(1u << 20, 0xAB);  // 1 MiB
  const auto frames = encode_frames(MsgType::ModelParams, 7, payload, 256u << 10);
  CHECK(frames.size() == 4);
  std::size_t consumed = 0;
  const auto f = decode_frame(frames[3], consumed);
  REQUIRE(f.has_value());
  CHECK(f->chunk_count == 4);
  CHECK(f->chunk_index == 3);
  CHECK(consumed == frames[3].size());
}

TEST_CASE("encode/decode round trip over random payloads and chunk sizes") {
  Rng rng(99);
  for (int trial = 0; trial < 40; ++trial) {
    const auto payload = random_payload(rng, 1, 8192);
    const std::size_t chunk = 1 + rng.next_u64() % 1500;
    const auto frames =
        encode_frames(MsgType::RolloutBatch, rng.next_u64(), payload, chunk);
    CHECK(frames.size() == (payload.size() + chunk - 1) / chunk);
    std::vector<std::uint8_t> glued;
    for (const auto& blob : frames) {
      std::size_t consumed = 0;
      const auto f = decode_frame(blob, consumed);
      REQUIRE(f.has_value());
      CHECK(crc32_ieee(f->payload) == f->crc32);
      glued.insert(glued.end(), f->payload.begin(), f->payload.end());
    }
    CHECK(glued == payload);
  }
}

TEST_CASE("encode_frames rejects bad input") {
  const std::vector<std::uint8_t> payload{1, 2, 3};
  const std::vector<std::uint8_t> empty;
  CHECK_THROWS_AS((void)encode_frames(MsgType::Ack, 1, payload, 0), DomainError);
  CHECK_THROWS_AS((void)encode_frames(MsgType::Ack, 1, empty, 16), DomainError);
}

TEST_CASE("golden frame bytes never change") {
  const std::vector<std::uint8_t> payload{'0', '1', '2', '3', '4', '5', '6', '7', '8', '9'};
  Frame f;
  f.msg_type = MsgType::RolloutBatch;
  f.msg_id = 0x0102030405060708ull;
  f.chunk_index = 0;
  f.chunk_count = 1;
  f.payload = payload;
  const auto bytes = encode_frame(f);

  // Frozen expectation, cross-checked at generation time against an
  // independent little-endian struct packing and zlib's crc32.
  const char* hex =
      "314c52480101080706050403020100000000010000000a000000c6c784a63031323334353637"
      "3839";
  std::vector<std::uint8_t> expected;
  for (const char* p = hex; p[0] && p[1]; p += 2) {
    auto nibble = [](char c) {
      return c <= '9' ? c - '0' : c - 'a' + 10;
    };
    expected.push_back(static_cast<std::uint8_t>(nibble(p[0]) * 16 + nibble(p[1])));
  }
  CHECK(bytes == expected);

  std::ifstream golden(std::string(ASYNCRL_GOLDEN_DIR) + "/frame_rollout_10b.bin",
                       std::ios::binary);
  REQUIRE(golden.good());
  std::vector<std::uint8_t> on_disk((std::istreambuf_iterator<char>(golden)),
                                    std::istreambuf_iterator<char>());
  CHECK(bytes == on_disk);
}

TEST_CASE("stream parser handles partial delivery") {
  Rng rng(3);
  const auto payload = random_payload(rng, 100, 4000);
  const auto frames = encode_frames(MsgType::ModelParams, 12, payload, 512);
  std::vector<std::uint8_t> wire;
  for (const auto& f : frames) wire.insert(wire.end(), f.begin(), f.end());

  FrameParser parser;
  std::vector<Frame> out;
  std::size_t pos = 0;
  while (pos < wire.size()) {
    const std::size_t n = std::min<std::size_t>(1 + rng.next_u64() % 97, wire.size() - pos);
    parser.feed(std::span<const std::uint8_t>(wire).subspan(pos, n), out);
    pos += n;
  }
  CHECK(out.size() == frames.size());
  CHECK(parser.buffered() == 0);
}

TEST_CASE("reassembly is order-independent") {
  Rng rng(17);
  const auto payload = random_payload(rng, 2000, 4000);
  auto frames = encode_frames(MsgType::ModelParams, 5, payload, 256);
  std::reverse(frames.begin(), frames.end());
  Reassembler reasm;
  std::optional<Message> done;
  for (const auto& blob : frames) {
    std::size_t consumed = 0;
    const auto f = decode_frame(blob, consumed);
    const auto msg = reasm.feed(*f);
    if (msg) {
      CHECK(!done.has_value());
      done = msg;
    }
  }
  REQUIRE(done.has_value());
  CHECK(done->payload == payload);
  CHECK(done->msg_id == 5);
}

TEST_CASE("single byte corruption is always rejected") {
  Rng rng(23);
  for (int trial = 0; trial < 60; ++trial) {
    const auto payload = random_payload(rng, 32, 512);
    auto frames = encode_frames(MsgType::RolloutBatch, trial, payload, 1024);
    auto blob = frames[0];
    // Flip one payload byte (past the header).
    const std::size_t victim =
        kFrameHeaderSize + rng.next_u64() % (blob.size() - kFrameHeaderSize);
    blob[victim] ^= static_cast<std::uint8_t>(1 + rng.next_u64() % 255);
    std::size_t consumed = 0;
    const auto f = decode_frame(blob, consumed);
    REQUIRE(f.has_value());
    Reassembler reasm;
    CHECK_THROWS_AS((void)reasm.feed(*f), IntegrityError);
    CHECK(reasm.stats().crc_rejected == 1);
  }
}

TEST_CASE("duplicate chunks are idempotent") {
  Rng rng(29);
  const auto payload = random_payload(rng, 1000, 2000);
  const auto frames = encode_frames(MsgType::ModelParams, 44, payload, 128);
  Reassembler reasm;
  int completions = 0;
  for (int repeat = 0; repeat < 3; ++repeat) {
    for (const auto& blob : frames) {
      std::size_t consumed = 0;
      const auto f = decode_frame(blob, consumed);
      if (reasm.feed(*f)) completions++;
    }
  }
  CHECK(completions == 1);
  CHECK(reasm.stats().duplicates_ignored > 0);
}

TEST_CASE("conflicting chunk_count is a protocol error") {
  const std::vector<std::uint8_t> payload{1, 2, 3, 4};
  Frame a;
  a.msg_type = MsgType::ModelParams;
  a.msg_id = 9;
  a.chunk_index = 0;
  a.chunk_count = 3;
  a.payload = payload;
  a.crc32 = crc32_ieee(payload);
  Frame b = a;
  b.chunk_index = 1;
  b.chunk_count = 4;
  Reassembler reasm;
  CHECK(!reasm.feed(a));
  CHECK_THROWS_AS((void)reasm.feed(b), ProtocolError);
}

TEST_CASE("partial messages expire after the timeout") {
  const std::vector<std::uint8_t> payload{1, 2, 3, 4};
  Frame a;
  a.msg_type = MsgType::ModelParams;
  a.msg_id = 77;
  a.chunk_index = 0;
  a.chunk_count = 2;
  a.payload = payload;
  a.crc32 = crc32_ieee(payload);
  Reassembler reasm(/*timeout_s=*/10.0);
  CHECK(!reasm.feed(a, /*now_s=*/100.0));
  CHECK(reasm.pending_messages() == 1);
  const auto expired = reasm.expire(/*now_s=*/111.0);
  CHECK(expired == std::vector<std::uint64_t>{77});
  CHECK(reasm.pending_messages() == 0);
  CHECK(reasm.stats().expired == 1);
}

TEST_CASE("interleaved messages complete independently under fuzz") {
  Rng rng(31);
  const int message_count = 40;
  std::map<std::uint64_t, std::vector<std::uint8_t>> originals;
  std::vector<std::vector<std::uint8_t>> blobs;
  for (int m = 0; m < message_count; ++m) {
    const auto payload = random_payload(rng, 200, 3000);
    originals[m] = payload;
    for (auto& blob : encode_frames(MsgType::RolloutBatch, m, payload, 64)) {
      blobs.push_back(std::move(blob));
    }
  }
  // Duplicate 10% and shuffle everything.
  const std::size_t base = blobs.size();
  for (std::size_t i = 0; i < base / 10; ++i) {
    blobs.push_back(blobs[rng.next_u64() % base]);
  }
  for (std::size_t i = blobs.size(); i > 1; --i) {
    std::swap(blobs[i - 1], blobs[rng.next_u64() % i]);
  }

  Reassembler reasm;
  ReferenceReassembler reference;
  std::map<std::uint64_t, std::vector<std::uint8_t>> delivered;
  for (const auto& blob : blobs) {
    std::size_t consumed = 0;
    const auto f = decode_frame(blob, consumed);
    reference.feed(*f);
    const auto msg = reasm.feed(*f);
    if (msg) {
      CHECK(!delivered.count(msg->msg_id));  // exactly-once
      delivered[msg->msg_id] = msg->payload;
    }
  }
  CHECK(delivered.size() == static_cast<std::size_t>(message_count));
  for (const auto& [id, payload] : originals) {
    CHECK(delivered.at(id) == payload);
    CHECK(reference.completed.at(id) == payload);
    CHECK(delivered.at(id) == reference.completed.at(id));
  }
}

TEST_CASE("double-buffer queue: 1e6 messages, no loss, per-producer order") {
  DoubleBufferQueue<std::uint64_t> queue;
  const int producers = 4;
  const std::uint64_t per_producer = 250000;
  std::vector<std::thread> threads;
  for (int p = 0; p < producers; ++p) {
    threads.emplace_back([&queue, p, per_producer] {
      for (std::uint64_t i = 0; i < per_producer; ++i) {
        queue.push((static_cast<std::uint64_t>(p) << 32) | i);
      }
    });
  }

  std::vector<std::uint64_t> next_expected(producers, 0);
  std::uint64_t received = 0;
  while (received < producers * per_producer) {
    auto& batch = queue.drain();
    for (std::uint64_t v : batch) {
      const int p = static_cast<int>(v >> 32);
      const std::uint64_t seq = v & 0xFFFFFFFFull;
      REQUIRE(seq == next_expected[p]);  // per-producer FIFO, exactly once
      next_expected[p]++;
      received++;
    }
  }
  for (auto& t : threads) t.join();
  auto& final_batch = queue.drain();
  CHECK(final_batch.empty());
  CHECK(received == producers * per_producer);
}

TEST_CASE("rollout batch wire round trip") {
  SequenceSpec spec{3, 4, 2};
  const auto policy = ToyPolicy::random(spec, 6);
  Rng rng(12);
  auto group = sample_group(policy, 1, 8, rng);
  score_group(group, parity_reward);
  group.created_at = 1234.5;
  const auto bytes = encode_rollout_batch(group);
  const auto back = decode_rollout_batch(bytes);
  CHECK(back.prompt == group.prompt);
  CHECK(back.sampler_version == group.sampler_version);
  CHECK(back.created_at == group.created_at);
  CHECK(back.responses == group.responses);
  CHECK(back.sampler_token_logprobs == group.sampler_token_logprobs);
  CHECK(back.rewards == group.rewards);

  auto corrupt = bytes;
  corrupt.pop_back();
  CHECK_THROWS_AS((void)decode_rollout_batch(corrupt), ProtocolError);
}

TEST_CASE("adaptive chunk size policy") {
  ThroughputEstimator none;
  CHECK(adapt_chunk_size(none) == kDefaultChunkSize);

  ThroughputEstimator slow;
  slow.record(1000, 1.0);  // 1 KB/s -> clamped at the floor
  CHECK(adapt_chunk_size(slow) == kMinChunkSize);

  ThroughputEstimator fast;
  fast.record(1u << 30, 1.0);  // 1 GiB/s -> clamped at the ceiling
  CHECK(adapt_chunk_size(fast) == kMaxChunkSize);

  // Monotone: doubling the throughput never shrinks the chunk.
  std::size_t prev = 0;
  for (double rate = 1e4; rate < 1e9; rate *= 2.0) {
    ThroughputEstimator e;
    e.record(static_cast<std::size_t>(rate), 1.0);
    const std::size_t chunk = adapt_chunk_size(e);
    CHECK(chunk >= prev);
    prev = chunk;
  }
}

TEST_CASE("loopback: policy blob survives the full transport path bit-identically") {
  LearnerEndpoint learner;
  SamplerEndpoint sampler({"127.0.0.1", learner.port()}, 1);

  SequenceSpec spec{2, 3, 1};
  const auto policy = ToyPolicy::random(spec, 42);
  learner.broadcast_params(policy);

  // Wait for delivery.
  std::shared_ptr<const ToyPolicy> received;
  for (int i = 0; i < 300 && !received; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
    received = sampler.latest_policy();
  }
  REQUIRE(received);
  CHECK(serialize_policy(*received) == serialize_policy(policy));

  // Rollouts flow the other way.
  Rng rng(5);
  auto group = sample_group(policy, 0, 4, rng);
  score_group(group, parity_reward);
  CHECK(sampler.send_rollout(group));
  std::vector<RolloutGroup> got;
  for (int i = 0; i < 300 && got.empty(); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
    got = learner.drain_rollouts();
  }
  REQUIRE(got.size() == 1);
  CHECK(got[0].responses == group.responses);

  sampler.stop();
  learner.stop();
}

TEST_CASE("broadcast reaches all four samplers with the same version") {
  LearnerEndpoint learner;
  std::vector<std::unique_ptr<SamplerEndpoint>> samplers;
  for (std::uint32_t id = 1; id <= 4; ++id) {
    samplers.push_back(
        std::make_unique<SamplerEndpoint>(NodeAddress{"127.0.0.1", learner.port()}, id));
  }
  for (int i = 0; i < 100 && learner.connected_samplers() < 4; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  CHECK(learner.connected_samplers() == 4);

  SequenceSpec spec{2, 2, 1};
  auto policy = ToyPolicy::random(spec, 1);
  std::vector<double> grad(policy.param_count(), 0.0);
  policy = policy.updated(grad, 0.1);  // version 1
  learner.broadcast_params(policy);

  for (auto& s : samplers) {
    std::shared_ptr<const ToyPolicy> received;
    for (int i = 0; i < 300 && !received; ++i) {
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
      received = s->latest_policy();
    }
    REQUIRE(received);
    CHECK(received->version() == 1);
  }

  // Stale rebroadcast of version 0 params is ignored with a counter.
  const auto old_policy = ToyPolicy::random(spec, 1);
  learner.broadcast_params(old_policy);
  std::this_thread::sleep_for(std::chrono::milliseconds(200));
  for (auto& s : samplers) {
    CHECK(s->latest_policy()->version() == 1);
    CHECK(s->version_regressions() >= 1);
  }

  for (auto& s : samplers) s->stop();
  learner.stop();
}

TEST_CASE("a transient link fault heals by reconnect and re-handshake") {
  LearnerEndpoint learner;
  SamplerEndpoint sampler({"127.0.0.1", learner.port()}, 7);
  for (int i = 0; i < 100 && learner.connected_samplers() < 1; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  REQUIRE(learner.connected_samplers() == 1);

  sampler.sever_link();
  for (int i = 0; i < 300 && sampler.reconnects() == 0; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  CHECK(sampler.reconnects() >= 1);
  CHECK(!sampler.node_down());

  // The healed link carries traffic in both directions.
  SequenceSpec spec{2, 2, 1};
  const auto policy = ToyPolicy::random(spec, 31);
  for (int i = 0; i < 100 && learner.connected_samplers() < 1; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  learner.broadcast_params(policy);
  std::shared_ptr<const ToyPolicy> received;
  for (int i = 0; i < 300 && !received; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
    received = sampler.latest_policy();
  }
  REQUIRE(received);
  Rng rng(3);
  auto group = sample_group(policy, 0, 4, rng);
  score_group(group, parity_reward);
  CHECK(sampler.send_rollout(group));
  std::vector<RolloutGroup> got;
  for (int i = 0; i < 300 && got.empty(); ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
    got = learner.drain_rollouts();
  }
  CHECK(got.size() == 1);

  sampler.stop();
  learner.stop();
}

TEST_CASE("connecting to a dead port fails after bounded retries") {
  // Grab an ephemeral port and close it again so nothing listens there.
  std::uint16_t dead_port = 0;
  {
    LearnerEndpoint probe;
    dead_port = probe.port();
    probe.stop();
  }
  CHECK_THROWS_AS(SamplerEndpoint({"127.0.0.1", dead_port}, 9, /*max_retries=*/3),
                  ResourceError);
}

TEST_CASE("one sampler disconnecting mid-run is tolerated") {
  LearnerEndpoint learner;
  std::vector<std::unique_ptr<SamplerEndpoint>> samplers;
  for (std::uint32_t id = 1; id <= 4; ++id) {
    samplers.push_back(
        std::make_unique<SamplerEndpoint>(NodeAddress{"127.0.0.1", learner.port()}, id));
  }
  for (int i = 0; i < 100 && learner.connected_samplers() < 4; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }

  SequenceSpec spec{2, 2, 1};
  const auto policy = ToyPolicy::random(spec, 9);
  Rng rng(77);

  samplers[2]->disconnect();
  std::this_thread::sleep_for(std::chrono::milliseconds(300));
  learner.broadcast_params(policy);
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  CHECK(learner.connected_samplers() == 3);

  // Remaining samplers keep sending and the learner keeps receiving.
  int delivered = 0;
  for (int round = 0; round < 5; ++round) {
    for (std::size_t s = 0; s < samplers.size(); ++s) {
      if (s == 2) continue;
      auto group = sample_group(policy, 0, 4, rng);
      score_group(group, parity_reward);
      CHECK(samplers[s]->send_rollout(group));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    delivered += static_cast<int>(learner.drain_rollouts().size());
  }
  CHECK(delivered == 15);

  for (auto& s : samplers) s->stop();
  learner.stop();
}
