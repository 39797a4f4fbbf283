#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Chunked message framing.
 *
 * A message is split into frames, each a fixed 30-byte little-endian header
 * followed by the chunk payload:
 *
 *   offset  size  field
 *   0       4     magic        0x48524C31
 *   4       1     version      1
 *   5       1     msg_type     0 ModelParams, 1 RolloutBatch, 2 Ack, 3 Hello
 *   6       8     msg_id
 *   14      4     chunk_index
 *   18      4     chunk_count
 *   22      4     payload_len
 *   26      4     crc32        IEEE CRC-32 of the payload bytes
 *   30      -     payload
 *
 * The layout is bit-exact across platforms; golden-file tests pin it.
 */

#include <array>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "asyncrl/errors.hpp"

namespace asyncrl::transport {

constexpr std::uint32_t kFrameMagic = 0x48524C31;
constexpr std::uint8_t kProtocolVersion = 1;
constexpr std::size_t kFrameHeaderSize = 30;
constexpr std::size_t kMaxPayloadLen = 64u << 20;  // sanity bound per frame

enum class MsgType : std::uint8_t {
  ModelParams = 0,
  RolloutBatch = 1,
  Ack = 2,
  Hello = 3,
};

// ============================================================================
// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320)
// ============================================================================

namespace detail {
inline const std::array<std::uint32_t, 256>& crc32_table() {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  return table;
}
}  // namespace detail

inline std::uint32_t crc32_ieee(std::span<const std::uint8_t> data) {
  const auto& table = detail::crc32_table();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::uint8_t b : data) crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8);
  return crc ^ 0xFFFFFFFFu;
}

// ============================================================================
// Frame
// ============================================================================

struct Frame {
  MsgType msg_type = MsgType::Hello;
  std::uint64_t msg_id = 0;
  std::uint32_t chunk_index = 0;
  std::uint32_t chunk_count = 1;
  std::uint32_t crc32 = 0;
  std::vector<std::uint8_t> payload;
};

namespace detail {
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t read_u32(std::span<const std::uint8_t> in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[off + i]) << (8 * i);
  return v;
}
inline std::uint64_t read_u64(std::span<const std::uint8_t> in, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[off + i]) << (8 * i);
  return v;
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_frame(const Frame& frame) {
  if (frame.payload.size() > kMaxPayloadLen) throw DomainError("frame payload exceeds limit");
  if (frame.chunk_index >= frame.chunk_count) throw DomainError("chunk_index >= chunk_count");
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderSize + frame.payload.size());
  detail::put_u32(out, kFrameMagic);
  out.push_back(kProtocolVersion);
  out.push_back(static_cast<std::uint8_t>(frame.msg_type));
  detail::put_u64(out, frame.msg_id);
  detail::put_u32(out, frame.chunk_index);
  detail::put_u32(out, frame.chunk_count);
  detail::put_u32(out, static_cast<std::uint32_t>(frame.payload.size()));
  detail::put_u32(out, crc32_ieee(frame.payload));
  out.insert(out.end(), frame.payload.begin(), frame.payload.end());
  return out;
}

/// Splits a payload into chunk_count = ceil(len/chunk_size) frame blobs.
inline std::vector<std::vector<std::uint8_t>> encode_frames(MsgType msg_type,
                                                            std::uint64_t msg_id,
                                                            std::span<const std::uint8_t> payload,
                                                            std::size_t chunk_size) {
  if (chunk_size == 0) throw DomainError("chunk_size must be > 0");
  if (payload.empty()) throw DomainError("payload must be non-empty");
  if (chunk_size > kMaxPayloadLen) throw DomainError("chunk_size exceeds frame payload limit");
  const std::uint64_t count64 = (payload.size() + chunk_size - 1) / chunk_size;
  if (count64 > 0xFFFFFFFFull) throw DomainError("payload needs too many chunks");
  const std::uint32_t count = static_cast<std::uint32_t>(count64);

  std::vector<std::vector<std::uint8_t>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t lo = static_cast<std::size_t>(i) * chunk_size;
    const std::size_t len = std::min(chunk_size, payload.size() - lo);
    Frame f;
    f.msg_type = msg_type;
    f.msg_id = msg_id;
    f.chunk_index = i;
    f.chunk_count = count;
    f.payload.assign(payload.begin() + lo, payload.begin() + lo + len);
    out.push_back(encode_frame(f));
  }
  return out;
}

/**
 * Parses one frame from the front of a byte buffer.
 * Returns nullopt when bytes are insufficient (consumed = 0). Malformed
 * headers throw ProtocolError. CRC is carried through; the reassembler
 * verifies it against the payload.
 */
inline std::optional<Frame> decode_frame(std::span<const std::uint8_t> bytes,
                                         std::size_t& consumed) {
  consumed = 0;
  if (bytes.size() < kFrameHeaderSize) return std::nullopt;
  if (detail::read_u32(bytes, 0) != kFrameMagic) throw ProtocolError("bad frame magic");
  if (bytes[4] != kProtocolVersion) {
    throw ProtocolError("unsupported frame version " + std::to_string(bytes[4]));
  }
  const std::uint8_t type = bytes[5];
  if (type > 3) throw ProtocolError("unknown msg_type " + std::to_string(type));
  Frame f;
  f.msg_type = static_cast<MsgType>(type);
  f.msg_id = detail::read_u64(bytes, 6);
  f.chunk_index = detail::read_u32(bytes, 14);
  f.chunk_count = detail::read_u32(bytes, 18);
  const std::uint32_t payload_len = detail::read_u32(bytes, 22);
  f.crc32 = detail::read_u32(bytes, 26);
  if (f.chunk_count == 0 || f.chunk_index >= f.chunk_count) {
    throw ProtocolError("invalid chunk header");
  }
  if (payload_len > kMaxPayloadLen) throw ProtocolError("frame payload length out of range");
  if (bytes.size() < kFrameHeaderSize + payload_len) return std::nullopt;
  f.payload.assign(bytes.begin() + kFrameHeaderSize,
                   bytes.begin() + kFrameHeaderSize + payload_len);
  consumed = kFrameHeaderSize + payload_len;
  return f;
}

/// Incremental stream parser for TCP byte streams.
class FrameParser {
 public:
  void feed(std::span<const std::uint8_t> bytes, std::vector<Frame>& out) {
    buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
    std::size_t offset = 0;
    while (true) {
      std::size_t consumed = 0;
      auto frame = decode_frame(
          std::span<const std::uint8_t>(buffer_).subspan(offset), consumed);
      if (!frame) break;
      out.push_back(std::move(*frame));
      offset += consumed;
    }
    if (offset > 0) buffer_.erase(buffer_.begin(), buffer_.begin() + offset);
  }

  std::size_t buffered() const { return buffer_.size(); }

 private:
  std::vector<std::uint8_t> buffer_;
};

// ============================================================================
// Adaptive chunk sizing
// ============================================================================

constexpr std::size_t kMinChunkSize = 4u << 10;
constexpr std::size_t kMaxChunkSize = 4u << 20;
constexpr std::size_t kDefaultChunkSize = 256u << 10;

/// EWMA of observed throughput (bytes/second), alpha = 0.2.
class ThroughputEstimator {
 public:
  void record(std::size_t bytes, double seconds) {
    if (seconds <= 0.0) return;
    const double rate = static_cast<double>(bytes) / seconds;
    estimate_ = has_sample_ ? 0.2 * rate + 0.8 * estimate_ : rate;
    has_sample_ = true;
  }

  bool has_sample() const { return has_sample_; }
  double bytes_per_second() const { return estimate_; }

 private:
  double estimate_ = 0.0;
  bool has_sample_ = false;
};

/// Chunk size sized to ~100 ms of link throughput, clamped to [4 KiB, 4 MiB].
/// Monotone non-decreasing in the estimate; 256 KiB with no history.
inline std::size_t adapt_chunk_size(const ThroughputEstimator& estimator) {
  if (!estimator.has_sample()) return kDefaultChunkSize;
  const double target = estimator.bytes_per_second() * 0.1;
  if (target <= static_cast<double>(kMinChunkSize)) return kMinChunkSize;
  if (target >= static_cast<double>(kMaxChunkSize)) return kMaxChunkSize;
  return static_cast<std::size_t>(target);
}

}  // namespace asyncrl::transport
