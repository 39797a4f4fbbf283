#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Message payload encodings.
 *
 * ModelParams reuses the policy checkpoint layout (see policy.hpp).
 *
 * RolloutBatch is a self-describing little-endian blob:
 *   u32 format (=1), u32 G, u32 T, u32 V, u32 sampler_version, u32 prompt,
 *   f64 created_at, then G*T tokens as u16, G*T sampler log-probs as f64,
 *   G rewards as f64.
 *
 * Hello carries the protocol version for compatibility rejection; Ack echoes
 * it back.
 */

#include <cstdint>
#include <span>
#include <vector>

#include "asyncrl/errors.hpp"
#include "asyncrl/policy.hpp"
#include "asyncrl/rollout.hpp"
#include "asyncrl/transport/frame.hpp"

namespace asyncrl::transport {

constexpr std::uint32_t kRolloutBatchFormat = 1;

namespace detail {
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline std::uint16_t read_u16(std::span<const std::uint8_t> in, std::size_t off) {
  return static_cast<std::uint16_t>(in[off] | (in[off + 1] << 8));
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_rollout_batch(const RolloutGroup& group) {
  if (group.responses.empty()) throw DomainError("empty rollout group");
  const std::uint32_t g = static_cast<std::uint32_t>(group.responses.size());
  const std::uint32_t t = static_cast<std::uint32_t>(group.responses.front().size());
  std::uint32_t vocab = 0;
  for (const auto& resp : group.responses) {
    if (resp.size() != t) throw DomainError("ragged rollout group");
    for (int tok : resp) {
      if (tok < 1 || tok > 0xFFFF) throw DomainError("token out of wire range");
      vocab = std::max(vocab, static_cast<std::uint32_t>(tok));
    }
  }

  std::vector<std::uint8_t> out;
  out.reserve(32 + g * t * 10 + g * 8);
  asyncrl::detail::put_u32le(out, kRolloutBatchFormat);
  asyncrl::detail::put_u32le(out, g);
  asyncrl::detail::put_u32le(out, t);
  asyncrl::detail::put_u32le(out, vocab);
  asyncrl::detail::put_u32le(out, group.sampler_version);
  asyncrl::detail::put_u32le(out, static_cast<std::uint32_t>(group.prompt));
  asyncrl::detail::put_f64le(out, group.created_at);
  for (const auto& resp : group.responses) {
    for (int tok : resp) detail::put_u16(out, static_cast<std::uint16_t>(tok));
  }
  for (const auto& lps : group.sampler_token_logprobs) {
    if (lps.size() != t) throw DomainError("ragged log-prob table");
    for (double lp : lps) asyncrl::detail::put_f64le(out, lp);
  }
  if (group.rewards.size() != g) throw DomainError("reward count mismatch");
  for (double r : group.rewards) asyncrl::detail::put_f64le(out, r);
  return out;
}

inline RolloutGroup decode_rollout_batch(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t header = 32;  // 6 x u32 + 1 x f64
  if (bytes.size() < header) throw ProtocolError("rollout batch truncated header");
  if (asyncrl::detail::get_u32le(bytes, 0) != kRolloutBatchFormat) {
    throw ProtocolError("unknown rollout batch format");
  }
  const std::uint32_t g = asyncrl::detail::get_u32le(bytes, 4);
  const std::uint32_t t = asyncrl::detail::get_u32le(bytes, 8);
  if (g == 0 || t == 0 || g > 1u << 20 || t > 1u << 16) {
    throw ProtocolError("rollout batch dimensions out of range");
  }
  RolloutGroup group;
  group.sampler_version = asyncrl::detail::get_u32le(bytes, 16);
  group.prompt = static_cast<int>(asyncrl::detail::get_u32le(bytes, 20));
  group.created_at = asyncrl::detail::get_f64le(bytes, 24);

  const std::size_t expect = header + static_cast<std::size_t>(g) * t * 2 +
                             static_cast<std::size_t>(g) * t * 8 +
                             static_cast<std::size_t>(g) * 8;
  if (bytes.size() != expect) throw ProtocolError("rollout batch size mismatch");

  std::size_t off = header;
  group.responses.assign(g, std::vector<int>(t));
  for (std::uint32_t i = 0; i < g; ++i) {
    for (std::uint32_t k = 0; k < t; ++k) {
      group.responses[i][k] = detail::read_u16(bytes, off);
      off += 2;
    }
  }
  group.sampler_token_logprobs.assign(g, std::vector<double>(t));
  for (std::uint32_t i = 0; i < g; ++i) {
    for (std::uint32_t k = 0; k < t; ++k) {
      group.sampler_token_logprobs[i][k] = asyncrl::detail::get_f64le(bytes, off);
      off += 8;
    }
  }
  group.rewards.assign(g, 0.0);
  for (std::uint32_t i = 0; i < g; ++i) {
    group.rewards[i] = asyncrl::detail::get_f64le(bytes, off);
    off += 8;
  }
  return group;
}

/// Hello/Ack payload: protocol version plus the sender's node id.
inline std::vector<std::uint8_t> encode_hello(std::uint32_t node_id) {
  std::vector<std::uint8_t> out;
  out.push_back(kProtocolVersion);
  asyncrl::detail::put_u32le(out, node_id);
  return out;
}

inline std::pair<std::uint8_t, std::uint32_t> decode_hello(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != 5) throw ProtocolError("bad hello payload");
  return {bytes[0], asyncrl::detail::get_u32le(bytes, 1)};
}

}  // namespace asyncrl::transport
