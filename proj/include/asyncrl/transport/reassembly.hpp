#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Chunk reassembly with integrity verification.
 *
 * Frames may arrive out of order, duplicated, and interleaved across
 * msg_ids. A message completes when every chunk index 0..chunk_count-1 has
 * arrived with a valid CRC; completed ids are remembered so late duplicates
 * cannot cause a second delivery. Partial messages expire after a timeout.
 */

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "asyncrl/errors.hpp"
#include "asyncrl/transport/frame.hpp"

namespace asyncrl::transport {

struct Message {
  std::uint64_t msg_id = 0;
  MsgType msg_type = MsgType::Hello;
  std::vector<std::uint8_t> payload;
};

struct ReassemblyStats {
  std::uint64_t frames_accepted = 0;
  std::uint64_t duplicates_ignored = 0;
  std::uint64_t crc_rejected = 0;
  std::uint64_t expired = 0;
};

class Reassembler {
 public:
  explicit Reassembler(double timeout_s = 60.0, std::size_t completed_memory = 4096)
      : timeout_s_(timeout_s), completed_memory_(completed_memory) {}

  /**
   * Feeds one frame; returns the completed message when this frame was the
   * last missing chunk. CRC mismatch throws IntegrityError (frame dropped,
   * partial state kept); a chunk_count or type conflict for a known msg_id
   * throws ProtocolError.
   */
  std::optional<Message> feed(const Frame& frame, double now_s = 0.0) {
    if (crc32_ieee(frame.payload) != frame.crc32) {
      stats_.crc_rejected++;
      throw IntegrityError("frame crc mismatch for msg " + std::to_string(frame.msg_id));
    }
    if (completed_.count(frame.msg_id)) {
      stats_.duplicates_ignored++;
      return std::nullopt;
    }

    Partial& partial = partials_[frame.msg_id];
    if (partial.chunks.empty()) {
      partial.msg_type = frame.msg_type;
      partial.chunk_count = frame.chunk_count;
      partial.chunks.resize(frame.chunk_count);
      partial.first_seen_s = now_s;
    } else if (partial.chunk_count != frame.chunk_count) {
      throw ProtocolError("conflicting chunk_count for msg " + std::to_string(frame.msg_id));
    } else if (partial.msg_type != frame.msg_type) {
      throw ProtocolError("conflicting msg_type for msg " + std::to_string(frame.msg_id));
    }

    auto& slot = partial.chunks[frame.chunk_index];
    if (slot.received) {
      stats_.duplicates_ignored++;
      return std::nullopt;
    }
    slot.received = true;
    slot.bytes = frame.payload;
    partial.received_count++;
    stats_.frames_accepted++;

    if (partial.received_count < partial.chunk_count) return std::nullopt;

    Message msg;
    msg.msg_id = frame.msg_id;
    msg.msg_type = partial.msg_type;
    std::size_t total = 0;
    for (const auto& c : partial.chunks) total += c.bytes.size();
    msg.payload.reserve(total);
    for (const auto& c : partial.chunks) {
      msg.payload.insert(msg.payload.end(), c.bytes.begin(), c.bytes.end());
    }
    partials_.erase(frame.msg_id);
    remember_completed(frame.msg_id);
    return msg;
  }

  /// Drops partial messages older than the timeout; returns their ids.
  std::vector<std::uint64_t> expire(double now_s) {
    std::vector<std::uint64_t> expired;
    for (auto it = partials_.begin(); it != partials_.end();) {
      if (now_s - it->second.first_seen_s > timeout_s_) {
        expired.push_back(it->first);
        it = partials_.erase(it);
      } else {
        ++it;
      }
    }
    stats_.expired += expired.size();
    return expired;
  }

  std::size_t pending_messages() const { return partials_.size(); }
  const ReassemblyStats& stats() const { return stats_; }

 private:
  struct Chunk {
    bool received = false;
    std::vector<std::uint8_t> bytes;
  };

  struct Partial {
    MsgType msg_type = MsgType::Hello;
    std::uint32_t chunk_count = 0;
    std::uint32_t received_count = 0;
    double first_seen_s = 0.0;
    std::vector<Chunk> chunks;
  };

  void remember_completed(std::uint64_t id) {
    completed_.insert(id);
    completed_order_.push_back(id);
    while (completed_order_.size() > completed_memory_) {
      completed_.erase(completed_order_.front());
      completed_order_.pop_front();
    }
  }

  double timeout_s_;
  std::size_t completed_memory_;
  std::unordered_map<std::uint64_t, Partial> partials_;
  std::unordered_set<std::uint64_t> completed_;
  std::deque<std::uint64_t> completed_order_;
  ReassemblyStats stats_;
};

}  // namespace asyncrl::transport
