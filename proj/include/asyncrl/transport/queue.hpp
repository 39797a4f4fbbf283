#pragma once
// SPDX-License-Identifier: Apache-2.0

#include <mutex>
#include <utility>
#include <vector>

namespace asyncrl::transport {

/**
 * Double-buffered multi-producer / single-consumer queue.
 *
 * Producers append to the shared back buffer under a mutex; the reader swaps
 * buffers in O(1) and then owns the front buffer lock-free. Each message is
 * observed exactly once, in per-producer push order; writers are never
 * blocked longer than one swap.
 */
template <typename T>
class DoubleBufferQueue {
 public:
  void push(T value) {
    std::lock_guard<std::mutex> lock(mutex_);
    back_.push_back(std::move(value));
  }

  /// Swaps buffers and returns the reader-owned front. Contents are valid
  /// until the next drain. Single consumer only.
  std::vector<T>& drain() {
    front_.clear();
    {
      std::lock_guard<std::mutex> lock(mutex_);
      front_.swap(back_);
      ++swap_count_;
    }
    return front_;
  }

  std::uint64_t swap_count() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return swap_count_;
  }

  std::size_t pending() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return back_.size();
  }

 private:
  mutable std::mutex mutex_;
  std::vector<T> back_;
  std::vector<T> front_;
  std::uint64_t swap_count_ = 0;
};

}  // namespace asyncrl::transport
