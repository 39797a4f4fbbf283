#pragma once
// SPDX-License-Identifier: Apache-2.0

/**
 * Star-topology TCP endpoints: one learner listening for rollout batches and
 * broadcasting model parameters, K samplers connecting to it.
 *
 * Each connection runs a reader thread: recv -> FrameParser -> Reassembler ->
 * typed dispatch. Incoming rollouts land in a DoubleBufferQueue the training
 * loop drains; sends are serialized per connection under a write mutex.
 * Handshake is Hello/Ack with a protocol-version check; samplers reconnect
 * with exponential backoff, and parameter messages older than the current
 * version are ignored with a counter.
 */

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "asyncrl/errors.hpp"
#include "asyncrl/policy.hpp"
#include "asyncrl/rollout.hpp"
#include "asyncrl/transport/frame.hpp"
#include "asyncrl/transport/queue.hpp"
#include "asyncrl/transport/reassembly.hpp"
#include "asyncrl/transport/wire.hpp"

namespace asyncrl::transport {

struct NodeAddress {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

struct Topology {
  NodeAddress learner;
  int sampler_count = 4;
  double sync_interval_s = 5.0;

  void validate() const {
    if (sampler_count < 1) throw DomainError("topology needs >= 1 sampler");
    if (!(sync_interval_s > 0.0)) throw DomainError("sync interval must be > 0");
  }
};

namespace detail {

inline double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

/// RAII socket with 100 ms receive timeout for responsive shutdown.
/// close() may be called from a thread other than the reader; the fd is
/// atomic and close is idempotent so the reader observes a clean -1/EBADF.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { close(); }
  Socket(Socket&& other) noexcept : fd_(other.fd_.exchange(-1)) {}
  Socket& operator=(Socket&& other) noexcept {
    if (this != &other) {
      close();
      fd_.store(other.fd_.exchange(-1));
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  bool valid() const { return fd_.load() >= 0; }
  int fd() const { return fd_.load(); }

  void close() {
    const int fd = fd_.exchange(-1);
    if (fd >= 0) {
      ::shutdown(fd, SHUT_RDWR);
      ::close(fd);
    }
  }

  /// Cross-thread teardown: unblocks recv/accept on the owning thread but
  /// keeps the fd allocated. The owner calls close() after joining.
  void shutdown_only() const {
    const int fd = fd_.load();
    if (fd >= 0) ::shutdown(fd, SHUT_RDWR);
  }

  void set_recv_timeout_ms(int ms) const {
    timeval tv{};
    tv.tv_sec = ms / 1000;
    tv.tv_usec = (ms % 1000) * 1000;
    setsockopt(fd(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  }

  bool send_all(std::span<const std::uint8_t> bytes) const {
    const int fd = fd_.load();
    if (fd < 0) return false;
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const ssize_t n = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) return false;
      sent += static_cast<std::size_t>(n);
    }
    return true;
  }

 private:
  std::atomic<int> fd_{-1};
};

inline Socket tcp_listen(const NodeAddress& addr, std::uint16_t& bound_port) {
  Socket sock(::socket(AF_INET, SOCK_STREAM, 0));
  if (!sock.valid()) throw ResourceError("socket() failed");
  int one = 1;
  setsockopt(sock.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(addr.port);
  if (inet_pton(AF_INET, addr.host.c_str(), &sa.sin_addr) != 1) {
    throw DomainError("bad bind address " + addr.host);
  }
  if (bind(sock.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
    throw ResourceError("bind failed on " + addr.host + ":" + std::to_string(addr.port));
  }
  if (listen(sock.fd(), 16) != 0) throw ResourceError("listen failed");
  sockaddr_in actual{};
  socklen_t len = sizeof(actual);
  getsockname(sock.fd(), reinterpret_cast<sockaddr*>(&actual), &len);
  bound_port = ntohs(actual.sin_port);
  return sock;
}

inline Socket tcp_connect(const NodeAddress& addr) {
  Socket sock(::socket(AF_INET, SOCK_STREAM, 0));
  if (!sock.valid()) throw ResourceError("socket() failed");
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(addr.port);
  if (inet_pton(AF_INET, addr.host.c_str(), &sa.sin_addr) != 1) {
    throw DomainError("bad address " + addr.host);
  }
  if (connect(sock.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
    return Socket();
  }
  int one = 1;
  setsockopt(sock.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return sock;
}

}  // namespace detail

// ============================================================================
// Learner endpoint
// ============================================================================

class LearnerEndpoint {
 public:
  explicit LearnerEndpoint(const NodeAddress& bind_addr = {}) {
    listen_socket_ = detail::tcp_listen(bind_addr, port_);
    listen_socket_.set_recv_timeout_ms(100);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  ~LearnerEndpoint() { stop(); }

  std::uint16_t port() const { return port_; }

  /// Rollout groups received since the last drain (reader-owned until next call).
  std::vector<RolloutGroup>& drain_rollouts() { return rollouts_.drain(); }

  /// Sends the policy to every connected sampler; dead links are dropped
  /// and surfaced as node-down events.
  void broadcast_params(const ToyPolicy& policy) {
    const auto payload = serialize_policy(policy);
    const std::size_t chunk = adapt_chunk_size(throughput_);
    const auto frames = encode_frames(MsgType::ModelParams, next_msg_id_++, payload, chunk);
    const double t0 = detail::now_seconds();
    std::lock_guard<std::mutex> lock(conns_mutex_);
    for (auto it = conns_.begin(); it != conns_.end();) {
      bool ok = true;
      {
        std::lock_guard<std::mutex> wlock((*it)->write_mutex);
        for (const auto& f : frames) {
          if (!(*it)->socket.send_all(f)) {
            ok = false;
            break;
          }
        }
      }
      if (!ok) {
        node_down_count_++;
        (*it)->socket.shutdown_only();  // reader owns the close
        it = conns_.erase(it);
      } else {
        ++it;
      }
    }
    const double dt = detail::now_seconds() - t0;
    if (dt > 0.0) throughput_.record(payload.size(), dt);
  }

  int connected_samplers() const {
    std::lock_guard<std::mutex> lock(conns_mutex_);
    return static_cast<int>(conns_.size());
  }

  std::uint64_t node_down_count() const { return node_down_count_; }
  std::uint64_t integrity_errors() const { return integrity_errors_; }

  void stop() {
    if (!running_.exchange(false)) return;
    listen_socket_.shutdown_only();
    if (accept_thread_.joinable()) accept_thread_.join();
    listen_socket_.close();
    {
      std::lock_guard<std::mutex> lock(conns_mutex_);
      for (auto& c : conns_) c->socket.shutdown_only();
    }
    std::vector<std::thread> readers;
    {
      std::lock_guard<std::mutex> lock(readers_mutex_);
      readers.swap(reader_threads_);
    }
    for (auto& t : readers) {
      if (t.joinable()) t.join();
    }
    std::lock_guard<std::mutex> lock(conns_mutex_);
    conns_.clear();  // sockets close here, after every reader has joined
  }

 private:
  struct Connection {
    detail::Socket socket;
    std::mutex write_mutex;
    std::uint32_t node_id = 0;
  };

  void accept_loop() {
    while (running_) {
      sockaddr_in peer{};
      socklen_t len = sizeof(peer);
      const int fd = accept(listen_socket_.fd(), reinterpret_cast<sockaddr*>(&peer), &len);
      if (fd < 0) {
        if (!running_) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
        continue;
      }
      auto conn = std::make_shared<Connection>();
      conn->socket = detail::Socket(fd);
      conn->socket.set_recv_timeout_ms(100);
      {
        std::lock_guard<std::mutex> lock(conns_mutex_);
        conns_.push_back(conn);
      }
      std::lock_guard<std::mutex> lock(readers_mutex_);
      reader_threads_.emplace_back([this, conn] { reader_loop(conn); });
    }
  }

  void reader_loop(std::shared_ptr<Connection> conn) {
    FrameParser parser;
    Reassembler reassembler;
    std::vector<Frame> frames;
    std::uint8_t buf[16384];
    while (running_) {
      const ssize_t n = recv(conn->socket.fd(), buf, sizeof(buf), 0);
      if (n == 0) break;  // peer closed
      if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK) continue;
        break;
      }
      frames.clear();
      try {
        parser.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)), frames);
      } catch (const ProtocolError&) {
        break;  // unrecoverable stream corruption on this link
      }
      for (const auto& frame : frames) {
        std::optional<Message> msg;
        try {
          msg = reassembler.feed(frame, detail::now_seconds());
        } catch (const IntegrityError&) {
          integrity_errors_++;
          continue;
        } catch (const ProtocolError&) {
          continue;
        }
        if (!msg) continue;
        if (msg->msg_type == MsgType::Hello) {
          const auto [version, node_id] = decode_hello(msg->payload);
          if (version != kProtocolVersion) {
            conn->socket.shutdown_only();
            break;
          }
          conn->node_id = node_id;
          const auto ack = encode_frames(MsgType::Ack, next_msg_id_++, encode_hello(0), 4096);
          std::lock_guard<std::mutex> wlock(conn->write_mutex);
          for (const auto& f : ack) conn->socket.send_all(f);
        } else if (msg->msg_type == MsgType::RolloutBatch) {
          try {
            rollouts_.push(decode_rollout_batch(msg->payload));
          } catch (const ProtocolError&) {
            continue;
          }
        }
      }
    }
    conn->socket.shutdown_only();
    std::lock_guard<std::mutex> lock(conns_mutex_);
    for (auto it = conns_.begin(); it != conns_.end(); ++it) {
      if (it->get() == conn.get()) {
        node_down_count_++;
        conns_.erase(it);
        break;
      }
    }
    // The socket closes when the last reference drops; by then no sender can
    // reach this connection (erase and broadcast both hold conns_mutex).
  }

  detail::Socket listen_socket_;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  mutable std::mutex conns_mutex_;
  std::vector<std::shared_ptr<Connection>> conns_;
  std::mutex readers_mutex_;
  std::vector<std::thread> reader_threads_;
  DoubleBufferQueue<RolloutGroup> rollouts_;
  std::atomic<std::uint64_t> next_msg_id_{1};
  std::atomic<std::uint64_t> node_down_count_{0};
  std::atomic<std::uint64_t> integrity_errors_{0};
  ThroughputEstimator throughput_;
};

// ============================================================================
// Sampler endpoint
// ============================================================================

class SamplerEndpoint {
 public:
  SamplerEndpoint(const NodeAddress& learner, std::uint32_t node_id, int max_retries = 6)
      : learner_(learner), node_id_(node_id), max_retries_(max_retries) {
    if (!reconnect()) throw ResourceError("sampler could not reach learner");
    running_ = true;
    reader_thread_ = std::thread([this] { reader_loop(); });
  }

  ~SamplerEndpoint() { stop(); }

  bool send_rollout(const RolloutGroup& group) {
    const auto payload = encode_rollout_batch(group);
    const std::size_t chunk = adapt_chunk_size(throughput_);
    const auto frames = encode_frames(MsgType::RolloutBatch, next_msg_id_++, payload, chunk);
    const double t0 = detail::now_seconds();
    {
      std::lock_guard<std::mutex> lock(write_mutex_);
      for (const auto& f : frames) {
        if (!socket_.send_all(f)) {
          node_down_ = true;
          return false;
        }
      }
    }
    const double dt = detail::now_seconds() - t0;
    if (dt > 0.0) throughput_.record(payload.size(), dt);
    return true;
  }

  /// Latest parameters received from the learner (never regresses).
  std::shared_ptr<const ToyPolicy> latest_policy() const {
    std::lock_guard<std::mutex> lock(policy_mutex_);
    return policy_;
  }

  std::uint64_t params_received() const { return params_received_; }
  std::uint64_t version_regressions() const { return version_regressions_; }
  std::uint64_t reconnects() const { return reconnects_; }
  bool node_down() const { return node_down_; }

  /// Severs the link and marks the node crashed; no reconnect is attempted.
  void disconnect() {
    crashed_ = true;
    socket_.shutdown_only();
  }

  /// Fault-injection hook: drops the TCP link as a transient network fault;
  /// the reader reconnects with bounded exponential backoff.
  void sever_link() { socket_.shutdown_only(); }

  void stop() {
    if (!running_.exchange(false)) return;
    socket_.shutdown_only();
    if (reader_thread_.joinable()) reader_thread_.join();
    socket_.close();
  }

 private:
  bool reconnect() {
    int delay_ms = 50;
    for (int attempt = 0; attempt < max_retries_; ++attempt) {
      auto sock = detail::tcp_connect(learner_);
      if (sock.valid()) {
        sock.set_recv_timeout_ms(100);
        const auto hello =
            encode_frames(MsgType::Hello, next_msg_id_++, encode_hello(node_id_), 4096);
        // Swap under the send lock so an in-flight send_rollout never sees a
        // socket being torn down mid-write.
        std::lock_guard<std::mutex> lock(write_mutex_);
        socket_ = std::move(sock);
        bool ok = true;
        for (const auto& f : hello) ok = ok && socket_.send_all(f);
        if (ok) return true;
      }
      if (crashed_) break;
      std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      delay_ms = std::min(delay_ms * 2, 2000);
    }
    node_down_ = true;
    return false;
  }

  void reader_loop() {
    FrameParser parser;
    Reassembler reassembler;
    std::vector<Frame> frames;
    std::uint8_t buf[16384];
    while (running_) {
      const ssize_t n = recv(socket_.fd(), buf, sizeof(buf), 0);
      if (n == 0 || (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK)) {
        if (!running_ || crashed_ || !reconnect()) {
          node_down_ = true;
          break;
        }
        // Fresh link: per-connection stream state restarts.
        parser = FrameParser{};
        reassembler = Reassembler{};
        reconnects_++;
        continue;
      }
      if (n < 0) continue;  // timeout tick
      frames.clear();
      try {
        parser.feed(std::span<const std::uint8_t>(buf, static_cast<std::size_t>(n)), frames);
      } catch (const ProtocolError&) {
        node_down_ = true;
        break;
      }
      for (const auto& frame : frames) {
        std::optional<Message> msg;
        try {
          msg = reassembler.feed(frame, detail::now_seconds());
        } catch (const std::runtime_error&) {
          continue;
        }
        if (!msg) continue;
        if (msg->msg_type == MsgType::ModelParams) {
          ToyPolicy incoming;
          try {
            incoming = deserialize_policy(msg->payload);
          } catch (const std::exception&) {
            continue;
          }
          std::lock_guard<std::mutex> lock(policy_mutex_);
          if (policy_ && incoming.version() <= policy_->version()) {
            version_regressions_++;
          } else {
            policy_ = std::make_shared<const ToyPolicy>(std::move(incoming));
            params_received_++;
          }
        } else if (msg->msg_type == MsgType::Ack) {
          acked_ = true;
        }
      }
    }
  }

  NodeAddress learner_;
  std::uint32_t node_id_;
  int max_retries_;
  detail::Socket socket_;
  std::atomic<bool> running_{false};
  std::thread reader_thread_;
  std::mutex write_mutex_;
  mutable std::mutex policy_mutex_;
  std::shared_ptr<const ToyPolicy> policy_;
  std::atomic<std::uint64_t> next_msg_id_{1};
  std::atomic<std::uint64_t> params_received_{0};
  std::atomic<std::uint64_t> version_regressions_{0};
  std::atomic<std::uint64_t> reconnects_{0};
  std::atomic<bool> node_down_{false};
  std::atomic<bool> crashed_{false};
  std::atomic<bool> acked_{false};
  ThroughputEstimator throughput_;
};

}  // namespace asyncrl::transport
