#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstring>
#include <deque>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "gnnpipe/engine.hpp"
#include "gnnpipe/paramserver.hpp"
#include "gnnpipe/protocol.hpp"
#include "gnnpipe/tensor.hpp"

namespace gnnpipe {

struct TransportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Blocking framed connection. A frame is one encode_message() buffer; the
// 22-byte header carries the payload length.
class TcpConn {
 public:
  TcpConn() = default;
  explicit TcpConn(int fd) : fd_(fd) {}
  TcpConn(TcpConn&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  TcpConn& operator=(TcpConn&& o) noexcept {
    close_fd();
    fd_ = o.fd_;
    o.fd_ = -1;
    return *this;
  }
  ~TcpConn() { close_fd(); }

  bool valid() const { return fd_ >= 0; }

  void send_message(const Message& m) {
    auto bytes = encode_message(m);
    size_t off = 0;
    while (off < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n <= 0) throw TransportError("send failed");
      off += static_cast<size_t>(n);
    }
  }

  // nullopt on orderly peer shutdown between frames. A corrupt frame drops
  // the connection.
  std::optional<Message> recv_message() {
    uint8_t header[kHeaderBytes];
    if (!recv_exact(header, sizeof header, /*eof_ok=*/true)) return std::nullopt;
    if (std::memcmp(header, kMagic, 4) != 0) {
      close_fd();
      throw ProtocolError("recv: bad magic, connection dropped");
    }
    const uint64_t payload_len = wire::get_u64(header + 14);
    if (payload_len >= (1ULL << 63)) {
      close_fd();
      throw ProtocolError("recv: payload length overflow");
    }
    std::vector<uint8_t> frame(kHeaderBytes + payload_len);
    std::memcpy(frame.data(), header, kHeaderBytes);
    if (payload_len > 0 && !recv_exact(frame.data() + kHeaderBytes, payload_len, false)) {
      close_fd();
      throw ProtocolError("recv: truncated frame");
    }
    return decode_message(frame);
  }

 private:
  bool recv_exact(uint8_t* dst, size_t len, bool eof_ok) {
    size_t off = 0;
    while (off < len) {
      const ssize_t n = ::recv(fd_, dst + off, len - off, 0);
      if (n == 0) {
        if (eof_ok && off == 0) return false;
        throw TransportError("peer closed mid-frame");
      }
      if (n < 0) throw TransportError("recv failed");
      off += static_cast<size_t>(n);
    }
    return true;
  }

  void close_fd() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  int fd_ = -1;
};

class TcpListener {
 public:
  explicit TcpListener(uint16_t port = 0) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw TransportError("socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
      throw TransportError("bind failed on port " + std::to_string(port));
    if (::listen(fd_, 16) != 0) throw TransportError("listen failed");
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpListener(const TcpListener&) = delete;

  uint16_t port() const { return port_; }

  TcpConn accept() {
    const int fd = ::accept(fd_, nullptr, nullptr);
    if (fd < 0) throw TransportError("accept failed");
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return TcpConn(fd);
  }

 private:
  int fd_ = -1;
  uint16_t port_ = 0;
};

inline TcpConn connect_tcp(const std::string& host, uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransportError("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw TransportError("bad address " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
    ::close(fd);
    throw TransportError("connect to " + host + ":" + std::to_string(port) + " failed");
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return TcpConn(fd);
}

// ---------------------------------------------------------------------------
// Tensor job packing. Small integers ride in the float payload (exact below
// 2^24) so every frame stays a plain row-major f32 array on the wire.
// ---------------------------------------------------------------------------

enum class TensorOp : uint32_t { apply_vertex = 1, grad_apply_vertex = 2, apply_edge = 3 };

namespace jobwire {

inline void put_matrix(std::vector<float>& payload, const MatrixF& m) {
  payload.push_back(static_cast<float>(m.rows()));
  payload.push_back(static_cast<float>(m.cols()));
  payload.insert(payload.end(), m.data(), m.data() + m.size());
}

inline MatrixF take_matrix(const std::vector<float>& payload, size_t& off) {
  if (off + 2 > payload.size()) throw ProtocolError("tensor job: truncated matrix header");
  const size_t rows = static_cast<size_t>(payload[off]);
  const size_t cols = static_cast<size_t>(payload[off + 1]);
  off += 2;
  if (off + rows * cols > payload.size()) throw ProtocolError("tensor job: truncated matrix body");
  MatrixF m(rows, cols);
  std::copy(payload.begin() + off, payload.begin() + off + rows * cols, m.data());
  off += rows * cols;
  return m;
}

}  // namespace jobwire

struct TensorJob {
  TensorOp op;
  bool flag = false;  // last_layer / is_output_layer
  std::vector<MatrixF> inputs;
};

inline Message encode_tensor_job(const TensorJob& job, uint32_t epoch, uint8_t layer,
                                 uint32_t interval) {
  Message m;
  m.type = MsgType::chunk_request;
  m.epoch = epoch;
  m.layer = layer;
  m.interval = interval;
  m.payload.push_back(static_cast<float>(static_cast<uint32_t>(job.op)));
  m.payload.push_back(job.flag ? 1.0f : 0.0f);
  m.payload.push_back(static_cast<float>(job.inputs.size()));
  for (const auto& in : job.inputs) jobwire::put_matrix(m.payload, in);
  return m;
}

inline TensorJob decode_tensor_job(const Message& m) {
  if (m.payload.size() < 3) throw ProtocolError("tensor job: truncated");
  TensorJob job;
  job.op = static_cast<TensorOp>(static_cast<uint32_t>(m.payload[0]));
  job.flag = m.payload[1] != 0.0f;
  const size_t count = static_cast<size_t>(m.payload[2]);
  size_t off = 3;
  for (size_t i = 0; i < count; ++i) job.inputs.push_back(jobwire::take_matrix(m.payload, off));
  return job;
}

inline Message encode_tensor_result(const std::vector<MatrixF>& outputs, uint32_t epoch,
                                    uint8_t layer, uint32_t interval) {
  Message m;
  m.type = MsgType::chunk_result;
  m.epoch = epoch;
  m.layer = layer;
  m.interval = interval;
  m.payload.push_back(static_cast<float>(outputs.size()));
  for (const auto& out : outputs) jobwire::put_matrix(m.payload, out);
  return m;
}

inline std::vector<MatrixF> decode_tensor_result(const Message& m) {
  if (m.payload.empty()) throw ProtocolError("tensor result: truncated");
  const size_t count = static_cast<size_t>(m.payload[0]);
  size_t off = 1;
  std::vector<MatrixF> out;
  for (size_t i = 0; i < count; ++i) out.push_back(jobwire::take_matrix(m.payload, off));
  return out;
}

// Executes one tensor job with the same kernels the in-process path uses.
inline std::vector<MatrixF> run_tensor_job(const TensorJob& job) {
  switch (job.op) {
    case TensorOp::apply_vertex: {
      if (job.inputs.size() != 2) throw ProtocolError("apply_vertex job wants chunk + weights");
      auto res = apply_vertex(job.inputs[0], job.inputs[1], job.flag);
      return {res.output, res.pre_activation};
    }
    case TensorOp::grad_apply_vertex: {
      if (job.inputs.size() != 4)
        throw ProtocolError("grad_apply_vertex job wants gathered + pre + weights + upstream");
      auto res = grad_apply_vertex(job.inputs[0], job.inputs[1], job.inputs[2], job.inputs[3],
                                   job.flag);
      return {res.grad_weights, res.downstream};
    }
    case TensorOp::apply_edge:
      if (job.inputs.size() != 1) throw ProtocolError("apply_edge job wants one chunk");
      return {job.inputs[0]};
  }
  throw ProtocolError("unknown tensor op");
}

// Worker role: accepts connections and serves chunk_request frames until a
// shutdown message or process exit.
class TensorWorkerServer {
 public:
  explicit TensorWorkerServer(uint16_t port = 0) : listener_(port) {
    thread_ = std::thread([this] { serve(); });
  }

  ~TensorWorkerServer() { stop(); }

  uint16_t port() const { return listener_.port(); }

  void stop() {
    if (stopped_.exchange(true)) return;
    try {
      TcpConn poke = connect_tcp("127.0.0.1", listener_.port());
      Message bye;
      bye.type = MsgType::shutdown;
      poke.send_message(bye);
    } catch (...) {
    }
    if (thread_.joinable()) thread_.join();
  }

 private:
  void serve() {
    while (!stopped_) {
      TcpConn conn;
      try {
        conn = listener_.accept();
      } catch (...) {
        return;
      }
      try {
        while (true) {
          auto msg = conn.recv_message();
          if (!msg) break;
          if (msg->type == MsgType::shutdown) return;
          if (msg->type != MsgType::chunk_request) continue;
          auto outputs = run_tensor_job(decode_tensor_job(*msg));
          conn.send_message(encode_tensor_result(outputs, msg->epoch, msg->layer, msg->interval));
        }
      } catch (const std::exception&) {
        // dropped connection; wait for the next one
      }
    }
  }

  TcpListener listener_;
  std::thread thread_;
  std::atomic<bool> stopped_{false};
};

// Client side used by the engine's tcp transport: one connection, one
// outstanding request at a time.
class TensorWorkerClient {
 public:
  TensorWorkerClient(const std::string& host, uint16_t port) : conn_(connect_tcp(host, port)) {}

  std::vector<MatrixF> execute(const TensorJob& job, uint32_t epoch, uint8_t layer,
                               uint32_t interval) {
    std::lock_guard<std::mutex> lock(mu_);
    conn_.send_message(encode_tensor_job(job, epoch, layer, interval));
    auto reply = conn_.recv_message();
    if (!reply || reply->type != MsgType::chunk_result)
      throw TransportError("worker returned no result");
    return decode_tensor_result(*reply);
  }

 private:
  std::mutex mu_;
  TcpConn conn_;
};

// TensorExecutor backed by a remote worker: every tensor task's payload
// round-trips through the framed protocol.
class RemoteTensorExecutor : public TensorExecutor {
 public:
  explicit RemoteTensorExecutor(TensorWorkerClient& client) : client_(client) {}

  ApplyVertexResult<float> run_apply_vertex(const MatrixF& chunk, const MatrixF& weights,
                                            bool last_layer, uint32_t epoch, uint8_t layer,
                                            uint32_t interval) override {
    TensorJob job{TensorOp::apply_vertex, last_layer, {chunk, weights}};
    auto out = client_.execute(job, epoch, layer, interval);
    if (out.size() != 2) throw TransportError("apply_vertex: bad reply");
    return {std::move(out[0]), std::move(out[1])};
  }

  GradApplyVertexResult<float> run_grad_apply_vertex(const MatrixF& gathered, const MatrixF& pre,
                                                     const MatrixF& weights, const MatrixF& upstream,
                                                     bool is_output_layer, uint32_t epoch,
                                                     uint8_t layer, uint32_t interval) override {
    TensorJob job{TensorOp::grad_apply_vertex, is_output_layer, {gathered, pre, weights, upstream}};
    auto out = client_.execute(job, epoch, layer, interval);
    if (out.size() != 2) throw TransportError("grad_apply_vertex: bad reply");
    return {std::move(out[0]), std::move(out[1])};
  }

  MatrixF run_apply_edge(const MatrixF& chunk, uint32_t epoch, uint8_t layer,
                         uint32_t interval) override {
    TensorJob job{TensorOp::apply_edge, false, {chunk}};
    auto out = client_.execute(job, epoch, layer, interval);
    if (out.size() != 1) throw TransportError("apply_edge: bad reply");
    return std::move(out[0]);
  }

 private:
  TensorWorkerClient& client_;
};

// Parameter-server role: serves fetch_weights / push_grad / broadcast frames
// against a PsGroup. Layer weights travel as one matrix per frame.
class WeightServer {
 public:
  WeightServer(PsGroup& group, uint16_t port = 0) : group_(group), listener_(port) {
    thread_ = std::thread([this] { serve(); });
  }
  ~WeightServer() { stop(); }

  uint16_t port() const { return listener_.port(); }

  void stop() {
    if (stopped_.exchange(true)) return;
    try {
      TcpConn poke = connect_tcp("127.0.0.1", listener_.port());
      Message bye;
      bye.type = MsgType::shutdown;
      poke.send_message(bye);
    } catch (...) {
    }
    if (thread_.joinable()) thread_.join();
  }

 private:
  void serve() {
    while (!stopped_) {
      TcpConn conn;
      try {
        conn = listener_.accept();
      } catch (...) {
        return;
      }
      try {
        while (true) {
          auto msg = conn.recv_message();
          if (!msg) break;
          if (msg->type == MsgType::shutdown) return;
          std::lock_guard<std::mutex> lock(mu_);
          if (msg->type == MsgType::fetch_weights) {
            const uint32_t ps = group_.pick_ps();
            auto res = group_.fetch_weights(ps, msg->interval, msg->epoch, msg->layer);
            Message reply;
            reply.type = MsgType::weights_reply;
            reply.epoch = msg->epoch;
            reply.layer = msg->layer;
            reply.interval = msg->interval;
            reply.payload.push_back(static_cast<float>(res.version));
            jobwire::put_matrix(reply.payload, *res.weights);
            conn.send_message(reply);
          } else if (msg->type == MsgType::push_grad) {
            size_t off = 0;
            MatrixF grad = jobwire::take_matrix(msg->payload, off);
            auto res = group_.push_grad(msg->interval, msg->epoch, msg->layer, grad);
            if (res.applied) group_.broadcast_all(*res.applied);
            Message ack;
            ack.type = MsgType::broadcast;
            ack.epoch = msg->epoch;
            ack.layer = msg->layer;
            ack.interval = msg->interval;
            ack.payload.push_back(static_cast<float>(group_.current_version()));
            conn.send_message(ack);
          } else if (msg->type == MsgType::broadcast) {
            // poll for the latest version of one layer
            Message reply;
            reply.type = MsgType::weights_reply;
            reply.layer = msg->layer;
            auto latest = group_.latest_at(PsGroup::kAccumulator);
            reply.payload.push_back(static_cast<float>(latest->version));
            jobwire::put_matrix(reply.payload, latest->layers.at(msg->layer));
            conn.send_message(reply);
          }
        }
      } catch (const std::exception&) {
      }
    }
  }

  PsGroup& group_;
  std::mutex mu_;
  TcpListener listener_;
  std::thread thread_;
  std::atomic<bool> stopped_{false};
};

}  // namespace gnnpipe
