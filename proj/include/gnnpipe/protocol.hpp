#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace gnnpipe {

struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class MsgType : uint8_t {
  ghost_data = 1,      // scattered activation/gradient rows
  chunk_request = 2,   // tensor task dispatched to a worker
  chunk_result = 3,
  fetch_weights = 4,
  weights_reply = 5,
  push_grad = 6,
  broadcast = 7,
  shutdown = 8,
};

// One frame of the wire protocol. Header layout, all little-endian:
//   magic "ANTP" (4) | msg_type u8 | epoch u32 | layer u8 | interval u32 |
//   payload_len u64 (bytes)
// Payload is a row-major array of 32-bit reals.
struct Message {
  MsgType type = MsgType::ghost_data;
  uint32_t epoch = 0;
  uint8_t layer = 0;
  uint32_t interval = 0;
  std::vector<float> payload;

  bool operator==(const Message& o) const {
    if (type != o.type || epoch != o.epoch || layer != o.layer || interval != o.interval ||
        payload.size() != o.payload.size())
      return false;
    // bitwise comparison (NaN payloads must round-trip too)
    return payload.empty() ||
           std::memcmp(payload.data(), o.payload.data(), payload.size() * 4) == 0;
  }
};

inline constexpr size_t kHeaderBytes = 22;
inline constexpr char kMagic[4] = {'A', 'N', 'T', 'P'};

namespace wire {

inline void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
  buf.push_back(static_cast<uint8_t>(v));
  buf.push_back(static_cast<uint8_t>(v >> 8));
  buf.push_back(static_cast<uint8_t>(v >> 16));
  buf.push_back(static_cast<uint8_t>(v >> 24));
}

inline void put_u64(std::vector<uint8_t>& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

inline uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace wire

inline std::vector<uint8_t> encode_message(const Message& m) {
  const uint64_t payload_len = static_cast<uint64_t>(m.payload.size()) * 4;
  if (payload_len >= (1ULL << 63)) throw ProtocolError("encode: payload length overflow");
  std::vector<uint8_t> buf;
  buf.reserve(kHeaderBytes + payload_len);
  buf.insert(buf.end(), kMagic, kMagic + 4);
  buf.push_back(static_cast<uint8_t>(m.type));
  wire::put_u32(buf, m.epoch);
  buf.push_back(m.layer);
  wire::put_u32(buf, m.interval);
  wire::put_u64(buf, payload_len);
  for (float f : m.payload) wire::put_u32(buf, std::bit_cast<uint32_t>(f));
  return buf;
}

// Decodes one full frame. The buffer must contain exactly the frame returned
// by encode_message; transports that stream bytes first read the 22-byte
// header, then payload_len more bytes.
inline Message decode_message(const uint8_t* data, size_t len) {
  if (len < kHeaderBytes) throw ProtocolError("decode: truncated frame (header)");
  if (std::memcmp(data, kMagic, 4) != 0) throw ProtocolError("decode: bad magic");
  Message m;
  m.type = static_cast<MsgType>(data[4]);
  m.epoch = wire::get_u32(data + 5);
  m.layer = data[9];
  m.interval = wire::get_u32(data + 10);
  const uint64_t payload_len = wire::get_u64(data + 14);
  if (payload_len >= (1ULL << 63)) throw ProtocolError("decode: payload length overflow");
  if (payload_len % 4 != 0) throw ProtocolError("decode: payload length not a multiple of 4");
  if (len != kHeaderBytes + payload_len) throw ProtocolError("decode: truncated frame (payload)");
  m.payload.resize(payload_len / 4);
  for (size_t i = 0; i < m.payload.size(); ++i)
    m.payload[i] = std::bit_cast<float>(wire::get_u32(data + kHeaderBytes + 4 * i));
  return m;
}

inline Message decode_message(const std::vector<uint8_t>& buf) {
  return decode_message(buf.data(), buf.size());
}

}  // namespace gnnpipe
