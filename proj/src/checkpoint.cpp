// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace diffapo::nd {

namespace {

constexpr char kMagic[4] = {'A', 'P', 'O', '1'};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(U);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    if (e.name.size() > 0xFFFF) throw CheckpointError("parameter name too long: " + e.name);
    if (e.value.rank() > 0xFF) throw CheckpointError("rank too large for " + e.name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.value.rank()));
    for (std::size_t extent : e.value.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(extent));
    for (double v : e.value.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ParamSet decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("bad checkpoint magic");
  }
  Reader in(bytes);
  in.get_string(4);
  const auto count = in.get<std::uint32_t>();
  ParamSet params;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = in.get<std::uint16_t>();
    std::string name = in.get_string(name_len);
    const auto rank = in.get<std::uint8_t>();
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r) shape.push_back(in.get<std::uint32_t>());
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = std::bit_cast<double>(in.get<std::uint64_t>());
    try {
      params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
    } catch (const Error& e) {
      throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
    }
  }
  if (!in.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return params;
}

void save_checkpoint(const ParamSet& params, const std::string& path) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

ParamSet load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace diffapo::nd
