/*
 * Copyright 2026 The qexit Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qexit/errors.hpp"
#include "qexit/tensor.hpp"

namespace qexit {

// Self-describing tensor archive.
//
//   bytes [0, 8)    magic "QXARCHV1"
//   bytes [8, 16)   header length H, uint64 little-endian
//   bytes [16, 16+H) UTF-8 JSON manifest:
//       {"format": "qxa", "version": 1, "metadata": {...},
//        "entries": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
//   payload          raw little-endian arrays; offsets are relative to the
//                    payload start, entries are contiguous in manifest order.
//
// dtype is one of "f32", "i8", "i32".
enum class DType { f32, i8, i32 };

inline constexpr char kArchiveMagic[8] = {'Q', 'X', 'A', 'R', 'C', 'H', 'V', '1'};

inline std::size_t dtype_size(DType t) { return t == DType::i8 ? 1 : 4; }

inline std::string to_string(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::i8: return "i8";
    case DType::i32: return "i32";
  }
  return "?";
}

inline DType dtype_from_string(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "i8") return DType::i8;
  if (s == "i32") return DType::i32;
  throw InputError("archive: unknown dtype '" + s + "'");
}

class TensorArchive {
 public:
  struct Entry {
    std::string name;
    DType dtype = DType::f32;
    Shape shape;
    std::vector<std::uint8_t> bytes;  // little-endian payload
  };

  nlohmann::json metadata = nlohmann::json::object();

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  void put(const std::string& name, const Tensor& t) {
    Entry e{name, DType::f32, t.shape(), {}};
    e.bytes.resize(t.size() * 4);
    for (std::size_t i = 0; i < t.size(); ++i) store_le(std::bit_cast<std::uint32_t>(t[i]), &e.bytes[i * 4]);
    insert(std::move(e));
  }

  void put_i8(const std::string& name, Shape shape, const std::vector<std::int8_t>& v) {
    check_count(name, shape, v.size());
    Entry e{name, DType::i8, std::move(shape), {}};
    e.bytes.resize(v.size());
    std::memcpy(e.bytes.data(), v.data(), v.size());
    insert(std::move(e));
  }

  void put_i32(const std::string& name, Shape shape, const std::vector<std::int32_t>& v) {
    check_count(name, shape, v.size());
    Entry e{name, DType::i32, std::move(shape), {}};
    e.bytes.resize(v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) store_le(static_cast<std::uint32_t>(v[i]), &e.bytes[i * 4]);
    insert(std::move(e));
  }

  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InputError("archive has no entry '" + name + "'");
    return entries_[it->second];
  }

  Tensor get(const std::string& name) const {
    const Entry& e = typed(name, DType::f32);
    std::vector<float> v(shape_numel(e.shape));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::bit_cast<float>(load_le(&e.bytes[i * 4]));
    return Tensor(e.shape, std::move(v));
  }

  std::vector<std::int8_t> get_i8(const std::string& name) const {
    const Entry& e = typed(name, DType::i8);
    std::vector<std::int8_t> v(e.bytes.size());
    std::memcpy(v.data(), e.bytes.data(), v.size());
    return v;
  }

  std::vector<std::int32_t> get_i32(const std::string& name) const {
    const Entry& e = typed(name, DType::i32);
    std::vector<std::int32_t> v(e.bytes.size() / 4);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::int32_t>(load_le(&e.bytes[i * 4]));
    return v;
  }

  std::string serialize() const {
    nlohmann::json manifest = {{"format", "qxa"}, {"version", 1}, {"metadata", metadata}};
    nlohmann::json list = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& e : entries_) {
      list.push_back({{"name", e.name}, {"dtype", to_string(e.dtype)}, {"shape", e.shape}, {"offset", offset},
                      {"nbytes", e.bytes.size()}});
      offset += e.bytes.size();
    }
    manifest["entries"] = list;
    const std::string header = manifest.dump();
    std::string out(kArchiveMagic, sizeof kArchiveMagic);
    std::uint8_t len[8];
    const std::uint64_t h = header.size();
    for (int i = 0; i < 8; ++i) len[i] = static_cast<std::uint8_t>(h >> (8 * i));
    out.append(reinterpret_cast<const char*>(len), 8);
    out += header;
    for (const auto& e : entries_) out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
    return out;
  }

  static TensorArchive parse(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kArchiveMagic, 8) != 0) throw InputError("archive: bad magic");
    std::uint64_t h = 0;
    for (int i = 0; i < 8; ++i) h |= std::uint64_t(static_cast<std::uint8_t>(bytes[8 + i])) << (8 * i);
    if (h > bytes.size() - 16) throw InputError("archive: header length exceeds file size");
    nlohmann::json manifest;
    try {
      manifest = nlohmann::json::parse(bytes.substr(16, h));
    } catch (const nlohmann::json::exception& ex) {
      throw InputError(std::string("archive: malformed manifest: ") + ex.what());
    }
    const std::size_t payload_start = 16 + h;
    const std::size_t payload_size = bytes.size() - payload_start;
    TensorArchive a;
    a.metadata = manifest.value("metadata", nlohmann::json::object());
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (const auto& je : manifest.at("entries")) {
      Entry e;
      e.name = je.at("name").get<std::string>();
      e.dtype = dtype_from_string(je.at("dtype").get<std::string>());
      e.shape = je.at("shape").get<Shape>();
      const auto offset = je.at("offset").get<std::uint64_t>();
      const auto nbytes = je.at("nbytes").get<std::uint64_t>();
      if (nbytes != shape_numel(e.shape) * dtype_size(e.dtype)) {
        throw InputError("archive: entry '" + e.name + "' byte count does not match its shape");
      }
      if (offset > payload_size || nbytes > payload_size - offset) {
        throw InputError("archive: entry '" + e.name + "' extends past the payload");
      }
      spans.emplace_back(offset, nbytes);
      e.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload_start + offset),
                     bytes.begin() + static_cast<std::ptrdiff_t>(payload_start + offset + nbytes));
      if (a.contains(e.name)) throw InputError("archive: duplicate entry '" + e.name + "'");
      a.insert(std::move(e));
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
      if (spans[i - 1].first + spans[i - 1].second > spans[i].first) throw InputError("archive: overlapping entries");
    }
    return a;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write archive " + path.string());
    const std::string b = serialize();
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!f) throw InputError("failed writing archive " + path.string());
  }

  static TensorArchive load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw MissingArtifactError(path.string());
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open archive " + path.string());
    std::string b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse(b);
  }

 private:
  static void store_le(std::uint32_t v, std::uint8_t* out) {
    for (int i = 0; i < 4; ++i) out[i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
  static std::uint32_t load_le(const std::uint8_t* in) {
    return std::uint32_t(in[0]) | std::uint32_t(in[1]) << 8 | std::uint32_t(in[2]) << 16 | std::uint32_t(in[3]) << 24;
  }
  static void check_count(const std::string& name, const Shape& s, std::size_t n) {
    if (shape_numel(s) != n) throw DimensionError("archive entry '" + name + "' data does not match shape");
  }

  const Entry& typed(const std::string& name, DType t) const {
    const Entry& e = entry(name);
    if (e.dtype != t) throw InputError("archive entry '" + name + "' is " + to_string(e.dtype) + ", not " + to_string(t));
    return e;
  }

  void insert(Entry e) {
    auto it = index_.find(e.name);
    if (it != index_.end()) {
      entries_[it->second] = std::move(e);
      return;
    }
    index_[e.name] = entries_.size();
    entries_.push_back(std::move(e));
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace qexit
