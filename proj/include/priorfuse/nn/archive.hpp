#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <json.hpp>

#include "priorfuse/core/error.hpp"
#include "priorfuse/nn/tensor.hpp"

namespace priorfuse::nn {

// Flat named-array archive:
//   8 bytes   magic "PFARCH01"
//   8 bytes   little-endian header length L
//   L bytes   JSON header {"arrays":[{name, shape, dtype, offset, bytes}], "meta":{...}}
//   payload   raw little-endian array data at the recorded offsets
struct ArchiveEntry {
  std::string name;
  Shape shape;
  std::variant<std::vector<float>, std::vector<double>> data;
};

struct Archive {
  std::vector<ArchiveEntry> arrays;
  nlohmann::json meta = nlohmann::json::object();

  template <class T>
  void put(std::string name, Shape shape, std::span<const T> values) {
    arrays.push_back({std::move(name), std::move(shape), std::vector<T>(values.begin(), values.end())});
  }

  const ArchiveEntry* find(const std::string& name) const {
    for (const auto& e : arrays)
      if (e.name == name) return &e;
    return nullptr;
  }

  template <class T>
  std::vector<T> get(const std::string& name, const Shape& expected) const {
    const auto* e = find(name);
    if (!e) throw IoError("archive has no array '" + name + "'");
    if (e->shape != expected) {
      throw DimensionMismatch("archive array '" + name + "' has shape " + shape_string(e->shape) + ", expected " +
                              shape_string(expected));
    }
    return std::visit([](const auto& v) { return std::vector<T>(v.begin(), v.end()); }, e->data);
  }
};

inline constexpr char kArchiveMagic[8] = {'P', 'F', 'A', 'R', 'C', 'H', '0', '1'};

inline void write_archive(const Archive& archive, const std::filesystem::path& path) {
  nlohmann::json header;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : archive.arrays) {
    const bool is_f32 = std::holds_alternative<std::vector<float>>(e.data);
    const std::uint64_t bytes = std::visit([](const auto& v) { return v.size() * sizeof(v[0]); }, e.data);
    header["arrays"].push_back(
        {{"name", e.name}, {"shape", e.shape}, {"dtype", is_f32 ? "f32" : "f64"}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  header["meta"] = archive.meta;
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write archive " + tmp);
    out.write(kArchiveMagic, 8);
    std::uint64_t len = text.size();
    unsigned char le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(len >> (8 * i));
    out.write(reinterpret_cast<const char*>(le), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : archive.arrays) {
      std::visit(
          [&](const auto& v) {
            out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(v[0])));
          },
          e.data);
    }
    if (!out) throw IoError("short write on archive " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open archive " + path.string());
  char magic[8];
  unsigned char le[8];
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(le), 8);
  if (!in || std::memcmp(magic, kArchiveMagic, 8) != 0) throw IoError("not a parameter archive: " + path.string());
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(le[i]) << (8 * i);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated archive header: " + path.string());
  const auto header = nlohmann::json::parse(text);
  const auto payload_start = in.tellg();

  Archive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  for (const auto& a : header.at("arrays")) {
    ArchiveEntry e;
    e.name = a.at("name").get<std::string>();
    e.shape = a.at("shape").get<Shape>();
    const auto offset = a.at("offset").get<std::uint64_t>();
    const auto bytes = a.at("bytes").get<std::uint64_t>();
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    auto read_into = [&](auto& vec) {
      using V = typename std::decay_t<decltype(vec)>::value_type;
      if (bytes != numel(e.shape) * sizeof(V)) throw IoError("archive array '" + e.name + "' size mismatch");
      vec.resize(bytes / sizeof(V));
      in.read(reinterpret_cast<char*>(vec.data()), static_cast<std::streamsize>(bytes));
    };
    if (a.at("dtype") == "f32") {
      std::vector<float> v;
      read_into(v);
      e.data = std::move(v);
    } else {
      std::vector<double> v;
      read_into(v);
      e.data = std::move(v);
    }
    if (!in) throw IoError("truncated archive payload: " + path.string());
    archive.arrays.push_back(std::move(e));
  }
  return archive;
}

}  // namespace priorfuse::nn
