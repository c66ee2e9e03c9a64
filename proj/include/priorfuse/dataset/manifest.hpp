#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "priorfuse/core/error.hpp"
#include "priorfuse/core/image.hpp"

namespace priorfuse::dataset {

namespace fs = std::filesystem;

enum class Split { train, test };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw InvalidArgument("unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
  std::string id;
  fs::path degraded;
  std::optional<fs::path> gt;
  std::optional<fs::path> prior;
};

struct DatasetManifest {
  std::string name;
  DegradationType degradation{DegradationType::haze};
  Split split{Split::train};
  std::vector<ManifestEntry> entries;
  fs::path base_dir;  // directory relative paths were resolved against

  std::size_t size() const { return entries.size(); }
  bool has_priors() const {
    for (const auto& e : entries)
      if (!e.prior) return false;
    return !entries.empty();
  }
};

// Carries every problem found, not just the first.
class ManifestError : public Error {
 public:
  explicit ManifestError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "manifest invalid:";
    for (const auto& x : p) s += "\n  " + x;
    return s;
  }
  std::vector<std::string> problems_;
};

struct ManifestCheck {
  bool require_files{true};
  bool require_priors{false};
};

inline std::vector<std::string> validate(const DatasetManifest& m, const ManifestCheck& check = {}) {
  std::vector<std::string> problems;
  std::set<std::string> seen;
  for (const auto& e : m.entries) {
    if (e.id.empty()) problems.push_back("entry with empty id");
    if (!seen.insert(e.id).second) problems.push_back("duplicate id '" + e.id + "'");
    if (m.split == Split::train && !e.gt) problems.push_back("train entry '" + e.id + "' has no gt path");
    if (check.require_priors && !e.prior) problems.push_back("entry '" + e.id + "' has no prior path");
    if (check.require_files) {
      auto missing = [&](const fs::path& p) {
        if (!fs::exists(p)) problems.push_back("missing file: " + p.string());
      };
      missing(e.degraded);
      if (e.gt) missing(*e.gt);
      if (e.prior) missing(*e.prior);
    }
  }
  return problems;
}

inline DatasetManifest parse_manifest(std::istream& in, const fs::path& base_dir) {
  using nlohmann::json;
  DatasetManifest m;
  m.base_dir = base_dir;
  std::vector<std::string> problems;
  std::string line;
  int lineno = 0;
  bool header = false;
  auto resolve = [&](const std::string& p) {
    fs::path q(p);
    return q.is_absolute() ? q : (base_dir / q).lexically_normal();
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      problems.push_back("line " + std::to_string(lineno) + ": " + e.what());
      continue;
    }
    try {
      if (!header) {
        m.name = j.at("name").get<std::string>();
        m.degradation = parse_degradation(j.at("degradation").get<std::string>());
        m.split = parse_split(j.at("split").get<std::string>());
        header = true;
        continue;
      }
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      e.degraded = resolve(j.at("degraded").get<std::string>());
      if (j.contains("gt") && !j["gt"].is_null()) e.gt = resolve(j["gt"].get<std::string>());
      if (j.contains("prior") && !j["prior"].is_null()) e.prior = resolve(j["prior"].get<std::string>());
      m.entries.push_back(std::move(e));
    } catch (const std::exception& e) {
      problems.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!header) problems.push_back("missing header line {name, degradation, split}");
  if (!problems.empty()) throw ManifestError(problems);
  return m;
}

inline DatasetManifest load_manifest(const fs::path& path, const ManifestCheck& check = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  auto m = parse_manifest(in, fs::absolute(path).parent_path());
  auto problems = validate(m, check);
  if (!problems.empty()) throw ManifestError(problems);
  return m;
}

// Paths are written relative to the manifest directory when possible.
inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  using nlohmann::json;
  const auto dir = fs::absolute(path).parent_path();
  auto rel = [&](const fs::path& p) {
    auto r = fs::absolute(p).lexically_relative(dir);
    return (r.empty() ? p : r).generic_string();
  };
  std::ostringstream out;
  out << json{{"name", m.name}, {"degradation", std::string(to_string(m.degradation))}, {"split", std::string(to_string(m.split))}}.dump() << "\n";
  for (const auto& e : m.entries) {
    json j{{"id", e.id}, {"degraded", rel(e.degraded)}};
    if (e.gt) j["gt"] = rel(*e.gt);
    if (e.prior) j["prior"] = rel(*e.prior);
    out << j.dump() << "\n";
  }
  fs::create_directories(dir);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write " + tmp);
    f << out.str();
  }
  fs::rename(tmp, path);
}

}  // namespace priorfuse::dataset
