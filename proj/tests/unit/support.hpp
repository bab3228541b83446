// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qadapt/rng.hpp"
#include "qadapt/tensor.hpp"

namespace qadapt::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.mutable_data()) x = rng.normal(0.0, stddev);
  return t;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Rows of a comma-separated file with a header line, typed by the
/// "type" of each column in `schema` (integer, number, otherwise string).
inline std::vector<nlohmann::json> csv_rows(const std::string& text, const nlohmann::json& schema) {
  std::vector<nlohmann::json> rows;
  std::istringstream in(text);
  std::string line;
  std::vector<std::string> header;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) out.push_back(cell);
    if (!l.empty() && l.back() == ',') out.emplace_back();
    return out;
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header.empty()) {
      header = split(line);
      continue;
    }
    const auto cells = split(line);
    nlohmann::json row = nlohmann::json::object();
    for (std::size_t i = 0; i < cells.size(); ++i) {
      const std::string key = i < header.size() ? header[i] : "column" + std::to_string(i);
      const auto& prop = schema["properties"].contains(key) ? schema["properties"][key] : nlohmann::json::object();
      const std::string type = prop.value("type", "string");
      try {
        if (type == "integer") {
          row[key] = std::stoll(cells[i]);
        } else if (type == "number") {
          row[key] = std::stod(cells[i]);
        } else {
          row[key] = cells[i];
        }
      } catch (const std::exception&) {
        row[key] = cells[i];
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("qadapt_unit_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace qadapt::test
