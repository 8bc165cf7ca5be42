/* Copyright 2026 The Stratsim Authors.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace stratsim {

using json = nlohmann::json;

// Raised for every user-facing input problem. `where` is a JSON-pointer-like
// element path ("layers/2/ops/0") or an object name.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message)
      : std::runtime_error(message), message_(message) {}
  Error(const std::string& where, const std::string& message)
      : std::runtime_error(where.empty() ? message : where + ": " + message),
        where_(where),
        message_(message) {}

  const std::string& where() const { return where_; }
  const std::string& message() const { return message_; }

 private:
  std::string where_;
  std::string message_;
};

// Several problems collected before failing, e.g. all missing cost keys.
class AggregateError : public Error {
 public:
  explicit AggregateError(std::string headline, std::vector<std::string> items)
      : Error(compose(headline, items)), items_(std::move(items)) {}

  const std::vector<std::string>& items() const { return items_; }

 private:
  static std::string compose(const std::string& headline,
                             const std::vector<std::string>& items) {
    std::string out = headline;
    for (const auto& item : items) out += "\n  " + item;
    return out;
  }
  std::vector<std::string> items_;
};

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(path, "cannot open file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(path, std::string("malformed JSON: ") + e.what());
  }
}

template <typename T>
T require_field(const json& obj, const std::string& key,
                const std::string& where) {
  if (!obj.is_object() || !obj.contains(key))
    throw Error(where, "missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(where + "/" + key, std::string("wrong type: ") + e.what());
  }
}

template <typename T>
T optional_field(const json& obj, const std::string& key, T fallback,
                 const std::string& where) {
  if (!obj.is_object() || !obj.contains(key) || obj.at(key).is_null())
    return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(where + "/" + key, std::string("wrong type: ") + e.what());
  }
}

inline std::string join(const std::vector<std::string>& parts,
                        std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline std::string join_ints(const std::vector<int>& values,
                             std::string_view sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(values[i]);
  }
  return out;
}

template <typename T>
void sort_unique(std::vector<T>& v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
}

// Mixed-radix enumeration: every index vector with 0 <= idx[i] < radix[i],
// last position varying fastest.
inline std::vector<std::vector<int>> enumerate_grid(
    const std::vector<int>& radix) {
  std::vector<std::vector<int>> out;
  std::vector<int> idx(radix.size(), 0);
  for (int r : radix)
    if (r <= 0) return out;
  while (true) {
    out.push_back(idx);
    int pos = static_cast<int>(radix.size()) - 1;
    while (pos >= 0) {
      if (++idx[pos] < radix[pos]) break;
      idx[pos] = 0;
      --pos;
    }
    if (pos < 0) break;
  }
  return out;
}

}  // namespace stratsim
