#pragma once

#include <set>
#include <string>
#include <vector>

#include "json.hpp"

namespace wiss {

// Reads one JSON object while collecting every problem instead of stopping at
// the first: missing required keys, wrong types, and keys nobody asked for.
class JsonReader {
 public:
  JsonReader(const nlohmann::json& j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(path_ + ": expected an object");
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key) || j_.at(key).is_null()) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(path_ + "." + key + ": wrong type");
      return fallback;
    }
  }

  template <typename T>
  T require(const std::string& key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) {
      errors_.push_back(path_ + "." + key + ": required");
      return T{};
    }
    return get<T>(key, T{});
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.is_object() && j_.contains(key) && !j_.at(key).is_null();
  }

  const nlohmann::json& child(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void check(bool ok, const std::string& what) {
    if (!ok) errors_.push_back(path_ + ": " + what);
  }

  std::string sub(const std::string& key) const { return path_ + "." + key; }
  std::vector<std::string>& errors() { return errors_; }

  // Unknown keys are errors.
  void finish() {
    if (!j_.is_object()) return;
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) errors_.push_back(path_ + "." + k + ": unknown key");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

// Joins collected problems into one kInvalidConfig error, if any.
void throw_if_errors(const std::vector<std::string>& errors, const std::string& context);

}  // namespace wiss
