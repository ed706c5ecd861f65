#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace s2st::kv {

// Flat "key = value" text document. Keeps insertion order for serialization,
// tracks which keys were read so callers can reject unknown ones.
class Document {
 public:
  Document() = default;

  static Document parse(const std::string& text);
  static Document load(const std::string& path);

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, int64_t value);
  void set(const std::string& key, double value);
  void set(const std::string& key, bool value);

  bool has(const std::string& key) const;

  std::string get_str(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;

  // Keys present in the document but never fetched through a getter.
  std::vector<std::string> unread_keys() const;
  std::vector<std::string> keys() const;

  std::string serialize() const;
  void save(const std::string& path) const;

 private:
  const std::string& raw(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, size_t> index_;
  mutable std::map<std::string, bool> read_;
};

}  // namespace s2st::kv
