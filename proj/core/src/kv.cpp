#include "s2st/kv.hpp"

#include <fstream>
#include <sstream>

#include "s2st/common.hpp"

namespace s2st::kv {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

Document Document::parse(const std::string& text) {
  Document doc;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw DataError("config line " + std::to_string(lineno) +
                      ": expected 'key = value', got '" + t + "'");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw DataError("config line " + std::to_string(lineno) + ": empty key");
    }
    doc.set(key, value);
  }
  return doc;
}

Document Document::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void Document::set(const std::string& key, const std::string& value) {
  auto it = index_.find(key);
  if (it != index_.end()) {
    entries_[it->second].second = value;
  } else {
    index_[key] = entries_.size();
    entries_.emplace_back(key, value);
  }
}

void Document::set(const std::string& key, int64_t value) { set(key, std::to_string(value)); }

void Document::set(const std::string& key, double value) {
  std::ostringstream os;
  os.precision(17);
  os << value;
  set(key, os.str());
}

void Document::set(const std::string& key, bool value) { set(key, std::string(value ? "true" : "false")); }

bool Document::has(const std::string& key) const { return index_.count(key) > 0; }

const std::string& Document::raw(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) throw ConfigError("missing config key: " + key);
  read_[key] = true;
  return entries_[it->second].second;
}

std::string Document::get_str(const std::string& key) const { return raw(key); }

std::string Document::get_str(const std::string& key, const std::string& fallback) const {
  return has(key) ? raw(key) : fallback;
}

int64_t Document::get_int(const std::string& key) const {
  const std::string& v = raw(key);
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
  }
}

int64_t Document::get_int(const std::string& key, int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double Document::get_double(const std::string& key) const {
  const std::string& v = raw(key);
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected number, got '" + v + "'");
  }
}

double Document::get_double(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool Document::get_bool(const std::string& key) const {
  const std::string& v = raw(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected boolean, got '" + v + "'");
}

bool Document::get_bool(const std::string& key, bool fallback) const {
  return has(key) ? get_bool(key) : fallback;
}

std::vector<std::string> Document::unread_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) {
    auto it = read_.find(k);
    if (it == read_.end() || !it->second) out.push_back(k);
  }
  return out;
}

std::vector<std::string> Document::keys() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

std::string Document::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries_) os << k << " = " << v << "\n";
  return os.str();
}

void Document::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write config file: " + path);
  out << serialize();
}

}  // namespace s2st::kv
