#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace tablefree {

// Flat "key = value" text with dotted keys. Blank lines and lines starting
// with '#' are ignored; later duplicates overwrite earlier ones.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in);
  static KeyValues load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  std::int64_t get_int(const std::string& key) const;
  std::int64_t get_int_or(const std::string& key, std::int64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double_or(const std::string& key, double fallback) const;
  bool get_bool_or(const std::string& key, bool fallback) const;
  std::vector<std::int64_t> get_int_list(const std::string& key) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set(const std::string& key, std::int64_t value) { values_[key] = std::to_string(value); }
  void set(const std::string& key, double value);

  const std::map<std::string, std::string>& entries() const { return values_; }
  void write(std::ostream& out) const;

 private:
  std::map<std::string, std::string> values_;
};

// Single-line record of space-separated key=value fields.
std::map<std::string, std::string> parse_record(const std::string& line);

// Shortest decimal text that reads back to the identical double.
std::string format_exact(double value);

}  // namespace tablefree
