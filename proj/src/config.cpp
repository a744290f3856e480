#include "tablefree/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "tablefree/error.hpp"

namespace tablefree {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

KeyValues KeyValues::parse(std::istream& in) {
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto text = trim(line);
    if (text.empty() || text.front() == '#') continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw Error(Errc::ParseError, "line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = trim(text.substr(0, eq));
    if (key.empty()) throw Error(Errc::ParseError, "line " + std::to_string(lineno) + ": empty key");
    kv.values_[key] = trim(text.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::IoFailure, "cannot open " + path);
  return parse(in);
}

const std::string& KeyValues::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw Error(Errc::InvalidConfig, "missing key '" + key + "'");
  return it->second;
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

std::int64_t KeyValues::get_int(const std::string& key) const {
  const auto& text = get(key);
  std::int64_t value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw Error(Errc::InvalidConfig, "key '" + key + "' is not an integer: " + text);
  }
  return value;
}

std::int64_t KeyValues::get_int_or(const std::string& key, std::int64_t fallback) const {
  return has(key) ? get_int(key) : fallback;
}

double KeyValues::get_double(const std::string& key) const {
  const auto& text = get(key);
  try {
    std::size_t used = 0;
    const double value = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw Error(Errc::InvalidConfig, "key '" + key + "' is not a number: " + text);
  }
}

double KeyValues::get_double_or(const std::string& key, double fallback) const {
  return has(key) ? get_double(key) : fallback;
}

bool KeyValues::get_bool_or(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const auto& text = get(key);
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw Error(Errc::InvalidConfig, "key '" + key + "' is not a boolean: " + text);
}

std::vector<std::int64_t> KeyValues::get_int_list(const std::string& key) const {
  std::vector<std::int64_t> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw Error(Errc::InvalidConfig, "key '" + key + "' has non-integer item " + item);
    }
  }
  return out;
}

void KeyValues::set(const std::string& key, double value) { values_[key] = format_exact(value); }

void KeyValues::write(std::ostream& out) const {
  for (const auto& [key, value] : values_) out << key << " = " << value << '\n';
}

std::map<std::string, std::string> parse_record(const std::string& line) {
  std::map<std::string, std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (ss >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw Error(Errc::ParseError, "field without '=': " + field);
    fields[field.substr(0, eq)] = field.substr(eq + 1);
  }
  return fields;
}

std::string format_exact(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, ptr);
}

}  // namespace tablefree
