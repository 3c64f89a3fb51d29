#include "dcct/ini.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "dcct/errors.hpp"

namespace dcct {

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

IniDocument IniDocument::parse(const std::string& text) {
  IniDocument doc;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto cut = line.find_first_of("#;");
    if (cut != std::string::npos) line.erase(cut);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      doc.sections[section];
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    auto& entries = doc.sections[section];
    for (const auto& [k, v] : entries) {
      if (k == key) throw ConfigError("duplicate key '" + key + "' in section [" + section + "]");
    }
    entries.emplace_back(key, value);
  }
  return doc;
}

IniDocument IniDocument::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

IniSection::IniSection(const IniDocument& doc, const std::string& name) : name_(name) {
  auto it = doc.sections.find(name);
  if (it != doc.sections.end()) entries_ = it->second;
}

bool IniSection::has(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == key; });
}

const std::string* IniSection::lookup(const std::string& key) {
  for (const auto& [k, v] : entries_) {
    if (k == key) {
      consumed_.insert(key);
      return &v;
    }
  }
  return nullptr;
}

void IniSection::read(const std::string& key, int& out) {
  if (const auto* v = lookup(key)) {
    int parsed = 0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), parsed);
    if (ec != std::errc() || p != v->data() + v->size()) {
      throw ConfigError("[" + name_ + "] " + key + ": expected an integer, got '" + *v + "'");
    }
    out = parsed;
  }
}

void IniSection::read(const std::string& key, std::uint64_t& out) {
  if (const auto* v = lookup(key)) {
    std::uint64_t parsed = 0;
    auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), parsed);
    if (ec != std::errc() || p != v->data() + v->size()) {
      throw ConfigError("[" + name_ + "] " + key + ": expected an unsigned integer, got '" + *v + "'");
    }
    out = parsed;
  }
}

void IniSection::read(const std::string& key, double& out) {
  if (const auto* v = lookup(key)) {
    try {
      std::size_t used = 0;
      double parsed = std::stod(*v, &used);
      if (used != v->size()) throw std::invalid_argument("trailing");
      out = parsed;
    } catch (const std::exception&) {
      throw ConfigError("[" + name_ + "] " + key + ": expected a number, got '" + *v + "'");
    }
  }
}

void IniSection::read(const std::string& key, bool& out) {
  if (const auto* v = lookup(key)) {
    std::string s = *v;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "true" || s == "1" || s == "yes" || s == "on") {
      out = true;
    } else if (s == "false" || s == "0" || s == "no" || s == "off") {
      out = false;
    } else {
      throw ConfigError("[" + name_ + "] " + key + ": expected a boolean, got '" + *v + "'");
    }
  }
}

void IniSection::read(const std::string& key, std::string& out) {
  if (const auto* v = lookup(key)) out = *v;
}

void IniSection::reject_unknown() const {
  for (const auto& [k, v] : entries_) {
    if (!consumed_.count(k)) throw ConfigError("unknown key '" + k + "' in section [" + name_ + "]");
  }
}

void reject_unknown_sections(const IniDocument& doc, const std::set<std::string>& allowed) {
  for (const auto& [name, entries] : doc.sections) {
    if (!allowed.count(name)) {
      if (name.empty() && entries.empty()) continue;
      throw ConfigError(name.empty() ? "keys outside any section" : "unknown section [" + name + "]");
    }
  }
}

}  // namespace dcct
