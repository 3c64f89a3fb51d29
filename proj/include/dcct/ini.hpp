#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace dcct {

// Flat `key = value` file with `[section]` headers; `#` and `;` start comments.
struct IniDocument {
  // section -> ordered (key, value) pairs; keys before any header live in "".
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;

  static IniDocument parse(const std::string& text);
  static IniDocument load(const std::string& path);
};

// Typed reads from one section. Every key must be read before
// `reject_unknown()`, otherwise it is reported as unknown.
class IniSection {
 public:
  IniSection(const IniDocument& doc, const std::string& name);

  bool has(const std::string& key) const;
  void read(const std::string& key, int& out);
  void read(const std::string& key, std::uint64_t& out);
  void read(const std::string& key, double& out);
  void read(const std::string& key, bool& out);
  void read(const std::string& key, std::string& out);

  // Throws ConfigError naming the first key that was never read.
  void reject_unknown() const;

 private:
  const std::string* lookup(const std::string& key);

  std::string name_;
  std::vector<std::pair<std::string, std::string>> entries_;
  std::set<std::string> consumed_;
};

// Throws ConfigError when the document has a section outside `allowed`.
void reject_unknown_sections(const IniDocument& doc, const std::set<std::string>& allowed);

}  // namespace dcct
