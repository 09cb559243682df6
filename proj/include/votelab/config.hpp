#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace votelab {

/// Flat key=value store with dotted section keys ("train.lr"). Values stay
/// strings until a typed getter parses them; parse failures and malformed
/// lines raise config errors.
class Config {
 public:
  Config() = default;

  /// Lines of "key = value"; '#' starts a comment; blank lines ignored.
  static Config from_file(const std::filesystem::path& path);

  /// Environment variables PREFIX_SECTION_REST map to "section.rest"
  /// (lowercased; the first underscore after the prefix becomes the dot).
  /// Variables with no underscore after the prefix map to a bare key.
  void apply_env_overrides(const std::string& prefix = "VOTELAB_");

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

  /// Keys never touched by any getter; used to reject unknown keys.
  std::map<std::string, std::string> unused() const;

 private:
  std::map<std::string, std::string> entries_;
  mutable std::map<std::string, bool> used_;
};

}  // namespace votelab
