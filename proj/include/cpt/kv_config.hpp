#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace cpt {

/// Flat `key = value` documents. Blank lines and lines starting with '#'
/// are skipped; later keys override earlier ones.
std::map<std::string, std::string> parse_kv(const std::string& text);
std::map<std::string, std::string> read_kv_file(const std::filesystem::path& path);
std::string format_kv(const std::map<std::string, std::string>& kv);

std::size_t kv_size(const std::map<std::string, std::string>& kv, const std::string& key, std::size_t fallback);
double kv_double(const std::map<std::string, std::string>& kv, const std::string& key, double fallback);

}  // namespace cpt
