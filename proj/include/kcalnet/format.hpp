#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>

namespace kcalnet {

/// Shortest text that parses back to the same double.
std::string format_double(double value);

/// 64-bit FNV-1a; `seed` continues an earlier digest.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

/// Throws IoError.
std::string read_text_file(const std::filesystem::path& path);
/// create_directories that throws IoError instead of filesystem_error.
void ensure_directory(const std::filesystem::path& dir);
/// Writes through a temporary file and renames it into place. Throws IoError.
void write_text_file(const std::filesystem::path& path, std::string_view contents);

/// `key = value` lines; '#' starts a comment, blank lines are skipped.
/// Throws ConfigError on a line without '=' or a repeated key.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace kcalnet
