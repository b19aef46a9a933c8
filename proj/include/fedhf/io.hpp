#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace fedhf::io {

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string hex64(std::uint64_t value);

// Shortest text that parses back to the same double.
std::string format_double(double value);
double parse_double(std::string_view text);

}  // namespace fedhf::io
