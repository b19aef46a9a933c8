#include "fedhf/io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fedhf/error.hpp"

namespace fedhf::io {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCategory::io, "cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  require(!ec, ErrorCategory::io, "cannot create directory for " + path.string());
  auto temp = path;
  temp += ".tmp";
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCategory::io, "cannot write " + temp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    require(static_cast<bool>(out), ErrorCategory::io, "short write to " + temp.string());
  }
  std::filesystem::rename(temp, path, ec);
  require(!ec, ErrorCategory::io, "cannot move " + temp.string() + " into place");
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::string format_double(double value) {
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, result.ptr);
}

double parse_double(std::string_view text) {
  double value = 0.0;
  const auto result = std::from_chars(text.data(), text.data() + text.size(), value);
  require(result.ec == std::errc() && result.ptr == text.data() + text.size(), ErrorCategory::io,
          "malformed number '" + std::string(text) + "'");
  return value;
}

}  // namespace fedhf::io
