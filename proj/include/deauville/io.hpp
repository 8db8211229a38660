#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace deauville::io {

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view content);

std::vector<std::string> read_lines(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Minimal CSV field splitting; fields never contain quoted commas here.
std::vector<std::string> split_csv_line(std::string_view line);

std::string format_double(double value, int precision = 6);

} // namespace deauville::io
