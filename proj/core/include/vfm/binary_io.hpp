#pragma once

// Shared helpers for the "text header + little-endian float64 payload" file
// formats (checkpoints, datasets, trajectories).

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace vfm::io {

void write_f64_le(std::ostream& os, std::span<const double> values);

/// Reads exactly n values; throws FormatError on a short read.
std::vector<double> read_f64_le(std::istream& is, std::size_t n);

/// Reads one header line (without the trailing newline); throws FormatError
/// at end of file.
std::string read_header_line(std::istream& is);

/// Splits "key rest-of-line" at the first space.
std::pair<std::string, std::string> split_key(const std::string& line);

/// Writes to `path` through a temporary sibling and renames on success.
void write_atomically(const std::filesystem::path& path, const std::string& bytes);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace vfm::io
