#pragma once

#include <string>

namespace recon {

// Writes content to a temporary file in the target directory and renames it
// into place, so readers never observe a partial file.
void atomic_write_file(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

void ensure_directory(const std::string& path);

bool file_exists(const std::string& path);

std::string path_join(const std::string& a, const std::string& b);

// Formats a double so that parsing the text recovers the value bit-exactly.
std::string format_double(double v);

}  // namespace recon
