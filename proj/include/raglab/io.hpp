#pragma once

#include <string>

namespace raglab {

/// Write-then-rename so readers never observe a partial file.
void write_file_atomic(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

}  // namespace raglab
