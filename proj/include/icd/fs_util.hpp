#pragma once

#include <string>
#include <string_view>

#include "icd/errors.hpp"

namespace icd {

// Reads a whole file; throws icd::Error when it cannot be opened.
std::string read_file(const std::string& path);

// Writes bytes exactly as given (binary mode), creating parent directories.
void write_file(const std::string& path, std::string_view bytes);

void ensure_dir(const std::string& path);

}  // namespace icd
