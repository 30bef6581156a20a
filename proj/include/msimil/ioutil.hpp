#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace msimil {

std::string read_text_file(const std::string& path);
std::vector<uint8_t> read_binary_file(const std::string& path);

/// Writes to <path>.tmp.<pid> then renames, so readers never observe a
/// partially written file.
void atomic_write_file(const std::string& path, const void* data, size_t size);
void atomic_write_file(const std::string& path, const std::string& text);

std::string sha256_hex(const void* data, size_t size);
std::string sha256_file_hex(const std::string& path);

uint32_t crc32_bytes(const void* data, size_t size);

void ensure_parent_dir(const std::string& path);
void ensure_dir(const std::string& path);

/// Runs fn(i) for i in [0, n) on `workers` threads. Each index is processed
/// by exactly one thread; callers own any ordered reduction afterwards.
void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn);

/// Splits one CSV line, honoring double-quoted fields.
std::vector<std::string> split_csv_line(const std::string& line);

std::string csv_escape(const std::string& field);

}  // namespace msimil
