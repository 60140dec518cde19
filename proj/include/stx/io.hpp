#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace stx {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const std::filesystem::path& path);

// Minimal zip container: entries are stored uncompressed with fixed
// timestamps so identical contents produce identical files.
void write_zip(const std::filesystem::path& path, const std::map<std::string, std::vector<std::uint8_t>>& entries);
// Verifies the central directory and every entry's CRC-32.
std::map<std::string, std::vector<std::uint8_t>> read_zip(const std::filesystem::path& path);

}  // namespace stx
