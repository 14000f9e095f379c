#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace capfeed {

struct DecodedImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;  // H x W x 3
};

// Decodes binary PPM (P6), PNG or JPEG, detected by magic bytes. Throws
// ParseError on malformed or unsupported data.
DecodedImage decode_image(std::span<const std::uint8_t> bytes);
DecodedImage read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_ppm(int width, int height, std::span<const std::uint8_t> rgb);
void write_ppm(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> rgb);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace capfeed
