#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace paumer {

struct PngImage {
    std::int64_t width = 0;
    std::int64_t height = 0;
    int channels = 0;                 // 1 (gray) or 3 (rgb)
    std::vector<std::uint8_t> data;  // row-major, channel-interleaved
};

PngImage read_png(const std::string& path);
void write_png(const std::string& path, const PngImage& img);

}  // namespace paumer
