#include "paumer/png_io.hpp"

#include <png.h>

#include <cstring>

#include "paumer/errors.hpp"

namespace paumer {

PngImage read_png(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw IoError("png: cannot read '" + path + "': " + image.message);
    }
    PngImage out;
    out.width = image.width;
    out.height = image.height;
    // Grayscale files stay single-channel; everything else is expanded to RGB.
    if (image.format == PNG_FORMAT_GRAY) {
        out.channels = 1;
    } else {
        image.format = PNG_FORMAT_RGB;
        out.channels = 3;
    }
    out.data.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, out.data.data(), 0, nullptr)) {
        png_image_free(&image);
        throw FormatError("png: decode failed for '" + path + "': " + image.message, 0);
    }
    return out;
}

void write_png(const std::string& path, const PngImage& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw ContractError("png: only 1- or 3-channel images are written");
    }
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, img.data.data(), 0, nullptr)) {
        throw IoError("png: cannot write '" + path + "': " + image.message);
    }
}

}  // namespace paumer
