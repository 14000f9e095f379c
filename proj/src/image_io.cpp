#include "capfeed/image_io.hpp"

#include "capfeed/errors.hpp"

#include <jpeglib.h>
#include <png.h>

#include <csetjmp>
#include <cstring>
#include <fstream>
#include <sstream>

namespace capfeed {
namespace {

bool starts_with(std::span<const std::uint8_t> bytes, std::initializer_list<std::uint8_t> magic) {
    if (bytes.size() < magic.size()) return false;
    return std::equal(magic.begin(), magic.end(), bytes.begin());
}

DecodedImage decode_ppm(std::span<const std::uint8_t> bytes) {
    std::size_t pos = 2;
    auto skip_space_and_comments = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&] {
        skip_space_and_comments();
        long value = 0;
        std::size_t digits = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            value = value * 10 + (bytes[pos] - '0');
            if (value > 1 << 20) throw ParseError("ppm: header value too large");
            ++pos;
            ++digits;
        }
        if (digits == 0) throw ParseError("ppm: malformed header");
        return static_cast<int>(value);
    };
    DecodedImage img;
    img.width = read_int();
    img.height = read_int();
    const int maxval = read_int();
    if (maxval != 255) throw ParseError("ppm: only maxval 255 is supported");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ParseError("ppm: malformed header");
    ++pos;
    if (img.width < 1 || img.height < 1) throw ParseError("ppm: empty image");
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height * 3;
    if (bytes.size() - pos < n) throw ParseError("ppm: truncated pixel data");
    img.rgb.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    return img;
}

DecodedImage decode_png(std::span<const std::uint8_t> bytes) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
        throw ParseError(std::string("png: ") + image.message);
    image.format = PNG_FORMAT_RGB;
    DecodedImage img;
    img.width = static_cast<int>(image.width);
    img.height = static_cast<int>(image.height);
    img.rgb.resize(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, img.rgb.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw ParseError("png: " + msg);
    }
    return img;
}

struct JpegErrorManager {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

DecodedImage decode_jpeg(std::span<const std::uint8_t> bytes) {
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = jpeg_error_exit;
    DecodedImage img;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw ParseError(std::string("jpeg: ") + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    img.width = static_cast<int>(cinfo.output_width);
    img.height = static_cast<int>(cinfo.output_height);
    img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = img.rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

}  // namespace

DecodedImage decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) throw ParseError("image: empty data");
    if (starts_with(bytes, {'P', '6'})) return decode_ppm(bytes);
    if (starts_with(bytes, {0x89, 'P', 'N', 'G'})) return decode_png(bytes);
    if (starts_with(bytes, {0xFF, 0xD8, 0xFF})) return decode_jpeg(bytes);
    throw ParseError("image: unsupported format");
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

DecodedImage read_image(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return decode_image(bytes);
}

std::vector<std::uint8_t> encode_ppm(int width, int height, std::span<const std::uint8_t> rgb) {
    std::ostringstream header;
    header << "P6\n" << width << " " << height << "\n255\n";
    const std::string h = header.str();
    std::vector<std::uint8_t> out(h.begin(), h.end());
    out.insert(out.end(), rgb.begin(), rgb.end());
    return out;
}

void write_ppm(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> rgb) {
    const auto bytes = encode_ppm(width, height, rgb);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace capfeed
