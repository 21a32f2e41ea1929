#include "cacao/image.hpp"

#include <png.h>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>

#include "cacao/error.hpp"
#include "cacao/io.hpp"

namespace cacao {

namespace {

bool is_png(std::span<const std::uint8_t> b) {
    static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    return b.size() >= 8 && std::memcmp(b.data(), sig, 8) == 0;
}

bool is_jpeg(std::span<const std::uint8_t> b) { return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF; }

Image decode_png(std::span<const std::uint8_t> bytes) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
        throw Error(ErrorCode::Input, std::string("undecodable PNG: ") + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    Image out;
    out.width = img.width;
    out.height = img.height;
    out.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
        std::string msg = img.message;
        png_image_free(&img);
        throw Error(ErrorCode::Input, "undecodable PNG: " + msg);
    }
    return out;
}

struct JpegErr {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

void jpeg_silence(j_common_ptr) {}

Image decode_jpeg(std::span<const std::uint8_t> bytes) {
    jpeg_decompress_struct cinfo{};
    JpegErr err{};
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    err.mgr.output_message = jpeg_silence;
    // Declared before setjmp so the longjmp path never skips its destructor.
    Image out;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw Error(ErrorCode::Input, std::string("undecodable JPEG: ") + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    out.width = cinfo.output_width;
    out.height = cinfo.output_height;
    out.pixels.resize(out.width * out.height * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = out.pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return out;
}

}  // namespace

Image decode_image(std::span<const std::uint8_t> bytes) {
    Image img;
    if (is_png(bytes)) img = decode_png(bytes);
    else if (is_jpeg(bytes)) img = decode_jpeg(bytes);
    else throw Error(ErrorCode::Input, "not a PNG or JPEG image");
    if (img.width == 0 || img.height == 0) throw Error(ErrorCode::Input, "image has zero size");
    return img;
}

Image read_image(const std::filesystem::path& path) { return decode_image(read_file(path)); }

std::vector<std::uint8_t> encode_png(const Image& image) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr)) {
        throw Error(ErrorCode::Internal, std::string("png encode: ") + img.message);
    }
    std::vector<std::uint8_t> out(size);
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr)) {
        throw Error(ErrorCode::Internal, std::string("png encode: ") + img.message);
    }
    out.resize(size);
    return out;
}

std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality) {
    jpeg_compress_struct cinfo{};
    JpegErr err{};
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    unsigned char* buf = nullptr;
    unsigned long len = 0;
    if (setjmp(err.jump)) {
        jpeg_destroy_compress(&cinfo);
        std::free(buf);
        throw Error(ErrorCode::Internal, std::string("jpeg encode: ") + err.message);
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buf, &len);
    cinfo.image_width = static_cast<JDIMENSION>(image.width);
    cinfo.image_height = static_cast<JDIMENSION>(image.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = const_cast<std::uint8_t*>(image.pixels.data()) +
                       static_cast<std::size_t>(cinfo.next_scanline) * image.width * 3;
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    std::vector<std::uint8_t> out(buf, buf + len);
    jpeg_destroy_compress(&cinfo);
    std::free(buf);
    return out;
}

void write_png(const Image& image, const std::filesystem::path& path) { write_file_atomic(path, encode_png(image)); }

Image resize_bilinear(const Image& image, std::size_t width, std::size_t height) {
    if (width == 0 || height == 0) throw Error(ErrorCode::InvalidArgument, "resize target must be non-empty");
    if (width == image.width && height == image.height) return image;
    Image out;
    out.width = width;
    out.height = height;
    out.pixels.resize(width * height * 3);
    const double sx = static_cast<double>(image.width) / static_cast<double>(width);
    const double sy = static_cast<double>(image.height) / static_cast<double>(height);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < 3; ++c) {
                const double top = image.at(x0, y0)[c] * (1.0 - wx) + image.at(x1, y0)[c] * wx;
                const double bot = image.at(x0, y1)[c] * (1.0 - wx) + image.at(x1, y1)[c] * wx;
                const double v = top * (1.0 - wy) + bot * wy;
                out.at(x, y)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

double laplacian_variance(const Image& image) {
    const std::size_t w = image.width, h = image.height;
    if (w < 3 || h < 3) return 0.0;
    std::vector<double> gray(w * h);
    for (std::size_t i = 0; i < w * h; ++i) {
        const auto* p = &image.pixels[i * 3];
        gray[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    }
    double sum = 0.0, sq = 0.0;
    const double n = static_cast<double>((w - 2) * (h - 2));
    for (std::size_t y = 1; y + 1 < h; ++y) {
        for (std::size_t x = 1; x + 1 < w; ++x) {
            const double v = gray[(y - 1) * w + x] + gray[(y + 1) * w + x] + gray[y * w + x - 1] + gray[y * w + x + 1] -
                             4.0 * gray[y * w + x];
            sum += v;
            sq += v * v;
        }
    }
    const double mean = sum / n;
    return std::max(0.0, sq / n - mean * mean);
}

Tensor image_to_tensor(const Image& image) {
    Tensor t({3, image.height, image.width});
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) t.at(c, y, x) = static_cast<float>(image.at(x, y)[c]) / 255.0f;
    return t;
}

Image tensor_to_image(const Tensor& chw) {
    if (chw.rank() != 3 || chw.dim(0) != 3) throw Error(ErrorCode::InvalidShape, "expected a 3-channel CHW tensor");
    Image img;
    img.height = chw.dim(1);
    img.width = chw.dim(2);
    img.pixels.resize(img.width * img.height * 3);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.at(x, y)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(chw.at(c, y, x) * 255.0f), 0L, 255L));
    return img;
}

}  // namespace cacao
