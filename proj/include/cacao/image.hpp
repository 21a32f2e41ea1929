#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cacao/tensor.hpp"

namespace cacao {

// 8-bit interleaved RGB image.
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // height * width * 3

    std::uint8_t* at(std::size_t x, std::size_t y) { return &pixels[(y * width + x) * 3]; }
    const std::uint8_t* at(std::size_t x, std::size_t y) const { return &pixels[(y * width + x) * 3]; }
    bool operator==(const Image&) const = default;
};

// PNG or JPEG, sniffed from the leading bytes. Throws Input on undecodable data.
Image decode_image(std::span<const std::uint8_t> bytes);
Image read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const Image& image);
std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality = 90);
void write_png(const Image& image, const std::filesystem::path& path);

// Bilinear with half-pixel centres; same-size input is returned unchanged.
Image resize_bilinear(const Image& image, std::size_t width, std::size_t height);

// Variance of the 3x3 Laplacian response over the interior of the grayscale
// image (luma on the 0..255 scale). Images smaller than 3x3 score 0.
double laplacian_variance(const Image& image);

// CHW float tensor in [0, 1].
Tensor image_to_tensor(const Image& image);
Image tensor_to_image(const Tensor& chw);

}  // namespace cacao
