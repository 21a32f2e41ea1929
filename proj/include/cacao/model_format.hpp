#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cacao/nn.hpp"

namespace cacao {

// .cdm container, all integers little-endian:
//
//   "CDM1"                       magic
//   u32 format_version
//   u32 n, n bytes               canonical arch text
//   u32 count, count x (u32 n, n bytes UTF-8)   labels in class-index order
//   u32 count, count x entry     tensor directory, sorted by name
//       u32 n, n bytes name; u32 rank; rank x u32 extent; u64 offset; u64 length
//   zero padding to a 4-byte file offset
//   payload                      f32 LE values; offsets are payload-relative
//   u32 crc32                    over every preceding byte
inline constexpr char kContainerMagic[4] = {'C', 'D', 'M', '1'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct TensorEntry {
    std::string name;
    Shape shape;
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
};

struct ContainerInfo {
    std::uint32_t version = 0;
    std::string arch_text;
    std::vector<std::string> labels;
    std::vector<TensorEntry> tensors;
    std::uint64_t payload_offset = 0;
    std::uint64_t file_size = 0;
    std::uint32_t crc = 0;
    std::string digest;  // sha256 of the whole file
};

std::vector<std::uint8_t> serialize_model(const Model& model);

// Throws NotAModel (magic), Corruption (crc, truncation, bad directory) or
// Version (unknown format_version).
ContainerInfo inspect_container(std::span<const std::uint8_t> bytes);
Model deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// Human-readable header, labels and tensor directory.
std::string describe_container(const ContainerInfo& info);

// Training checkpoints are JSON ({"arch", "labels", "tensors": {name:
// {"shape", "data"}}}); `convert` turns one into a container.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace cacao
