#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "realcompo/conditions.hpp"
#include "realcompo/micro.hpp"
#include "realcompo/mixture.hpp"
#include "realcompo/tensor.hpp"

namespace realcompo {

namespace fs = std::filesystem;

// ---- named tensor archive ---------------------------------------------------
//
// Little-endian binary: "RCTENSOR", u32 version, u32 count, then per entry
// u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values.

inline constexpr std::uint32_t kTensorArchiveVersion = 1;

struct ArchiveEntry {
    std::vector<std::uint64_t> dims;
    std::vector<double> values;
};

using TensorArchive = std::map<std::string, ArchiveEntry>;

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes);
void write_archive(const fs::path& path, const TensorArchive& archive);
TensorArchive read_archive(const fs::path& path);

void write_latent(const fs::path& path, const Latent& latent);
Latent read_latent(const fs::path& path);

void write_micro_params(const fs::path& path, const MicroParams& params);
MicroParams read_micro_params(const fs::path& path);

// ---- images -------------------------------------------------------------------

// Affine display map v -> clamp(scale * v + offset, 0, 1) per channel,
// nearest-neighbour upscaled by `zoom`. 1 channel -> gray, >= 3 -> RGB.
void write_png(const fs::path& path, const Latent& image, double scale = 1.0, double offset = 0.0, int zoom = 8);
// Min-max normalized heat map of a grid.
void write_png_heatmap(const fs::path& path, const Grid& grid, int zoom = 8);

// P2 or P5 graymap; values become segmentation labels.
SegmentationMap read_pgm(const fs::path& path);
void write_pgm(const fs::path& path, const SegmentationMap& seg);

void write_grid_csv(const fs::path& path, const Grid& grid);

// ---- JSON formats ---------------------------------------------------------------

// [{"object": "cube", "box": [x0, y0, x1, y1]}, ...]
Layout layout_from_json(const nlohmann::json& j);
nlohmann::json layout_to_json(const Layout& layout);
Layout read_layout(const fs::path& path);

// [{"object": "person", "points": [[x, y], ...]}, ...]
KeypointSet keypoints_from_json(const nlohmann::json& j);
KeypointSet read_keypoints(const fs::path& path);

nlohmann::json mixture_to_json(const MixtureSpec& spec);
MixtureSpec mixture_from_json(const nlohmann::json& j);
void write_mixture(const fs::path& path, const MixtureSpec& spec);
MixtureSpec read_mixture(const fs::path& path);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

// 16 hex digits of FNV-1a over the bytes.
std::string hex_digest(const void* data, std::size_t n);
std::string latent_digest(const Latent& latent);

}  // namespace realcompo
