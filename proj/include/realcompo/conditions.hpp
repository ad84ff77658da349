#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "realcompo/tensor.hpp"

namespace realcompo {

// Axis-aligned box in normalized image coordinates; x is horizontal
// (columns), y vertical (rows). `token_index` binds the box to an object
// token of the prompt; -1 means not yet bound.
struct Box {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 1.0;
    double y1 = 1.0;
    int token_index = -1;
    std::string label;

    // Throws RangeError unless 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1.
    void validate() const;
    bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

struct Layout {
    std::vector<Box> boxes;

    // v >= 1, every box valid, bound token indices distinct (and < num_tokens when given).
    void validate(int num_tokens = -1) const;
};

struct KeypointGroup {
    int token_index = -1;
    std::string label;
    std::vector<std::array<double, 2>> points;  // (x, y) normalized
};

struct KeypointSet {
    std::vector<KeypointGroup> groups;
};

// Label grid of token indices, 0 = background.
struct SegmentationMap {
    int height = 0;
    int width  = 0;
    std::vector<int> labels;

    int at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
};

class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int height, int width) : height_(height), width_(width), cells_(static_cast<std::size_t>(height) * width, 0) {}

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return cells_.size(); }
    bool at(int r, int c) const { return cells_[static_cast<std::size_t>(r) * width_ + c] != 0; }
    void set(int r, int c, bool v) { cells_[static_cast<std::size_t>(r) * width_ + c] = v ? 1 : 0; }
    bool operator[](std::size_t i) const { return cells_[i] != 0; }
    std::size_t count() const;
    Grid as_grid() const;
    bool operator==(const BinaryMask&) const = default;

private:
    int height_ = 0;
    int width_  = 0;
    std::vector<std::uint8_t> cells_;
};

inline constexpr double kDefaultTransferPad = 0.05;

// Cell (r, c) is set iff its center lies in the closed box. A valid box that
// covers no cell center is snapped to the cell containing its center.
BinaryMask rasterize(const Box& box, int height, int width);

// Box spanning the set cells of a mask (cell-edge extents).
Box mask_extent(const BinaryMask& mask);

// Extent box per keypoint group; a zero extent on an axis is padded by `pad`
// on each side (clamped to [0, 1]).
Layout transfer(const KeypointSet& keypoints, double pad = kDefaultTransferPad);
// Extent box per nonzero label, in ascending label order.
Layout transfer(const SegmentationMap& seg);
// Extent boxes for the requested labels; throws if a label is absent.
Layout transfer(const SegmentationMap& seg, std::span<const int> labels);

// Clamp to [0, 1] and order coordinates; appends a message per fix.
Box normalize_box(Box box, std::vector<std::string>& warnings);

}  // namespace realcompo
