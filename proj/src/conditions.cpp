#include "realcompo/conditions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "realcompo/errors.hpp"

namespace realcompo {

namespace {

std::string box_str(const Box& b) {
    return "(" + std::to_string(b.x0) + ", " + std::to_string(b.y0) + ", " + std::to_string(b.x1) + ", " +
           std::to_string(b.y1) + ")";
}

// Pads a degenerate [lo, hi] interval by `pad` on each side.
void pad_extent(double& lo, double& hi, double pad) {
    if (hi - lo > 0.0) {
        return;
    }
    lo = std::max(0.0, lo - pad);
    hi = std::min(1.0, hi + pad);
}

}  // namespace

void Box::validate() const {
    const bool in_range = x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0;
    if (!in_range || !(x0 < x1) || !(y0 < y1)) {
        throw RangeError("conditions", "degenerate or out-of-range box " + box_str(*this));
    }
}

void Layout::validate(int num_tokens) const {
    if (boxes.empty()) {
        throw RangeError("conditions", "layout must contain at least one box");
    }
    std::set<int> seen;
    for (const auto& b : boxes) {
        b.validate();
        if (b.token_index < 0) {
            continue;
        }
        if (num_tokens >= 0 && b.token_index >= num_tokens) {
            throw RangeError("conditions", "box token index " + std::to_string(b.token_index) + " out of range");
        }
        if (!seen.insert(b.token_index).second) {
            throw RangeError("conditions", "token index " + std::to_string(b.token_index) + " bound to two boxes");
        }
    }
}

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count(cells_.begin(), cells_.end(), std::uint8_t{1}));
}

Grid BinaryMask::as_grid() const {
    Grid g(height_, width_);
    for (std::size_t i = 0; i < cells_.size(); ++i) {
        g[i] = cells_[i];
    }
    return g;
}

BinaryMask rasterize(const Box& box, int height, int width) {
    if (height < 1 || width < 1) {
        throw ShapeError("conditions", "rasterize: mask dimensions must be positive");
    }
    box.validate();
    BinaryMask mask(height, width);
    bool any = false;
    for (int r = 0; r < height; ++r) {
        const double cy = (r + 0.5) / height;
        for (int c = 0; c < width; ++c) {
            const double cx = (c + 0.5) / width;
            if (box.contains(cx, cy)) {
                mask.set(r, c, true);
                any = true;
            }
        }
    }
    if (!any) {
        const double mx = 0.5 * (box.x0 + box.x1);
        const double my = 0.5 * (box.y0 + box.y1);
        const int c     = std::clamp(static_cast<int>(std::floor(mx * width)), 0, width - 1);
        const int r     = std::clamp(static_cast<int>(std::floor(my * height)), 0, height - 1);
        mask.set(r, c, true);
    }
    return mask;
}

Box mask_extent(const BinaryMask& mask) {
    int rmin = mask.height(), rmax = -1, cmin = mask.width(), cmax = -1;
    for (int r = 0; r < mask.height(); ++r) {
        for (int c = 0; c < mask.width(); ++c) {
            if (mask.at(r, c)) {
                rmin = std::min(rmin, r);
                rmax = std::max(rmax, r);
                cmin = std::min(cmin, c);
                cmax = std::max(cmax, c);
            }
        }
    }
    if (rmax < 0) {
        throw RangeError("conditions", "mask_extent: empty mask");
    }
    Box b;
    b.x0 = static_cast<double>(cmin) / mask.width();
    b.x1 = static_cast<double>(cmax + 1) / mask.width();
    b.y0 = static_cast<double>(rmin) / mask.height();
    b.y1 = static_cast<double>(rmax + 1) / mask.height();
    return b;
}

Layout transfer(const KeypointSet& keypoints, double pad) {
    if (keypoints.groups.empty()) {
        throw RangeError("conditions", "transfer: keypoint set has no groups");
    }
    Layout layout;
    for (const auto& g : keypoints.groups) {
        if (g.points.empty()) {
            throw RangeError("conditions", "transfer: empty keypoint group '" + g.label + "'");
        }
        Box b;
        b.x0 = b.y0 = std::numeric_limits<double>::infinity();
        b.x1 = b.y1 = -std::numeric_limits<double>::infinity();
        for (const auto& p : g.points) {
            if (!(p[0] >= 0.0 && p[0] <= 1.0 && p[1] >= 0.0 && p[1] <= 1.0)) {
                throw RangeError("conditions", "transfer: keypoint outside [0,1]^2 in group '" + g.label + "'");
            }
            b.x0 = std::min(b.x0, p[0]);
            b.x1 = std::max(b.x1, p[0]);
            b.y0 = std::min(b.y0, p[1]);
            b.y1 = std::max(b.y1, p[1]);
        }
        pad_extent(b.x0, b.x1, pad);
        pad_extent(b.y0, b.y1, pad);
        b.token_index = g.token_index;
        b.label       = g.label;
        b.validate();
        layout.boxes.push_back(std::move(b));
    }
    return layout;
}

namespace {

struct CellExtent {
    int rmin = std::numeric_limits<int>::max();
    int rmax = -1;
    int cmin = std::numeric_limits<int>::max();
    int cmax = -1;
};

std::map<int, CellExtent> segment_extents(const SegmentationMap& seg) {
    if (seg.height < 1 || seg.width < 1 ||
        seg.labels.size() != static_cast<std::size_t>(seg.height) * seg.width) {
        throw ShapeError("conditions", "transfer: malformed segmentation map");
    }
    std::map<int, CellExtent> ext;
    for (int r = 0; r < seg.height; ++r) {
        for (int c = 0; c < seg.width; ++c) {
            const int label = seg.at(r, c);
            if (label < 0) {
                throw RangeError("conditions", "transfer: negative segmentation label");
            }
            if (label == 0) {
                continue;
            }
            auto& e = ext[label];
            e.rmin  = std::min(e.rmin, r);
            e.rmax  = std::max(e.rmax, r);
            e.cmin  = std::min(e.cmin, c);
            e.cmax  = std::max(e.cmax, c);
        }
    }
    return ext;
}

Box extent_box(const CellExtent& e, const SegmentationMap& seg, int label) {
    Box b;
    b.x0          = static_cast<double>(e.cmin) / seg.width;
    b.x1          = static_cast<double>(e.cmax + 1) / seg.width;
    b.y0          = static_cast<double>(e.rmin) / seg.height;
    b.y1          = static_cast<double>(e.rmax + 1) / seg.height;
    b.token_index = label;
    return b;
}

}  // namespace

Layout transfer(const SegmentationMap& seg) {
    const auto ext = segment_extents(seg);
    if (ext.empty()) {
        throw RangeError("conditions", "transfer: segmentation map has no labelled segment");
    }
    Layout layout;
    for (const auto& [label, e] : ext) {
        layout.boxes.push_back(extent_box(e, seg, label));
    }
    return layout;
}

Layout transfer(const SegmentationMap& seg, std::span<const int> labels) {
    if (labels.empty()) {
        throw RangeError("conditions", "transfer: no labels requested");
    }
    const auto ext = segment_extents(seg);
    Layout layout;
    for (int label : labels) {
        const auto it = ext.find(label);
        if (it == ext.end()) {
            throw RangeError("conditions", "transfer: segment label " + std::to_string(label) + " absent");
        }
        layout.boxes.push_back(extent_box(it->second, seg, label));
    }
    return layout;
}

Box normalize_box(Box box, std::vector<std::string>& warnings) {
    const std::string name = box.label.empty() ? "box" : "box '" + box.label + "'";
    if (box.x1 < box.x0) {
        std::swap(box.x0, box.x1);
        warnings.push_back(name + ": x1 < x0, coordinates swapped");
    }
    if (box.y1 < box.y0) {
        std::swap(box.y0, box.y1);
        warnings.push_back(name + ": y1 < y0, coordinates swapped");
    }
    bool clamped = false;
    for (double* v : {&box.x0, &box.y0, &box.x1, &box.y1}) {
        const double c = std::clamp(*v, 0.0, 1.0);
        if (c != *v) {
            *v      = c;
            clamped = true;
        }
    }
    if (clamped) {
        warnings.push_back(name + ": coordinates clamped to [0, 1]");
    }
    return box;
}

}  // namespace realcompo
