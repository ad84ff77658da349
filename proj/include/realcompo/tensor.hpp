#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace realcompo {

struct Shape {
    int height = 0;
    int width  = 0;
    int depth  = 0;

    std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
    std::size_t size() const { return pixels() * depth; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

// Dense H x W x D array of doubles, depth fastest. Used for latents (D = C),
// attention maps (D = N tokens) and per-pixel features (D = d_f).
class Tensor3 {
public:
    Tensor3() = default;
    explicit Tensor3(Shape shape, double fill = 0.0);
    Tensor3(int height, int width, int depth, double fill = 0.0)
        : Tensor3(Shape{height, width, depth}, fill) {}

    const Shape& shape() const { return shape_; }
    int height() const { return shape_.height; }
    int width() const { return shape_.width; }
    int depth() const { return shape_.depth; }
    std::size_t size() const { return data_.size(); }
    std::size_t pixels() const { return shape_.pixels(); }

    double& at(int r, int c, int d) { return data_[index(r, c, d)]; }
    double at(int r, int c, int d) const { return data_[index(r, c, d)]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Depth vector of pixel i (row-major pixel index).
    std::span<double> pixel(std::size_t i) { return {data_.data() + i * shape_.depth, static_cast<std::size_t>(shape_.depth)}; }
    std::span<const double> pixel(std::size_t i) const { return {data_.data() + i * shape_.depth, static_cast<std::size_t>(shape_.depth)}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool all_finite() const;
    bool operator==(const Tensor3&) const = default;

private:
    std::size_t index(int r, int c, int d) const {
        return (static_cast<std::size_t>(r) * shape_.width + c) * shape_.depth + d;
    }

    Shape shape_{};
    std::vector<double> data_;
};

using Latent = Tensor3;

// H x W scalar field: coefficient maps, masks, cotangents over pixels.
class Grid {
public:
    Grid() = default;
    Grid(int height, int width, double fill = 0.0)
        : height_(height), width_(width), data_(static_cast<std::size_t>(height) * width, fill) {}

    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return data_.size(); }

    double& at(int r, int c) { return data_[static_cast<std::size_t>(r) * width_ + c]; }
    double at(int r, int c) const { return data_[static_cast<std::size_t>(r) * width_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    double sum() const;
    double l2_norm() const;
    bool all_finite() const;
    bool same_shape(const Grid& o) const { return height_ == o.height_ && width_ == o.width_; }
    bool operator==(const Grid&) const = default;

private:
    int height_ = 0;
    int width_  = 0;
    std::vector<double> data_;
};

// Row-major dense matrix for the small linear layers of the micro denoiser.
class Matrix {
public:
    Matrix() = default;
    Matrix(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {}

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    bool all_finite() const;
    bool operator==(const Matrix&) const = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

void require_same_shape(const Tensor3& a, const Tensor3& b, const char* what);

// a*x + b*y, elementwise.
Tensor3 axpby(double a, const Tensor3& x, double b, const Tensor3& y);

}  // namespace realcompo
