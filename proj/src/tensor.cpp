#include "realcompo/tensor.hpp"

#include <cmath>

#include "realcompo/errors.hpp"

namespace realcompo {

namespace {

bool finite_all(const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

}  // namespace

std::string Shape::str() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(depth);
}

Tensor3::Tensor3(Shape shape, double fill) : shape_(shape) {
    if (shape.height < 0 || shape.width < 0 || shape.depth < 0) {
        throw ShapeError("tensor", "negative dimension in shape " + shape.str());
    }
    data_.assign(shape.size(), fill);
}

bool Tensor3::all_finite() const { return finite_all(data_); }

double Grid::sum() const {
    double s = 0.0;
    for (double x : data_) {
        s += x;
    }
    return s;
}

double Grid::l2_norm() const {
    double s = 0.0;
    for (double x : data_) {
        s += x * x;
    }
    return std::sqrt(s);
}

bool Grid::all_finite() const { return finite_all(data_); }

bool Matrix::all_finite() const { return finite_all(data_); }

void require_same_shape(const Tensor3& a, const Tensor3& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError("tensor", std::string(what) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    }
}

Tensor3 axpby(double a, const Tensor3& x, double b, const Tensor3& y) {
    require_same_shape(x, y, "axpby");
    Tensor3 out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a * x[i] + b * y[i];
    }
    return out;
}

}  // namespace realcompo
