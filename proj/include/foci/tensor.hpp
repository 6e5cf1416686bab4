#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "foci/errors.hpp"

namespace foci {

// Dense row-major matrix of doubles. Vectors are 1 x n or n x 1, scalars 1 x 1.
struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}
    Tensor(std::size_t r, std::size_t c, std::vector<double> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c)
            throw NumericError("tensor: value count does not match shape");
    }

    static Tensor scalar(double v) { return Tensor(1, 1, {v}); }

    static Tensor row(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor(1, n, std::move(values));
    }

    static Tensor column(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor(n, 1, std::move(values));
    }

    std::size_t size() const { return data.size(); }

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row_ptr(std::size_t i) { return data.data() + i * cols; }
    const double* row_ptr(std::size_t i) const { return data.data() + i * cols; }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    double item() const {
        if (size() != 1) throw NumericError("tensor: item() on non-scalar");
        return data[0];
    }
};

inline std::string shape_str(const Tensor& t) {
    return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

// Every op input must be finite; the one sanctioned -inf lives in the softmax
// mask argument and is validated separately.
inline void require_finite(const Tensor& t, const char* where) {
    for (double v : t.data) {
        if (!std::isfinite(v))
            throw NumericError(std::string(where) + ": non-finite input value");
    }
}

// Mask entries are either finite or -inf; +inf and NaN are rejected.
inline void require_valid_mask(const Tensor& t, const char* where) {
    for (double v : t.data) {
        if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
            throw NumericError(std::string(where) + ": mask must be finite or -inf");
    }
}

} // namespace foci
