#pragma once

#include <cstddef>
#include <vector>

namespace convsink {

// Row-major dense matrix of doubles. Deliberately minimal: the model and the
// analyzer only need storage plus indexed access.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row(std::size_t i) { return data.data() + i * cols; }
    const double* row(std::size_t i) const { return data.data() + i * cols; }

    bool operator==(const Matrix& other) const = default;
};

}  // namespace convsink
