#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "kcap/error.hpp"
#include "kcap/rng.hpp"

namespace kcap {

// Dense row-major matrix of doubles. Deliberately minimal: storage, indexing,
// and a handful of cheap helpers. Anything with an inner loop worth optimizing
// lives in kernels.hpp.
class Mat {
  public:
    Mat() = default;
    Mat(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {}

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }

    double& operator()(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double* row(int r) { return data_.data() + static_cast<size_t>(r) * cols_; }
    const double* row(int r) const { return data_.data() + static_cast<size_t>(r) * cols_; }

    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    static Mat identity(int n) {
        Mat m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Mat gaussian(int rows, int cols, Rng& rng) {
        Mat m(rows, cols);
        for (auto& v : m.data_) v = rng.normal();
        return m;
    }

    Mat transposed() const {
        Mat t(cols_, rows_);
        for (int r = 0; r < rows_; ++r)
            for (int c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::fabs(v));
        return m;
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void symmetrize() {
        require(rows_ == cols_, ErrorCode::ShapeMismatch, "symmetrize needs a square matrix");
        for (int r = 0; r < rows_; ++r)
            for (int c = r + 1; c < cols_; ++c) {
                double m = 0.5 * ((*this)(r, c) + (*this)(c, r));
                (*this)(r, c) = m;
                (*this)(c, r) = m;
            }
    }

    // Largest |A - A^T| entry; 0 for exactly symmetric.
    double asymmetry() const {
        double m = 0.0;
        for (int r = 0; r < rows_; ++r)
            for (int c = r + 1; c < cols_; ++c) m = std::max(m, std::fabs((*this)(r, c) - (*this)(c, r)));
        return m;
    }

    Mat& operator+=(const Mat& o) {
        require(same_shape(o), ErrorCode::ShapeMismatch, "matrix += shape mismatch");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }

    Mat& operator-=(const Mat& o) {
        require(same_shape(o), ErrorCode::ShapeMismatch, "matrix -= shape mismatch");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }

    Mat& operator*=(double s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

  private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> data_;
};

inline Mat operator+(Mat a, const Mat& b) { return a += b; }
inline Mat operator-(Mat a, const Mat& b) { return a -= b; }
inline Mat operator*(Mat a, double s) { return a *= s; }
inline Mat operator*(double s, Mat a) { return a *= s; }

}  // namespace kcap
