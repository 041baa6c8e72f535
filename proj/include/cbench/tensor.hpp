// Dense row-major tensor of doubles. Rank 0 (scalar), 1 or 2 in practice.
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cbench {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<size_t> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}

    Tensor(std::vector<size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel_of(shape_))
            throw Error("Tensor: data length does not match shape");
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static size_t numel_of(const std::vector<size_t>& shape) {
        size_t n = 1;
        for (size_t d : shape) n *= d;
        return n;
    }

    const std::vector<size_t>& shape() const { return shape_; }
    size_t numel() const { return data_.size(); }
    size_t rank() const { return shape_.size(); }

    // Row/column view of the trailing two dims; rank-1 counts as one row.
    size_t rows() const {
        if (rank() == 2) return shape_[0];
        if (rank() == 1) return 1;
        if (rank() == 0) return 1;
        throw Error("Tensor: rows() needs rank <= 2");
    }
    size_t cols() const {
        if (rank() == 2) return shape_[1];
        if (rank() == 1) return shape_[0];
        if (rank() == 0) return 1;
        throw Error("Tensor: cols() needs rank <= 2");
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    double& at(size_t r, size_t c) { return data_[r * cols() + c]; }
    double at(size_t r, size_t c) const { return data_[r * cols() + c]; }

    double item() const {
        if (numel() != 1) throw Error("Tensor: item() on non-scalar");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor row(size_t r) const {
        Tensor out({1, cols()});
        for (size_t c = 0; c < cols(); ++c) out[c] = at(r, c);
        return out;
    }

    void add_inplace(const Tensor& o) {
        if (!same_shape(o)) throw Error("Tensor: add_inplace shape mismatch");
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    }

    void scale_inplace(double s) {
        for (double& v : data_) v *= s;
    }

    double dot(const Tensor& o) const {
        if (numel() != o.numel()) throw Error("Tensor: dot length mismatch");
        double acc = 0.0;
        for (size_t i = 0; i < data_.size(); ++i) acc += data_[i] * o.data_[i];
        return acc;
    }

    double l1_norm() const {
        double acc = 0.0;
        for (double v : data_) acc += std::fabs(v);
        return acc;
    }

    double max_abs_diff(const Tensor& o) const {
        if (numel() != o.numel()) throw Error("Tensor: diff length mismatch");
        double m = 0.0;
        for (size_t i = 0; i < data_.size(); ++i)
            m = std::max(m, std::fabs(data_[i] - o.data_[i]));
        return m;
    }

private:
    std::vector<size_t> shape_;
    std::vector<double> data_;
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (size_t i = 0; i < t.shape().size(); ++i) {
        if (i) s += ",";
        s += std::to_string(t.shape()[i]);
    }
    return s + ")";
}

}  // namespace cbench
