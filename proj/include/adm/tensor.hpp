#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace adm {

/// Dense n-dimensional array of real values in row-major order.
/// Shapes are explicit; every operation validates them and reports the
/// offending dimension on mismatch.
template <typename T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s, T fill = T(0))
        : shape(std::move(s)), data(numel_of(shape), fill) {}

    Tensor(std::initializer_list<std::size_t> s, T fill = T(0))
        : Tensor(std::vector<std::size_t>(s), fill) {}

    static Tensor from_values(std::vector<std::size_t> s, std::vector<T> values) {
        if (numel_of(s) != values.size()) {
            throw std::invalid_argument("Tensor: value count " + std::to_string(values.size()) +
                                        " does not match shape numel " + std::to_string(numel_of(s)));
        }
        Tensor t;
        t.shape = std::move(s);
        t.data = std::move(values);
        return t;
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) n *= e;
        return s.empty() ? 0 : n;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return data.size() == 1; }

    T scalar() const {
        if (data.size() != 1) {
            throw std::invalid_argument("Tensor: scalar() on tensor with numel " + std::to_string(data.size()));
        }
        return data[0];
    }

    std::size_t dim(std::size_t i) const {
        if (i >= shape.size()) {
            throw std::invalid_argument("Tensor: dim index " + std::to_string(i) + " out of rank " +
                                        std::to_string(shape.size()));
        }
        return shape[i];
    }

    // Unchecked row-major accessors for the common ranks.
    T& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    T at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
    T& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    T at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "operator+=");
        for (std::size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
        return *this;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void require_same_shape(const Tensor& o, const char* op) const {
        if (shape == o.shape) return;
        throw std::invalid_argument(std::string(op) + ": shape " + shape_str(shape) + " vs " + shape_str(o.shape));
    }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << ")";
        return os.str();
    }
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& t) {
    return Tensor<T>(t.shape);
}

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace adm
