// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedsynsam/errors.hpp"

namespace fedsyn {

/// First-order dual number. Running a reverse pass in Dual<double> gives
/// forward-over-reverse second derivatives (Hessian-vector products).
template <class T>
struct Dual {
    T v{};
    T d{};

    constexpr Dual() = default;
    constexpr Dual(T value) : v(value), d(T{}) {} // NOLINT: implicit lift of constants
    constexpr Dual(T value, T tangent) : v(value), d(tangent) {}

    friend constexpr Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
    friend constexpr Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
    friend constexpr Dual operator-(Dual a) { return {-a.v, -a.d}; }
    friend constexpr Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
    friend constexpr Dual operator/(Dual a, Dual b) {
        return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)};
    }
    Dual& operator+=(Dual o) { return *this = *this + o; }
    Dual& operator-=(Dual o) { return *this = *this - o; }
    Dual& operator*=(Dual o) { return *this = *this * o; }
};

template <class T>
Dual<T> exp(Dual<T> a) {
    using std::exp;
    const T e = exp(a.v);
    return {e, a.d * e};
}
template <class T>
Dual<T> log(Dual<T> a) {
    using std::log;
    return {log(a.v), a.d / a.v};
}

inline double primal(double x) { return x; }
template <class T>
double primal(const Dual<T>& x) { return primal(x.v); }

inline bool is_finite(double x) { return std::isfinite(x); }
template <class T>
bool is_finite(const Dual<T>& x) { return is_finite(x.v) && is_finite(x.d); }

/// Dense row-major array. Rank 0 is a scalar, rank 1 a vector, rank 2 a matrix.
template <class T = double>
class Tensor {
public:
    using value_type = T;
    using Shape = std::vector<std::size_t>;

    Tensor() : shape_{}, data_(1, T{}) {}

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(count(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != data_.size())
            throw ContractError("Tensor: shape holds " + std::to_string(count(shape_)) +
                                " elements but data has " + std::to_string(data_.size()));
    }

    /// Constructs and rejects non-finite entries.
    static Tensor checked(Shape shape, std::vector<T> data) {
        Tensor t(std::move(shape), std::move(data));
        t.check_finite("Tensor::checked");
        return t;
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }
    static Tensor vector(std::vector<T> v) {
        const std::size_t n = v.size();
        return Tensor(Shape{n}, std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> v) {
        return Tensor(Shape{rows, cols}, std::move(v));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() == 0 ? 1 : shape_.back(); }
    bool is_scalar() const noexcept { return data_.size() == 1 && rank() <= 1; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    std::vector<T>& values() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T item() const {
        if (data_.size() != 1) throw ContractError("Tensor::item on non-scalar");
        return data_[0];
    }

    /// Index of the first non-finite entry, or -1.
    std::ptrdiff_t first_non_finite() const {
        for (std::size_t i = 0; i < data_.size(); ++i)
            if (!is_finite(data_[i])) return static_cast<std::ptrdiff_t>(i);
        return -1;
    }

    void check_finite(const std::string& context) const {
        if (auto i = first_non_finite(); i >= 0) throw NumericalError(context + ": non-finite entry", i);
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    template <class F>
    Tensor map(F&& f) const {
        Tensor out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data_[i] = f(data_[i]);
        return out;
    }

    static std::size_t count(const Shape& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

} // namespace fedsyn
