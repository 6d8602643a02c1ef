#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace p3d {

enum class DType { F32, F64 };

inline const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }
DType dtype_from_name(const std::string& s);

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor holding f32 or f64 values.
///
/// Field layout convention: [batch, channel, X, Y, Z] for volumetric data,
/// [batch, token, feature] for sequences. Z (resp. feature) is contiguous.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, DType dtype);

    static Tensor zeros(Shape shape, DType dtype = DType::F32);
    static Tensor full(Shape shape, double value, DType dtype = DType::F32);
    static Tensor scalar(double value, DType dtype = DType::F32);
    static Tensor from_vector(Shape shape, const std::vector<double>& values, DType dtype = DType::F32);

    const Shape& shape() const { return shape_; }
    DType dtype() const { return dtype_; }
    int64_t numel() const { return numel_; }
    bool empty() const { return numel_ == 0; }
    int64_t dim(int i) const { return shape_.at(i < 0 ? shape_.size() + i : i); }
    int ndim() const { return static_cast<int>(shape_.size()); }

    template <typename T> T* data();
    template <typename T> const T* data() const;

    /// Element access promoted to double (convenience for tests/IO, not hot loops).
    double at(int64_t i) const;
    void set(int64_t i, double v);

    Tensor astype(DType target) const;
    Tensor clone() const;
    /// Same storage reinterpreted with a new shape (copies; sizes must match).
    Tensor reshaped(Shape s) const;

    void fill_(double v);
    void zero_();
    void add_(const Tensor& other);             // elementwise in-place
    void add_scaled_(const Tensor& other, double alpha);
    void scale_(double alpha);
    void copy_from(const Tensor& other);        // same shape+dtype

    double max_abs() const;
    double sum() const;                          // deterministic, accumulates in double
    double rms() const;
    bool all_finite() const;

private:
    Shape shape_;
    DType dtype_ = DType::F32;
    int64_t numel_ = 0;
    std::vector<float> f32_;
    std::vector<double> f64_;
};

template <> inline float* Tensor::data<float>() {
    if (dtype_ != DType::F32) throw std::runtime_error("tensor is not f32");
    return f32_.data();
}
template <> inline const float* Tensor::data<float>() const {
    if (dtype_ != DType::F32) throw std::runtime_error("tensor is not f32");
    return f32_.data();
}
template <> inline double* Tensor::data<double>() {
    if (dtype_ != DType::F64) throw std::runtime_error("tensor is not f64");
    return f64_.data();
}
template <> inline const double* Tensor::data<double>() const {
    if (dtype_ != DType::F64) throw std::runtime_error("tensor is not f64");
    return f64_.data();
}

/// Deterministic sum: sequential partials over fixed 4096-element tiles,
/// combined in order. Result is independent of thread count.
double reduce_sum(const float* p, int64_t n);
double reduce_sum(const double* p, int64_t n);

}  // namespace p3d
