#include "p3d/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace p3d {

DType dtype_from_name(const std::string& s) {
    if (s == "f32") return DType::F32;
    if (s == "f64") return DType::F64;
    throw std::runtime_error("unknown dtype: " + s);
}

int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) {
        if (d < 0) throw std::runtime_error("negative extent in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
    numel_ = p3d::numel(shape_);
    if (dtype_ == DType::F32) f32_.assign(numel_, 0.0f);
    else f64_.assign(numel_, 0.0);
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t(std::move(shape), dtype);
    t.fill_(value);
    return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

Tensor Tensor::from_vector(Shape shape, const std::vector<double>& values, DType dtype) {
    Tensor t(std::move(shape), dtype);
    if (static_cast<int64_t>(values.size()) != t.numel())
        throw std::runtime_error("from_vector: size mismatch");
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, values[i]);
    return t;
}

double Tensor::at(int64_t i) const {
    return dtype_ == DType::F32 ? static_cast<double>(f32_[i]) : f64_[i];
}

void Tensor::set(int64_t i, double v) {
    if (dtype_ == DType::F32) f32_[i] = static_cast<float>(v);
    else f64_[i] = v;
}

Tensor Tensor::astype(DType target) const {
    if (target == dtype_) return clone();
    Tensor out(shape_, target);
    for (int64_t i = 0; i < numel_; ++i) out.set(i, at(i));
    return out;
}

Tensor Tensor::clone() const { return *this; }

Tensor Tensor::reshaped(Shape s) const {
    if (p3d::numel(s) != numel_)
        throw std::runtime_error("reshape: element count mismatch " + shape_str(shape_) + " -> " + shape_str(s));
    Tensor out = *this;
    out.shape_ = std::move(s);
    return out;
}

void Tensor::fill_(double v) {
    if (dtype_ == DType::F32) std::fill(f32_.begin(), f32_.end(), static_cast<float>(v));
    else std::fill(f64_.begin(), f64_.end(), v);
}

void Tensor::zero_() { fill_(0.0); }

void Tensor::add_(const Tensor& other) { add_scaled_(other, 1.0); }

void Tensor::add_scaled_(const Tensor& other, double alpha) {
    if (other.numel_ != numel_ || other.dtype_ != dtype_)
        throw std::runtime_error("add_scaled_: shape/dtype mismatch");
    if (dtype_ == DType::F32) {
        const float* s = other.f32_.data();
        float* d = f32_.data();
        const float a = static_cast<float>(alpha);
        for (int64_t i = 0; i < numel_; ++i) d[i] += a * s[i];
    } else {
        const double* s = other.f64_.data();
        double* d = f64_.data();
        for (int64_t i = 0; i < numel_; ++i) d[i] += alpha * s[i];
    }
}

void Tensor::scale_(double alpha) {
    if (dtype_ == DType::F32) {
        const float a = static_cast<float>(alpha);
        for (auto& v : f32_) v *= a;
    } else {
        for (auto& v : f64_) v *= alpha;
    }
}

void Tensor::copy_from(const Tensor& other) {
    if (other.numel_ != numel_ || other.dtype_ != dtype_)
        throw std::runtime_error("copy_from: shape/dtype mismatch");
    f32_ = other.f32_;
    f64_ = other.f64_;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (int64_t i = 0; i < numel_; ++i) m = std::max(m, std::abs(at(i)));
    return m;
}

double Tensor::sum() const {
    if (numel_ == 0) return 0.0;
    return dtype_ == DType::F32 ? reduce_sum(f32_.data(), numel_) : reduce_sum(f64_.data(), numel_);
}

double Tensor::rms() const {
    if (numel_ == 0) return 0.0;
    double acc = 0.0;
    for (int64_t i = 0; i < numel_; ++i) {
        double v = at(i);
        acc += v * v;
    }
    return std::sqrt(acc / static_cast<double>(numel_));
}

bool Tensor::all_finite() const {
    for (int64_t i = 0; i < numel_; ++i)
        if (!std::isfinite(at(i))) return false;
    return true;
}

namespace {
constexpr int64_t kReduceTile = 4096;

template <typename T>
double reduce_sum_impl(const T* p, int64_t n) {
    const int64_t tiles = (n + kReduceTile - 1) / kReduceTile;
    std::vector<double> partial(tiles, 0.0);
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < tiles; ++t) {
        const int64_t lo = t * kReduceTile;
        const int64_t hi = std::min(n, lo + kReduceTile);
        double acc = 0.0;
        for (int64_t i = lo; i < hi; ++i) acc += static_cast<double>(p[i]);
        partial[t] = acc;
    }
    double total = 0.0;
    for (double v : partial) total += v;
    return total;
}
}  // namespace

double reduce_sum(const float* p, int64_t n) { return reduce_sum_impl(p, n); }
double reduce_sum(const double* p, int64_t n) { return reduce_sum_impl(p, n); }

}  // namespace p3d
