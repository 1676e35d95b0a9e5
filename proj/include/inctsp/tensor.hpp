#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace inctsp {

using Shape = std::vector<int64_t>;

int64_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shape_eq(const Shape& a, const Shape& b);

// Dense row-major tensor of doubles. Value semantics; `grad`, when allocated,
// always has the same length as `values`. `tracked` marks the tensor as a
// differentiation target when it enters a Tape as a leaf.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);

    const Shape& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    int64_t dim(size_t i) const { return shape_[i]; }
    int64_t size() const { return static_cast<int64_t>(values_.size()); }

    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }
    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }
    double operator[](int64_t i) const { return values_[static_cast<size_t>(i)]; }
    double& operator[](int64_t i) { return values_[static_cast<size_t>(i)]; }

    bool tracked() const { return tracked_; }
    void set_tracked(bool t) { tracked_ = t; }

    bool has_grad() const { return !grad_.empty(); }
    std::vector<double>& grad() { return grad_; }
    const std::vector<double>& grad() const { return grad_; }
    void ensure_grad();  // allocates zeros if absent
    void clear_grad() { grad_.clear(); }

    bool all_finite() const;

    // Rounds every value to the nearest 32-bit float. Model state and dataset
    // features live on the f32 grid so the f32 file formats round-trip
    // bit-exactly; computation stays in double.
    void quantize_f32();

private:
    Shape shape_;
    std::vector<double> values_;
    std::vector<double> grad_;
    bool tracked_ = false;
};

double rel_err(double a, double b);

}  // namespace inctsp
