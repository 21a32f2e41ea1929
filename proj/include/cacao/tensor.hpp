#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace cacao {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major float32 array of rank 0..4. Images and activations use
// NCHW (or CHW for a single sample).
class Tensor {
public:
    Tensor();  // scalar 0
    explicit Tensor(Shape shape, float fill = 0.0f);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0f); }
    static Tensor ones(const Shape& shape) { return Tensor(shape, 1.0f); }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }
    static Tensor identity(std::size_t n);
    static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor vector(std::initializer_list<float> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float>& values() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& at(std::size_t i, std::size_t j);
    float at(std::size_t i, std::size_t j) const;
    float& at(std::size_t c, std::size_t y, std::size_t x);
    float at(std::size_t c, std::size_t y, std::size_t x) const;

    // Same data, new shape; the element count must not change.
    Tensor reshaped(Shape shape) const;

    // Sample `index` of an NCHW batch, as CHW.
    Tensor sample(std::size_t index) const;

    // Bitwise comparison of shape and every value.
    bool bit_equal(const Tensor& other) const noexcept;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<float> data_;
};

void validate_shape(const Shape& shape);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor map(const Tensor& t, const std::function<float(float)>& f);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, float factor);
Tensor add_scalar(const Tensor& t, float value);

// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);

}  // namespace cacao
