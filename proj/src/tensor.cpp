#include "cacao/tensor.hpp"

#include <cstring>
#include <sstream>

#include "cacao/error.hpp"

namespace cacao {

const char* to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::InvalidArgument: return "invalid-argument";
        case ErrorCode::InvalidShape: return "invalid-shape";
        case ErrorCode::ShapeMismatch: return "shape-mismatch";
        case ErrorCode::InvalidValue: return "invalid-value";
        case ErrorCode::InvalidLabel: return "invalid-label";
        case ErrorCode::Io: return "io";
        case ErrorCode::NotAModel: return "not-a-model";
        case ErrorCode::Corruption: return "corruption";
        case ErrorCode::Version: return "version";
        case ErrorCode::Validation: return "validation";
        case ErrorCode::EmptyClass: return "empty-class";
        case ErrorCode::Stratification: return "stratification";
        case ErrorCode::MissingRecommendation: return "missing-recommendation";
        case ErrorCode::NotFound: return "not-found";
        case ErrorCode::Config: return "config";
        case ErrorCode::Input: return "input";
        case ErrorCode::Divergence: return "divergence";
        case ErrorCode::ResourceLimit: return "resource-limit";
        case ErrorCode::Internal: return "internal";
    }
    return "unknown";
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void validate_shape(const Shape& shape) {
    if (shape.size() > kMaxRank) {
        throw Error(ErrorCode::InvalidShape, "rank " + std::to_string(shape.size()) + " exceeds 4");
    }
    for (auto e : shape) {
        if (e == 0) throw Error(ErrorCode::InvalidShape, "zero extent in shape " + shape_to_string(shape));
    }
}

Tensor::Tensor() : data_(1, 0.0f) {}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_size(shape_)) {
        throw Error(ErrorCode::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                                  " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(m * n);
    for (const auto& row : rows) {
        if (row.size() != n) throw Error(ErrorCode::InvalidShape, "ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({m, n}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
}

float& Tensor::at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
float Tensor::at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

float& Tensor::at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
}
float Tensor::at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
}

Tensor Tensor::reshaped(Shape shape) const {
    validate_shape(shape);
    if (shape_size(shape) != data_.size()) {
        throw Error(ErrorCode::ShapeMismatch,
                    "cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::sample(std::size_t index) const {
    if (rank() < 1 || index >= shape_[0]) throw Error(ErrorCode::InvalidArgument, "sample index out of range");
    Shape inner(shape_.begin() + 1, shape_.end());
    const std::size_t n = shape_size(inner);
    std::vector<float> data(data_.begin() + static_cast<std::ptrdiff_t>(index * n),
                            data_.begin() + static_cast<std::ptrdiff_t>((index + 1) * n));
    return Tensor(std::move(inner), std::move(data));
}

bool Tensor::bit_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw Error(ErrorCode::ShapeMismatch, "matmul expects rank-2 operands");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw Error(ErrorCode::ShapeMismatch,
                    "matmul inner dimensions differ: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    }
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const float av = a.at(i, p);
            for (std::size_t j = 0; j < n; ++j) out.at(i, j) += av * b.at(p, j);
        }
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw Error(ErrorCode::ShapeMismatch, "transpose expects rank 2");
    Tensor out({a.dim(1), a.dim(0)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < a.dim(1); ++j) out.at(j, i) = a.at(i, j);
    return out;
}

Tensor map(const Tensor& t, const std::function<float(float)>& f) {
    Tensor out = t;
    for (auto& v : out.data()) v = f(v);
    return out;
}

namespace {

template <typename Op>
Tensor zip(const Tensor& a, const Tensor& b, Op op, const char* name) {
    if (a.shape() != b.shape()) {
        throw Error(ErrorCode::ShapeMismatch, std::string(name) + ": " + shape_to_string(a.shape()) + " vs " +
                                                  shape_to_string(b.shape()));
    }
    Tensor out = a;
    auto dst = out.data();
    auto rhs = b.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = op(dst[i], rhs[i]);
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return zip(a, b, [](float x, float y) { return x + y; }, "add");
}
Tensor sub(const Tensor& a, const Tensor& b) {
    return zip(a, b, [](float x, float y) { return x - y; }, "sub");
}
Tensor mul(const Tensor& a, const Tensor& b) {
    return zip(a, b, [](float x, float y) { return x * y; }, "mul");
}

Tensor scale(const Tensor& t, float factor) {
    Tensor out = t;
    for (auto& v : out.data()) v *= factor;
    return out;
}

Tensor add_scalar(const Tensor& t, float value) {
    Tensor out = t;
    for (auto& v : out.data()) v += value;
    return out;
}

Tensor stack(std::span<const Tensor> items) {
    if (items.empty()) throw Error(ErrorCode::InvalidShape, "cannot stack zero tensors");
    const Shape& inner = items.front().shape();
    Shape shape{items.size()};
    shape.insert(shape.end(), inner.begin(), inner.end());
    std::vector<float> data;
    data.reserve(shape_size(shape));
    for (const auto& t : items) {
        if (t.shape() != inner) throw Error(ErrorCode::ShapeMismatch, "stack: inconsistent item shapes");
        data.insert(data.end(), t.values().begin(), t.values().end());
    }
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace cacao
