#pragma once

// Straightforward double-precision forward pass used as an independent
// oracle for gradient checks. Shares nothing with the library's kernels.

#include <cmath>
#include <vector>

#include "cacao/nn.hpp"

namespace testing {

struct RefTensor {
    std::size_t c = 0, h = 1, w = 1;
    std::vector<double> v;
    double& at(std::size_t ci, std::size_t y, std::size_t x) { return v[(ci * h + y) * w + x]; }
    double at(std::size_t ci, std::size_t y, std::size_t x) const { return v[(ci * h + y) * w + x]; }
};

using RefParams = std::map<std::string, std::vector<double>>;

inline RefParams to_ref_params(const cacao::TensorMap& weights) {
    RefParams out;
    for (const auto& [name, t] : weights) out[name].assign(t.data().begin(), t.data().end());
    return out;
}

// Class probabilities for one CHW image.
inline std::vector<double> ref_forward(const cacao::ArchSpec& arch, const RefParams& params, const cacao::Tensor& image) {
    using cacao::LayerKind;
    RefTensor x{image.dim(0), image.dim(1), image.dim(2), {image.data().begin(), image.data().end()}};
    std::size_t convs = 0, denses = 0;
    for (const auto& l : cacao::expand_layers(arch)) {
        switch (l.kind) {
            case LayerKind::Conv2d: {
                const std::string p = "conv" + std::to_string(convs++);
                const auto& W = params.at(p + ".weight");
                const auto& B = params.at(p + ".bias");
                const long pad = l.padding == cacao::Padding::Same ? static_cast<long>(l.kernel - 1) / 2 : 0;
                const std::size_t oh = (x.h + 2 * pad - l.kernel) / l.stride + 1;
                const std::size_t ow = (x.w + 2 * pad - l.kernel) / l.stride + 1;
                RefTensor y{l.out, oh, ow, std::vector<double>(l.out * oh * ow)};
                for (std::size_t o = 0; o < l.out; ++o)
                    for (std::size_t i = 0; i < oh; ++i)
                        for (std::size_t j = 0; j < ow; ++j) {
                            double s = B[o];
                            for (std::size_t ci = 0; ci < x.c; ++ci)
                                for (std::size_t ky = 0; ky < l.kernel; ++ky)
                                    for (std::size_t kx = 0; kx < l.kernel; ++kx) {
                                        const long yy = static_cast<long>(i * l.stride + ky) - pad;
                                        const long xx = static_cast<long>(j * l.stride + kx) - pad;
                                        if (yy < 0 || xx < 0 || yy >= static_cast<long>(x.h) || xx >= static_cast<long>(x.w))
                                            continue;
                                        s += W[((o * x.c + ci) * l.kernel + ky) * l.kernel + kx] * x.at(ci, yy, xx);
                                    }
                            y.at(o, i, j) = s;
                        }
                x = std::move(y);
                break;
            }
            case LayerKind::Relu:
                for (auto& v : x.v) v = v > 0 ? v : 0;
                break;
            case LayerKind::AvgPool: {
                const std::size_t oh = (x.h - l.window) / l.stride + 1, ow = (x.w - l.window) / l.stride + 1;
                RefTensor y{x.c, oh, ow, std::vector<double>(x.c * oh * ow)};
                for (std::size_t ci = 0; ci < x.c; ++ci)
                    for (std::size_t i = 0; i < oh; ++i)
                        for (std::size_t j = 0; j < ow; ++j) {
                            double s = 0;
                            for (std::size_t a = 0; a < l.window; ++a)
                                for (std::size_t b = 0; b < l.window; ++b) s += x.at(ci, i * l.stride + a, j * l.stride + b);
                            y.at(ci, i, j) = s / static_cast<double>(l.window * l.window);
                        }
                x = std::move(y);
                break;
            }
            case LayerKind::Flatten:
                x = RefTensor{x.v.size(), 1, 1, x.v};
                break;
            case LayerKind::Dense: {
                const std::string p = "dense" + std::to_string(denses++);
                const auto& W = params.at(p + ".weight");
                const auto& B = params.at(p + ".bias");
                RefTensor y{l.out, 1, 1, std::vector<double>(l.out)};
                for (std::size_t o = 0; o < l.out; ++o) {
                    double s = B[o];
                    for (std::size_t i = 0; i < x.v.size(); ++i) s += W[o * x.v.size() + i] * x.v[i];
                    y.v[o] = s;
                }
                x = std::move(y);
                break;
            }
            case LayerKind::Softmax: {
                double mx = x.v[0];
                for (double v : x.v) mx = std::max(mx, v);
                double sum = 0;
                for (auto& v : x.v) sum += (v = std::exp(v - mx));
                for (auto& v : x.v) v /= sum;
                break;
            }
        }
    }
    return x.v;
}

// Mean cross-entropy over a batch.
inline double ref_loss(const cacao::ArchSpec& arch, const RefParams& params, const std::vector<cacao::Tensor>& images,
                       const std::vector<std::size_t>& labels) {
    double total = 0;
    for (std::size_t i = 0; i < images.size(); ++i) total -= std::log(ref_forward(arch, params, images[i])[labels[i]]);
    return total / static_cast<double>(images.size());
}

}  // namespace testing
