#include "cacao/nn.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include "cacao/error.hpp"

namespace cacao {

const char* to_string(LayerKind kind) noexcept {
    switch (kind) {
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Relu: return "relu";
        case LayerKind::AvgPool: return "avgpool";
        case LayerKind::Dense: return "dense";
        case LayerKind::Softmax: return "softmax";
        case LayerKind::Flatten: return "flatten";
    }
    return "?";
}

LayerSpec LayerSpec::conv2d(std::size_t out, std::size_t kernel, std::size_t stride, Padding padding,
                            std::size_t repeat) {
    LayerSpec l{LayerKind::Conv2d};
    l.out = out;
    l.kernel = kernel;
    l.stride = stride;
    l.padding = padding;
    l.repeat = repeat;
    return l;
}

LayerSpec LayerSpec::avg_pool(std::size_t window, std::size_t stride) {
    LayerSpec l{LayerKind::AvgPool};
    l.window = window;
    l.stride = stride;
    return l;
}

LayerSpec LayerSpec::dense(std::size_t out) {
    LayerSpec l{LayerKind::Dense};
    l.out = out;
    return l;
}

// ---------------------------------------------------------------------------
// text form

std::string ArchSpec::to_text() const {
    std::ostringstream os;
    os << "input resolution=" << resolution << " channels=" << channels << '\n';
    for (const auto& l : layers) {
        os << to_string(l.kind);
        switch (l.kind) {
            case LayerKind::Conv2d:
                os << " out=" << l.out << " kernel=" << l.kernel << " stride=" << l.stride
                   << " padding=" << (l.padding == Padding::Same ? "same" : "none") << " repeat=" << l.repeat;
                break;
            case LayerKind::AvgPool:
                os << " window=" << l.window << " stride=" << l.stride;
                break;
            case LayerKind::Dense:
                os << " out=" << l.out;
                break;
            default:
                break;
        }
        os << '\n';
    }
    return os.str();
}

namespace {

std::size_t parse_count(const std::string& key, const std::string& value, std::size_t line_no) {
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != value.size() || value.empty() || value[0] == '-') {
        throw Error(ErrorCode::Validation,
                    "arch line " + std::to_string(line_no) + ": bad value for " + key + ": '" + value + "'");
    }
    return static_cast<std::size_t>(v);
}

}  // namespace

ArchSpec ArchSpec::parse(const std::string& text, std::vector<std::string> labels) {
    ArchSpec arch;
    arch.labels = std::move(labels);
    arch.layers.clear();
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool saw_input = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string kind;
        if (!(ls >> kind)) continue;

        std::map<std::string, std::string> kv;
        std::string tok;
        while (ls >> tok) {
            auto eq = tok.find('=');
            if (eq == std::string::npos) {
                throw Error(ErrorCode::Validation, "arch line " + std::to_string(line_no) + ": expected key=value, got '" + tok + "'");
            }
            kv[tok.substr(0, eq)] = tok.substr(eq + 1);
        }
        auto take = [&](const std::string& key, std::size_t fallback) {
            auto it = kv.find(key);
            if (it == kv.end()) return fallback;
            auto v = parse_count(key, it->second, line_no);
            kv.erase(it);
            return v;
        };

        if (kind == "input") {
            arch.resolution = take("resolution", arch.resolution);
            arch.channels = take("channels", arch.channels);
            saw_input = true;
        } else if (kind == "conv2d") {
            LayerSpec l{LayerKind::Conv2d};
            l.out = take("out", 0);
            l.kernel = take("kernel", 3);
            l.stride = take("stride", 1);
            l.repeat = take("repeat", 1);
            l.padding = Padding::Same;
            if (auto it = kv.find("padding"); it != kv.end()) {
                if (it->second == "same") l.padding = Padding::Same;
                else if (it->second == "none") l.padding = Padding::None;
                else throw Error(ErrorCode::Validation, "arch line " + std::to_string(line_no) + ": padding must be same|none");
                kv.erase(it);
            }
            arch.layers.push_back(l);
        } else if (kind == "avgpool") {
            LayerSpec l{LayerKind::AvgPool};
            l.window = take("window", 2);
            l.stride = take("stride", l.window);
            arch.layers.push_back(l);
        } else if (kind == "dense") {
            LayerSpec l{LayerKind::Dense};
            l.out = take("out", 0);
            arch.layers.push_back(l);
        } else if (kind == "relu") {
            arch.layers.push_back(LayerSpec::relu());
        } else if (kind == "flatten") {
            arch.layers.push_back(LayerSpec::flatten());
        } else if (kind == "softmax") {
            arch.layers.push_back(LayerSpec::softmax());
        } else {
            throw Error(ErrorCode::Validation, "arch line " + std::to_string(line_no) + ": unknown layer kind '" + kind + "'");
        }
        if (!kv.empty()) {
            throw Error(ErrorCode::Validation,
                        "arch line " + std::to_string(line_no) + ": unknown key '" + kv.begin()->first + "'");
        }
    }
    if (!saw_input) throw Error(ErrorCode::Validation, "arch text has no input line");
    return arch;
}

ArchSpec cacaonet_b0(std::vector<std::string> labels, std::size_t resolution) {
    ArchSpec arch;
    arch.resolution = resolution;
    arch.channels = 3;
    const std::size_t n = labels.size();
    arch.labels = std::move(labels);
    for (std::size_t width : {16u, 32u, 64u}) {
        arch.layers.push_back(LayerSpec::conv2d(width, 3));
        arch.layers.push_back(LayerSpec::relu());
        arch.layers.push_back(LayerSpec::avg_pool(2, 2));
    }
    arch.layers.push_back(LayerSpec::flatten());
    arch.layers.push_back(LayerSpec::dense(n));
    arch.layers.push_back(LayerSpec::softmax());
    return arch;
}

std::vector<LayerSpec> expand_layers(const ArchSpec& arch) {
    std::vector<LayerSpec> out;
    for (const auto& l : arch.layers) {
        if (l.kind != LayerKind::Conv2d || l.repeat <= 1) {
            LayerSpec copy = l;
            if (copy.kind == LayerKind::Conv2d) copy.repeat = 1;
            out.push_back(copy);
            continue;
        }
        for (std::size_t r = 0; r < l.repeat; ++r) {
            if (r > 0) out.push_back(LayerSpec::relu());
            LayerSpec copy = l;
            copy.repeat = 1;
            out.push_back(copy);
        }
    }
    return out;
}

namespace {

std::size_t conv_padding(const LayerSpec& l) { return l.padding == Padding::Same ? (l.kernel - 1) / 2 : 0; }

std::size_t conv_extent(std::size_t in, const LayerSpec& l) {
    return (in + 2 * conv_padding(l) - l.kernel) / l.stride + 1;
}

[[noreturn]] void arch_error(std::size_t index, const LayerSpec& l, const std::string& what) {
    throw Error(ErrorCode::Validation,
                "layer " + std::to_string(index) + " (" + to_string(l.kind) + "): " + what);
}

}  // namespace

std::vector<Shape> infer_shapes(const ArchSpec& arch) {
    if (arch.resolution == 0 || arch.channels == 0) throw Error(ErrorCode::Validation, "input resolution/channels must be >= 1");
    if (arch.labels.empty()) throw Error(ErrorCode::Validation, "arch has no class labels");
    const auto layers = expand_layers(arch);
    if (layers.empty()) throw Error(ErrorCode::Validation, "arch has no layers");

    std::vector<Shape> shapes;
    Shape cur{arch.channels, arch.resolution, arch.resolution};
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        switch (l.kind) {
            case LayerKind::Conv2d: {
                if (cur.size() != 3) arch_error(i, l, "expects a CHW input");
                if (l.out == 0 || l.kernel == 0 || l.stride == 0) arch_error(i, l, "out, kernel, stride must be >= 1");
                if (l.padding == Padding::Same && l.kernel % 2 == 0) arch_error(i, l, "same padding needs an odd kernel");
                const std::size_t p = conv_padding(l);
                if (cur[1] + 2 * p < l.kernel || cur[2] + 2 * p < l.kernel) arch_error(i, l, "kernel larger than input");
                cur = {l.out, conv_extent(cur[1], l), conv_extent(cur[2], l)};
                break;
            }
            case LayerKind::AvgPool:
                if (cur.size() != 3) arch_error(i, l, "expects a CHW input");
                if (l.window == 0 || l.stride == 0) arch_error(i, l, "window and stride must be >= 1");
                if (l.window > cur[1] || l.window > cur[2]) arch_error(i, l, "window exceeds spatial extent");
                cur = {cur[0], (cur[1] - l.window) / l.stride + 1, (cur[2] - l.window) / l.stride + 1};
                break;
            case LayerKind::Flatten:
                cur = {shape_size(cur)};
                break;
            case LayerKind::Dense:
                if (cur.size() != 1) arch_error(i, l, "expects a flat input (add flatten)");
                if (l.out == 0) arch_error(i, l, "out must be >= 1");
                cur = {l.out};
                break;
            case LayerKind::Relu:
                break;
            case LayerKind::Softmax:
                if (i + 1 != layers.size()) arch_error(i, l, "softmax may only be the final layer");
                if (cur.size() != 1) arch_error(i, l, "expects a flat input");
                break;
        }
        shapes.push_back(cur);
    }
    if (layers.back().kind != LayerKind::Softmax) throw Error(ErrorCode::Validation, "final layer must be softmax");
    if (cur[0] != arch.labels.size()) {
        throw Error(ErrorCode::Validation, "final width " + std::to_string(cur[0]) + " != label count " +
                                               std::to_string(arch.labels.size()));
    }
    return shapes;
}

void validate_arch(const ArchSpec& arch) { (void)infer_shapes(arch); }

// ---------------------------------------------------------------------------
// compound scaling

namespace {

std::size_t round_half_up(double v) { return static_cast<std::size_t>(std::floor(v + 0.5)); }

}  // namespace

ArchSpec scale_arch(const ArchSpec& base, const CompoundScalingConfig& cfg) {
    validate_arch(base);
    if (cfg.phi < 0.0 || cfg.alpha < 1.0 || cfg.beta < 1.0 || cfg.gamma < 1.0) {
        throw Error(ErrorCode::InvalidArgument, "scaling needs phi >= 0 and alpha, beta, gamma >= 1");
    }
    if (!cfg.within_resource_band()) {
        std::cerr << "warning: alpha*beta^2*gamma^2 = " << cfg.resource_factor() << " is outside [1.8, 2.2]\n";
    }
    if (cfg.phi == 0.0) return base;

    const double depth = std::pow(cfg.alpha, cfg.phi);
    const double width = std::pow(cfg.beta, cfg.phi);
    const double res = std::pow(cfg.gamma, cfg.phi);
    // Products like 5 * 1.2 land a few ulps off the integer; don't let that
    // bump a ceil.
    constexpr double kSlack = 1e-9;

    ArchSpec out = base;
    for (auto& l : out.layers) {
        if (l.kind != LayerKind::Conv2d) continue;
        l.repeat = static_cast<std::size_t>(std::ceil(static_cast<double>(l.repeat) * depth - kSlack));
        l.out = std::max<std::size_t>(4, 4 * round_half_up(static_cast<double>(l.out) * width / 4.0));
    }
    out.resolution = 2 * round_half_up(static_cast<double>(base.resolution) * res / 2.0);
    if (out.resolution > cfg.max_resolution) {
        throw Error(ErrorCode::ResourceLimit, "scaled resolution " + std::to_string(out.resolution) +
                                                  " exceeds cap " + std::to_string(cfg.max_resolution));
    }
    validate_arch(out);
    return out;
}

// ---------------------------------------------------------------------------
// primitives on raw CHW buffers

namespace {

struct Dims {
    std::size_t c, h, w;
};

void conv_forward_raw(const float* in, Dims id, const float* w, const float* b, const LayerSpec& l, float* out,
                      Dims od) {
    const std::size_t k = l.kernel, s = l.stride;
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(conv_padding(l));
    for (std::size_t o = 0; o < od.c; ++o) {
        float* oplane = out + o * od.h * od.w;
        std::fill(oplane, oplane + od.h * od.w, b[o]);
        for (std::size_t c = 0; c < id.c; ++c) {
            const float* iplane = in + c * id.h * id.w;
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const float wv = w[((o * id.c + c) * k + ky) * k + kx];
                    for (std::size_t oy = 0; oy < od.h; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - p;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(id.h)) continue;
                        const float* irow = iplane + static_cast<std::size_t>(iy) * id.w;
                        float* orow = oplane + oy * od.w;
                        for (std::size_t ox = 0; ox < od.w; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - p;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(id.w)) continue;
                            orow[ox] += wv * irow[ix];
                        }
                    }
                }
            }
        }
    }
}

void conv_backward_raw(const float* in, Dims id, const float* w, const LayerSpec& l, const float* dout, Dims od,
                       float* din, float* dw, float* db) {
    const std::size_t k = l.kernel, s = l.stride;
    const std::ptrdiff_t p = static_cast<std::ptrdiff_t>(conv_padding(l));
    for (std::size_t o = 0; o < od.c; ++o) {
        const float* gplane = dout + o * od.h * od.w;
        float bsum = 0.0f;
        for (std::size_t i = 0; i < od.h * od.w; ++i) bsum += gplane[i];
        db[o] += bsum;
        for (std::size_t c = 0; c < id.c; ++c) {
            const float* iplane = in + c * id.h * id.w;
            float* diplane = din ? din + c * id.h * id.w : nullptr;
            for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::size_t widx = ((o * id.c + c) * k + ky) * k + kx;
                    const float wv = w[widx];
                    float acc = 0.0f;
                    for (std::size_t oy = 0; oy < od.h; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s + ky) - p;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(id.h)) continue;
                        const float* irow = iplane + static_cast<std::size_t>(iy) * id.w;
                        float* dirow = diplane ? diplane + static_cast<std::size_t>(iy) * id.w : nullptr;
                        const float* grow = gplane + oy * od.w;
                        for (std::size_t ox = 0; ox < od.w; ++ox) {
                            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s + kx) - p;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(id.w)) continue;
                            acc += grow[ox] * irow[ix];
                            if (dirow) dirow[ix] += wv * grow[ox];
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

void pool_forward_raw(const float* in, Dims id, std::size_t window, std::size_t stride, float* out, Dims od) {
    const float inv = 1.0f / static_cast<float>(window * window);
    for (std::size_t c = 0; c < id.c; ++c) {
        for (std::size_t oy = 0; oy < od.h; ++oy) {
            for (std::size_t ox = 0; ox < od.w; ++ox) {
                float sum = 0.0f;
                for (std::size_t ky = 0; ky < window; ++ky)
                    for (std::size_t kx = 0; kx < window; ++kx)
                        sum += in[(c * id.h + oy * stride + ky) * id.w + ox * stride + kx];
                out[(c * od.h + oy) * od.w + ox] = sum * inv;
            }
        }
    }
}

void pool_backward_raw(Dims id, std::size_t window, std::size_t stride, const float* dout, Dims od, float* din) {
    const float inv = 1.0f / static_cast<float>(window * window);
    for (std::size_t c = 0; c < id.c; ++c)
        for (std::size_t oy = 0; oy < od.h; ++oy)
            for (std::size_t ox = 0; ox < od.w; ++ox) {
                const float g = dout[(c * od.h + oy) * od.w + ox] * inv;
                for (std::size_t ky = 0; ky < window; ++ky)
                    for (std::size_t kx = 0; kx < window; ++kx)
                        din[(c * id.h + oy * stride + ky) * id.w + ox * stride + kx] += g;
            }
}

Dims chw(const Shape& s) { return {s[0], s[1], s[2]}; }

// Applies `fn` to each sample of a CHW or NCHW tensor and restacks.
template <typename Fn>
Tensor per_sample(const Tensor& x, const char* op, Fn fn) {
    if (x.rank() == 3) return fn(x);
    if (x.rank() != 4) throw Error(ErrorCode::InvalidShape, std::string(op) + " expects CHW or NCHW input");
    std::vector<Tensor> outs;
    outs.reserve(x.dim(0));
    for (std::size_t n = 0; n < x.dim(0); ++n) outs.push_back(fn(x.sample(n)));
    return stack(outs);
}

}  // namespace

Tensor relu(const Tensor& x) {
    Tensor out = x;
    for (auto& v : out.data()) v = v > 0.0f ? v : 0.0f;
    return out;
}

Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 1) throw Error(ErrorCode::InvalidShape, "softmax expects a rank-1 tensor");
    float mx = -INFINITY;
    for (float v : logits.data()) {
        if (!std::isfinite(v)) throw Error(ErrorCode::InvalidValue, "softmax input contains NaN or Inf");
        mx = std::max(mx, v);
    }
    std::vector<double> e(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) {
        e[i] = std::exp(static_cast<double>(logits[i]) - static_cast<double>(mx));
        sum += e[i];
    }
    Tensor out(logits.shape());
    for (std::size_t i = 0; i < e.size(); ++i) out[i] = static_cast<float>(e[i] / sum);
    return out;
}

Tensor avg_pool2d(const Tensor& x, std::size_t window, std::size_t stride) {
    if (window == 0 || stride == 0) throw Error(ErrorCode::InvalidShape, "pool window and stride must be >= 1");
    return per_sample(x, "avg_pool2d", [&](const Tensor& img) {
        const Dims id = chw(img.shape());
        if (window > id.h || window > id.w) {
            throw Error(ErrorCode::InvalidShape, "pool window " + std::to_string(window) + " exceeds spatial extent " +
                                                     shape_to_string(img.shape()));
        }
        const Dims od{id.c, (id.h - window) / stride + 1, (id.w - window) / stride + 1};
        Tensor out({od.c, od.h, od.w});
        pool_forward_raw(img.data().data(), id, window, stride, out.data().data(), od);
        return out;
    });
}

Tensor conv2d(const Tensor& x, const LayerSpec& layer, const Tensor& weight, const Tensor& bias) {
    if (layer.kind != LayerKind::Conv2d) throw Error(ErrorCode::InvalidArgument, "conv2d needs a conv2d layer spec");
    if (layer.kernel == 0 || layer.stride == 0) throw Error(ErrorCode::InvalidShape, "kernel and stride must be >= 1");
    return per_sample(x, "conv2d", [&](const Tensor& img) {
        const Dims id = chw(img.shape());
        const Shape expect{layer.out, id.c, layer.kernel, layer.kernel};
        if (weight.shape() != expect) {
            throw Error(ErrorCode::ShapeMismatch, "conv weight " + shape_to_string(weight.shape()) + " does not fit input " +
                                                      shape_to_string(img.shape()) + " (want " + shape_to_string(expect) + ")");
        }
        if (bias.shape() != Shape{layer.out}) throw Error(ErrorCode::ShapeMismatch, "conv bias shape mismatch");
        const std::size_t p = conv_padding(layer);
        if (id.h + 2 * p < layer.kernel || id.w + 2 * p < layer.kernel) {
            throw Error(ErrorCode::InvalidShape, "kernel larger than padded input");
        }
        const Dims od{layer.out, conv_extent(id.h, layer), conv_extent(id.w, layer)};
        Tensor out({od.c, od.h, od.w});
        conv_forward_raw(img.data().data(), id, weight.data().data(), bias.data().data(), layer, out.data().data(), od);
        return out;
    });
}

// ---------------------------------------------------------------------------
// Model

struct Model::Cache {
    std::vector<Tensor> inputs;  // input of every expanded layer
    Tensor probs;
};

std::map<std::string, Shape> Model::parameter_shapes(const ArchSpec& arch) {
    const auto shapes = infer_shapes(arch);
    const auto layers = expand_layers(arch);
    std::map<std::string, Shape> out;
    std::size_t convs = 0, denses = 0;
    Shape in{arch.channels, arch.resolution, arch.resolution};
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.kind == LayerKind::Conv2d) {
            const std::string p = "conv" + std::to_string(convs++);
            out[p + ".weight"] = {l.out, in[0], l.kernel, l.kernel};
            out[p + ".bias"] = {l.out};
        } else if (l.kind == LayerKind::Dense) {
            const std::string p = "dense" + std::to_string(denses++);
            out[p + ".weight"] = {l.out, in[0]};
            out[p + ".bias"] = {l.out};
        }
        in = shapes[i];
    }
    return out;
}

Model::Model(ArchSpec arch, TensorMap weights) : arch_(std::move(arch)), weights_(std::move(weights)) {
    const auto expected = parameter_shapes(arch_);
    if (expected.size() != weights_.size()) {
        throw Error(ErrorCode::Validation, "model has " + std::to_string(weights_.size()) + " tensors, arch needs " +
                                               std::to_string(expected.size()));
    }
    for (const auto& [name, shape] : expected) {
        auto it = weights_.find(name);
        if (it == weights_.end()) throw Error(ErrorCode::Validation, "missing parameter " + name);
        if (it->second.shape() != shape) {
            throw Error(ErrorCode::Validation, "parameter " + name + " has shape " + shape_to_string(it->second.shape()) +
                                                   ", arch needs " + shape_to_string(shape));
        }
    }
    layers_ = expand_layers(arch_);
    std::size_t convs = 0, denses = 0;
    for (const auto& l : layers_) {
        if (l.kind == LayerKind::Conv2d) param_prefix_.push_back("conv" + std::to_string(convs++));
        else if (l.kind == LayerKind::Dense) param_prefix_.push_back("dense" + std::to_string(denses++));
        else param_prefix_.emplace_back();
    }
}

namespace {

// Standard normal from a 64-bit engine; avoids std::normal_distribution so
// weights are identical across standard library implementations.
class Gaussian {
public:
    explicit Gaussian(std::uint64_t seed) : eng_(seed) {}
    double next() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        const double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace

Model Model::initialize(ArchSpec arch, std::uint64_t seed) {
    Gaussian g(seed);
    TensorMap weights;
    for (const auto& [name, shape] : parameter_shapes(arch)) {
        Tensor t(shape);
        if (name.ends_with(".weight")) {
            const std::size_t fan_in = shape_size(shape) / shape[0];
            const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (auto& v : t.data()) v = static_cast<float>(g.next() * sd);
        }
        weights.emplace(name, std::move(t));
    }
    return Model(std::move(arch), std::move(weights));
}

Model Model::zeros(ArchSpec arch) {
    TensorMap weights;
    for (const auto& [name, shape] : parameter_shapes(arch)) weights.emplace(name, Tensor(shape));
    return Model(std::move(arch), std::move(weights));
}

std::size_t Model::num_parameters() const {
    std::size_t n = 0;
    for (const auto& [_, t] : weights_) n += t.size();
    return n;
}

Tensor Model::forward_sample(const Tensor& image, Cache* cache) const {
    Tensor x = image;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const auto& l = layers_[i];
        if (cache) cache->inputs.push_back(x);
        switch (l.kind) {
            case LayerKind::Conv2d: {
                const auto& p = param_prefix_[i];
                x = conv2d(x, l, weights_.at(p + ".weight"), weights_.at(p + ".bias"));
                break;
            }
            case LayerKind::Relu:
                x = relu(x);
                break;
            case LayerKind::AvgPool:
                x = avg_pool2d(x, l.window, l.stride);
                break;
            case LayerKind::Flatten:
                x = x.reshaped({x.size()});
                break;
            case LayerKind::Dense: {
                const auto& p = param_prefix_[i];
                const Tensor& w = weights_.at(p + ".weight");
                const Tensor& b = weights_.at(p + ".bias");
                Tensor y = b;
                const std::size_t in = x.size();
                for (std::size_t o = 0; o < l.out; ++o) {
                    float acc = 0.0f;
                    for (std::size_t j = 0; j < in; ++j) acc += w[o * in + j] * x[j];
                    y[o] += acc;
                }
                x = std::move(y);
                break;
            }
            case LayerKind::Softmax:
                x = softmax(x);
                break;
        }
    }
    if (cache) cache->probs = x;
    return x;
}

Tensor Model::forward(const Tensor& batch) const {
    const Shape in{arch_.channels, arch_.resolution, arch_.resolution};
    if (batch.rank() == 3) {
        if (batch.shape() != in) {
            throw Error(ErrorCode::ShapeMismatch, "input " + shape_to_string(batch.shape()) + " != model input " +
                                                      shape_to_string(in));
        }
        return forward_sample(batch, nullptr).reshaped({1, arch_.labels.size()});
    }
    if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != in) {
        throw Error(ErrorCode::ShapeMismatch, "batch " + shape_to_string(batch.shape()) + " does not match model input " +
                                                  shape_to_string(in));
    }
    const std::size_t n = batch.dim(0), k = arch_.labels.size();
    Tensor out({n, k});
    for (std::size_t s = 0; s < n; ++s) {
        const Tensor p = forward_sample(batch.sample(s), nullptr);
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(s * k));
    }
    return out;
}

void Model::backward_sample(const Cache& cache, std::size_t label, float scale, TensorMap& grads) const {
    // Softmax + cross-entropy fused: d loss / d logits = probs - onehot.
    Tensor g = cache.probs;
    g[label] -= 1.0f;
    for (auto& v : g.data()) v *= scale;

    for (std::size_t i = layers_.size() - 1; i-- > 0;) {
        const auto& l = layers_[i];
        const Tensor& in = cache.inputs[i];
        switch (l.kind) {
            case LayerKind::Relu:
                for (std::size_t j = 0; j < g.size(); ++j)
                    if (!(in[j] > 0.0f)) g[j] = 0.0f;
                break;
            case LayerKind::Flatten:
                g = g.reshaped(in.shape());
                break;
            case LayerKind::AvgPool: {
                Tensor din(in.shape());
                pool_backward_raw(chw(in.shape()), l.window, l.stride, g.data().data(), chw(g.shape()), din.data().data());
                g = std::move(din);
                break;
            }
            case LayerKind::Dense: {
                const auto& p = param_prefix_[i];
                const Tensor& w = weights_.at(p + ".weight");
                Tensor& dw = grads.at(p + ".weight");
                Tensor& db = grads.at(p + ".bias");
                const std::size_t nin = in.size();
                Tensor din(in.shape());
                for (std::size_t o = 0; o < l.out; ++o) {
                    const float go = g[o];
                    db[o] += go;
                    for (std::size_t j = 0; j < nin; ++j) {
                        dw[o * nin + j] += go * in[j];
                        din[j] += w[o * nin + j] * go;
                    }
                }
                g = std::move(din);
                break;
            }
            case LayerKind::Conv2d: {
                const auto& p = param_prefix_[i];
                Tensor din(in.shape());
                // The first layer's input gradient is never used.
                float* din_ptr = i == 0 ? nullptr : din.data().data();
                conv_backward_raw(in.data().data(), chw(in.shape()), weights_.at(p + ".weight").data().data(), l,
                                  g.data().data(), chw(g.shape()), din_ptr, grads.at(p + ".weight").data().data(),
                                  grads.at(p + ".bias").data().data());
                g = std::move(din);
                break;
            }
            case LayerKind::Softmax:
                break;
        }
    }
}

Gradients Model::backward(const Tensor& batch, std::span<const std::size_t> labels) const {
    Tensor b = batch.rank() == 3 ? batch.reshaped({1, batch.dim(0), batch.dim(1), batch.dim(2)}) : batch;
    const Shape in{arch_.channels, arch_.resolution, arch_.resolution};
    if (b.rank() != 4 || Shape(b.shape().begin() + 1, b.shape().end()) != in) {
        throw Error(ErrorCode::ShapeMismatch, "batch " + shape_to_string(batch.shape()) + " does not match model input " +
                                                  shape_to_string(in));
    }
    const std::size_t n = b.dim(0), k = arch_.labels.size();
    if (labels.size() != n) throw Error(ErrorCode::InvalidLabel, "label count does not match batch size");
    for (auto lbl : labels) {
        if (lbl >= k) throw Error(ErrorCode::InvalidLabel, "label index " + std::to_string(lbl) + " out of range");
    }

    // Per-sample gradients are computed independently (possibly in parallel)
    // and reduced in sample order, so results do not depend on thread count.
    std::vector<TensorMap> per(n);
    std::vector<Tensor> probs(n);
    const float scale_factor = 1.0f / static_cast<float>(n);
    auto work = [&](std::size_t s) {
        TensorMap g;
        for (const auto& [name, t] : weights_) g.emplace(name, Tensor::zeros_like(t));
        Cache cache;
        forward_sample(b.sample(s), &cache);
        backward_sample(cache, labels[s], scale_factor, g);
        probs[s] = cache.probs;
        per[s] = std::move(g);
    };
    const std::size_t threads = std::min<std::size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
    if (threads <= 1) {
        for (std::size_t s = 0; s < n; ++s) work(s);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                for (std::size_t s = t; s < n; s += threads) work(s);
            });
        }
    }

    Gradients out;
    out.params = std::move(per[0]);
    for (std::size_t s = 1; s < n; ++s) {
        for (auto& [name, t] : out.params) {
            auto dst = t.data();
            auto src = per[s].at(name).data();
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
    }
    out.probs = stack(probs);
    return out;
}

void Model::apply_sgd(const TensorMap& grads, float learning_rate) {
    for (auto& [name, w] : weights_) {
        auto it = grads.find(name);
        if (it == grads.end()) throw Error(ErrorCode::Internal, "missing gradient for " + name);
        if (it->second.shape() != w.shape()) throw Error(ErrorCode::ShapeMismatch, "gradient shape mismatch for " + name);
        auto dst = w.data();
        auto g = it->second.data();
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] -= learning_rate * g[j];
    }
}

bool Model::bit_equal(const Model& other) const {
    if (arch_.to_text() != other.arch_.to_text() || arch_.labels != other.arch_.labels) return false;
    if (weights_.size() != other.weights_.size()) return false;
    for (const auto& [name, t] : weights_) {
        auto it = other.weights_.find(name);
        if (it == other.weights_.end() || !t.bit_equal(it->second)) return false;
    }
    return true;
}

}  // namespace cacao
