#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cacao/tensor.hpp"

namespace cacao {

enum class LayerKind { Conv2d, Relu, AvgPool, Dense, Softmax, Flatten };
enum class Padding { None, Same };

const char* to_string(LayerKind kind) noexcept;

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::size_t out = 0;     // conv out-channels, dense out-features
    std::size_t kernel = 1;  // conv
    std::size_t stride = 1;  // conv, avgpool
    Padding padding = Padding::None;
    std::size_t window = 1;  // avgpool
    std::size_t repeat = 1;  // conv: number of stacked convolutions (depth)

    static LayerSpec conv2d(std::size_t out, std::size_t kernel, std::size_t stride = 1,
                            Padding padding = Padding::Same, std::size_t repeat = 1);
    static LayerSpec relu() { return LayerSpec{LayerKind::Relu}; }
    static LayerSpec avg_pool(std::size_t window, std::size_t stride);
    static LayerSpec dense(std::size_t out);
    static LayerSpec flatten() { return LayerSpec{LayerKind::Flatten}; }
    static LayerSpec softmax() { return LayerSpec{LayerKind::Softmax}; }

    bool operator==(const LayerSpec&) const = default;
};

// Declarative layer stack. The canonical text form is one line per entry:
//
//   input resolution=64 channels=3
//   conv2d out=16 kernel=3 stride=1 padding=same repeat=1
//   relu
//   avgpool window=2 stride=2
//   flatten
//   dense out=3
//   softmax
//
// Labels are not part of the text; containers and manifests carry them.
struct ArchSpec {
    std::size_t resolution = 64;
    std::size_t channels = 3;
    std::vector<LayerSpec> layers;
    std::vector<std::string> labels;

    std::string to_text() const;
    static ArchSpec parse(const std::string& text, std::vector<std::string> labels);

    bool operator==(const ArchSpec&) const = default;
};

// The default base network: three conv/relu/avgpool stages (16, 32, 64
// channels), flatten, dense, softmax.
ArchSpec cacaonet_b0(std::vector<std::string> labels, std::size_t resolution = 64);

// Layer list with conv repeats unrolled; a conv with repeat=r becomes r
// convolutions separated by ReLU, the later ones mapping out->out channels.
std::vector<LayerSpec> expand_layers(const ArchSpec& arch);

// Per-sample output shape of every expanded layer. Throws Validation on any
// incompatibility (bad params, softmax not last, final width != label count).
std::vector<Shape> infer_shapes(const ArchSpec& arch);

void validate_arch(const ArchSpec& arch);

struct CompoundScalingConfig {
    double phi = 0.0;
    double alpha = 1.2;   // depth
    double beta = 1.1;    // width
    double gamma = 1.15;  // resolution
    std::size_t max_resolution = 1024;

    // alpha * beta^2 * gamma^2; the compound method targets ~2.
    double resource_factor() const { return alpha * beta * beta * gamma * gamma; }
    bool within_resource_band() const {
        const double f = resource_factor();
        return f >= 1.8 && f <= 2.2;
    }
};

// Scales depth (conv repeats, rounded up), width (conv channels, nearest
// multiple of 4, min 4) and input resolution (nearest even). Prints a warning
// to stderr when the resource factor is outside [1.8, 2.2].
ArchSpec scale_arch(const ArchSpec& base, const CompoundScalingConfig& cfg);

// Stateless layer primitives. Spatial ops accept CHW or NCHW input.
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& logits);
Tensor avg_pool2d(const Tensor& x, std::size_t window, std::size_t stride);
Tensor conv2d(const Tensor& x, const LayerSpec& layer, const Tensor& weight, const Tensor& bias);

using TensorMap = std::map<std::string, Tensor>;

// Per-example gradient of the mean cross-entropy loss over a batch.
struct Gradients {
    TensorMap params;
    Tensor probs;  // [N, labels] forward output used for the gradient
};

class Model {
public:
    // Validates weights against the arch; throws Validation on any mismatch.
    Model(ArchSpec arch, TensorMap weights);

    // He-normal weights, zero biases, deterministic in `seed`.
    static Model initialize(ArchSpec arch, std::uint64_t seed);
    static Model zeros(ArchSpec arch);

    // Parameter names and shapes the arch requires, e.g. "conv0.weight".
    static std::map<std::string, Shape> parameter_shapes(const ArchSpec& arch);

    const ArchSpec& arch() const noexcept { return arch_; }
    const std::vector<std::string>& labels() const noexcept { return arch_.labels; }
    const TensorMap& weights() const noexcept { return weights_; }
    std::size_t num_parameters() const;

    // NCHW batch (or one CHW image) -> [N, labels] probabilities.
    Tensor forward(const Tensor& batch) const;

    Gradients backward(const Tensor& batch, std::span<const std::size_t> labels) const;

    // w <- w - lr * g for every parameter.
    void apply_sgd(const TensorMap& grads, float learning_rate);

    TensorMap& mutable_weights() noexcept { return weights_; }

    bool bit_equal(const Model& other) const;

private:
    struct Cache;
    Tensor forward_sample(const Tensor& image, Cache* cache) const;
    void backward_sample(const Cache& cache, std::size_t label, float scale, TensorMap& grads) const;

    ArchSpec arch_;
    std::vector<LayerSpec> layers_;
    std::vector<std::string> param_prefix_;  // per expanded layer; empty if none
    TensorMap weights_;
};

}  // namespace cacao
