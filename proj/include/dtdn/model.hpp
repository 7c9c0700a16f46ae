#pragma once

// Shared encoder E, dynamic mask network H, task network T, and the
// mask-based split of a hidden representation into task-relevant and
// task-irrelevant parts.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dtdn/ops.hpp"
#include "dtdn/tensor.hpp"

namespace dtdn {

using Rng = std::mt19937_64;

enum class EncoderKind { conv, mlp };

/// Nonlinearity after the first conv layer. `abs` responds to an edge the
/// same way regardless of its polarity.
enum class FirstActivation { relu, abs };

struct EncoderSpec {
    EncoderKind kind = EncoderKind::conv;
    // conv mode: channels x image_size x image_size inputs
    std::size_t in_channels = 1;
    std::size_t image_size = 16;
    std::size_t conv1_channels = 8;
    std::size_t conv2_channels = 16;
    FirstActivation first_activation = FirstActivation::abs;
    // Each image is shifted to zero mean and scaled to unit variance before
    // the first layer (conv mode only).
    bool standardize_input = true;
    // mlp mode: flat vectors of input_dim, with optional hidden layers
    std::size_t input_dim = 0;
    std::vector<std::size_t> mlp_hidden;

    std::size_t flat_input_size() const {
        return kind == EncoderKind::conv ? in_channels * image_size * image_size : input_dim;
    }
};

struct ModelSpec {
    EncoderSpec encoder;
    std::size_t hidden_dim = 64;     // D_h
    std::size_t embedding_dim = 32;  // D_emb
    std::size_t num_classes = 10;    // C_s
    double mask_bias_init = 1.0;
};

struct Linear {
    Tensor weight;  // in x out
    Tensor bias;    // out

    Tensor forward(const Tensor& x) const { return add(matmul(x, weight), tile_rows(bias, x.dim(0))); }
};

struct Conv3x3 {
    Tensor weight;  // out x in x 3 x 3
    Tensor bias;    // out
};

namespace detail {

inline Tensor glorot(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = u(rng);
    return Tensor(std::move(shape), std::move(v), true);
}

inline Linear make_linear(std::size_t in, std::size_t out, Rng& rng, double bias = 0.0) {
    return {glorot({in, out}, in, out, rng), Tensor::full({out}, bias, true)};
}

inline Conv3x3 make_conv(std::size_t in, std::size_t out, Rng& rng) {
    return {glorot({out, in, 3, 3}, in * 9, out * 9, rng), Tensor::zeros({out}, true)};
}

}  // namespace detail

struct EncoderParams {
    EncoderSpec spec;
    std::vector<Conv3x3> convs;  // conv mode only
    std::vector<Linear> layers;  // mlp hidden layers (mlp mode) followed by the output projection
};

struct MaskNetParams {
    Linear first;
    Linear second;
};

struct TaskNetParams {
    Linear embed;  // D_h -> D_emb, followed by ReLU
    Linear head;   // D_emb -> C_s
};

struct Model {
    ModelSpec spec;
    EncoderParams encoder;
    MaskNetParams mask_net;
    TaskNetParams task_net;

    /// Stable, ordered (name, tensor) list. Names are the checkpoint keys.
    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t i = 0; i < encoder.convs.size(); ++i) {
            out.emplace_back("encoder.conv" + std::to_string(i) + ".weight", encoder.convs[i].weight);
            out.emplace_back("encoder.conv" + std::to_string(i) + ".bias", encoder.convs[i].bias);
        }
        for (std::size_t i = 0; i < encoder.layers.size(); ++i) {
            out.emplace_back("encoder.fc" + std::to_string(i) + ".weight", encoder.layers[i].weight);
            out.emplace_back("encoder.fc" + std::to_string(i) + ".bias", encoder.layers[i].bias);
        }
        out.emplace_back("mask.fc0.weight", mask_net.first.weight);
        out.emplace_back("mask.fc0.bias", mask_net.first.bias);
        out.emplace_back("mask.fc1.weight", mask_net.second.weight);
        out.emplace_back("mask.fc1.bias", mask_net.second.bias);
        out.emplace_back("task.embed.weight", task_net.embed.weight);
        out.emplace_back("task.embed.bias", task_net.embed.bias);
        out.emplace_back("task.head.weight", task_net.head.weight);
        out.emplace_back("task.head.bias", task_net.head.bias);
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }
};

/// Glorot-uniform weights, zero biases, and a positive final mask bias so the
/// initial mask sits near sigmoid(mask_bias_init).
inline Model make_model(const ModelSpec& spec, Rng& rng) {
    Model m;
    m.spec = spec;
    m.encoder.spec = spec.encoder;
    const auto& e = spec.encoder;
    std::size_t width = 0;
    if (e.kind == EncoderKind::conv) {
        if (e.image_size < 4) throw ShapeError("conv encoder needs image_size >= 4");
        m.encoder.convs.push_back(detail::make_conv(e.in_channels, e.conv1_channels, rng));
        m.encoder.convs.push_back(detail::make_conv(e.conv1_channels, e.conv2_channels, rng));
        const std::size_t s = (e.image_size / 2) / 2;
        width = e.conv2_channels * s * s;
    } else {
        if (e.input_dim == 0) throw ShapeError("mlp encoder needs input_dim > 0");
        width = e.input_dim;
        for (auto h : e.mlp_hidden) {
            m.encoder.layers.push_back(detail::make_linear(width, h, rng));
            width = h;
        }
    }
    m.encoder.layers.push_back(detail::make_linear(width, spec.hidden_dim, rng));
    m.mask_net.first = detail::make_linear(spec.hidden_dim, spec.hidden_dim, rng);
    m.mask_net.second = detail::make_linear(spec.hidden_dim, spec.hidden_dim, rng, spec.mask_bias_init);
    m.task_net.embed = detail::make_linear(spec.hidden_dim, spec.embedding_dim, rng);
    m.task_net.head = detail::make_linear(spec.embedding_dim, spec.num_classes, rng);
    return m;
}

/// Per-row zero mean, unit variance. Rows are data, so no tape is recorded.
inline Tensor standardize_rows(const Tensor& x) {
    const std::size_t B = x.dim(0), per = x.size() / B;
    std::vector<double> v(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < B; ++i) {
        double* row = v.data() + i * per;
        double m = 0.0;
        for (std::size_t j = 0; j < per; ++j) m += row[j];
        m /= static_cast<double>(per);
        double ss = 0.0;
        for (std::size_t j = 0; j < per; ++j) ss += (row[j] - m) * (row[j] - m);
        const double sd = std::sqrt(ss / static_cast<double>(per));
        // A constant image maps to zeros.
        const double inv = sd > 1e-12 ? 1.0 / sd : 0.0;
        for (std::size_t j = 0; j < per; ++j) row[j] = (row[j] - m) * inv;
    }
    return Tensor(x.shape(), std::move(v));
}

/// E: B x input -> B x D_h. Accepts flat rows or, in conv mode, B x C x H x W.
inline Tensor encode(const Tensor& x, const EncoderParams& params) {
    const auto& spec = params.spec;
    const std::size_t B = x.dim(0);
    Tensor h;
    if (spec.kind == EncoderKind::conv) {
        const std::size_t C = spec.in_channels, S = spec.image_size;
        Tensor img = x;
        if (x.rank() == 2) {
            if (x.dim(1) != C * S * S)
                throw ShapeError("encode: expected rows of " + std::to_string(C * S * S) + " values, got " +
                                 to_string(x.shape()));
            img = reshape(x, {B, C, S, S});
        } else if (x.shape() != Shape{B, C, S, S}) {
            throw ShapeError("encode: input " + to_string(x.shape()) + " does not match encoder");
        }
        if (spec.standardize_input) img = standardize_rows(img);
        const Tensor z = conv2d_3x3(img, params.convs[0].weight, params.convs[0].bias);
        h = avg_pool2(spec.first_activation == FirstActivation::abs ? abs(z) : relu(z));
        h = avg_pool2(relu(conv2d_3x3(h, params.convs[1].weight, params.convs[1].bias)));
        h = reshape(h, {B, h.size() / B});
    } else {
        if (x.rank() != 2 || x.dim(1) != spec.input_dim)
            throw ShapeError("encode: input " + to_string(x.shape()) + " does not match encoder");
        h = x;
        for (std::size_t i = 0; i + 1 < params.layers.size(); ++i) h = relu(params.layers[i].forward(h));
    }
    return params.layers.back().forward(h);
}

/// H: per-sample, per-channel weight map in (0,1).
inline Tensor compute_mask(const Tensor& h, const MaskNetParams& params) {
    return sigmoid(params.second.forward(relu(params.first.forward(h))));
}

struct DisentangledPair {
    Tensor h_tr;  // task-relevant: M * h
    Tensor h_ti;  // task-irrelevant: (1 - M) * h
    Tensor mask;
};

inline DisentangledPair disentangle(const Tensor& h, const Tensor& mask) {
    if (h.shape() != mask.shape())
        throw ShapeError("disentangle: mask " + to_string(mask.shape()) + " vs hidden " + to_string(h.shape()));
    return {mul(mask, h), mul(one_minus(mask), h), mask};
}

struct TaskOutput {
    Tensor embedding;   // post-ReLU, B x D_emb
    Tensor normalized;  // L2-normalized rows of embedding, used for cosine similarities
    Tensor logits;      // B x C_s
};

/// T: embedding plus source-class logits.
inline TaskOutput task_forward(const Tensor& r, const TaskNetParams& params) {
    TaskOutput out;
    out.embedding = relu(params.embed.forward(r));
    out.normalized = l2_normalize_rows(out.embedding);
    out.logits = params.head.forward(out.embedding);
    return out;
}

}  // namespace dtdn
