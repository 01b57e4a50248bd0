#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "sml/errors.hpp"
#include "sml/ops.hpp"
#include "sml/params.hpp"
#include "sml/rng.hpp"
#include "sml/tape.hpp"
#include "sml/tensor.hpp"

namespace sml {

enum class MixerKind { Cnn, Ssa, Csa, SsaCnn, CsaCnn };

inline const char* mixer_kind_name(MixerKind k) {
    switch (k) {
        case MixerKind::Cnn: return "cnn";
        case MixerKind::Ssa: return "ssa";
        case MixerKind::Csa: return "csa";
        case MixerKind::SsaCnn: return "ssa-cnn";
        case MixerKind::CsaCnn: return "csa-cnn";
    }
    throw ArgumentError("unreachable mixer kind");
}

inline MixerKind parse_mixer_kind(const std::string& s) {
    if (s == "cnn") return MixerKind::Cnn;
    if (s == "ssa") return MixerKind::Ssa;
    if (s == "csa") return MixerKind::Csa;
    if (s == "ssa-cnn") return MixerKind::SsaCnn;
    if (s == "csa-cnn") return MixerKind::CsaCnn;
    throw ArgumentError("unknown mixer kind: " + s + " (expected cnn|ssa|csa|ssa-cnn|csa-cnn)");
}

inline bool mixer_has_spatial_attn(MixerKind k) { return k == MixerKind::Ssa || k == MixerKind::SsaCnn; }
inline bool mixer_has_channel_attn(MixerKind k) { return k == MixerKind::Csa || k == MixerKind::CsaCnn; }
inline bool mixer_has_cnn(MixerKind k) {
    return k == MixerKind::Cnn || k == MixerKind::SsaCnn || k == MixerKind::CsaCnn;
}

struct ModelSpec {
    MixerKind mixer = MixerKind::Ssa;
    std::vector<std::size_t> stage_depths{3, 2, 4, 2};
    std::vector<std::size_t> stage_channels{96, 64, 32, 16};
    std::size_t patch_size = 11;
    std::size_t bands = 144;
    std::size_t classes = 15;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;

    std::size_t tokens() const { return patch_size * patch_size; }

    // Channel attention runs over sequences of length tokens(); when the head
    // count cannot split that width we fall back to a single head.
    std::size_t channel_attn_heads() const {
        return (tokens() % heads == 0) ? heads : 1;
    }

    void validate() const {
        if (stage_depths.empty() || stage_depths.size() != stage_channels.size())
            throw ArgumentError("model spec: depths and channels must be non-empty and equal length");
        for (std::size_t d : stage_depths)
            if (d == 0) throw ArgumentError("model spec: stage depth must be positive");
        for (std::size_t c : stage_channels)
            if (c == 0) throw ArgumentError("model spec: stage channel count must be positive");
        if (patch_size == 0 || patch_size % 2 == 0)
            throw ArgumentError("model spec: patch size must be odd, got " + std::to_string(patch_size));
        if (bands == 0) throw ArgumentError("model spec: band count must be positive");
        if (classes < 2) throw ArgumentError("model spec: need at least 2 classes");
        if (heads == 0) throw ArgumentError("model spec: head count must be positive");
        if (mlp_ratio == 0) throw ArgumentError("model spec: mlp ratio must be positive");
        if (mixer_has_spatial_attn(mixer)) {
            for (std::size_t c : stage_channels)
                if (c % heads != 0)
                    throw ArgumentError("model spec: head count " + std::to_string(heads) +
                                        " must divide stage width " + std::to_string(c));
        }
    }
};

inline nlohmann::json spec_to_json(const ModelSpec& s) {
    return nlohmann::json{{"mixer", mixer_kind_name(s.mixer)},
                          {"stage_depths", s.stage_depths},
                          {"stage_channels", s.stage_channels},
                          {"patch_size", s.patch_size},
                          {"bands", s.bands},
                          {"classes", s.classes},
                          {"heads", s.heads},
                          {"mlp_ratio", s.mlp_ratio}};
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    try {
        s.mixer = parse_mixer_kind(j.at("mixer").get<std::string>());
        s.stage_depths = j.at("stage_depths").get<std::vector<std::size_t>>();
        s.stage_channels = j.at("stage_channels").get<std::vector<std::size_t>>();
        s.patch_size = j.at("patch_size").get<std::size_t>();
        s.bands = j.at("bands").get<std::size_t>();
        s.classes = j.at("classes").get<std::size_t>();
        s.heads = j.at("heads").get<std::size_t>();
        s.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model spec json: ") + e.what());
    }
    s.validate();
    return s;
}

struct ComplexityReport {
    std::uint64_t parameter_count = 0;
    std::uint64_t flops = 0;
};

// The hierarchical network: per stage a 1x1-conv token embedding followed by
// a stack of mixer blocks, then average pooling and a linear classifier.
template <typename T>
class SpectralNet {
public:
    SpectralNet(ModelSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
        spec_.validate();
        Rng rng(init_seed);
        build(rng);
    }

    const ModelSpec& spec() const { return spec_; }
    ParameterStore<T>& params() { return params_; }
    const ParameterStore<T>& params() const { return params_; }

    void set_training(bool b) { training_ = b; }
    bool training() const { return training_; }

    // patches: (B, s, s, bands). Returns logits (B, classes). Parameter leaf
    // vars stay addressable through param_var() until the next forward.
    Var<T> forward(Tape<T>& tape, const Tensor<T>& patches) {
        if (patches.rank() != 4 || patches.dim(1) != spec_.patch_size ||
            patches.dim(2) != spec_.patch_size || patches.dim(3) != spec_.bands)
            throw ArgumentError("forward: expected patches (B," + std::to_string(spec_.patch_size) +
                                "," + std::to_string(spec_.patch_size) + "," + std::to_string(spec_.bands) +
                                "), got " + shape_str(patches.shape()));
        tape_ = &tape;
        leaves_.clear();
        std::size_t B = patches.dim(0);
        std::size_t s = spec_.patch_size;
        std::size_t L = s * s;
        // (B,s,s,c) row-major is already (B, L, c)
        Var<T> x = tape.constant(Tensor<T>(Shape{B, L, spec_.bands}, patches.vec()));
        for (std::size_t i = 0; i < spec_.stage_depths.size(); ++i) {
            x = token_embed(x, i);
            for (std::size_t j = 0; j < spec_.stage_depths[i]; ++j)
                x = mixer_block(x, "stage" + std::to_string(i) + ".block" + std::to_string(j) + ".",
                                spec_.stage_channels[i]);
        }
        Var<T> img = ops::seq2img(x, s);
        Var<T> pooled = ops::global_avg_pool(img);
        return ops::linear(pooled, p("head.fc.weight"), p("head.fc.bias"));
    }

    // Inference convenience: forward without recording gradients.
    Tensor<T> logits(const Tensor<T>& patches) {
        Tape<T> tape;
        tape.set_grad_enabled(false);
        return forward(tape, patches).value();
    }

    // Leaf var of a parameter from the most recent forward.
    Var<T> param_var(const std::string& name) {
        auto it = leaves_.find(name);
        if (it == leaves_.end()) throw ArgumentError("no leaf recorded for parameter: " + name);
        return it->second;
    }

    // Gradients of all trainable entries, flattened in registry order; call
    // after tape.backward on a loss built from forward().
    std::vector<T> trainable_grads() {
        std::vector<T> out;
        out.reserve(params_.trainable_scalar_count());
        for (const auto& e : params_.entries()) {
            if (!e.trainable) continue;
            auto it = leaves_.find(e.name);
            if (it == leaves_.end()) {
                out.insert(out.end(), e.value.size(), T(0));
                continue;
            }
            Tensor<T> g = it->second.grad();
            out.insert(out.end(), g.vec().begin(), g.vec().end());
        }
        return out;
    }

private:
    Var<T> p(const std::string& name) {
        auto it = leaves_.find(name);
        if (it != leaves_.end()) return it->second;
        auto& entry_value = params_.get(name);
        bool trainable = false;
        for (const auto& e : params_.entries())
            if (e.name == name) {
                trainable = e.trainable;
                break;
            }
        Var<T> v = tape_->leaf(entry_value, trainable);
        leaves_.emplace(name, v);
        return v;
    }

    // ---- construction ----

    Tensor<T> uniform_init(Rng& rng, Shape shape, double bound) {
        Tensor<T> t(std::move(shape));
        for (std::size_t i = 0; i < t.size(); ++i)
            t[i] = static_cast<T>((rng.uniform() * 2.0 - 1.0) * bound);
        return t;
    }

    void add_conv(Rng& rng, const std::string& pfx, std::size_t cout, std::size_t cin, std::size_t k) {
        double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
        params_.add(pfx + "weight", uniform_init(rng, Shape{cout, cin, k, k}, bound));
        params_.add(pfx + "bias", uniform_init(rng, Shape{cout}, bound));
    }

    void add_linear(Rng& rng, const std::string& pfx, std::size_t out, std::size_t in) {
        double bound = 1.0 / std::sqrt(static_cast<double>(in));
        params_.add(pfx + "weight", uniform_init(rng, Shape{out, in}, bound));
        params_.add(pfx + "bias", uniform_init(rng, Shape{out}, bound));
    }

    void add_layer_norm(const std::string& pfx, std::size_t n) {
        params_.add(pfx + "gamma", Tensor<T>(Shape{n}, T(1)));
        params_.add(pfx + "beta", Tensor<T>(Shape{n}, T(0)));
    }

    void add_cn_block(Rng& rng, const std::string& pfx, std::size_t C) {
        add_conv(rng, pfx + "conv1.", 4 * C, C, 3);
        params_.add(pfx + "bn.gamma", Tensor<T>(Shape{4 * C}, T(1)));
        params_.add(pfx + "bn.beta", Tensor<T>(Shape{4 * C}, T(0)));
        params_.add(pfx + "bn.running_mean", Tensor<T>(Shape{4 * C}, T(0)), false);
        params_.add(pfx + "bn.running_var", Tensor<T>(Shape{4 * C}, T(1)), false);
        add_conv(rng, pfx + "conv2.", C, 4 * C, 3);
    }

    void add_attention(Rng& rng, const std::string& pfx, std::size_t width) {
        add_linear(rng, pfx + "q.", width, width);
        add_linear(rng, pfx + "k.", width, width);
        add_linear(rng, pfx + "v.", width, width);
        add_linear(rng, pfx + "proj.", width, width);
    }

    void add_mlp(Rng& rng, const std::string& pfx, std::size_t width) {
        std::size_t hidden = spec_.mlp_ratio * width;
        add_linear(rng, pfx + "mlp.fc1.", hidden, width);
        add_linear(rng, pfx + "mlp.fc2.", width, hidden);
    }

    void build(Rng& rng) {
        std::size_t L = spec_.tokens();
        std::size_t prev = spec_.bands;
        for (std::size_t i = 0; i < spec_.stage_depths.size(); ++i) {
            std::size_t C = spec_.stage_channels[i];
            add_conv(rng, "stage" + std::to_string(i) + ".embed.", C, prev, 1);
            for (std::size_t j = 0; j < spec_.stage_depths[i]; ++j) {
                std::string pfx = "stage" + std::to_string(i) + ".block" + std::to_string(j) + ".";
                std::size_t attn_width = mixer_has_channel_attn(spec_.mixer) ? L : C;
                switch (spec_.mixer) {
                    case MixerKind::Cnn:
                        add_cn_block(rng, pfx + "cnn.", C);
                        add_layer_norm(pfx + "norm2.", C);
                        add_mlp(rng, pfx, C);
                        break;
                    case MixerKind::Ssa:
                    case MixerKind::Csa:
                        add_layer_norm(pfx + "norm1.", attn_width);
                        add_attention(rng, pfx + "attn.", attn_width);
                        add_layer_norm(pfx + "norm2.", attn_width);
                        add_mlp(rng, pfx, attn_width);
                        break;
                    case MixerKind::SsaCnn:
                    case MixerKind::CsaCnn:
                        add_layer_norm(pfx + "norm1.", attn_width);
                        add_attention(rng, pfx + "attn.", attn_width);
                        add_cn_block(rng, pfx + "cnn.", C);
                        add_layer_norm(pfx + "norm2.", attn_width);
                        add_mlp(rng, pfx, attn_width);
                        break;
                }
            }
            prev = C;
        }
        add_linear(rng, "head.fc.", spec_.classes, prev);
    }

    // ---- forward pieces ----

    Var<T> token_embed(Var<T> x, std::size_t stage) {
        Var<T> img = ops::seq2img(x, spec_.patch_size);
        std::string pfx = "stage" + std::to_string(stage) + ".embed.";
        Var<T> y = ops::conv2d(img, p(pfx + "weight"), p(pfx + "bias"), 0);
        return ops::img2seq(y);
    }

    Var<T> cn_block(Var<T> img, const std::string& pfx) {
        Var<T> h = ops::conv2d(img, p(pfx + "conv1.weight"), p(pfx + "conv1.bias"), 1);
        h = ops::batch_norm2d(h, p(pfx + "bn.gamma"), p(pfx + "bn.beta"),
                              params_.get(pfx + "bn.running_mean"), params_.get(pfx + "bn.running_var"),
                              training_);
        h = ops::silu(h);
        return ops::conv2d(h, p(pfx + "conv2.weight"), p(pfx + "conv2.bias"), 1);
    }

    Var<T> layer_norm_at(Var<T> x, const std::string& pfx) {
        return ops::layer_norm(x, p(pfx + "gamma"), p(pfx + "beta"));
    }

    Var<T> msa(Var<T> x, const std::string& pfx, std::size_t heads) {
        std::size_t D = x.shape()[2];
        std::size_t dh = D / heads;
        Var<T> q = ops::linear(x, p(pfx + "q.weight"), p(pfx + "q.bias"));
        Var<T> k = ops::linear(x, p(pfx + "k.weight"), p(pfx + "k.bias"));
        Var<T> v = ops::linear(x, p(pfx + "v.weight"), p(pfx + "v.bias"));
        Var<T> qh = ops::split_heads(q, heads);
        Var<T> kh = ops::split_heads(k, heads);
        Var<T> vh = ops::split_heads(v, heads);
        Var<T> att = ops::matmul_batched(qh, ops::transpose_last2(kh));
        att = ops::scale(att, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
        att = ops::softmax_lastdim(att);
        Var<T> out = ops::merge_heads(ops::matmul_batched(att, vh), heads);
        return ops::linear(out, p(pfx + "proj.weight"), p(pfx + "proj.bias"));
    }

    Var<T> mlp(Var<T> x, const std::string& pfx) {
        Var<T> h = ops::linear(x, p(pfx + "mlp.fc1.weight"), p(pfx + "mlp.fc1.bias"));
        return ops::linear(ops::gelu(h), p(pfx + "mlp.fc2.weight"), p(pfx + "mlp.fc2.bias"));
    }

    Var<T> mixer_block(Var<T> x, const std::string& pfx, std::size_t C) {
        std::size_t s = spec_.patch_size;
        switch (spec_.mixer) {
            case MixerKind::Cnn: {
                Var<T> xi = ops::seq2img(x, s);
                Var<T> y = ops::add(xi, cn_block(xi, pfx + "cnn."));
                Var<T> yh = ops::img2seq(y);
                return ops::add(yh, mlp(layer_norm_at(yh, pfx + "norm2."), pfx));
            }
            case MixerKind::Ssa: {
                Var<T> y = ops::add(x, msa(layer_norm_at(x, pfx + "norm1."), pfx + "attn.", spec_.heads));
                return ops::add(y, mlp(layer_norm_at(y, pfx + "norm2."), pfx));
            }
            case MixerKind::Csa: {
                Var<T> xt = ops::transpose_last2(x);
                Var<T> y = ops::add(xt, msa(layer_norm_at(xt, pfx + "norm1."), pfx + "attn.",
                                            spec_.channel_attn_heads()));
                Var<T> z = ops::add(y, mlp(layer_norm_at(y, pfx + "norm2."), pfx));
                return ops::transpose_last2(z);
            }
            case MixerKind::SsaCnn: {
                Var<T> attn_b = msa(layer_norm_at(x, pfx + "norm1."), pfx + "attn.", spec_.heads);
                Var<T> cnn_b = ops::img2seq(cn_block(ops::seq2img(x, s), pfx + "cnn."));
                Var<T> y = ops::add(ops::add(x, attn_b), cnn_b);
                return ops::add(y, mlp(layer_norm_at(y, pfx + "norm2."), pfx));
            }
            case MixerKind::CsaCnn: {
                std::size_t B = x.shape()[0];
                std::size_t L = x.shape()[1];
                Var<T> xt = ops::transpose_last2(x);
                Var<T> attn_b = msa(layer_norm_at(xt, pfx + "norm1."), pfx + "attn.",
                                    spec_.channel_attn_heads());
                // CNN branch reads the pre-transpose input; its (B,C,s,s)
                // output flattens straight into channel-sequence layout.
                Var<T> cnn_b = ops::reshape(cn_block(ops::seq2img(x, s), pfx + "cnn."), Shape{B, C, L});
                Var<T> y = ops::add(ops::add(xt, attn_b), cnn_b);
                Var<T> z = ops::add(y, mlp(layer_norm_at(y, pfx + "norm2."), pfx));
                return ops::transpose_last2(z);
            }
        }
        throw ArgumentError("unreachable mixer kind");
    }

    ModelSpec spec_;
    ParameterStore<T> params_;
    bool training_ = false;
    Tape<T>* tape_ = nullptr;
    std::unordered_map<std::string, Var<T>> leaves_;
};

// Parameter/FLOP accounting done analytically from the ModelSpec, independent
// of the builder above; tests cross-check the two.
inline ComplexityReport complexity_report(const ModelSpec& spec, std::size_t batch) {
    spec.validate();
    if (batch == 0) throw ArgumentError("complexity: batch must be positive");
    std::uint64_t P = 0;   // parameters
    std::uint64_t M = 0;   // multiply-accumulates, per forward at `batch`
    std::uint64_t B = batch;
    std::uint64_t L = spec.tokens();
    std::uint64_t prev = spec.bands;

    auto lin = [&](std::uint64_t out, std::uint64_t in, std::uint64_t tokens) {
        P += out * in + out;
        M += B * tokens * in * out;
    };
    auto conv = [&](std::uint64_t cout, std::uint64_t cin, std::uint64_t k) {
        P += cout * cin * k * k + cout;
        M += B * cout * L * cin * k * k;  // spatial size preserved
    };
    auto ln = [&](std::uint64_t n) { P += 2 * n; };
    auto cnb = [&](std::uint64_t C) {
        conv(4 * C, C, 3);
        P += 2 * (4 * C);  // BN affine
        conv(C, 4 * C, 3);
    };
    auto attention = [&](std::uint64_t width, std::uint64_t tokens, std::uint64_t heads) {
        for (int i = 0; i < 4; ++i) lin(width, width, tokens);  // q,k,v,proj
        std::uint64_t dh = width / heads;
        M += 2 * B * heads * tokens * tokens * dh;  // QK^T and att@V
    };
    auto mlp = [&](std::uint64_t width, std::uint64_t tokens) {
        lin(spec.mlp_ratio * width, width, tokens);
        lin(width, spec.mlp_ratio * width, tokens);
    };

    for (std::size_t i = 0; i < spec.stage_depths.size(); ++i) {
        std::uint64_t C = spec.stage_channels[i];
        conv(C, prev, 1);  // token embedding
        for (std::size_t j = 0; j < spec.stage_depths[i]; ++j) {
            switch (spec.mixer) {
                case MixerKind::Cnn:
                    cnb(C);
                    ln(C);
                    mlp(C, L);
                    break;
                case MixerKind::Ssa:
                    ln(C);
                    attention(C, L, spec.heads);
                    ln(C);
                    mlp(C, L);
                    break;
                case MixerKind::Csa:
                    ln(L);
                    attention(L, C, spec.channel_attn_heads());
                    ln(L);
                    mlp(L, C);
                    break;
                case MixerKind::SsaCnn:
                    ln(C);
                    attention(C, L, spec.heads);
                    cnb(C);
                    ln(C);
                    mlp(C, L);
                    break;
                case MixerKind::CsaCnn:
                    ln(L);
                    attention(L, C, spec.channel_attn_heads());
                    cnb(C);
                    ln(L);
                    mlp(L, C);
                    break;
            }
        }
        prev = C;
    }
    lin(spec.classes, prev, 1);  // head FC on the pooled vector
    return ComplexityReport{P, 2 * M};
}

}  // namespace sml
