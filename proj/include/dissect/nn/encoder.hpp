#pragma once

// Three-stage convolutional backbone with multi-scale taps, plus the MLP
// projection and prediction heads.
//
// Each stage is conv3x3(stride 2) -> GroupNorm -> ReLU -> conv3x3 ->
// GroupNorm -> ReLU. The stage outputs are the fine, medium and coarse maps
// (input/2, /4, /8). The pooled embedding is the spatial mean of the coarse
// stage output. Heads are Linear -> BatchNorm -> ReLU -> Linear.

#include "dissect/core/error.hpp"
#include "dissect/core/param_store.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/core/types.hpp"
#include "dissect/datagen/phantom.hpp"
#include "dissect/nn/layers.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace dissect::nn {

struct EncoderConfig {
    int input_size = 32;
    int input_channels = 1;
    std::array<int, 3> stage_channels{16, 32, 64};  // fine, medium, coarse
    int embed_dim = 64;                             // codeword dimension d
    int proj_hidden = 128;
    int proj_out = 64;
    int norm_groups = 4;
    bool tap_pre_activation = false;

    void validate() const {
        if (input_size % 8 != 0 || input_size / 8 < 2)
            throw ConfigError("encoder input_size must be a multiple of 8 and at least 16");
        for (int c : stage_channels) {
            if (c < 1) throw ConfigError("stage channels must be positive");
            if (c % norm_groups != 0) throw ConfigError("stage channels must be divisible by norm_groups");
        }
        if (norm_groups < 1) throw ConfigError("norm_groups must be >= 1");
        if (embed_dim < 1 || proj_hidden < 1 || proj_out < 1) throw ConfigError("head widths must be positive");
        if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    }

    int fine_channels() const { return stage_channels[0]; }
    int medium_channels() const { return stage_channels[1]; }
    int coarse_channels() const { return stage_channels[2]; }
};

template <typename T>
struct MultiScaleFeatures {
    FeatureMap<T> z_f;  // fine:   c_f x H/2 x W/2
    FeatureMap<T> z_m;  // medium: c_m x H/4 x W/4
    FeatureMap<T> z_c;  // coarse: c_c x H/8 x W/8
    Mat<T> pooled;      // c_c x batch
};

template <typename T>
struct Embeddings {
    Mat<T> g;  // projection output, proj_out x batch
    Mat<T> h;  // prediction output, proj_out x batch (empty without predictor)
};

template <typename T>
struct StageTape {
    ConvCache<T> conv_a, conv_b;
    GroupNormCache<T> norm_a, norm_b;
    Mat<T> relu_a;  // activations after the first ReLU
    Mat<T> relu_b;  // stage output
};

template <typename T>
struct HeadTape {
    Mat<T> input;
    BatchNormCache<T> bn;
    Mat<T> hidden;  // after ReLU
};

template <typename T>
struct EncoderTape {
    std::array<StageTape<T>, 3> stages;
    std::array<Index, 3> heights{};
    std::array<Index, 3> widths{};
    Index batch = 0;
    bool has_proj = false;
    bool has_pred = false;
    HeadTape<T> proj;
    HeadTape<T> pred;
};

template <typename T>
struct ForwardResult {
    MultiScaleFeatures<T> features;
    Embeddings<T> embeddings;
    EncoderTape<T> tape;
};

// Upstream gradients; empty matrices stand for zero.
template <typename T>
struct EncoderUpstream {
    Mat<T> dz_f, dz_m, dz_c, dpooled, dg, dh;
};

enum class Heads { none, projection, projection_and_prediction };

inline std::string stage_prefix(int s) { return "backbone.stage" + std::to_string(s + 1); }

template <typename T>
FeatureMap<T> images_to_batch(const std::vector<datagen::Image>& images) {
    if (images.empty()) throw ShapeError("empty image batch");
    const int rows = images[0].rows;
    const int cols = images[0].cols;
    FeatureMap<T> x(1, rows, cols, static_cast<Index>(images.size()));
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (images[b].rows != rows || images[b].cols != cols) throw ShapeError("images in a batch differ in size");
        for (std::size_t i = 0; i < images[b].pixels.size(); ++i)
            x.data(0, static_cast<Index>(b * images[b].pixels.size() + i)) = static_cast<T>(images[b].pixels[i]);
    }
    return x;
}

template <typename T>
class Encoder {
public:
    explicit Encoder(EncoderConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const EncoderConfig& config() const { return cfg_; }

    ParamStore<T> init_params(std::uint64_t seed) const {
        ParamStore<T> p;
        int cin = cfg_.input_channels;
        for (int s = 0; s < 3; ++s) {
            const int c = cfg_.stage_channels[s];
            const std::string pre = stage_prefix(s);
            p.add(pre + ".conv_a.weight", {c, 3, 3, cin}, ParamKind::weight);
            p.add(pre + ".conv_a.bias", {c}, ParamKind::bias);
            p.add(pre + ".norm_a.gamma", {c}, ParamKind::norm).setOnes();
            p.add(pre + ".norm_a.beta", {c}, ParamKind::norm);
            p.add(pre + ".conv_b.weight", {c, 3, 3, c}, ParamKind::weight);
            p.add(pre + ".conv_b.bias", {c}, ParamKind::bias);
            p.add(pre + ".norm_b.gamma", {c}, ParamKind::norm).setOnes();
            p.add(pre + ".norm_b.beta", {c}, ParamKind::norm);
            cin = c;
        }
        add_head(p, "proj", cfg_.coarse_channels(), cfg_.proj_hidden, cfg_.proj_out);
        add_head(p, "pred", cfg_.proj_out, cfg_.proj_hidden, cfg_.proj_out);

        Rng rng = make_rng(derive_seed(seed, 0x656e63));
        for (auto& prm : p) {
            if (prm.kind != ParamKind::weight) continue;
            const double fan_in = static_cast<double>(prm.value.cols());
            const double bound = std::sqrt(6.0 / fan_in);
            for (Index i = 0; i < prm.value.size(); ++i) prm.value.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
        }
        return p;
    }

    ForwardResult<T> forward(const ParamStore<T>& p, const FeatureMap<T>& x, Heads heads) const {
        if (x.height != cfg_.input_size || x.width != cfg_.input_size || x.channels != cfg_.input_channels)
            throw ShapeError("encoder input must be " + std::to_string(cfg_.input_channels) + "x" +
                             std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) + ", got " +
                             std::to_string(x.channels) + "x" + std::to_string(x.height) + "x" +
                             std::to_string(x.width));
        ForwardResult<T> r;
        auto& tape = r.tape;
        tape.batch = x.batch;
        const T eps = static_cast<T>(1e-5);
        const Index groups = cfg_.norm_groups;

        std::array<FeatureMap<T>, 3> taps;
        const FeatureMap<T>* in = &x;
        std::array<FeatureMap<T>, 3> outs;
        for (int s = 0; s < 3; ++s) {
            const std::string pre = stage_prefix(s);
            auto& st = tape.stages[s];
            FeatureMap<T> a = conv3x3_forward(*in, p[pre + ".conv_a.weight"], p[pre + ".conv_a.bias"], 2, &st.conv_a);
            a = group_norm_forward(a, p[pre + ".norm_a.gamma"], p[pre + ".norm_a.beta"], groups, eps, &st.norm_a);
            a.data = relu(a.data);
            st.relu_a = a.data;
            FeatureMap<T> b = conv3x3_forward(a, p[pre + ".conv_b.weight"], p[pre + ".conv_b.bias"], 1, &st.conv_b);
            b = group_norm_forward(b, p[pre + ".norm_b.gamma"], p[pre + ".norm_b.beta"], groups, eps, &st.norm_b);
            if (cfg_.tap_pre_activation) taps[s] = b;
            b.data = relu(b.data);
            st.relu_b = b.data;
            if (!cfg_.tap_pre_activation) taps[s] = b;
            tape.heights[s] = b.height;
            tape.widths[s] = b.width;
            outs[s] = std::move(b);
            in = &outs[s];
        }
        r.features.pooled = global_avg_pool(outs[2]);
        r.features.z_f = std::move(taps[0]);
        r.features.z_m = std::move(taps[1]);
        r.features.z_c = std::move(taps[2]);

        if (heads != Heads::none) {
            tape.has_proj = true;
            r.embeddings.g = head_forward(p, "proj", r.features.pooled, tape.proj);
        }
        if (heads == Heads::projection_and_prediction) {
            tape.has_pred = true;
            r.embeddings.h = head_forward(p, "pred", r.embeddings.g, tape.pred);
        }
        return r;
    }

    // Exact gradient of <outputs, upstream> with respect to every parameter.
    ParamStore<T> backward(const ParamStore<T>& p, const ForwardResult<T>& fwd, const EncoderUpstream<T>& up) const {
        ParamStore<T> grads = p.zeros_like();
        backward_into(p, fwd, up, grads);
        return grads;
    }

    void backward_into(const ParamStore<T>& p, const ForwardResult<T>& fwd, const EncoderUpstream<T>& up,
                       ParamStore<T>& grads) const {
        const auto& tape = fwd.tape;
        const Index groups = cfg_.norm_groups;

        Mat<T> dg = up.dg;
        if (up.dh.size() != 0) {
            if (!tape.has_pred) throw ShapeError("upstream dh given but forward ran without the predictor");
            Mat<T> d = head_backward(p, grads, "pred", up.dh, tape.pred);
            if (dg.size() == 0) dg = std::move(d);
            else dg += d;
        }
        Mat<T> dpooled = up.dpooled;
        if (dg.size() != 0) {
            if (!tape.has_proj) throw ShapeError("upstream dg given but forward ran without the projection head");
            Mat<T> d = head_backward(p, grads, "proj", dg, tape.proj);
            if (dpooled.size() == 0) dpooled = std::move(d);
            else dpooled += d;
        }

        const std::array<const Mat<T>*, 3> tap_grads{&up.dz_f, &up.dz_m, &up.dz_c};
        // Gradient w.r.t. the post-activation output of the stage being processed.
        FeatureMap<T> dout;
        bool have = false;
        for (int s = 2; s >= 0; --s) {
            const auto& st = tape.stages[s];
            const Index c = cfg_.stage_channels[s];
            const Index h = tape.heights[s];
            const Index w = tape.widths[s];
            if (!have) {
                dout = FeatureMap<T>(c, h, w, tape.batch);
            }
            if (s == 2 && dpooled.size() != 0) {
                global_avg_pool_backward(dpooled, dout);
                have = true;
            }
            const Mat<T>& dtap = *tap_grads[s];
            if (dtap.size() != 0 && !cfg_.tap_pre_activation) {
                dout.data += dtap;
                have = true;
            }
            if (!have && !(dtap.size() != 0 && cfg_.tap_pre_activation)) continue;

            const std::string pre = stage_prefix(s);
            FeatureMap<T> dn = dout;
            dn.data = relu_backward(dout.data, st.relu_b);
            if (dtap.size() != 0 && cfg_.tap_pre_activation) dn.data += dtap;
            FeatureMap<T> db = group_norm_backward(dn, p[pre + ".norm_b.gamma"], st.norm_b, groups,
                                                   grads[pre + ".norm_b.gamma"], grads[pre + ".norm_b.beta"]);
            FeatureMap<T> da = conv3x3_backward(db, p[pre + ".conv_b.weight"], st.conv_b,
                                                grads[pre + ".conv_b.weight"], grads[pre + ".conv_b.bias"], true);
            da.data = relu_backward(da.data, st.relu_a);
            FeatureMap<T> dna = group_norm_backward(da, p[pre + ".norm_a.gamma"], st.norm_a, groups,
                                                    grads[pre + ".norm_a.gamma"], grads[pre + ".norm_a.beta"]);
            const bool need_input = s > 0;
            FeatureMap<T> din = conv3x3_backward(dna, p[pre + ".conv_a.weight"], st.conv_a,
                                                 grads[pre + ".conv_a.weight"], grads[pre + ".conv_a.bias"],
                                                 need_input);
            if (need_input) {
                dout = std::move(din);
                have = true;
            }
        }
    }

private:
    static void add_head(ParamStore<T>& p, const std::string& name, int in, int hidden, int out) {
        p.add(name + ".fc1.weight", {hidden, in}, ParamKind::weight);
        p.add(name + ".fc1.bias", {hidden}, ParamKind::bias);
        p.add(name + ".bn.gamma", {hidden}, ParamKind::norm).setOnes();
        p.add(name + ".bn.beta", {hidden}, ParamKind::norm);
        p.add(name + ".fc2.weight", {out, hidden}, ParamKind::weight);
        p.add(name + ".fc2.bias", {out}, ParamKind::bias);
    }

    static Mat<T> head_forward(const ParamStore<T>& p, const std::string& name, const Mat<T>& x, HeadTape<T>& tape) {
        tape.input = x;
        Mat<T> a = linear_forward(x, p[name + ".fc1.weight"], p[name + ".fc1.bias"]);
        a = batch_norm_forward(a, p[name + ".bn.gamma"], p[name + ".bn.beta"], static_cast<T>(1e-5), &tape.bn);
        tape.hidden = relu(a);
        return linear_forward(tape.hidden, p[name + ".fc2.weight"], p[name + ".fc2.bias"]);
    }

    static Mat<T> head_backward(const ParamStore<T>& p, ParamStore<T>& grads, const std::string& name,
                                const Mat<T>& dy, const HeadTape<T>& tape) {
        Mat<T> dh = linear_backward(dy, tape.hidden, p[name + ".fc2.weight"], grads[name + ".fc2.weight"],
                                    grads[name + ".fc2.bias"]);
        dh = relu_backward(dh, tape.hidden);
        dh = batch_norm_backward(dh, p[name + ".bn.gamma"], tape.bn, grads[name + ".bn.gamma"], grads[name + ".bn.beta"]);
        return linear_backward(dh, tape.input, p[name + ".fc1.weight"], grads[name + ".fc1.weight"],
                               grads[name + ".fc1.bias"]);
    }

    EncoderConfig cfg_;
};

}  // namespace dissect::nn
