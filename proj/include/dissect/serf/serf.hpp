#pragma once

// Structured embedding refinement fusion. The quantized maps of one sample
// are pooled to the coarse grid and mixed with per-scale weights; the global
// embedding h_phi scores the fused tokens, the attention-weighted token is
// passed through a two-layer head and becomes the target q_t.

#include "dissect/core/error.hpp"
#include "dissect/core/param_store.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/core/types.hpp"
#include "dissect/nn/layers.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace dissect::serf {

// Scale slots follow the (coarse, medium, fine) order of the fusion weights.
inline constexpr int kCoarse = 0;
inline constexpr int kMedium = 1;
inline constexpr int kFine = 2;

enum class RefineMode { token_value, paper_literal };

// full: fuse -> refine -> head. concat: head([q_phi; h_phi]).
enum class Fusion { full, concat };

inline RefineMode parse_refine_mode(const std::string& s) {
    if (s == "token_value") return RefineMode::token_value;
    if (s == "paper_literal") return RefineMode::paper_literal;
    throw ConfigError("unknown serf mode '" + s + "' (expected token_value|paper_literal)");
}
inline const char* to_string(RefineMode m) { return m == RefineMode::token_value ? "token_value" : "paper_literal"; }

struct SerfConfig {
    std::array<double, 3> alpha{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    bool trainable_alpha = false;
    RefineMode mode = RefineMode::token_value;
    Fusion fusion = Fusion::full;
    bool post_head = true;
    int dim = 64;
    int hidden = 128;

    void validate() const {
        for (double a : alpha)
            if (!(a >= 0.0) || !std::isfinite(a)) throw ConfigError("serf alpha components must be finite and >= 0");
        if (dim < 1 || hidden < 1) throw ConfigError("serf widths must be positive");
        if (fusion == Fusion::concat && !post_head)
            throw ConfigError("concat fusion needs the post-fusion head");
    }

    int head_input() const { return fusion == Fusion::concat ? 2 * dim : dim; }
};

// Adds serf.alpha and the head parameters to a store.
template <typename T>
void add_params(ParamStore<T>& p, const SerfConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Mat<T>& alpha = p.add("serf.alpha", {3}, ParamKind::norm);
    for (int j = 0; j < 3; ++j) alpha(j, 0) = static_cast<T>(cfg.alpha[static_cast<std::size_t>(j)]);
    if (!cfg.post_head) return;
    Mat<T>& w1 = p.add("serf.head.fc1.weight", {cfg.hidden, cfg.head_input()}, ParamKind::weight);
    p.add("serf.head.fc1.bias", {cfg.hidden}, ParamKind::bias);
    Mat<T>& w2 = p.add("serf.head.fc2.weight", {cfg.dim, cfg.hidden}, ParamKind::weight);
    p.add("serf.head.fc2.bias", {cfg.dim}, ParamKind::bias);
    Rng rng = make_rng(derive_seed(seed, 0x73657266));
    for (Mat<T>* w : {&w1, &w2}) {
        const double bound = std::sqrt(6.0 / static_cast<double>(w->cols()));
        for (Index i = 0; i < w->size(); ++i) w->data()[i] = static_cast<T>(uniform(rng, -bound, bound));
    }
}

// One sample's quantized tokens at one scale: d x (h*w), row-major grid.
template <typename T>
struct ScaleTokens {
    Mat<T> tokens;
    Index height = 0;
    Index width = 0;
};

template <typename T>
struct FusedTokens {
    Mat<T> tokens;  // d x Tc
    Vec<T> pooled;  // q_phi
    std::array<Mat<T>, 3> pooled_scales;  // per-scale inputs on the coarse grid (empty if inactive)
};

// Scales with an empty token matrix are treated as absent.
template <typename T>
FusedTokens<T> fuse(const std::array<ScaleTokens<T>, 3>& scales, const std::array<T, 3>& alpha) {
    const auto& coarse = scales[kCoarse];
    Index gh = coarse.height;
    Index gw = coarse.width;
    Index d = coarse.tokens.rows();
    if (coarse.tokens.size() == 0) {
        // Without the coarse map the grid comes from the coarsest active scale.
        for (int j = kMedium; j <= kFine; ++j) {
            const auto& s = scales[static_cast<std::size_t>(j)];
            if (s.tokens.size() == 0) continue;
            if (gh == 0 || s.height < gh) {
                gh = s.height;
                gw = s.width;
                d = s.tokens.rows();
            }
        }
    }
    if (gh == 0) throw ShapeError("fuse: no active scale");
    FusedTokens<T> f;
    f.tokens = Mat<T>::Zero(d, gh * gw);
    for (int j = 0; j < 3; ++j) {
        const auto& s = scales[static_cast<std::size_t>(j)];
        if (s.tokens.size() == 0) continue;
        if (s.tokens.rows() != d) throw ShapeError("fuse: scales disagree on codeword dim");
        if (s.height % gh != 0 || s.width % gw != 0 || s.height / gh != s.width / gw)
            throw ShapeError("fuse: " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                             " grid is not an integer multiple of " + std::to_string(gh) + "x" + std::to_string(gw));
        if (s.tokens.cols() != s.height * s.width) throw ShapeError("fuse: token count does not match grid");
        const Index factor = s.height / gh;
        Mat<T>& pooled = f.pooled_scales[static_cast<std::size_t>(j)];
        pooled = factor == 1 ? s.tokens : nn::avg_pool_sample(s.tokens, s.height, s.width, factor);
        const T a = alpha[static_cast<std::size_t>(j)];
        if (a != T(0)) f.tokens += a * pooled;
    }
    f.pooled = f.tokens.rowwise().mean();
    return f;
}

template <typename T>
struct RefineResult {
    Vec<T> k;
    Vec<T> weights;  // softmax weights, empty in paper_literal mode
};

template <typename T>
RefineResult<T> refine(const Mat<T>& tokens, const Vec<T>& h_phi, RefineMode mode) {
    if (tokens.rows() != h_phi.size()) throw ShapeError("refine: token dim differs from embedding dim");
    RefineResult<T> r;
    if (mode == RefineMode::paper_literal) {
        r.k = h_phi;
        return r;
    }
    const T scale = T(1) / std::sqrt(static_cast<T>(tokens.rows()));
    Vec<T> s = (tokens.transpose() * h_phi) * scale;
    const T top = s.maxCoeff();
    r.weights = (s.array() - top).exp().matrix();
    r.weights /= r.weights.sum();
    r.k = tokens * r.weights;
    return r;
}

// Gradients of <k, dk> with respect to the tokens and h_phi.
template <typename T>
void refine_backward(const Mat<T>& tokens, const Vec<T>& h_phi, const RefineResult<T>& r, RefineMode mode,
                     const Vec<T>& dk, Mat<T>* dtokens, Vec<T>* dh) {
    if (mode == RefineMode::paper_literal) {
        if (dh) *dh += dk;
        return;
    }
    const T scale = T(1) / std::sqrt(static_cast<T>(tokens.rows()));
    const Vec<T> dw = tokens.transpose() * dk;
    const T mean_dw = r.weights.dot(dw);
    const Vec<T> ds = r.weights.cwiseProduct((dw.array() - mean_dw).matrix());
    if (dtokens) {
        *dtokens += dk * r.weights.transpose();
        *dtokens += (h_phi * scale) * ds.transpose();
    }
    if (dh) *dh += (tokens * ds) * scale;
}

template <typename T>
struct HeadTape {
    Mat<T> input;
    Mat<T> hidden;  // post-ReLU
};

// Linear -> ReLU -> Linear over columns of x.
template <typename T>
Mat<T> head_forward(const ParamStore<T>& p, const Mat<T>& x, HeadTape<T>* tape) {
    Mat<T> hidden = nn::relu(nn::linear_forward(x, p["serf.head.fc1.weight"], p["serf.head.fc1.bias"]));
    Mat<T> y = nn::linear_forward(hidden, p["serf.head.fc2.weight"], p["serf.head.fc2.bias"]);
    if (tape) {
        tape->input = x;
        tape->hidden = std::move(hidden);
    }
    return y;
}

template <typename T>
Mat<T> head_backward(const ParamStore<T>& p, const HeadTape<T>& tape, const Mat<T>& dy, ParamStore<T>& grads) {
    Mat<T> dh = nn::linear_backward(dy, tape.hidden, p["serf.head.fc2.weight"], grads["serf.head.fc2.weight"],
                                    grads["serf.head.fc2.bias"]);
    dh = nn::relu_backward(dh, tape.hidden);
    return nn::linear_backward(dh, tape.input, p["serf.head.fc1.weight"], grads["serf.head.fc1.weight"],
                               grads["serf.head.fc1.bias"]);
}

template <typename T>
void require_nondegenerate(const Mat<T>& q_t) {
    for (Index b = 0; b < q_t.cols(); ++b) {
        const T n = q_t.col(b).norm();
        if (!(n >= static_cast<T>(1e-12)))
            throw DegenerateTargetError("SERF target has norm " + std::to_string(static_cast<double>(n)) +
                                        " for sample " + std::to_string(b));
    }
}

// Everything needed to backpropagate a batch of targets.
template <typename T>
struct SerfBatch {
    std::vector<FusedTokens<T>> fused;
    std::vector<RefineResult<T>> refined;
    Mat<T> h_phi;  // d x B
    Mat<T> k;      // d x B (or 2d x B head input for concat)
    Mat<T> q_t;    // d x B
    HeadTape<T> head;
};

template <typename T>
class Serf {
public:
    explicit Serf(SerfConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    const SerfConfig& config() const { return cfg_; }

    std::array<T, 3> alpha(const ParamStore<T>& p) const {
        const Mat<T>& a = p["serf.alpha"];
        return {a(0, 0), a(1, 0), a(2, 0)};
    }

    // samples[b] holds the three quantized scales of sample b.
    SerfBatch<T> forward(const ParamStore<T>& p, const std::vector<std::array<ScaleTokens<T>, 3>>& samples,
                         const Mat<T>& h_phi) const {
        const Index batch = static_cast<Index>(samples.size());
        if (h_phi.cols() != batch) throw ShapeError("serf: h_phi batch does not match token batch");
        if (h_phi.rows() != cfg_.dim) throw ShapeError("serf: h_phi width differs from serf dim");
        SerfBatch<T> out;
        out.h_phi = h_phi;
        out.k.resize(cfg_.head_input(), batch);
        const auto a = alpha(p);
        for (Index b = 0; b < batch; ++b) {
            out.fused.push_back(fuse(samples[static_cast<std::size_t>(b)], a));
            const auto& f = out.fused.back();
            if (cfg_.fusion == Fusion::concat) {
                out.k.col(b).head(cfg_.dim) = f.pooled;
                out.k.col(b).tail(cfg_.dim) = h_phi.col(b);
                out.refined.push_back({});
            } else {
                out.refined.push_back(refine<T>(f.tokens, h_phi.col(b), cfg_.mode));
                out.k.col(b) = out.refined.back().k;
            }
        }
        out.q_t = cfg_.post_head ? head_forward(p, out.k, &out.head) : out.k;
        require_nondegenerate(out.q_t);
        return out;
    }

    // Accumulates d<q_t, dq>/d(head params, alpha) into grads. Tokens are
    // quantized values and carry no gradient further down.
    void backward(const ParamStore<T>& p, const SerfBatch<T>& fwd, const Mat<T>& dq, ParamStore<T>& grads,
                  Mat<T>* dh_phi = nullptr) const {
        Mat<T> dk = cfg_.post_head ? head_backward(p, fwd.head, dq, grads) : dq;
        if (dh_phi) dh_phi->setZero(cfg_.dim, dq.cols());
        Mat<T>& dalpha = grads["serf.alpha"];
        for (Index b = 0; b < dq.cols(); ++b) {
            const auto& f = fwd.fused[static_cast<std::size_t>(b)];
            Mat<T> dtokens = Mat<T>::Zero(f.tokens.rows(), f.tokens.cols());
            if (cfg_.fusion == Fusion::concat) {
                dtokens.colwise() += dk.col(b).head(cfg_.dim) / static_cast<T>(f.tokens.cols());
                if (dh_phi) dh_phi->col(b) += dk.col(b).tail(cfg_.dim);
            } else {
                Vec<T> dh = Vec<T>::Zero(cfg_.dim);
                refine_backward<T>(f.tokens, fwd.h_phi.col(b), fwd.refined[static_cast<std::size_t>(b)], cfg_.mode,
                                   dk.col(b), &dtokens, &dh);
                if (dh_phi) dh_phi->col(b) += dh;
            }
            if (!cfg_.trainable_alpha) continue;
            for (int j = 0; j < 3; ++j) {
                const auto& pooled = f.pooled_scales[static_cast<std::size_t>(j)];
                if (pooled.size() == 0) continue;
                dalpha(j, 0) += dtokens.cwiseProduct(pooled).sum();
            }
        }
    }

private:
    SerfConfig cfg_;
};

}  // namespace dissect::serf
