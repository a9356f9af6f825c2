#pragma once

// Stateless layer kernels. Each forward optionally fills a cache that the
// matching backward consumes; backward accumulates (+=) parameter gradients
// and returns the input gradient.

#include "dissect/core/error.hpp"
#include "dissect/core/types.hpp"

#include <cmath>
#include <cstring>

namespace dissect::nn {

// ---------------------------------------------------------------- conv 3x3

template <typename T>
struct ConvCache {
    Mat<T> cols;  // (9 * cin) x (batch * out_h * out_w)
    Index in_h = 0;
    Index in_w = 0;
    Index in_c = 0;
    Index stride = 1;
};

inline Index conv_out_size(Index in, Index stride) { return (in - 1) / stride + 1; }

// im2col with padding 1. Row order is (ky, kx, cin), matching a weight
// matrix laid out as cout x (3 * 3 * cin).
template <typename T>
Mat<T> im2col3x3(const FeatureMap<T>& x, Index stride) {
    const Index oh = conv_out_size(x.height, stride);
    const Index ow = conv_out_size(x.width, stride);
    const Index c = x.channels;
    Mat<T> cols(9 * c, x.batch * oh * ow);
    for (Index b = 0; b < x.batch; ++b) {
        for (Index oy = 0; oy < oh; ++oy) {
            for (Index ox = 0; ox < ow; ++ox) {
                T* col = cols.col(b * oh * ow + oy * ow + ox).data();
                for (Index ky = 0; ky < 3; ++ky) {
                    const Index iy = oy * stride + ky - 1;
                    for (Index kx = 0; kx < 3; ++kx) {
                        const Index ix = ox * stride + kx - 1;
                        T* dst = col + (ky * 3 + kx) * c;
                        if (iy < 0 || iy >= x.height || ix < 0 || ix >= x.width) {
                            std::memset(dst, 0, sizeof(T) * c);
                        } else {
                            std::memcpy(dst, x.data.col(x.column(b, iy, ix)).data(), sizeof(T) * c);
                        }
                    }
                }
            }
        }
    }
    return cols;
}

template <typename T>
FeatureMap<T> col2im3x3(const Mat<T>& dcols, Index channels, Index height, Index width, Index batch, Index stride) {
    const Index oh = conv_out_size(height, stride);
    const Index ow = conv_out_size(width, stride);
    FeatureMap<T> dx(channels, height, width, batch);
    for (Index b = 0; b < batch; ++b) {
        for (Index oy = 0; oy < oh; ++oy) {
            for (Index ox = 0; ox < ow; ++ox) {
                const T* col = dcols.col(b * oh * ow + oy * ow + ox).data();
                for (Index ky = 0; ky < 3; ++ky) {
                    const Index iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= height) continue;
                    for (Index kx = 0; kx < 3; ++kx) {
                        const Index ix = ox * stride + kx - 1;
                        if (ix < 0 || ix >= width) continue;
                        T* dst = dx.data.col(dx.column(b, iy, ix)).data();
                        const T* src = col + (ky * 3 + kx) * channels;
                        for (Index ci = 0; ci < channels; ++ci) dst[ci] += src[ci];
                    }
                }
            }
        }
    }
    return dx;
}

template <typename T>
FeatureMap<T> conv3x3_forward(const FeatureMap<T>& x, const Mat<T>& weight, const Mat<T>& bias, Index stride,
                              ConvCache<T>* cache) {
    if (weight.cols() != 9 * x.channels)
        throw ShapeError("conv3x3: weight expects " + std::to_string(weight.cols() / 9) + " input channels, got " +
                         std::to_string(x.channels));
    FeatureMap<T> y;
    y.channels = weight.rows();
    y.height = conv_out_size(x.height, stride);
    y.width = conv_out_size(x.width, stride);
    y.batch = x.batch;
    Mat<T> cols = im2col3x3(x, stride);
    y.data.noalias() = weight * cols;
    y.data.colwise() += bias.col(0);
    if (cache) {
        cache->cols = std::move(cols);
        cache->in_h = x.height;
        cache->in_w = x.width;
        cache->in_c = x.channels;
        cache->stride = stride;
    }
    return y;
}

template <typename T>
FeatureMap<T> conv3x3_backward(const FeatureMap<T>& dy, const Mat<T>& weight, const ConvCache<T>& cache,
                               Mat<T>& dweight, Mat<T>& dbias, bool need_input_grad) {
    dweight.noalias() += dy.data * cache.cols.transpose();
    dbias.col(0) += dy.data.rowwise().sum();
    if (!need_input_grad) return {};
    Mat<T> dcols = weight.transpose() * dy.data;
    return col2im3x3(dcols, cache.in_c, cache.in_h, cache.in_w, dy.batch, cache.stride);
}

// -------------------------------------------------------------- group norm

template <typename T>
struct GroupNormCache {
    Mat<T> xhat;     // same shape as the input data
    Mat<T> inv_std;  // groups x batch
};

template <typename T>
FeatureMap<T> group_norm_forward(const FeatureMap<T>& x, const Mat<T>& gamma, const Mat<T>& beta, Index groups,
                                 T eps, GroupNormCache<T>* cache) {
    if (x.channels % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const Index cpg = x.channels / groups;
    const Index hw = x.spatial();
    const T count = static_cast<T>(cpg * hw);
    FeatureMap<T> y = x;
    Mat<T> inv_std(groups, x.batch);
    for (Index b = 0; b < x.batch; ++b) {
        for (Index g = 0; g < groups; ++g) {
            auto blk = y.data.block(g * cpg, b * hw, cpg, hw);
            const T mean = blk.sum() / count;
            blk.array() -= mean;
            const T var = blk.squaredNorm() / count;
            const T is = T(1) / std::sqrt(var + eps);
            blk *= is;
            inv_std(g, b) = is;
        }
    }
    if (cache) {
        cache->xhat = y.data;
        cache->inv_std = inv_std;
    }
    for (Index c = 0; c < x.channels; ++c) {
        y.data.row(c).array() *= gamma(c, 0);
        y.data.row(c).array() += beta(c, 0);
    }
    return y;
}

template <typename T>
FeatureMap<T> group_norm_backward(const FeatureMap<T>& dy, const Mat<T>& gamma, const GroupNormCache<T>& cache,
                                  Index groups, Mat<T>& dgamma, Mat<T>& dbeta) {
    const Index cpg = dy.channels / groups;
    const Index hw = dy.spatial();
    const T count = static_cast<T>(cpg * hw);
    dgamma.col(0) += dy.data.cwiseProduct(cache.xhat).rowwise().sum();
    dbeta.col(0) += dy.data.rowwise().sum();
    FeatureMap<T> dx = dy;
    for (Index c = 0; c < dy.channels; ++c) dx.data.row(c) *= gamma(c, 0);
    for (Index b = 0; b < dy.batch; ++b) {
        for (Index g = 0; g < groups; ++g) {
            auto dxh = dx.data.block(g * cpg, b * hw, cpg, hw);
            const auto xh = cache.xhat.block(g * cpg, b * hw, cpg, hw);
            const T mean_d = dxh.sum() / count;
            const T mean_dx = dxh.cwiseProduct(xh).sum() / count;
            dxh = cache.inv_std(g, b) * (dxh.array() - mean_d - xh.array() * mean_dx).matrix();
        }
    }
    return dx;
}

// -------------------------------------------------------------------- relu

template <typename T>
Mat<T> relu(const Mat<T>& x) {
    return x.cwiseMax(T(0));
}

// Gradient through a ReLU given its output.
template <typename T>
Mat<T> relu_backward(const Mat<T>& dy, const Mat<T>& y) {
    return (y.array() > T(0)).select(dy, T(0));
}

// ------------------------------------------------------------------ linear

// x: in x batch. weight: out x in. bias: out x 1.
template <typename T>
Mat<T> linear_forward(const Mat<T>& x, const Mat<T>& weight, const Mat<T>& bias) {
    if (weight.cols() != x.rows()) throw ShapeError("linear: input width mismatch");
    Mat<T> y = weight * x;
    y.colwise() += bias.col(0);
    return y;
}

template <typename T>
Mat<T> linear_backward(const Mat<T>& dy, const Mat<T>& x, const Mat<T>& weight, Mat<T>& dweight, Mat<T>& dbias) {
    dweight.noalias() += dy * x.transpose();
    dbias.col(0) += dy.rowwise().sum();
    return weight.transpose() * dy;
}

// -------------------------------------------------------------- batch norm

template <typename T>
struct BatchNormCache {
    Mat<T> xhat;
    Vec<T> inv_std;
    bool identity = false;
};

// Normalizes each feature (row) over the batch (columns). With a single
// sample the batch variance is zero, so normalization falls back to identity.
template <typename T>
Mat<T> batch_norm_forward(const Mat<T>& x, const Mat<T>& gamma, const Mat<T>& beta, T eps,
                          BatchNormCache<T>* cache) {
    Mat<T> xhat = x;
    Vec<T> inv_std = Vec<T>::Ones(x.rows());
    const bool identity = x.cols() < 2;
    if (!identity) {
        const T n = static_cast<T>(x.cols());
        for (Index r = 0; r < x.rows(); ++r) {
            auto row = xhat.row(r);
            const T mean = row.sum() / n;
            row.array() -= mean;
            const T var = row.squaredNorm() / n;
            inv_std(r) = T(1) / std::sqrt(var + eps);
            row *= inv_std(r);
        }
    }
    Mat<T> y = xhat;
    for (Index r = 0; r < x.rows(); ++r) {
        y.row(r).array() *= gamma(r, 0);
        y.row(r).array() += beta(r, 0);
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
        cache->identity = identity;
    }
    return y;
}

template <typename T>
Mat<T> batch_norm_backward(const Mat<T>& dy, const Mat<T>& gamma, const BatchNormCache<T>& cache, Mat<T>& dgamma,
                           Mat<T>& dbeta) {
    dgamma.col(0) += dy.cwiseProduct(cache.xhat).rowwise().sum();
    dbeta.col(0) += dy.rowwise().sum();
    Mat<T> dx = dy;
    for (Index r = 0; r < dy.rows(); ++r) dx.row(r) *= gamma(r, 0);
    if (cache.identity) return dx;
    const T n = static_cast<T>(dy.cols());
    for (Index r = 0; r < dy.rows(); ++r) {
        auto d = dx.row(r);
        const auto xh = cache.xhat.row(r);
        const T mean_d = d.sum() / n;
        const T mean_dx = d.cwiseProduct(xh).sum() / n;
        d = cache.inv_std(r) * (d.array() - mean_d - xh.array() * mean_dx).matrix();
    }
    return dx;
}

// ------------------------------------------------------------- pooling

// Spatial mean per sample: channels x batch.
template <typename T>
Mat<T> global_avg_pool(const FeatureMap<T>& x) {
    Mat<T> out(x.channels, x.batch);
    for (Index b = 0; b < x.batch; ++b) out.col(b) = x.sample(b).rowwise().mean();
    return out;
}

template <typename T>
void global_avg_pool_backward(const Mat<T>& dpooled, FeatureMap<T>& dx) {
    const T inv = T(1) / static_cast<T>(dx.spatial());
    for (Index b = 0; b < dx.batch; ++b) dx.sample(b).colwise() += dpooled.col(b) * inv;
}

// Non-overlapping factor x factor average pooling of one sample's map
// (channels x (h*w)) down to (h/factor) x (w/factor).
template <typename T>
Mat<T> avg_pool_sample(const Mat<T>& map, Index h, Index w, Index factor) {
    const Index oh = h / factor;
    const Index ow = w / factor;
    Mat<T> out = Mat<T>::Zero(map.rows(), oh * ow);
    const T inv = T(1) / static_cast<T>(factor * factor);
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) out.col((y / factor) * ow + x / factor) += map.col(y * w + x);
    out *= inv;
    return out;
}

}  // namespace dissect::nn
