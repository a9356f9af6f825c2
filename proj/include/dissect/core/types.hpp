#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>

namespace dissect {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Index = Eigen::Index;

// A batch of feature maps stored as a channels x (batch * height * width)
// matrix. Column b*H*W + y*W + x holds the channel vector of sample b at
// (y, x), so a column is exactly one spatial token.
template <typename T>
struct FeatureMap {
    Index channels = 0;
    Index height = 0;
    Index width = 0;
    Index batch = 0;
    Mat<T> data;

    FeatureMap() = default;
    FeatureMap(Index c, Index h, Index w, Index b)
        : channels(c), height(h), width(w), batch(b), data(Mat<T>::Zero(c, b * h * w)) {}

    Index spatial() const { return height * width; }
    Index column(Index b, Index y, Index x) const { return b * height * width + y * width + x; }

    // Channels x (H*W) view of one sample.
    auto sample(Index b) { return data.middleCols(b * spatial(), spatial()); }
    auto sample(Index b) const { return data.middleCols(b * spatial(), spatial()); }

    template <typename U>
    FeatureMap<U> cast() const {
        FeatureMap<U> out;
        out.channels = channels;
        out.height = height;
        out.width = width;
        out.batch = batch;
        out.data = data.template cast<U>();
        return out;
    }
};

template <typename T>
bool all_finite(const Mat<T>& m) {
    return m.allFinite();
}

}  // namespace dissect
