#pragma once

#include "dissect/core/error.hpp"
#include "dissect/core/types.hpp"

#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dissect {

// Biases and normalization affine parameters are exempt from weight decay
// and LARS trust scaling.
enum class ParamKind { weight, bias, norm };

inline const char* to_string(ParamKind k) {
    switch (k) {
        case ParamKind::weight: return "weight";
        case ParamKind::bias: return "bias";
        case ParamKind::norm: return "norm";
    }
    return "weight";
}

template <typename T>
struct Param {
    std::string name;
    std::vector<Index> shape;  // logical row-major shape
    ParamKind kind = ParamKind::weight;
    Mat<T> value;              // shape[0] x prod(shape[1:])

    Index numel() const { return value.size(); }
};

// Named, shaped arrays with a fixed insertion order used for every
// traversal (optimizer, momentum, checkpoint).
template <typename T>
class ParamStore {
public:
    Mat<T>& add(std::string name, std::vector<Index> shape, ParamKind kind) {
        if (index_.count(name)) throw ShapeError("duplicate parameter '" + name + "'");
        if (shape.empty()) throw ShapeError("parameter '" + name + "' needs a shape");
        const Index rows = shape[0];
        const Index cols = std::accumulate(shape.begin() + 1, shape.end(), Index{1}, std::multiplies<>());
        index_.emplace(name, params_.size());
        params_.push_back(Param<T>{std::move(name), std::move(shape), kind, Mat<T>::Zero(rows, cols)});
        return params_.back().value;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Mat<T>& operator[](const std::string& name) { return params_[lookup(name)].value; }
    const Mat<T>& operator[](const std::string& name) const { return params_[lookup(name)].value; }

    const Param<T>& param(const std::string& name) const { return params_[lookup(name)]; }

    std::size_t size() const { return params_.size(); }
    Param<T>& at(std::size_t i) { return params_[i]; }
    const Param<T>& at(std::size_t i) const { return params_[i]; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    Index numel() const {
        Index n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

    ParamStore zeros_like() const {
        ParamStore out = *this;
        for (auto& p : out.params_) p.value.setZero();
        return out;
    }

    // Same names, order and shapes.
    template <typename U>
    bool congruent(const ParamStore<U>& other) const {
        if (size() != other.size()) return false;
        for (std::size_t i = 0; i < size(); ++i) {
            if (params_[i].name != other.at(i).name || params_[i].shape != other.at(i).shape) return false;
        }
        return true;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& p : params_) out.add(p.name, p.shape, p.kind) = p.value.template cast<U>();
        return out;
    }

    bool all_finite() const {
        for (const auto& p : params_)
            if (!p.value.allFinite()) return false;
        return true;
    }

    T squared_norm() const {
        T s = 0;
        for (const auto& p : params_) s += p.value.squaredNorm();
        return s;
    }

    // this += scale * other
    void add_scaled(const ParamStore& other, T scale) {
        require_congruent(other);
        for (std::size_t i = 0; i < size(); ++i) params_[i].value += scale * other.params_[i].value;
    }

    T dot(const ParamStore& other) const {
        require_congruent(other);
        T s = 0;
        for (std::size_t i = 0; i < size(); ++i) s += params_[i].value.cwiseProduct(other.params_[i].value).sum();
        return s;
    }

    void require_congruent(const ParamStore& other) const {
        if (!congruent(other)) throw ShapeError("parameter stores are not congruent");
    }

private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ShapeError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::vector<Param<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace dissect
