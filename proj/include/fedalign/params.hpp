#pragma once

#include <algorithm>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fedalign/tensor.hpp"

namespace fedalign {

struct LayoutEntry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;

    bool operator==(const LayoutEntry&) const = default;
};

using Layout = std::vector<LayoutEntry>;

/// All parameters of a model flattened into one vector.
struct ParamVector {
    std::vector<double> data;
    Layout layout;

    std::size_t size() const { return data.size(); }
    bool operator==(const ParamVector&) const = default;
};

inline std::size_t layout_size(const Layout& layout) {
    return layout.empty() ? 0 : layout.back().offset + numel(layout.back().shape);
}

/// Named parameter tensors, iterated in name order.
class ParamSet {
  public:
    ParamSet() = default;
    ParamSet(ParamSet&&) noexcept = default;
    ParamSet& operator=(ParamSet&&) noexcept = default;
    /// Copies are deep: the copy owns fresh leaves.
    ParamSet(const ParamSet& other) : ParamSet(other.clone()) {}
    ParamSet& operator=(const ParamSet& other) {
        if (this != &other) *this = other.clone();
        return *this;
    }

    void add(const std::string& name, Tensor tensor) {
        require(tensor.is_leaf() && tensor.requires_grad(), "ParamSet::add: '" + name + "' is not a parameter leaf");
        require(params_.emplace(name, std::move(tensor)).second, "ParamSet::add: duplicate parameter '" + name + "'");
    }

    const Tensor& at(const std::string& name) const {
        auto it = params_.find(name);
        require(it != params_.end(), "unknown parameter '" + name + "'");
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    std::size_t count() const { return params_.size(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& [_, t] : params_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : params_) t.zero_grad();
    }

    Layout layout() const {
        Layout out;
        std::size_t offset = 0;
        for (const auto& [name, t] : params_) {
            out.push_back({name, t.shape(), offset});
            offset += t.numel();
        }
        return out;
    }

    ParamVector to_vector() const {
        ParamVector v;
        v.layout = layout();
        v.data.reserve(total_size());
        for (const auto& [_, t] : params_) v.data.insert(v.data.end(), t.values().begin(), t.values().end());
        return v;
    }

    /// Flattened gradients in layout order; parameters without a gradient contribute zeros.
    std::vector<double> grad_vector() const {
        std::vector<double> g;
        g.reserve(total_size());
        for (const auto& [_, t] : params_) {
            if (t.has_grad()) {
                g.insert(g.end(), t.grad().begin(), t.grad().end());
            } else {
                g.insert(g.end(), t.numel(), 0.0);
            }
        }
        return g;
    }

    /// Overwrite values in place from a vector with an identical layout.
    void load(const ParamVector& v) {
        require(v.layout == layout(), "ParamSet::load: layout mismatch");
        load_values(v.data);
    }

    void load_values(std::span<const double> data) {
        require(data.size() == total_size(), "ParamSet::load_values: size mismatch");
        std::size_t offset = 0;
        for (auto& [_, t] : params_) {
            auto dst = t.mutable_values();
            std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
            offset += dst.size();
        }
    }

    /// Deep copy with fresh leaves (no shared gradient buffers).
    ParamSet clone() const {
        ParamSet out;
        for (const auto& [name, t] : params_) {
            out.add(name, Tensor::parameter(t.shape(), std::vector<double>(t.values().begin(), t.values().end())));
        }
        return out;
    }

  private:
    std::map<std::string, Tensor> params_;
};

inline ParamVector params_to_vector(const ParamSet& params) { return params.to_vector(); }

inline ParamSet vector_to_params(const ParamVector& vec) {
    require(layout_size(vec.layout) == vec.data.size(), "vector_to_params: layout does not cover the data");
    ParamSet out;
    std::size_t expected = 0;
    for (const auto& e : vec.layout) {
        require(e.offset == expected, "vector_to_params: layout offsets are not contiguous at '" + e.name + "'");
        const auto n = numel(e.shape);
        out.add(e.name, Tensor::parameter(e.shape, std::vector<double>(vec.data.begin() + static_cast<std::ptrdiff_t>(e.offset),
                                                                       vec.data.begin() + static_cast<std::ptrdiff_t>(e.offset + n))));
        expected += n;
    }
    require(out.layout() == vec.layout, "vector_to_params: layout entries are not in name order");
    return out;
}

} // namespace fedalign
