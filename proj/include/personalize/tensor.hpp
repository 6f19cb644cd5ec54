#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "personalize/errors.hpp"

namespace personalize {

// Dense row-major double tensor. Shapes used throughout the toolkit are
// small: (d) vectors, (S,d) token sequences, (C,H,W) latents.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {}

    static Tensor zeros(std::vector<int> s) {
        Tensor t;
        t.shape = std::move(s);
        t.data.assign(numel(t.shape), 0.0);
        return t;
    }
    static Tensor full(std::vector<int> s, double v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({std::vector<int>{}}, {v}); }
    static Tensor vector(std::vector<double> d) {
        int n = static_cast<int>(d.size());
        return Tensor({std::vector<int>{n}}, std::move(d));
    }

    static int64_t numel(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return shape.empty(); }

    double& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    double at2(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }
    double& at3(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    double at3(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline std::string shape_string(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape) +
                         " vs " + shape_string(b.shape));
}

// Binary 2D mask, values restricted to {0,1}.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> values;

    static Mask zeros(int h, int w) {
        Mask m;
        m.height = h;
        m.width = w;
        m.values.assign(static_cast<size_t>(h) * w, 0);
        return m;
    }
    static Mask ones(int h, int w) {
        Mask m = zeros(h, w);
        std::fill(m.values.begin(), m.values.end(), 1);
        return m;
    }
    uint8_t& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
    uint8_t at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
    int64_t count() const {
        int64_t n = 0;
        for (uint8_t v : values) n += v;
        return n;
    }
    Mask complement() const {
        Mask m = *this;
        for (auto& v : m.values) v = static_cast<uint8_t>(1 - v);
        return m;
    }
};

}  // namespace personalize
