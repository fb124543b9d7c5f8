#include "megan/tensor.hpp"

#include <cmath>
#include <cstring>

namespace megan {

Tensor zeros_like(const Tensor& t) { return Tensor(t.dims()); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
}

void add_inplace(Tensor& dst, const Tensor& src) {
    require_same_shape(dst, src, "add_inplace");
    double* d = dst.data();
    const double* s = src.data();
    for (size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

void add_scaled(Tensor& dst, const Tensor& src, double sc) {
    require_same_shape(dst, src, "add_scaled");
    double* d = dst.data();
    const double* s = src.data();
    for (size_t i = 0; i < dst.size(); ++i) d[i] += sc * s[i];
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    add_inplace(out, b);
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    double* d = out.data();
    const double* s = b.data();
    for (size_t i = 0; i < out.size(); ++i) d[i] -= s[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    double* d = out.data();
    const double* s = b.data();
    for (size_t i = 0; i < out.size(); ++i) d[i] *= s[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (double& x : out.values()) x *= s;
    return out;
}

double sum(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.values()) acc += x;
    return acc;
}

double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double acc = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (size_t i = 0; i < a.size(); ++i) acc += pa[i] * pb[i];
    return acc;
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double x : a.values()) m = std::max(m, std::fabs(x));
    return m;
}

bool all_finite(const Tensor& a) {
    for (double x : a.values())
        if (!std::isfinite(x)) return false;
    return true;
}

Tensor concat_channels(const std::vector<const Tensor*>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: empty input list");
    const Tensor& first = *xs[0];
    if (first.rank() != 4) throw ShapeError("concat_channels: expected NCHW input");
    int n = first.dim(0), h = first.dim(2), w = first.dim(3);
    int ctotal = 0;
    for (const Tensor* x : xs) {
        if (x->rank() != 4 || x->dim(0) != n || x->dim(2) != h || x->dim(3) != w)
            throw ShapeError("concat_channels: incompatible shape " + x->shape_str());
        ctotal += x->dim(1);
    }
    Tensor out({n, ctotal, h, w});
    size_t plane = static_cast<size_t>(h) * w;
    for (int b = 0; b < n; ++b) {
        double* dst = out.data() + static_cast<size_t>(b) * ctotal * plane;
        for (const Tensor* x : xs) {
            size_t bytes = static_cast<size_t>(x->dim(1)) * plane;
            const double* src = x->data() + static_cast<size_t>(b) * bytes;
            std::memcpy(dst, src, bytes * sizeof(double));
            dst += bytes;
        }
    }
    return out;
}

void fill_uniform(Tensor& t, Rng& rng, double bound) {
    for (double& x : t.values()) x = rng.uniform(-bound, bound);
}

}  // namespace megan
