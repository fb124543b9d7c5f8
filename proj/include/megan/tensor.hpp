#ifndef MEGAN_TENSOR_HPP
#define MEGAN_TENSOR_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace megan {

// Error taxonomy. Everything user-facing derives from Error so the CLI can
// map validation failures to exit 1 and runtime failures to exit 2.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ValueError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};

/// Dense row-major tensor of doubles, rank 1..5.
///
/// This is the single value type every operator in the library works on.
/// Feature maps are N x C x H x W, frame sequences are held as
/// std::vector<Tensor>. Values are 64-bit; 32-bit exists only as a file
/// storage mode (see io.hpp).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
        validate_dims();
        data_.assign(count(dims_), 0.0);
    }

    Tensor(std::vector<int> dims, std::vector<double> values)
        : dims_(std::move(dims)), data_(std::move(values)) {
        validate_dims();
        if (data_.size() != count(dims_))
            throw ShapeError("tensor: " + std::to_string(data_.size()) +
                             " values for shape " + shape_str());
    }

    static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }

    static Tensor full(std::vector<int> dims, double v) {
        Tensor t(std::move(dims));
        for (double& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    int rank() const { return static_cast<int>(dims_.size()); }
    const std::vector<int>& dims() const { return dims_; }
    int dim(int i) const { return dims_.at(static_cast<size_t>(i)); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](size_t i) { return data_[i]; }
    double operator[](size_t i) const { return data_[i]; }

    // Indexed access by rank. Bounds are the caller's responsibility; these
    // compile down to the plain row-major address computation.
    double& at(int a) { return data_[static_cast<size_t>(a)]; }
    double at(int a) const { return data_[static_cast<size_t>(a)]; }
    double& at(int a, int b) { return data_[idx2(a, b)]; }
    double at(int a, int b) const { return data_[idx2(a, b)]; }
    double& at(int a, int b, int c) { return data_[idx3(a, b, c)]; }
    double at(int a, int b, int c) const { return data_[idx3(a, b, c)]; }
    double& at(int a, int b, int c, int d) { return data_[idx4(a, b, c, d)]; }
    double at(int a, int b, int c, int d) const { return data_[idx4(a, b, c, d)]; }

    size_t idx2(int a, int b) const {
        return static_cast<size_t>(a) * dims_[1] + b;
    }
    size_t idx3(int a, int b, int c) const {
        return (static_cast<size_t>(a) * dims_[1] + b) * dims_[2] + c;
    }
    size_t idx4(int a, int b, int c, int d) const {
        return ((static_cast<size_t>(a) * dims_[1] + b) * dims_[2] + c) * dims_[3] + d;
    }

    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < dims_.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(dims_[i]);
        }
        return s + "]";
    }

    /// Same data, new dims (element count must match).
    Tensor reshaped(std::vector<int> dims) const {
        Tensor t;
        t.dims_ = std::move(dims);
        t.validate_dims();
        if (count(t.dims_) != data_.size())
            throw ShapeError("reshape: " + shape_str() + " -> " + t.shape_str());
        t.data_ = data_;
        return t;
    }

    void fill(double v) {
        for (double& x : data_) x = v;
    }

    static size_t count(const std::vector<int>& dims) {
        size_t n = 1;
        for (int d : dims) n *= static_cast<size_t>(d);
        return n;
    }

private:
    void validate_dims() const {
        if (dims_.empty() || dims_.size() > 5)
            throw ShapeError("tensor rank must be 1..5, got " +
                             std::to_string(dims_.size()));
        for (int d : dims_)
            if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str());
    }

    std::vector<int> dims_;
    std::vector<double> data_;
};

// Elementwise helpers used all over the place.
Tensor zeros_like(const Tensor& t);
void add_inplace(Tensor& dst, const Tensor& src);              // dst += src
void add_scaled(Tensor& dst, const Tensor& src, double s);     // dst += s * src
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);                  // hadamard
Tensor scale(const Tensor& a, double s);
double sum(const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);
bool all_finite(const Tensor& a);
Tensor concat_channels(const std::vector<const Tensor*>& xs);  // along dim 1 of NCHW
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Deterministic splitmix64 PRNG. Every random choice in the project flows
/// through this so runs are reproducible bit-for-bit across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    bool coin() { return (next_u64() & 1ull) != 0; }

    /// Derive an independent stream: fixed offsets keep pool sampling,
    /// augmentation and cropping reproducible in isolation.
    static uint64_t derive(uint64_t seed, uint64_t stream, uint64_t index) {
        Rng r(seed ^ (stream * 0xA24BAED4963EE407ull) ^ (index * 0x9FB21C651E98DF25ull));
        return r.next_u64();
    }

private:
    uint64_t state_;
};

/// Fill with uniform values in [-bound, bound].
void fill_uniform(Tensor& t, Rng& rng, double bound);

}  // namespace megan

#endif
