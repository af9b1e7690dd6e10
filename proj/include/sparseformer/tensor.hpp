#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace sf {

/// Base error for every failure raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DType { f32, f64 };

const char* dtype_name(DType dt);

/// Dtype used for newly created tensors. Defaults to f32; gradient checks switch
/// the whole library to f64 through PrecisionScope.
DType default_dtype();
void set_default_dtype(DType dt);

class PrecisionScope {
public:
    explicit PrecisionScope(DType dt);
    ~PrecisionScope();
    PrecisionScope(const PrecisionScope&) = delete;
    PrecisionScope& operator=(const PrecisionScope&) = delete;

private:
    DType previous_;
};

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Typed flat buffer; holds either float or double values.
class Storage {
public:
    Storage() = default;
    Storage(DType dt, std::size_t n);

    DType dtype() const { return std::holds_alternative<std::vector<float>>(buf_) ? DType::f32 : DType::f64; }
    std::size_t size() const {
        const auto* f = std::get_if<std::vector<float>>(&buf_);
        return f ? f->size() : std::get<std::vector<double>>(buf_).size();
    }

    template <class T>
    T* data() { return std::get<std::vector<T>>(buf_).data(); }
    template <class T>
    const T* data() const { return std::get<std::vector<T>>(buf_).data(); }

    double get(std::size_t i) const;
    void set(std::size_t i, double v);
    void fill(double v);
    Storage converted(DType dt) const;

private:
    std::variant<std::vector<float>, std::vector<double>> buf_;
};

/// Invokes `f(std::type_identity<T>{})` with T matching the runtime dtype.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
    if (dt == DType::f32) {
        return std::forward<F>(f)(std::type_identity<float>{});
    }
    return std::forward<F>(f)(std::type_identity<double>{});
}

class Tensor;
struct TensorImpl;

/// One recorded operation. `backward` reads the output gradient and accumulates
/// into the gradients of `inputs`.
struct Node {
    const char* name = "";
    std::vector<Tensor> inputs;
    std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    Storage data;
    std::unique_ptr<Storage> grad;
    bool requires_grad = false;
    std::shared_ptr<Node> grad_fn;

    /// Gradient buffer of this tensor, zero-allocated on first use.
    Storage& grad_buffer();
};

/// Reference-counted handle to a dense row-major array with optional gradient.
/// Copies share the same underlying buffer; use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& shape, DType dt = default_dtype());
    static Tensor ones(const Shape& shape, DType dt = default_dtype());
    static Tensor full(const Shape& shape, double value, DType dt = default_dtype());
    static Tensor from_values(const Shape& shape, std::span<const double> values, DType dt = default_dtype());
    static Tensor from_values(const Shape& shape, std::initializer_list<double> values, DType dt = default_dtype());
    static Tensor scalar(double value, DType dt = default_dtype());
    static Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0, DType dt = default_dtype());
    static Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi, DType dt = default_dtype());

    bool defined() const { return static_cast<bool>(impl_); }
    const Shape& shape() const { return impl().shape; }
    std::int64_t dim(int i) const;
    int rank() const { return static_cast<int>(impl().shape.size()); }
    std::int64_t numel() const { return shape_numel(impl().shape); }
    DType dtype() const { return impl().data.dtype(); }

    template <class T>
    T* data() { return impl().data.template data<T>(); }
    template <class T>
    const T* data() const { return impl().data.template data<T>(); }

    double at(std::size_t flat_index) const { return impl().data.get(flat_index); }
    void set(std::size_t flat_index, double v) { impl().data.set(flat_index, v); }
    double item() const;
    std::vector<double> to_vector() const;

    bool requires_grad() const { return impl().requires_grad; }
    Tensor& set_requires_grad(bool flag = true);
    bool is_leaf() const { return !impl().grad_fn; }
    bool has_grad() const { return static_cast<bool>(impl().grad); }
    /// Detached copy of the accumulated gradient.
    Tensor grad() const;
    void zero_grad();

    /// Deep copy without graph history.
    Tensor clone() const;
    /// Same values as a fresh leaf, not connected to the graph.
    Tensor detach() const { return clone(); }
    /// Copy converted to `dt`.
    Tensor to(DType dt) const;

    /// In-place overwrite of values (no graph); shapes must match.
    void copy_from(const Tensor& other);

    /// Reverse-mode accumulation from this scalar tensor.
    void backward();
    void backward(const Tensor& seed);

    TensorImpl& impl() const;
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }
    bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Builds the result tensor of an operation and records it on the graph when any
/// input needs a gradient. Throws if the computed values are not finite.
Tensor make_result(const char* name, Shape shape, Storage values, std::vector<Tensor> inputs,
                   std::function<void(TensorImpl& out)> backward);

bool any_requires_grad(std::span<const Tensor> inputs);

void check_finite(const Storage& s, const char* op);

}  // namespace sf
