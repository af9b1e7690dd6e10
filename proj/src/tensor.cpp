#include "sparseformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <type_traits>
#include <sstream>
#include <unordered_set>

namespace sf {

namespace {

DType g_default_dtype = DType::f32;
thread_local bool t_grad_enabled = true;

}  // namespace

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

DType default_dtype() { return g_default_dtype; }
void set_default_dtype(DType dt) { g_default_dtype = dt; }

PrecisionScope::PrecisionScope(DType dt) : previous_(g_default_dtype) { g_default_dtype = dt; }
PrecisionScope::~PrecisionScope() { g_default_dtype = previous_; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Storage

Storage::Storage(DType dt, std::size_t n) {
    if (dt == DType::f32) {
        buf_ = std::vector<float>(n, 0.0f);
    } else {
        buf_ = std::vector<double>(n, 0.0);
    }
}

double Storage::get(std::size_t i) const {
    return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, buf_);
}

void Storage::set(std::size_t i, double x) {
    std::visit([i, x](auto& v) { v[i] = static_cast<std::decay_t<decltype(v[0])>>(x); }, buf_);
}

void Storage::fill(double x) {
    std::visit([x](auto& v) { std::fill(v.begin(), v.end(), static_cast<std::decay_t<decltype(v[0])>>(x)); }, buf_);
}

Storage Storage::converted(DType dt) const {
    Storage out(dt, size());
    dispatch(dt, [&]<class T>(std::type_identity<T>) {
        T* dst = out.data<T>();
        std::visit([dst](const auto& v) {
            for (std::size_t i = 0; i < v.size(); ++i) {
                dst[i] = static_cast<T>(v[i]);
            }
        }, buf_);
    });
    return out;
}

Storage& TensorImpl::grad_buffer() {
    if (!grad) {
        grad = std::make_unique<Storage>(data.dtype(), data.size());
    }
    return *grad;
}

void check_finite(const Storage& s, const char* op) {
    // Exponent-all-ones test on the raw bits; vectorizes, unlike an early-exit loop.
    bool ok = dispatch(s.dtype(), [&]<class T>(std::type_identity<T>) {
        using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
        constexpr Bits mask = static_cast<Bits>(std::is_same_v<T, float> ? 0x7f800000ull : 0x7ff0000000000000ull);
        const T* p = s.data<T>();
        Bits bad = 0;
        for (std::size_t i = 0, n = s.size(); i < n; ++i) {
            Bits b;
            std::memcpy(&b, p + i, sizeof b);
            bad |= static_cast<Bits>((b & mask) == mask);
        }
        return bad == 0;
    });
    if (!ok) {
        throw Error(std::string("non-finite value produced by ") + op);
    }
}

// ---------------------------------------------------------------------------
// Tensor

namespace {

std::shared_ptr<TensorImpl> new_impl(const Shape& shape, DType dt) {
    for (auto d : shape) {
        if (d < 0) {
            throw Error("negative dimension in shape " + shape_str(shape));
        }
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = Storage(dt, static_cast<std::size_t>(shape_numel(shape)));
    return impl;
}

}  // namespace

TensorImpl& Tensor::impl() const {
    if (!impl_) {
        throw Error("use of undefined tensor");
    }
    return *impl_;
}

Tensor Tensor::zeros(const Shape& shape, DType dt) { return Tensor(new_impl(shape, dt)); }

Tensor Tensor::ones(const Shape& shape, DType dt) { return full(shape, 1.0, dt); }

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
    auto impl = new_impl(shape, dt);
    impl->data.fill(value);
    return Tensor(std::move(impl));
}

Tensor Tensor::from_values(const Shape& shape, std::span<const double> values, DType dt) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        throw Error("from_values: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    }
    auto impl = new_impl(shape, dt);
    for (std::size_t i = 0; i < values.size(); ++i) {
        impl->data.set(i, values[i]);
    }
    return Tensor(std::move(impl));
}

Tensor Tensor::from_values(const Shape& shape, std::initializer_list<double> values, DType dt) {
    return from_values(shape, std::span<const double>(values.begin(), values.size()), dt);
}

Tensor Tensor::scalar(double value, DType dt) { return full({}, value, dt); }

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, double stddev, DType dt) {
    auto impl = new_impl(shape, dt);
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::size_t i = 0, n = impl->data.size(); i < n; ++i) {
        impl->data.set(i, dist(rng));
    }
    return Tensor(std::move(impl));
}

Tensor Tensor::uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi, DType dt) {
    auto impl = new_impl(shape, dt);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (std::size_t i = 0, n = impl->data.size(); i < n; ++i) {
        impl->data.set(i, dist(rng));
    }
    return Tensor(std::move(impl));
}

std::int64_t Tensor::dim(int i) const {
    const auto& s = shape();
    int r = static_cast<int>(s.size());
    if (i < 0) {
        i += r;
    }
    if (i < 0 || i >= r) {
        throw Error("dim index " + std::to_string(i) + " out of range for shape " + shape_str(s));
    }
    return s[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
    if (numel() != 1) {
        throw Error("item() on tensor of shape " + shape_str(shape()));
    }
    return at(0);
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<std::size_t>(numel()));
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = at(i);
    }
    return out;
}

Tensor& Tensor::set_requires_grad(bool flag) {
    if (flag && !is_leaf()) {
        throw Error("set_requires_grad on a non-leaf tensor");
    }
    impl().requires_grad = flag;
    return *this;
}

Tensor Tensor::grad() const {
    if (!impl().grad) {
        throw Error("tensor has no gradient");
    }
    auto out = std::make_shared<TensorImpl>();
    out->shape = impl().shape;
    out->data = *impl().grad;
    return Tensor(std::move(out));
}

void Tensor::zero_grad() { impl().grad.reset(); }

Tensor Tensor::clone() const {
    auto out = std::make_shared<TensorImpl>();
    out->shape = impl().shape;
    out->data = impl().data;
    return Tensor(std::move(out));
}

Tensor Tensor::to(DType dt) const {
    auto out = std::make_shared<TensorImpl>();
    out->shape = impl().shape;
    out->data = impl().data.converted(dt);
    return Tensor(std::move(out));
}

void Tensor::copy_from(const Tensor& other) {
    if (other.shape() != shape()) {
        throw Error("copy_from: shape " + shape_str(other.shape()) + " vs " + shape_str(shape()));
    }
    impl().data = other.impl().data.converted(dtype());
}

void Tensor::backward() {
    if (numel() != 1) {
        throw Error("backward() without seed requires a scalar, got " + shape_str(shape()));
    }
    backward(Tensor::ones(shape(), dtype()));
}

void Tensor::backward(const Tensor& seed) {
    if (seed.shape() != shape()) {
        throw Error("backward seed shape mismatch");
    }
    if (!requires_grad()) {
        throw Error("backward() on a tensor that does not require grad");
    }
    // Iterative post-order DFS gives a topological order of the recorded graph.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->grad_fn && next < node->grad_fn->inputs.size()) {
            TensorImpl* child = node->grad_fn->inputs[next++].impl_ptr().get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    Storage& g = impl().grad_buffer();
    Storage s = seed.impl().data.converted(dtype());
    dispatch(dtype(), [&]<class T>(std::type_identity<T>) {
        T* gp = g.data<T>();
        const T* sp = s.data<T>();
        for (std::size_t i = 0, n = g.size(); i < n; ++i) {
            gp[i] += sp[i];
        }
    });
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        if (t->grad_fn && t->grad) {
            t->grad_fn->backward(*t);
        }
    }
}

bool any_requires_grad(std::span<const Tensor> inputs) {
    for (const auto& t : inputs) {
        if (t.defined() && t.requires_grad()) {
            return true;
        }
    }
    return false;
}

Tensor make_result(const char* name, Shape shape, Storage values, std::vector<Tensor> inputs,
                   std::function<void(TensorImpl& out)> backward) {
    check_finite(values, name);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    if (grad_enabled() && backward && any_requires_grad(inputs)) {
        auto node = std::make_shared<Node>();
        node->name = name;
        node->inputs = std::move(inputs);
        node->backward = std::move(backward);
        impl->grad_fn = std::move(node);
        impl->requires_grad = true;
    }
    return Tensor(std::move(impl));
}

}  // namespace sf
