#include "sparseformer/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>

namespace sf {

namespace {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype()) {
        throw Error(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()));
    }
}

int normalize_dim(int dim, int rank, const char* op) {
    if (dim < 0) {
        dim += rank;
    }
    if (dim < 0 || dim >= rank) {
        throw Error(std::string(op) + ": dimension out of range");
    }
    return dim;
}

template <class T>
T* grad_of(const Tensor& t) {
    return t.impl().grad_buffer().template data<T>();
}

template <class T>
const T* grad_in(const TensorImpl& out) {
    return out.grad->template data<T>();
}

Shape contiguous_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    return strides;
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
    Shape out;
    Shape sa;
    Shape sb;
};

Broadcast broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Broadcast p;
    p.out.assign(r, 1);
    p.sa.assign(r, 0);
    p.sb.assign(r, 0);
    Shape astr = contiguous_strides(a);
    Shape bstr = contiguous_strides(b);
    for (std::size_t i = 0; i < r; ++i) {
        const std::ptrdiff_t ia = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(r - a.size());
        const std::ptrdiff_t ib = static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(r - b.size());
        const std::int64_t da = ia >= 0 ? a[ia] : 1;
        const std::int64_t db = ib >= 0 ? b[ib] : 1;
        if (da != db && da != 1 && db != 1) {
            throw Error(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        p.out[i] = std::max(da, db);
        if (da == 0 || db == 0) {
            p.out[i] = 0;
        }
        p.sa[i] = (ia >= 0 && da != 1) ? astr[ia] : 0;
        p.sb[i] = (ib >= 0 && db != 1) ? bstr[ib] : 0;
    }
    return p;
}

template <class F>
void broadcast_loop(const Broadcast& p, F&& f) {
    const int r = static_cast<int>(p.out.size());
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    const std::int64_t total = shape_numel(p.out);
    if (total == 0) {
        return;
    }
    const std::int64_t inner = p.out[r - 1];
    const std::int64_t ia_step = p.sa[r - 1];
    const std::int64_t ib_step = p.sb[r - 1];
    const std::int64_t outer = total / inner;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t oa = 0;
    std::int64_t ob = 0;
    for (std::int64_t o = 0; o < outer; ++o) {
        const std::int64_t base = o * inner;
        for (std::int64_t j = 0; j < inner; ++j) {
            f(base + j, oa + j * ia_step, ob + j * ib_step);
        }
        for (int d = r - 2; d >= 0; --d) {
            ++idx[d];
            oa += p.sa[d];
            ob += p.sb[d];
            if (idx[d] < p.out[d]) {
                break;
            }
            oa -= p.sa[d] * p.out[d];
            ob -= p.sb[d] * p.out[d];
            idx[d] = 0;
        }
    }
}

// fwd(x, y) -> z; da(x, y, z, g) and db(x, y, z, g) give the local gradient contributions.
template <class Fwd, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
    require_same_dtype(a, b, name);
    Broadcast plan = broadcast_plan(a.shape(), b.shape(), name);
    const DType dt = a.dtype();
    Storage out(dt, static_cast<std::size_t>(shape_numel(plan.out)));
    dispatch(dt, [&]<class T>(std::type_identity<T>) {
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out.data<T>();
        broadcast_loop(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { po[i] = fwd(pa[ia], pb[ib]); });
    });
    Shape out_shape = plan.out;
    return make_result(name, out_shape, std::move(out), {a, b}, [a, b, plan, da, db](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* pa = a.data<T>();
            const T* pb = b.data<T>();
            const T* pz = o.data.template data<T>();
            const T* g = grad_in<T>(o);
            if (a.requires_grad()) {
                T* ga = grad_of<T>(a);
                broadcast_loop(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                    ga[ia] += da(pa[ia], pb[ib], pz[i], g[i]);
                });
            }
            if (b.requires_grad()) {
                T* gb = grad_of<T>(b);
                broadcast_loop(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                    gb[ib] += db(pa[ia], pb[ib], pz[i], g[i]);
                });
            }
        });
    });
}

// fwd(x) -> y; dfdx(x, y) -> local derivative.
template <class Fwd, class Deriv>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Deriv deriv) {
    const DType dt = a.dtype();
    Storage out(dt, static_cast<std::size_t>(a.numel()));
    dispatch(dt, [&]<class T>(std::type_identity<T>) {
        const T* pa = a.data<T>();
        T* po = out.data<T>();
        for (std::size_t i = 0; i < out.size(); ++i) {
            po[i] = fwd(pa[i]);
        }
    });
    return make_result(name, a.shape(), std::move(out), {a}, [a, deriv](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* pa = a.data<T>();
            const T* py = o.data.template data<T>();
            const T* g = grad_in<T>(o);
            T* ga = grad_of<T>(a);
            for (std::size_t i = 0, n = o.data.size(); i < n; ++i) {
                ga[i] += g[i] * deriv(pa[i], py[i]);
            }
        });
    });
}

// ---------------------------------------------------------------------------
// GEMM

// C[M,N] = op(A) op(B) + beta * C, all row-major.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda, const float* b, int ldb,
          float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
                1.0f, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda, const double* b, int ldb,
          double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans, m, n, k,
                1.0, a, lda, b, ldb, beta, c, ldc);
}

std::atomic<std::uint64_t> g_matmul_macs{0};

}  // namespace

std::uint64_t matmul_macs() { return g_matmul_macs.load(std::memory_order_relaxed); }
void reset_matmul_macs() { g_matmul_macs.store(0, std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](auto x, auto y) { return x + y; }, [](auto, auto, auto, auto g) { return g; },
        [](auto, auto, auto, auto g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](auto x, auto y) { return x - y; }, [](auto, auto, auto, auto g) { return g; },
        [](auto, auto, auto, auto g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](auto x, auto y) { return x * y; }, [](auto, auto y, auto, auto g) { return g * y; },
        [](auto x, auto, auto, auto g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](auto x, auto y) { return x / y; }, [](auto, auto y, auto, auto g) { return g / y; },
        [](auto, auto y, auto z, auto g) { return -g * z / y; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        "add_scalar", a, [s](auto x) { return static_cast<decltype(x)>(x + s); },
        [](auto x, auto) { return decltype(x)(1); });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(
        "mul_scalar", a, [s](auto x) { return static_cast<decltype(x)>(x * s); },
        [s](auto x, auto) { return static_cast<decltype(x)>(s); });
}

Tensor neg(const Tensor& a) {
    return unary_op(
        "neg", a, [](auto x) { return -x; }, [](auto x, auto) { return decltype(x)(-1); });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        "exp", a, [](auto x) { return std::exp(x); }, [](auto, auto y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        "log", a, [](auto x) { return std::log(x); }, [](auto x, auto) { return decltype(x)(1) / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        "sqrt", a, [](auto x) { return std::sqrt(x); },
        [](auto x, auto y) { return decltype(x)(0.5) / y; });
}

Tensor sin(const Tensor& a) {
    return unary_op(
        "sin", a, [](auto x) { return std::sin(x); }, [](auto x, auto) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
    return unary_op(
        "cos", a, [](auto x) { return std::cos(x); }, [](auto x, auto) { return -std::sin(x); });
}

Tensor square(const Tensor& a) {
    return unary_op(
        "square", a, [](auto x) { return x * x; }, [](auto x, auto) { return decltype(x)(2) * x; });
}

Tensor gelu(const Tensor& a) {
    return unary_op(
        "gelu", a,
        [](auto x) {
            using T = decltype(x);
            return static_cast<T>(0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)));
        },
        [](auto x, auto) {
            using T = decltype(x);
            const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
            return static_cast<T>(cdf + x * pdf);
        });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    Storage out(a.dtype(), 1);
    dispatch(a.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* p = a.data<T>();
        double acc = 0.0;
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            acc += p[i];
        }
        out.data<T>()[0] = static_cast<T>(acc);
    });
    return make_result("sum", {}, std::move(out), {a}, [a](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T g = grad_in<T>(o)[0];
            T* ga = grad_of<T>(a);
            for (std::int64_t i = 0; i < a.numel(); ++i) {
                ga[i] += g;
            }
        });
    });
}

Tensor sum(const Tensor& a, int dim, bool keepdim) {
    dim = normalize_dim(dim, a.rank(), "sum");
    const auto& s = a.shape();
    std::int64_t outer = 1;
    std::int64_t inner = 1;
    for (int i = 0; i < dim; ++i) {
        outer *= s[i];
    }
    for (int i = dim + 1; i < a.rank(); ++i) {
        inner *= s[i];
    }
    const std::int64_t n = s[dim];
    Shape out_shape = s;
    if (keepdim) {
        out_shape[dim] = 1;
    } else {
        out_shape.erase(out_shape.begin() + dim);
    }
    Storage out(a.dtype(), static_cast<std::size_t>(outer * inner));
    dispatch(a.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* p = a.data<T>();
        T* po = out.data<T>();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t k = 0; k < n; ++k) {
                const T* row = p + (o * n + k) * inner;
                T* dst = po + o * inner;
                for (std::int64_t i = 0; i < inner; ++i) {
                    dst[i] += row[i];
                }
            }
        }
    });
    return make_result("sum_dim", out_shape, std::move(out), {a}, [a, outer, inner, n](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = grad_in<T>(o);
            T* ga = grad_of<T>(a);
            for (std::int64_t oo = 0; oo < outer; ++oo) {
                for (std::int64_t k = 0; k < n; ++k) {
                    T* dst = ga + (oo * n + k) * inner;
                    const T* src = g + oo * inner;
                    for (std::int64_t i = 0; i < inner; ++i) {
                        dst[i] += src[i];
                    }
                }
            }
        });
    });
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) {
        throw Error("mean of empty tensor");
    }
    return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, int dim, bool keepdim) {
    const auto n = a.dim(dim);
    if (n == 0) {
        throw Error("mean over empty dimension");
    }
    return mul_scalar(sum(a, dim, keepdim), 1.0 / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& a, Shape shape) {
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) {
                throw Error("reshape: more than one inferred dimension");
            }
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || a.numel() % known != 0) {
            throw Error("reshape: cannot infer dimension for " + shape_str(shape));
        }
        shape[infer] = a.numel() / known;
    }
    if (shape_numel(shape) != a.numel()) {
        throw Error("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    Storage out = a.impl().data;
    return make_result("reshape", shape, std::move(out), {a}, [a](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = grad_in<T>(o);
            T* ga = grad_of<T>(a);
            for (std::size_t i = 0, n = o.data.size(); i < n; ++i) {
                ga[i] += g[i];
            }
        });
    });
}

Tensor permute(const Tensor& a, const std::vector<int>& dims) {
    const int r = a.rank();
    if (static_cast<int>(dims.size()) != r) {
        throw Error("permute: wrong number of dimensions");
    }
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int d : dims) {
        if (d < 0 || d >= r || seen[d]) {
            throw Error("permute: invalid permutation");
        }
        seen[d] = true;
    }
    Shape in_strides = contiguous_strides(a.shape());
    Shape out_shape(static_cast<std::size_t>(r));
    Shape src_strides(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        out_shape[i] = a.shape()[dims[i]];
        src_strides[i] = in_strides[dims[i]];
    }
    // Broadcast plan machinery doubles as a strided gather: output is contiguous,
    // the "a" stride walks the permuted source.
    Broadcast plan;
    plan.out = out_shape;
    plan.sa = src_strides;
    plan.sb.assign(static_cast<std::size_t>(r), 0);
    Storage out(a.dtype(), static_cast<std::size_t>(a.numel()));
    dispatch(a.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* p = a.data<T>();
        T* po = out.data<T>();
        broadcast_loop(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t) { po[i] = p[ia]; });
    });
    return make_result("permute", out_shape, std::move(out), {a}, [a, plan](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = grad_in<T>(o);
            T* ga = grad_of<T>(a);
            broadcast_loop(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t) { ga[ia] += g[i]; });
        });
    });
}

Tensor transpose(const Tensor& a, int d0, int d1) {
    const int r = a.rank();
    d0 = normalize_dim(d0, r, "transpose");
    d1 = normalize_dim(d1, r, "transpose");
    std::vector<int> dims(static_cast<std::size_t>(r));
    std::iota(dims.begin(), dims.end(), 0);
    std::swap(dims[d0], dims[d1]);
    return permute(a, dims);
}

Tensor narrow(const Tensor& a, int dim, std::int64_t start, std::int64_t length) {
    dim = normalize_dim(dim, a.rank(), "narrow");
    const auto& s = a.shape();
    if (start < 0 || length < 0 || start + length > s[dim]) {
        throw Error("narrow: range out of bounds");
    }
    std::int64_t outer = 1;
    std::int64_t inner = 1;
    for (int i = 0; i < dim; ++i) {
        outer *= s[i];
    }
    for (int i = dim + 1; i < a.rank(); ++i) {
        inner *= s[i];
    }
    const std::int64_t n = s[dim];
    Shape out_shape = s;
    out_shape[dim] = length;
    Storage out(a.dtype(), static_cast<std::size_t>(outer * length * inner));
    dispatch(a.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* p = a.data<T>();
        T* po = out.data<T>();
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(p + (o * n + start) * inner, length * inner, po + o * length * inner);
        }
    });
    return make_result("narrow", out_shape, std::move(out), {a}, [a, outer, inner, n, start, length](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = grad_in<T>(o);
            T* ga = grad_of<T>(a);
            for (std::int64_t oo = 0; oo < outer; ++oo) {
                T* dst = ga + (oo * n + start) * inner;
                const T* src = g + oo * length * inner;
                for (std::int64_t i = 0; i < length * inner; ++i) {
                    dst[i] += src[i];
                }
            }
        });
    });
}

Tensor select(const Tensor& a, int dim, std::int64_t index) {
    dim = normalize_dim(dim, a.rank(), "select");
    Shape s = a.shape();
    Tensor n = narrow(a, dim, index, 1);
    s.erase(s.begin() + dim);
    return reshape(n, s);
}

Tensor concat(const std::vector<Tensor>& parts, int dim) {
    if (parts.empty()) {
        throw Error("concat: no inputs");
    }
    const int r = parts[0].rank();
    dim = normalize_dim(dim, r, "concat");
    Shape out_shape = parts[0].shape();
    out_shape[dim] = 0;
    for (const auto& p : parts) {
        require_same_dtype(p, parts[0], "concat");
        if (p.rank() != r) {
            throw Error("concat: rank mismatch");
        }
        for (int i = 0; i < r; ++i) {
            if (i != dim && p.shape()[i] != parts[0].shape()[i]) {
                throw Error("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
            }
        }
        out_shape[dim] += p.shape()[dim];
    }
    std::int64_t outer = 1;
    std::int64_t inner = 1;
    for (int i = 0; i < dim; ++i) {
        outer *= out_shape[i];
    }
    for (int i = dim + 1; i < r; ++i) {
        inner *= out_shape[i];
    }
    const std::int64_t total = out_shape[dim];
    Storage out(parts[0].dtype(), static_cast<std::size_t>(shape_numel(out_shape)));
    dispatch(parts[0].dtype(), [&]<class T>(std::type_identity<T>) {
        T* po = out.data<T>();
        std::int64_t offset = 0;
        for (const auto& p : parts) {
            const std::int64_t n = p.shape()[dim];
            const T* src = p.data<T>();
            for (std::int64_t o = 0; o < outer; ++o) {
                std::copy_n(src + o * n * inner, n * inner, po + (o * total + offset) * inner);
            }
            offset += n;
        }
    });
    return make_result("concat", out_shape, std::move(out), parts, [parts, dim, outer, inner, total](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = grad_in<T>(o);
            std::int64_t offset = 0;
            for (const auto& p : parts) {
                const std::int64_t n = p.shape()[dim];
                if (p.requires_grad()) {
                    T* gp = grad_of<T>(p);
                    for (std::int64_t oo = 0; oo < outer; ++oo) {
                        const T* src = g + (oo * total + offset) * inner;
                        T* dst = gp + oo * n * inner;
                        for (std::int64_t i = 0; i < n * inner; ++i) {
                            dst[i] += src[i];
                        }
                    }
                }
                offset += n;
            }
        });
    });
}

Tensor expand_leading(const Tensor& a, std::int64_t n) {
    Shape out_shape = a.shape();
    out_shape.insert(out_shape.begin(), n);
    const std::int64_t m = a.numel();
    Storage out(a.dtype(), static_cast<std::size_t>(n * m));
    dispatch(a.dtype(), [&]<class T>(std::type_identity<T>) {
        for (std::int64_t i = 0; i < n; ++i) {
            std::copy_n(a.data<T>(), m, out.data<T>() + i * m);
        }
    });
    return make_result("expand_leading", out_shape, std::move(out), {a}, [a, n, m](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = grad_in<T>(o);
            T* ga = grad_of<T>(a);
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < m; ++j) {
                    ga[j] += g[i * m + j];
                }
            }
        });
    });
}

// ---------------------------------------------------------------------------
// Matrix products

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_same_dtype(a, b, "matmul");
    if (a.rank() < 2 || b.rank() < 2) {
        throw Error("matmul: operands need rank >= 2");
    }
    const std::int64_t m = a.dim(-2);
    const std::int64_t k = a.dim(-1);
    const std::int64_t n = b.dim(-1);
    if (b.dim(-2) != k) {
        throw Error("matmul: inner dimensions differ " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
    }
    Shape out_shape = a.shape();
    out_shape.back() = n;
    const bool shared_rhs = b.rank() == 2;
    std::int64_t batch = 1;
    if (shared_rhs) {
        // Fold every leading dimension of a into the row count.
        batch = 1;
    } else {
        if (b.rank() != a.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
            throw Error("matmul: batch dimensions differ " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
        }
        batch = a.numel() / (m * k);
    }
    const std::int64_t rows = shared_rhs ? a.numel() / k : m;
    g_matmul_macs.fetch_add(static_cast<std::uint64_t>(batch * rows * k * n), std::memory_order_relaxed);
    Storage out(a.dtype(), static_cast<std::size_t>(shape_numel(out_shape)));
    dispatch(a.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out.data<T>();
        if (rows == 0 || n == 0) {
            return;
        }
        for (std::int64_t bi = 0; bi < batch; ++bi) {
            gemm(false, false, static_cast<int>(rows), static_cast<int>(n), static_cast<int>(k), pa + bi * rows * k,
                 static_cast<int>(k), pb + (shared_rhs ? 0 : bi * k * n), static_cast<int>(n), T(0),
                 po + bi * rows * n, static_cast<int>(n));
        }
    });
    return make_result("matmul", out_shape, std::move(out), {a, b}, [a, b, batch, rows, k, n, shared_rhs](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            if (rows == 0 || n == 0 || k == 0) {
                return;
            }
            const T* g = grad_in<T>(o);
            const T* pa = a.data<T>();
            const T* pb = b.data<T>();
            for (std::int64_t bi = 0; bi < batch; ++bi) {
                const T* gb = g + bi * rows * n;
                const T* bb = pb + (shared_rhs ? 0 : bi * k * n);
                const T* ab = pa + bi * rows * k;
                if (a.requires_grad()) {
                    // dA = dC @ B^T
                    gemm(false, true, static_cast<int>(rows), static_cast<int>(k), static_cast<int>(n), gb,
                         static_cast<int>(n), bb, static_cast<int>(n), T(1), grad_of<T>(a) + bi * rows * k,
                         static_cast<int>(k));
                }
                if (b.requires_grad()) {
                    // dB = A^T @ dC
                    gemm(true, false, static_cast<int>(k), static_cast<int>(n), static_cast<int>(rows), ab,
                         static_cast<int>(k), gb, static_cast<int>(n), T(1),
                         grad_of<T>(b) + (shared_rhs ? 0 : bi * k * n), static_cast<int>(n));
                }
            }
        });
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    Tensor y = matmul(x, w);
    if (bias.defined()) {
        y = add(y, bias);
    }
    return y;
}

// ---------------------------------------------------------------------------
// Normalization

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1 || x.dim(-1) < 1) {
        throw Error("softmax_lastdim: empty last dimension");
    }
    check_finite(x.impl().data, "softmax_lastdim input");
    const std::int64_t d = x.dim(-1);
    const std::int64_t rows = x.numel() / d;
    Storage out(x.dtype(), static_cast<std::size_t>(x.numel()));
    dispatch(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* p = x.data<T>();
        T* po = out.data<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = p + r * d;
            T* dst = po + r * d;
            const T mx = *std::max_element(row, row + d);
            double total = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                dst[j] = std::exp(row[j] - mx);
                total += dst[j];
            }
            const T inv = static_cast<T>(1.0 / total);
            for (std::int64_t j = 0; j < d; ++j) {
                dst[j] *= inv;
            }
        }
    });
    return make_result("softmax", x.shape(), std::move(out), {x}, [x, d, rows](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* y = o.data.template data<T>();
            const T* g = grad_in<T>(o);
            T* gx = grad_of<T>(x);
            for (std::int64_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    dot += g[r * d + j] * y[r * d + j];
                }
                for (std::int64_t j = 0; j < d; ++j) {
                    gx[r * d + j] += y[r * d + j] * (g[r * d + j] - static_cast<T>(dot));
                }
            }
        });
    });
}

Tensor log_softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1 || x.dim(-1) < 1) {
        throw Error("log_softmax_lastdim: empty last dimension");
    }
    check_finite(x.impl().data, "log_softmax_lastdim input");
    const std::int64_t d = x.dim(-1);
    const std::int64_t rows = x.numel() / d;
    Storage out(x.dtype(), static_cast<std::size_t>(x.numel()));
    dispatch(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* p = x.data<T>();
        T* po = out.data<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = p + r * d;
            const T mx = *std::max_element(row, row + d);
            double total = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                total += std::exp(static_cast<double>(row[j] - mx));
            }
            const double lse = mx + std::log(total);
            for (std::int64_t j = 0; j < d; ++j) {
                po[r * d + j] = static_cast<T>(row[j] - lse);
            }
        }
    });
    return make_result("log_softmax", x.shape(), std::move(out), {x}, [x, d, rows](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* y = o.data.template data<T>();
            const T* g = grad_in<T>(o);
            T* gx = grad_of<T>(x);
            for (std::int64_t r = 0; r < rows; ++r) {
                double gsum = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    gsum += g[r * d + j];
                }
                for (std::int64_t j = 0; j < d; ++j) {
                    gx[r * d + j] += g[r * d + j] - static_cast<T>(std::exp(y[r * d + j]) * gsum);
                }
            }
        });
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1 || x.dim(-1) < 1) {
        throw Error("layer_norm: zero-length normalization axis");
    }
    const std::int64_t d = x.dim(-1);
    if (gamma.numel() != d || beta.numel() != d) {
        throw Error("layer_norm: gamma/beta length must equal last dimension " + std::to_string(d));
    }
    require_same_dtype(x, gamma, "layer_norm");
    require_same_dtype(x, beta, "layer_norm");
    const std::int64_t rows = x.numel() / d;
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
    auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    Storage out(x.dtype(), static_cast<std::size_t>(x.numel()));
    dispatch(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* p = x.data<T>();
        const T* pg = gamma.data<T>();
        const T* pb = beta.data<T>();
        T* po = out.data<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* row = p + r * d;
            double mu = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                mu += row[j];
            }
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double c = row[j] - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double rs = 1.0 / std::sqrt(var + eps);
            (*rstd)[r] = rs;
            for (std::int64_t j = 0; j < d; ++j) {
                const double h = (row[j] - mu) * rs;
                (*xhat)[r * d + j] = h;
                po[r * d + j] = static_cast<T>(h * pg[j] + pb[j]);
            }
        }
    });
    return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat, rstd, d, rows](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = grad_in<T>(o);
            const T* pg = gamma.data<T>();
            T* gx = x.requires_grad() ? grad_of<T>(x) : nullptr;
            T* gg = gamma.requires_grad() ? grad_of<T>(gamma) : nullptr;
            T* gb = beta.requires_grad() ? grad_of<T>(beta) : nullptr;
            for (std::int64_t r = 0; r < rows; ++r) {
                double mean_dh = 0.0;
                double mean_dh_h = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const double gj = g[r * d + j];
                    const double h = (*xhat)[r * d + j];
                    if (gg) {
                        gg[j] += static_cast<T>(gj * h);
                    }
                    if (gb) {
                        gb[j] += static_cast<T>(gj);
                    }
                    const double dh = gj * pg[j];
                    mean_dh += dh;
                    mean_dh_h += dh * h;
                }
                if (!gx) {
                    continue;
                }
                mean_dh /= static_cast<double>(d);
                mean_dh_h /= static_cast<double>(d);
                for (std::int64_t j = 0; j < d; ++j) {
                    const double h = (*xhat)[r * d + j];
                    const double dh = g[r * d + j] * pg[j];
                    gx[r * d + j] += static_cast<T>((*rstd)[r] * (dh - mean_dh - h * mean_dh_h));
                }
            }
        });
    });
}

// ---------------------------------------------------------------------------
// Sampling and convolution

Tensor bilinear_sample(const Tensor& feature_map, const Tensor& points) {
    require_same_dtype(feature_map, points, "bilinear_sample");
    const bool batched = feature_map.rank() == 4;
    if (!batched && feature_map.rank() != 3) {
        throw Error("bilinear_sample: feature map must be [H,W,C] or [B,H,W,C]");
    }
    const std::int64_t batch = batched ? feature_map.dim(0) : 1;
    const std::int64_t h = feature_map.dim(-3);
    const std::int64_t w = feature_map.dim(-2);
    const std::int64_t c = feature_map.dim(-1);
    if (h < 1 || w < 1) {
        throw Error("bilinear_sample: H and W must be >= 1");
    }
    if (points.rank() != (batched ? 3 : 2) || points.dim(-1) != 2 || (batched && points.dim(0) != batch)) {
        throw Error("bilinear_sample: points must be [P,2] (or [B,P,2] for a batched map), got " +
                    shape_str(points.shape()));
    }
    check_finite(points.impl().data, "bilinear_sample coordinates");
    const std::int64_t p = points.dim(-2);
    Shape out_shape = batched ? Shape{batch, p, c} : Shape{p, c};

    struct Tap {
        std::int64_t x0, x1, y0, y1;
        double fx, fy;
        bool clamp_x, clamp_y;
    };
    auto taps = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(batch * p));
    Storage out(feature_map.dtype(), static_cast<std::size_t>(batch * p * c));
    dispatch(feature_map.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* fm = feature_map.data<T>();
        const T* pts = points.data<T>();
        T* po = out.data<T>();
        for (std::int64_t b = 0; b < batch; ++b) {
            const T* map = fm + b * h * w * c;
            for (std::int64_t i = 0; i < p; ++i) {
                const double u = pts[(b * p + i) * 2 + 0];
                const double v = pts[(b * p + i) * 2 + 1];
                double px = u * static_cast<double>(w) - 0.5;
                double py = v * static_cast<double>(h) - 0.5;
                Tap t{};
                t.clamp_x = px < 0.0 || px > static_cast<double>(w - 1);
                t.clamp_y = py < 0.0 || py > static_cast<double>(h - 1);
                px = std::clamp(px, 0.0, static_cast<double>(w - 1));
                py = std::clamp(py, 0.0, static_cast<double>(h - 1));
                t.x0 = static_cast<std::int64_t>(std::floor(px));
                t.y0 = static_cast<std::int64_t>(std::floor(py));
                t.x1 = std::min(t.x0 + 1, w - 1);
                t.y1 = std::min(t.y0 + 1, h - 1);
                t.fx = px - static_cast<double>(t.x0);
                t.fy = py - static_cast<double>(t.y0);
                (*taps)[b * p + i] = t;
                const T* v00 = map + (t.y0 * w + t.x0) * c;
                const T* v01 = map + (t.y0 * w + t.x1) * c;
                const T* v10 = map + (t.y1 * w + t.x0) * c;
                const T* v11 = map + (t.y1 * w + t.x1) * c;
                const double w00 = (1 - t.fx) * (1 - t.fy);
                const double w01 = t.fx * (1 - t.fy);
                const double w10 = (1 - t.fx) * t.fy;
                const double w11 = t.fx * t.fy;
                T* dst = po + (b * p + i) * c;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    dst[ch] = static_cast<T>(w00 * v00[ch] + w01 * v01[ch] + w10 * v10[ch] + w11 * v11[ch]);
                }
            }
        }
    });
    return make_result("bilinear_sample", out_shape, std::move(out), {feature_map, points},
                       [feature_map, points, taps, batch, h, w, c, p](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = grad_in<T>(o);
            const T* fm = feature_map.data<T>();
            T* gmap = feature_map.requires_grad() ? grad_of<T>(feature_map) : nullptr;
            T* gpts = points.requires_grad() ? grad_of<T>(points) : nullptr;
            for (std::int64_t b = 0; b < batch; ++b) {
                const T* map = fm + b * h * w * c;
                for (std::int64_t i = 0; i < p; ++i) {
                    const Tap& t = (*taps)[b * p + i];
                    const T* gi = g + (b * p + i) * c;
                    const std::int64_t o00 = b * h * w * c + (t.y0 * w + t.x0) * c;
                    const std::int64_t o01 = b * h * w * c + (t.y0 * w + t.x1) * c;
                    const std::int64_t o10 = b * h * w * c + (t.y1 * w + t.x0) * c;
                    const std::int64_t o11 = b * h * w * c + (t.y1 * w + t.x1) * c;
                    if (gmap) {
                        const double w00 = (1 - t.fx) * (1 - t.fy);
                        const double w01 = t.fx * (1 - t.fy);
                        const double w10 = (1 - t.fx) * t.fy;
                        const double w11 = t.fx * t.fy;
                        for (std::int64_t ch = 0; ch < c; ++ch) {
                            gmap[o00 + ch] += static_cast<T>(w00 * gi[ch]);
                            gmap[o01 + ch] += static_cast<T>(w01 * gi[ch]);
                            gmap[o10 + ch] += static_cast<T>(w10 * gi[ch]);
                            gmap[o11 + ch] += static_cast<T>(w11 * gi[ch]);
                        }
                    }
                    if (gpts) {
                        double dpx = 0.0;
                        double dpy = 0.0;
                        const T* v00 = map + (t.y0 * w + t.x0) * c;
                        const T* v01 = map + (t.y0 * w + t.x1) * c;
                        const T* v10 = map + (t.y1 * w + t.x0) * c;
                        const T* v11 = map + (t.y1 * w + t.x1) * c;
                        for (std::int64_t ch = 0; ch < c; ++ch) {
                            dpx += gi[ch] * ((1 - t.fy) * (v01[ch] - v00[ch]) + t.fy * (v11[ch] - v10[ch]));
                            dpy += gi[ch] * ((1 - t.fx) * (v10[ch] - v00[ch]) + t.fx * (v11[ch] - v01[ch]));
                        }
                        if (!t.clamp_x) {
                            gpts[(b * p + i) * 2 + 0] += static_cast<T>(dpx * static_cast<double>(w));
                        }
                        if (!t.clamp_y) {
                            gpts[(b * p + i) * 2 + 1] += static_cast<T>(dpy * static_cast<double>(h));
                        }
                    }
                }
            }
        });
    });
}

Tensor im2col(const Tensor& x, int kernel, int stride, int pad) {
    if (x.rank() != 4) {
        throw Error("im2col: input must be [B,H,W,C], got " + shape_str(x.shape()));
    }
    if (kernel < 1 || stride < 1 || pad < 0) {
        throw Error("im2col: invalid kernel/stride/padding");
    }
    const std::int64_t b = x.dim(0);
    const std::int64_t h = x.dim(1);
    const std::int64_t w = x.dim(2);
    const std::int64_t c = x.dim(3);
    const std::int64_t ho = (h + 2 * pad - kernel) / stride + 1;
    const std::int64_t wo = (w + 2 * pad - kernel) / stride + 1;
    if (ho < 1 || wo < 1) {
        throw Error("im2col: kernel larger than padded input");
    }
    const std::int64_t patch = static_cast<std::int64_t>(kernel) * kernel * c;
    Shape out_shape{b, ho, wo, patch};
    Storage out(x.dtype(), static_cast<std::size_t>(shape_numel(out_shape)));

    // Visits (output offset, input offset) pairs for one channel run of every tap.
    auto for_each_tap = [=](auto&& f) {
        for (std::int64_t bi = 0; bi < b; ++bi) {
            for (std::int64_t oy = 0; oy < ho; ++oy) {
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                    const std::int64_t obase = ((bi * ho + oy) * wo + ox) * patch;
                    for (int ky = 0; ky < kernel; ++ky) {
                        const std::int64_t iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= h) {
                            continue;
                        }
                        for (int kx = 0; kx < kernel; ++kx) {
                            const std::int64_t ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= w) {
                                continue;
                            }
                            f(obase + (static_cast<std::int64_t>(ky) * kernel + kx) * c, ((bi * h + iy) * w + ix) * c);
                        }
                    }
                }
            }
        }
    };
    dispatch(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* px = x.data<T>();
        T* po = out.data<T>();
        for_each_tap([&](std::int64_t oo, std::int64_t io) { std::copy_n(px + io, c, po + oo); });
    });
    return make_result("im2col", out_shape, std::move(out), {x}, [x, for_each_tap, c](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = grad_in<T>(o);
            T* gx = grad_of<T>(x);
            for_each_tap([&](std::int64_t oo, std::int64_t io) {
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    gx[io + ch] += g[oo + ch];
                }
            });
        });
    });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int kernel, int stride, int pad) {
    if (x.rank() != 4) {
        throw Error("conv2d: input must be [B,H,W,C]");
    }
    if (weight.rank() != 2 || weight.dim(0) != static_cast<std::int64_t>(kernel) * kernel * x.dim(3)) {
        throw Error("conv2d: weight must be [k*k*Cin, Cout], got " + shape_str(weight.shape()));
    }
    return linear(im2col(x, kernel, stride, pad), weight, bias);
}

// ---------------------------------------------------------------------------
// Losses

Tensor nll_loss(const Tensor& log_probs, const std::vector<int>& targets, int ignore_index) {
    if (log_probs.rank() != 2) {
        throw Error("nll_loss: log_probs must be [M, L]");
    }
    const std::int64_t m = log_probs.dim(0);
    const std::int64_t l = log_probs.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != m) {
        throw Error("nll_loss: target count mismatch");
    }
    std::int64_t count = 0;
    for (int t : targets) {
        if (t == ignore_index) {
            continue;
        }
        if (t < 0 || t >= l) {
            throw Error("nll_loss: label " + std::to_string(t) + " outside [0," + std::to_string(l) + ")");
        }
        ++count;
    }
    Storage out(log_probs.dtype(), 1);
    dispatch(log_probs.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* p = log_probs.data<T>();
        double acc = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
            if (targets[i] != ignore_index) {
                acc -= p[i * l + targets[i]];
            }
        }
        out.data<T>()[0] = static_cast<T>(count > 0 ? acc / static_cast<double>(count) : 0.0);
    });
    return make_result("nll_loss", {}, std::move(out), {log_probs}, [log_probs, targets, ignore_index, count, l](TensorImpl& o) {
        dispatch(o.data.dtype(), [&]<class T>(std::type_identity<T>) {
            T* gx = grad_of<T>(log_probs);
            if (count == 0) {
                return;
            }
            const T g = grad_in<T>(o)[0] / static_cast<T>(count);
            for (std::size_t i = 0; i < targets.size(); ++i) {
                if (targets[i] != ignore_index) {
                    gx[static_cast<std::int64_t>(i) * l + targets[i]] -= g;
                }
            }
        });
    });
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a.at(i)));
    }
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw Error("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::abs(a.at(i) - b.at(i)));
    }
    return m;
}

}  // namespace sf
