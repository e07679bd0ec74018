#include "efdit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace efdit {

namespace {

// Training reallocates the same large activation buffers every step; keep
// freed blocks on the heap instead of handing them back to the kernel, or
// each step pays the page-fault cost again.
#if defined(__GLIBC__)
const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    return true;
}();
#endif

}  // namespace

namespace {


GradTape* merge_tapes(const Tensor& a, const Tensor& b) {
    if (a.tape && b.tape && a.tape != b.tape) {
        throw ContractError("operands belong to different gradient tapes");
    }
    return a.tape ? a.tape : b.tape;
}

void check_finite_axis(int axis, int rank) {
    if (axis < 0 || axis >= rank) {
        throw DimError("axis " + std::to_string(axis) + " out of range for rank " +
                       std::to_string(rank));
    }
}

struct AxisSplit {
    std::int64_t outer, n, inner;
};

AxisSplit split_at(const std::vector<std::int64_t>& shape, int axis) {
    AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) {
        s.inner *= shape[i];
    }
    return s;
}

}  // namespace

std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    for (std::int64_t d : shape) {
        if (d <= 0) throw DimError("nonpositive extent in shape " + shape_str(shape));
    }
    data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
}

Tensor::Tensor(std::vector<std::int64_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size())) {
        throw DimError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
}

double Tensor::scalar() const {
    if (numel() != 1) throw ContractError("scalar() on tensor of shape " + shape_str(shape));
    return data[0];
}

namespace {

std::int64_t flat_offset(const std::vector<std::int64_t>& shape,
                         std::initializer_list<std::int64_t> idx) {
    if (idx.size() != shape.size()) {
        throw DimError("index rank mismatch for shape " + shape_str(shape));
    }
    std::int64_t off = 0;
    std::size_t i = 0;
    for (std::int64_t v : idx) {
        off = off * shape[i] + v;
        ++i;
    }
    return off;
}

}  // namespace

double& Tensor::at(std::initializer_list<std::int64_t> idx) {
    return data[static_cast<std::size_t>(flat_offset(shape, idx))];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    return data[static_cast<std::size_t>(flat_offset(shape, idx))];
}

Tensor Tensor::detached() const {
    Tensor t;
    t.shape = shape;
    t.data = data;
    return t;
}

Tensor Tensor::zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }

Tensor Tensor::ones(std::vector<std::int64_t> s) { return full(std::move(s), 1.0); }

Tensor Tensor::full(std::vector<std::int64_t> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::scalar_of(double v) {
    Tensor t;
    t.data.assign(1, v);
    return t;
}

Tensor Tensor::randn(std::vector<std::int64_t> s, Rng& rng) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = rng.normal();
    return t;
}

Tensor Tensor::uniform(std::vector<std::int64_t> s, double lo, double hi, Rng& rng) {
    Tensor t(std::move(s));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// ---- tape -----------------------------------------------------------------

Tensor GradTape::watch(const Tensor& t) {
    Tensor out = t.detached();
    out.tape = this;
    out.node = push("leaf", {}, out.numel(), nullptr);
    return out;
}

std::int64_t GradTape::push(const char* tag, std::vector<std::int64_t> input_nodes,
                            std::int64_t out_numel, PullFn pull) {
    for (std::int64_t id : input_nodes) {
        if (id >= static_cast<std::int64_t>(nodes_.size())) {
            throw ContractError("tape node references a later node");
        }
    }
    nodes_.push_back(Node{tag, std::move(input_nodes), out_numel, std::move(pull)});
    return static_cast<std::int64_t>(nodes_.size()) - 1;
}

Tensor GradTape::track_custom(const char* tag, const std::vector<const Tensor*>& inputs,
                              Tensor value, PullFn pull) {
    GradTape* tape = nullptr;
    std::vector<std::int64_t> ids;
    for (const Tensor* t : inputs) {
        if (t->tape) {
            if (t->tape != this) throw ContractError("custom op input on a different tape");
            tape = t->tape;
            ids.push_back(t->node);
        }
    }
    if (!tape) return value;
    value.tape = this;
    value.node = push(tag, std::move(ids), value.numel(), std::move(pull));
    return value;
}

std::vector<double>& GradTape::grad_buffer(std::int64_t node) {
    if (node < 0 || node >= static_cast<std::int64_t>(nodes_.size())) {
        throw ContractError("grad_buffer: invalid node handle");
    }
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty()) g.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].numel), 0.0);
    return g;
}

void GradTape::backward(const Tensor& loss) {
    if (loss.tape != this || loss.node < 0) {
        throw ContractError("backward: loss is not tracked on this tape");
    }
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
    }
    grads_.assign(nodes_.size(), {});
    grad_buffer(loss.node)[0] = 1.0;
    for (std::int64_t i = loss.node; i >= 0; --i) {
        auto& node = nodes_[static_cast<std::size_t>(i)];
        auto& g = grads_[static_cast<std::size_t>(i)];
        if (!g.empty() && node.pull) node.pull(g, *this);
    }
    backward_done_ = true;
}

Tensor GradTape::grad(const Tensor& t) const {
    if (t.tape != this || t.node < 0) {
        throw ContractError("grad: tensor is not tracked on this tape");
    }
    Tensor g;
    g.shape = t.shape;
    const auto& buf = grads_[static_cast<std::size_t>(t.node)];
    if (buf.empty()) {
        g.data.assign(t.data.size(), 0.0);
    } else {
        g.data = buf;
    }
    return g;
}

void backward(const Tensor& loss) {
    if (!loss.tape) throw ContractError("backward: loss is not tracked");
    loss.tape->backward(loss);
}

// ---- matmul ----------------------------------------------------------------

namespace {

// C += A B with the inner extent blocked by four, sharing each C-row store
// across four B rows.
void matmul_accum(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                  std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        std::int64_t l = 0;
        for (; l + 4 <= k; l += 4) {
            const double a0 = arow[l], a1 = arow[l + 1], a2 = arow[l + 2], a3 = arow[l + 3];
            if (a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0) continue;
            const double* b0 = b + l * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (std::int64_t j = 0; j < n; ++j) {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        for (; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = b + l * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[i,l] += sum_j dY[i,j] B[l,j]; four dot products share each dY load
void matmul_grad_a(const double* dy, const double* b, double* da, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* dyrow = dy + i * n;
        double* darow = da + i * k;
        std::int64_t l = 0;
        for (; l + 4 <= k; l += 4) {
            const double* b0 = b + l * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
                const double d = dyrow[j];
                acc0 += d * b0[j];
                acc1 += d * b1[j];
                acc2 += d * b2[j];
                acc3 += d * b3[j];
            }
            darow[l] += acc0;
            darow[l + 1] += acc1;
            darow[l + 2] += acc2;
            darow[l + 3] += acc3;
        }
        for (; l < k; ++l) {
            const double* brow = b + l * n;
            double acc = 0.0;
            for (std::int64_t j = 0; j < n; ++j) acc += dyrow[j] * brow[j];
            darow[l] += acc;
        }
    }
}

// dB[l,j] += sum_i A[i,l] dY[i,j]; each dB row stays hot while four dY rows
// stream through
void matmul_grad_b(const double* a, const double* dy, double* db, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
    for (std::int64_t l = 0; l < k; ++l) {
        double* dbrow = db + l * n;
        std::int64_t i = 0;
        for (; i + 4 <= m; i += 4) {
            const double a0 = a[i * k + l], a1 = a[(i + 1) * k + l];
            const double a2 = a[(i + 2) * k + l], a3 = a[(i + 3) * k + l];
            if (a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0) continue;
            const double* d0 = dy + i * n;
            const double* d1 = d0 + n;
            const double* d2 = d1 + n;
            const double* d3 = d2 + n;
            for (std::int64_t j = 0; j < n; ++j) {
                dbrow[j] += a0 * d0[j] + a1 * d1[j] + a2 * d2[j] + a3 * d3[j];
            }
        }
        for (; i < m; ++i) {
            const double av = a[i * k + l];
            if (av == 0.0) continue;
            const double* dyrow = dy + i * n;
            for (std::int64_t j = 0; j < n; ++j) dbrow[j] += av * dyrow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimError("matmul expects rank-2 operands, got " + shape_str(a.shape) + " and " +
                       shape_str(b.shape));
    }
    const std::int64_t m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
    if (k != k2) {
        throw DimError("matmul inner extents differ: " + shape_str(a.shape) + " vs " +
                       shape_str(b.shape));
    }
    Tensor out({m, n});
    matmul_accum(a.data.data(), b.data.data(), out.data.data(), m, k, n);
    GradTape* tape = merge_tapes(a, b);
    if (!tape) return out;
    const std::int64_t ida = a.node, idb = b.node;
    // each saved operand is only needed for the counterpart's gradient
    std::vector<double> adata, bdata;
    if (idb >= 0) adata = a.data;
    if (ida >= 0) bdata = b.data;
    out.tape = tape;
    out.node = tape->push("matmul", {ida, idb}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (ida >= 0) {
                matmul_grad_a(dy.data(), bdata.data(), t.grad_buffer(ida).data(), m, k, n);
            }
            if (idb >= 0) {
                matmul_grad_b(adata.data(), dy.data(), t.grad_buffer(idb).data(), m, k, n);
            }
        });
    return out;
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
    check_finite_axis(axis, x.rank());
    for (double v : x.data) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
    }
    const AxisSplit ax = split_at(x.shape, axis);
    Tensor out;
    out.shape = x.shape;
    out.data.assign(x.data.size(), 0.0);
    for (std::int64_t o = 0; o < ax.outer; ++o) {
        for (std::int64_t in = 0; in < ax.inner; ++in) {
            const std::int64_t base = o * ax.n * ax.inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t j = 0; j < ax.n; ++j) {
                mx = std::max(mx, x.data[static_cast<std::size_t>(base + j * ax.inner)]);
            }
            double s = 0.0;
            for (std::int64_t j = 0; j < ax.n; ++j) {
                const double e = std::exp(x.data[static_cast<std::size_t>(base + j * ax.inner)] - mx);
                out.data[static_cast<std::size_t>(base + j * ax.inner)] = e;
                s += e;
            }
            for (std::int64_t j = 0; j < ax.n; ++j) {
                out.data[static_cast<std::size_t>(base + j * ax.inner)] /= s;
            }
        }
    }
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    std::vector<double> y = out.data;
    const AxisSplit cax = ax;
    out.tape = x.tape;
    out.node = x.tape->push("softmax", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::int64_t o = 0; o < cax.outer; ++o) {
                for (std::int64_t in = 0; in < cax.inner; ++in) {
                    const std::int64_t base = o * cax.n * cax.inner + in;
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < cax.n; ++j) {
                        const std::size_t p = static_cast<std::size_t>(base + j * cax.inner);
                        dot += dy[p] * y[p];
                    }
                    for (std::int64_t j = 0; j < cax.n; ++j) {
                        const std::size_t p = static_cast<std::size_t>(base + j * cax.inner);
                        dx[p] += y[p] * (dy[p] - dot);
                    }
                }
            }
        });
    return out;
}

// ---- layernorm ---------------------------------------------------------------

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps < 0.0) throw ConfigError("layernorm: eps must be nonnegative");
    if (x.rank() < 1) throw DimError("layernorm: input must have rank >= 1");
    const std::int64_t n = x.shape.back();
    const bool gain_scalar = gain.numel() == 1;
    const bool bias_scalar = bias.numel() == 1;
    if (!gain_scalar && gain.numel() != n) {
        throw DimError("layernorm: gain " + shape_str(gain.shape) +
                       " not broadcastable over last axis of " + shape_str(x.shape));
    }
    if (!bias_scalar && bias.numel() != n) {
        throw DimError("layernorm: bias " + shape_str(bias.shape) +
                       " not broadcastable over last axis of " + shape_str(x.shape));
    }
    const std::int64_t rows = x.numel() / n;
    Tensor out;
    out.shape = x.shape;
    out.data.assign(x.data.size(), 0.0);
    std::vector<double> xhat(x.data.size());
    std::vector<double> inv_sigma(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data.data() + r * n;
        double mu = 0.0;
        for (std::int64_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < n; ++j) {
            const double h = (xr[j] - mu) * is;
            xhat[static_cast<std::size_t>(r * n + j)] = h;
            const double g = gain.data[static_cast<std::size_t>(gain_scalar ? 0 : j)];
            const double b = bias.data[static_cast<std::size_t>(bias_scalar ? 0 : j)];
            out.data[static_cast<std::size_t>(r * n + j)] = h * g + b;
        }
    }
    GradTape* tape = merge_tapes(x, gain);
    if (!tape) tape = bias.tape;
    if (tape && bias.tape && bias.tape != tape) {
        throw ContractError("operands belong to different gradient tapes");
    }
    if (!tape) return out;
    const std::int64_t idx = x.node, idg = gain.node, idb = bias.node;
    std::vector<double> gdata = gain.data;
    out.tape = tape;
    out.node = tape->push("layernorm", {idx, idg, idb}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idg >= 0) {
                auto& dg = t.grad_buffer(idg);
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t j = 0; j < n; ++j) {
                        const std::size_t p = static_cast<std::size_t>(r * n + j);
                        dg[static_cast<std::size_t>(gain_scalar ? 0 : j)] += dy[p] * xhat[p];
                    }
                }
            }
            if (idb >= 0) {
                auto& db = t.grad_buffer(idb);
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t j = 0; j < n; ++j) {
                        db[static_cast<std::size_t>(bias_scalar ? 0 : j)] +=
                            dy[static_cast<std::size_t>(r * n + j)];
                    }
                }
            }
            if (idx >= 0) {
                auto& dx = t.grad_buffer(idx);
                for (std::int64_t r = 0; r < rows; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const std::size_t p = static_cast<std::size_t>(r * n + j);
                        const double dh = dy[p] * gdata[static_cast<std::size_t>(gain_scalar ? 0 : j)];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[p];
                    }
                    mean_dh /= static_cast<double>(n);
                    mean_dh_h /= static_cast<double>(n);
                    const double is = inv_sigma[static_cast<std::size_t>(r)];
                    for (std::int64_t j = 0; j < n; ++j) {
                        const std::size_t p = static_cast<std::size_t>(r * n + j);
                        const double dh = dy[p] * gdata[static_cast<std::size_t>(gain_scalar ? 0 : j)];
                        dx[p] += is * (dh - mean_dh - xhat[p] * mean_dh_h);
                    }
                }
            }
        });
    return out;
}

// ---- elementwise -------------------------------------------------------------

namespace {

enum class Bin { add, sub, mul };

Tensor binary_op(Bin op, const char* tag, const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape != b.shape) {
        throw DimError(std::string(tag) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                       shape_str(b.shape));
    }
    const Tensor& big = a_scalar && !b_scalar ? b : a;
    Tensor out;
    out.shape = big.shape;
    const std::int64_t nt = big.numel();
    out.data.assign(static_cast<std::size_t>(nt), 0.0);
    for (std::int64_t i = 0; i < nt; ++i) {
        const double av = a.data[static_cast<std::size_t>(a_scalar ? 0 : i)];
        const double bv = b.data[static_cast<std::size_t>(b_scalar ? 0 : i)];
        double r = 0.0;
        switch (op) {
            case Bin::add: r = av + bv; break;
            case Bin::sub: r = av - bv; break;
            case Bin::mul: r = av * bv; break;
        }
        out.data[static_cast<std::size_t>(i)] = r;
    }
    GradTape* tape = merge_tapes(a, b);
    if (!tape) return out;
    const std::int64_t ida = a.node, idb = b.node;
    std::vector<double> adata, bdata;
    if (op == Bin::mul) {
        adata = a.data;
        bdata = b.data;
    }
    out.tape = tape;
    out.node = tape->push(tag, {ida, idb}, nt,
        [=](const std::vector<double>& dy, GradTape& t) {
            if (ida >= 0) {
                auto& da = t.grad_buffer(ida);
                for (std::int64_t i = 0; i < nt; ++i) {
                    double g = dy[static_cast<std::size_t>(i)];
                    if (op == Bin::mul) g *= bdata[static_cast<std::size_t>(b_scalar ? 0 : i)];
                    da[static_cast<std::size_t>(a_scalar ? 0 : i)] += g;
                }
            }
            if (idb >= 0) {
                auto& db = t.grad_buffer(idb);
                for (std::int64_t i = 0; i < nt; ++i) {
                    double g = dy[static_cast<std::size_t>(i)];
                    if (op == Bin::sub) g = -g;
                    if (op == Bin::mul) g = dy[static_cast<std::size_t>(i)] *
                                            adata[static_cast<std::size_t>(a_scalar ? 0 : i)];
                    db[static_cast<std::size_t>(b_scalar ? 0 : i)] += g;
                }
            }
        });
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(Bin::add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(Bin::sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(Bin::mul, "mul", a, b); }

Tensor exp(const Tensor& x) {
    Tensor out;
    out.shape = x.shape;
    out.data.assign(x.data.size(), 0.0);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = std::exp(x.data[i]);
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    std::vector<double> y = out.data;
    out.tape = x.tape;
    out.node = x.tape->push("exp", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::size_t i = 0; i < y.size(); ++i) dx[i] += dy[i] * y[i];
        });
    return out;
}

Tensor log(const Tensor& x) {
    Tensor out;
    out.shape = x.shape;
    out.data.assign(x.data.size(), 0.0);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        if (x.data[i] <= 0.0) {
            throw NumericError("log of nonpositive value " + std::to_string(x.data[i]));
        }
        out.data[i] = std::log(x.data[i]);
    }
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    std::vector<double> xin = x.data;
    out.tape = x.tape;
    out.node = x.tape->push("log", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::size_t i = 0; i < xin.size(); ++i) dx[i] += dy[i] / xin[i];
        });
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out;
    out.shape = x.shape;
    out.data.assign(x.data.size(), 0.0);
    std::vector<double> sig(x.data.size());
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double v = x.data[i];
        const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        sig[i] = s;
        out.data[i] = v * s;
    }
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    std::vector<double> xin = x.data;
    out.tape = x.tape;
    out.node = x.tape->push("silu", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::size_t i = 0; i < xin.size(); ++i) {
                const double s = sig[i];
                dx[i] += dy[i] * (s + xin[i] * s * (1.0 - s));
            }
        });
    return out;
}

Tensor scale(const Tensor& x, double s) {
    Tensor out;
    out.shape = x.shape;
    out.data.assign(x.data.size(), 0.0);
    for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = x.data[i] * s;
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    out.tape = x.tape;
    out.node = x.tape->push("scale", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * s;
        });
    return out;
}

// ---- reductions / views --------------------------------------------------------

Tensor reduce(Reduce op, const Tensor& x, int axis) {
    check_finite_axis(axis, x.rank());
    const AxisSplit ax = split_at(x.shape, axis);
    std::vector<std::int64_t> oshape;
    for (int i = 0; i < x.rank(); ++i) {
        if (i != axis) oshape.push_back(x.shape[static_cast<std::size_t>(i)]);
    }
    Tensor out;
    out.shape = oshape;
    out.data.assign(static_cast<std::size_t>(ax.outer * ax.inner), 0.0);
    std::vector<std::int64_t> argmax;
    if (op == Reduce::max) argmax.assign(static_cast<std::size_t>(ax.outer * ax.inner), 0);
    for (std::int64_t o = 0; o < ax.outer; ++o) {
        for (std::int64_t in = 0; in < ax.inner; ++in) {
            const std::int64_t base = o * ax.n * ax.inner + in;
            const std::size_t q = static_cast<std::size_t>(o * ax.inner + in);
            if (op == Reduce::max) {
                double best = x.data[static_cast<std::size_t>(base)];
                std::int64_t bj = 0;
                for (std::int64_t j = 1; j < ax.n; ++j) {
                    const double v = x.data[static_cast<std::size_t>(base + j * ax.inner)];
                    if (v > best) {
                        best = v;
                        bj = j;
                    }
                }
                out.data[q] = best;
                argmax[q] = bj;
            } else {
                double s = 0.0;
                for (std::int64_t j = 0; j < ax.n; ++j) {
                    s += x.data[static_cast<std::size_t>(base + j * ax.inner)];
                }
                out.data[q] = op == Reduce::mean ? s / static_cast<double>(ax.n) : s;
            }
        }
    }
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    const AxisSplit cax = ax;
    out.tape = x.tape;
    out.node = x.tape->push("reduce", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::int64_t o = 0; o < cax.outer; ++o) {
                for (std::int64_t in = 0; in < cax.inner; ++in) {
                    const std::int64_t base = o * cax.n * cax.inner + in;
                    const std::size_t q = static_cast<std::size_t>(o * cax.inner + in);
                    if (op == Reduce::max) {
                        dx[static_cast<std::size_t>(base + argmax[q] * cax.inner)] += dy[q];
                    } else {
                        const double g = op == Reduce::mean ? dy[q] / static_cast<double>(cax.n) : dy[q];
                        for (std::int64_t j = 0; j < cax.n; ++j) {
                            dx[static_cast<std::size_t>(base + j * cax.inner)] += g;
                        }
                    }
                }
            }
        });
    return out;
}

Tensor reduce_all(Reduce op, const Tensor& x) {
    return reduce(op, reshape(x, {x.numel()}), 0);
}

Tensor reshape(const Tensor& x, std::vector<std::int64_t> new_shape) {
    if (numel_of(new_shape) != x.numel()) {
        throw DimError("reshape: " + shape_str(x.shape) + " to " + shape_str(new_shape) +
                       " changes element count");
    }
    Tensor out;
    out.shape = std::move(new_shape);
    out.data = x.data;
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    out.tape = x.tape;
    out.node = x.tape->push("reshape", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        });
    return out;
}

namespace {

std::vector<std::int64_t> strides_of(const std::vector<std::int64_t>& shape) {
    std::vector<std::int64_t> st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] =
            st[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
    }
    return st;
}

// Copies x into the layout where axes a and b are swapped. Returns the
// permutation applied to each linear output index as an index map.
std::vector<std::int64_t> transpose_map(const std::vector<std::int64_t>& in_shape, int a, int b) {
    std::vector<std::int64_t> out_shape = in_shape;
    std::swap(out_shape[static_cast<std::size_t>(a)], out_shape[static_cast<std::size_t>(b)]);
    const auto in_st = strides_of(in_shape);
    const auto out_st = strides_of(out_shape);
    const std::int64_t n = numel_of(in_shape);
    std::vector<std::int64_t> map(static_cast<std::size_t>(n));
    const int rank = static_cast<int>(in_shape.size());
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t rem = lin;
        std::int64_t src = 0;
        for (int d = 0; d < rank; ++d) {
            std::int64_t v = rem / out_st[static_cast<std::size_t>(d)];
            rem %= out_st[static_cast<std::size_t>(d)];
            int sd = d == a ? b : d == b ? a : d;
            src += v * in_st[static_cast<std::size_t>(sd)];
        }
        map[static_cast<std::size_t>(lin)] = src;
    }
    return map;
}

}  // namespace

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
    int a = axis_a < 0 ? x.rank() + axis_a : axis_a;
    int b = axis_b < 0 ? x.rank() + axis_b : axis_b;
    check_finite_axis(a, x.rank());
    check_finite_axis(b, x.rank());
    if (a == b) return reshape(x, x.shape);
    const auto map = transpose_map(x.shape, a, b);
    Tensor out;
    out.shape = x.shape;
    std::swap(out.shape[static_cast<std::size_t>(a)], out.shape[static_cast<std::size_t>(b)]);
    out.data.assign(x.data.size(), 0.0);
    for (std::size_t i = 0; i < map.size(); ++i) {
        out.data[i] = x.data[static_cast<std::size_t>(map[i])];
    }
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    out.tape = x.tape;
    out.node = x.tape->push("transpose", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::size_t i = 0; i < map.size(); ++i) {
                dx[static_cast<std::size_t>(map[i])] += dy[i];
            }
        });
    return out;
}

// ---- row/column plumbing ---------------------------------------------------

namespace {

void require_rank2(const Tensor& x, const char* tag) {
    if (x.rank() != 2) {
        throw DimError(std::string(tag) + ": expected rank-2 tensor, got " + shape_str(x.shape));
    }
}

}  // namespace

Tensor take_rows(const Tensor& x, const std::vector<int>& rows) {
    require_rank2(x, "take_rows");
    const std::int64_t r = x.shape[0], c = x.shape[1];
    Tensor out({static_cast<std::int64_t>(rows.size()), c});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const int ri = rows[i];
        if (ri < 0 || ri >= r) throw ContractError("take_rows: row index out of range");
        std::copy_n(x.data.data() + static_cast<std::int64_t>(ri) * c, c,
                    out.data.data() + static_cast<std::int64_t>(i) * c);
    }
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    std::vector<int> rws = rows;
    out.tape = x.tape;
    out.node = x.tape->push("take_rows", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::size_t i = 0; i < rws.size(); ++i) {
                for (std::int64_t j = 0; j < c; ++j) {
                    dx[static_cast<std::size_t>(static_cast<std::int64_t>(rws[i]) * c + j)] +=
                        dy[static_cast<std::size_t>(static_cast<std::int64_t>(i) * c + j)];
                }
            }
        });
    return out;
}

Tensor slice_cols(const Tensor& x, std::int64_t start, std::int64_t len) {
    require_rank2(x, "slice_cols");
    const std::int64_t r = x.shape[0], c = x.shape[1];
    if (start < 0 || len <= 0 || start + len > c) {
        throw DimError("slice_cols: invalid range [" + std::to_string(start) + ", " +
                       std::to_string(start + len) + ") for " + shape_str(x.shape));
    }
    Tensor out({r, len});
    for (std::int64_t i = 0; i < r; ++i) {
        std::copy_n(x.data.data() + i * c + start, len, out.data.data() + i * len);
    }
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    out.tape = x.tape;
    out.node = x.tape->push("slice_cols", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::int64_t i = 0; i < r; ++i) {
                for (std::int64_t j = 0; j < len; ++j) {
                    dx[static_cast<std::size_t>(i * c + start + j)] +=
                        dy[static_cast<std::size_t>(i * len + j)];
                }
            }
        });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::int64_t r = parts[0].shape.empty() ? 0 : parts[0].shape[0];
    std::int64_t total = 0;
    GradTape* tape = nullptr;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.shape[0] != r) throw DimError("concat_cols: row counts differ");
        total += p.shape[1];
        if (p.tape) tape = p.tape;
    }
    Tensor out({r, total});
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
        const std::int64_t c = p.shape[1];
        for (std::int64_t i = 0; i < r; ++i) {
            std::copy_n(p.data.data() + i * c, c, out.data.data() + i * total + off);
        }
        off += c;
    }
    if (!tape) return out;
    std::vector<std::int64_t> ids;
    std::vector<std::int64_t> widths;
    for (const Tensor& p : parts) {
        if (p.tape && p.tape != tape) throw ContractError("concat_cols: mixed tapes");
        ids.push_back(p.tape ? p.node : -1);
        widths.push_back(p.shape[1]);
    }
    out.tape = tape;
    out.node = tape->push("concat_cols", ids, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            std::int64_t o = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                const std::int64_t c = widths[k];
                if (ids[k] >= 0) {
                    auto& dp = t.grad_buffer(ids[k]);
                    for (std::int64_t i = 0; i < r; ++i) {
                        for (std::int64_t j = 0; j < c; ++j) {
                            dp[static_cast<std::size_t>(i * c + j)] +=
                                dy[static_cast<std::size_t>(i * total + o + j)];
                        }
                    }
                }
                o += c;
            }
        });
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const std::int64_t c = parts[0].rank() == 2 ? parts[0].shape[1] : 0;
    std::int64_t total = 0;
    GradTape* tape = nullptr;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.shape[1] != c) throw DimError("concat_rows: column counts differ");
        total += p.shape[0];
        if (p.tape) tape = p.tape;
    }
    Tensor out({total, c});
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data.begin(), p.data.end(), out.data.begin() + off * c);
        off += p.shape[0];
    }
    if (!tape) return out;
    std::vector<std::int64_t> ids;
    std::vector<std::int64_t> heights;
    for (const Tensor& p : parts) {
        if (p.tape && p.tape != tape) throw ContractError("concat_rows: mixed tapes");
        ids.push_back(p.tape ? p.node : -1);
        heights.push_back(p.shape[0]);
    }
    out.tape = tape;
    out.node = tape->push("concat_rows", ids, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            std::int64_t o = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                const std::int64_t h = heights[k];
                if (ids[k] >= 0) {
                    auto& dp = t.grad_buffer(ids[k]);
                    for (std::int64_t i = 0; i < h * c; ++i) {
                        dp[static_cast<std::size_t>(i)] += dy[static_cast<std::size_t>(o * c + i)];
                    }
                }
                o += h;
            }
        });
    return out;
}

Tensor repeat_rows(const Tensor& x, std::int64_t times) {
    require_rank2(x, "repeat_rows");
    if (times <= 0) throw ContractError("repeat_rows: times must be positive");
    const std::int64_t r = x.shape[0], c = x.shape[1];
    Tensor out({r * times, c});
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t t2 = 0; t2 < times; ++t2) {
            std::copy_n(x.data.data() + i * c, c, out.data.data() + (i * times + t2) * c);
        }
    }
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    out.tape = x.tape;
    out.node = x.tape->push("repeat_rows", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::int64_t i = 0; i < r; ++i) {
                for (std::int64_t t2 = 0; t2 < times; ++t2) {
                    for (std::int64_t j = 0; j < c; ++j) {
                        dx[static_cast<std::size_t>(i * c + j)] +=
                            dy[static_cast<std::size_t>((i * times + t2) * c + j)];
                    }
                }
            }
        });
    return out;
}

Tensor scatter_rows_replace(const Tensor& base, const std::vector<int>& rows, const Tensor& repl) {
    require_rank2(base, "scatter_rows_replace");
    require_rank2(repl, "scatter_rows_replace");
    const std::int64_t r = base.shape[0], c = base.shape[1];
    if (repl.shape[1] != c || repl.shape[0] != static_cast<std::int64_t>(rows.size())) {
        throw DimError("scatter_rows_replace: replacement shape " + shape_str(repl.shape) +
                       " does not match " + std::to_string(rows.size()) + " rows of width " +
                       std::to_string(c));
    }
    std::vector<char> seen(static_cast<std::size_t>(r), 0);
    for (int ri : rows) {
        if (ri < 0 || ri >= r) throw ContractError("scatter_rows_replace: row index out of range");
        if (seen[static_cast<std::size_t>(ri)]) {
            throw ContractError("scatter_rows_replace: duplicate row index");
        }
        seen[static_cast<std::size_t>(ri)] = 1;
    }
    Tensor out;
    out.shape = base.shape;
    out.data = base.data;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(repl.data.data() + static_cast<std::int64_t>(i) * c, c,
                    out.data.data() + static_cast<std::int64_t>(rows[i]) * c);
    }
    GradTape* tape = merge_tapes(base, repl);
    if (!tape) return out;
    const std::int64_t idb = base.node, idr = repl.node;
    std::vector<int> rws = rows;
    out.tape = tape;
    out.node = tape->push("scatter_rows_replace", {idb, idr}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idb >= 0) {
                auto& db = t.grad_buffer(idb);
                std::vector<char> replaced(static_cast<std::size_t>(r), 0);
                for (int ri : rws) replaced[static_cast<std::size_t>(ri)] = 1;
                for (std::int64_t i = 0; i < r; ++i) {
                    if (replaced[static_cast<std::size_t>(i)]) continue;
                    for (std::int64_t j = 0; j < c; ++j) {
                        db[static_cast<std::size_t>(i * c + j)] +=
                            dy[static_cast<std::size_t>(i * c + j)];
                    }
                }
            }
            if (idr >= 0) {
                auto& dr = t.grad_buffer(idr);
                for (std::size_t i = 0; i < rws.size(); ++i) {
                    for (std::int64_t j = 0; j < c; ++j) {
                        dr[static_cast<std::size_t>(static_cast<std::int64_t>(i) * c + j)] +=
                            dy[static_cast<std::size_t>(static_cast<std::int64_t>(rws[i]) * c + j)];
                    }
                }
            }
        });
    return out;
}

Tensor scale_rows(const Tensor& x, const std::vector<double>& per_row) {
    if (x.rank() < 1 || x.shape[0] != static_cast<std::int64_t>(per_row.size())) {
        throw DimError("scale_rows: leading extent of " + shape_str(x.shape) +
                       " does not match " + std::to_string(per_row.size()) + " coefficients");
    }
    const std::int64_t r = x.shape[0];
    const std::int64_t inner = x.numel() / r;
    Tensor out;
    out.shape = x.shape;
    out.data.assign(x.data.size(), 0.0);
    for (std::int64_t i = 0; i < r; ++i) {
        const double v = per_row[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < inner; ++j) {
            out.data[static_cast<std::size_t>(i * inner + j)] =
                x.data[static_cast<std::size_t>(i * inner + j)] * v;
        }
    }
    if (!x.tape) return out;
    const std::int64_t idx = x.node;
    std::vector<double> coeffs = per_row;
    out.tape = x.tape;
    out.node = x.tape->push("scale_rows", {idx}, out.numel(),
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            for (std::int64_t i = 0; i < r; ++i) {
                const double v = coeffs[static_cast<std::size_t>(i)];
                for (std::int64_t j = 0; j < inner; ++j) {
                    dx[static_cast<std::size_t>(i * inner + j)] +=
                        dy[static_cast<std::size_t>(i * inner + j)] * v;
                }
            }
        });
    return out;
}

// ---- losses -----------------------------------------------------------------

Tensor mse(const Tensor& pred, const Tensor& target) {
    if (pred.shape != target.shape) {
        throw DimError("mse: shape mismatch " + shape_str(pred.shape) + " vs " +
                       shape_str(target.shape));
    }
    const std::int64_t n = pred.numel();
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = pred.data[static_cast<std::size_t>(i)] -
                         target.data[static_cast<std::size_t>(i)];
        acc += d * d;
    }
    Tensor out = Tensor::scalar_of(acc / static_cast<double>(n));
    GradTape* tape = merge_tapes(pred, target);
    if (!tape) return out;
    const std::int64_t idp = pred.node, idt = target.node;
    std::vector<double> pd = pred.data, td = target.data;
    out.tape = tape;
    out.node = tape->push("mse", {idp, idt}, 1,
        [=](const std::vector<double>& dy, GradTape& t) {
            const double g = dy[0] * 2.0 / static_cast<double>(n);
            if (idp >= 0) {
                auto& dp = t.grad_buffer(idp);
                for (std::int64_t i = 0; i < n; ++i) {
                    dp[static_cast<std::size_t>(i)] +=
                        g * (pd[static_cast<std::size_t>(i)] - td[static_cast<std::size_t>(i)]);
                }
            }
            if (idt >= 0) {
                auto& dt = t.grad_buffer(idt);
                for (std::int64_t i = 0; i < n; ++i) {
                    dt[static_cast<std::size_t>(i)] -=
                        g * (pd[static_cast<std::size_t>(i)] - td[static_cast<std::size_t>(i)]);
                }
            }
        });
    return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    require_rank2(logits, "cross_entropy");
    const std::int64_t n = logits.shape[0], k = logits.shape[1];
    if (static_cast<std::int64_t>(labels.size()) != n) {
        throw DimError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                       std::to_string(n) + " rows");
    }
    std::vector<double> probs(logits.data.size());
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const int lab = labels[static_cast<std::size_t>(i)];
        if (lab < 0 || lab >= k) throw ContractError("cross_entropy: label out of range");
        const double* row = logits.data.data() + i * k;
        double mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const double e = std::exp(row[j] - mx);
            probs[static_cast<std::size_t>(i * k + j)] = e;
            s += e;
        }
        for (std::int64_t j = 0; j < k; ++j) probs[static_cast<std::size_t>(i * k + j)] /= s;
        loss -= std::log(probs[static_cast<std::size_t>(i * k + lab)]);
    }
    Tensor out = Tensor::scalar_of(loss / static_cast<double>(n));
    if (!logits.tape) return out;
    const std::int64_t idx = logits.node;
    std::vector<int> labs = labels;
    out.tape = logits.tape;
    out.node = logits.tape->push("cross_entropy", {idx}, 1,
        [=](const std::vector<double>& dy, GradTape& t) {
            if (idx < 0) return;
            auto& dx = t.grad_buffer(idx);
            const double g = dy[0] / static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                for (std::int64_t j = 0; j < k; ++j) {
                    double p = probs[static_cast<std::size_t>(i * k + j)];
                    if (j == labs[static_cast<std::size_t>(i)]) p -= 1.0;
                    dx[static_cast<std::size_t>(i * k + j)] += g * p;
                }
            }
        });
    return out;
}

}  // namespace efdit
