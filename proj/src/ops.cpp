#include "moelab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "moelab/errors.hpp"

namespace moelab::ops {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;

using BackwardFn = std::function<void(Node&)>;

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> inputs, const char* op,
                   BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    if (grad_enabled()) {
        bool any = false;
        for (const auto& t : inputs) any = any || t.requires_grad();
        if (any) {
            node->requires_grad = true;
            for (const auto& t : inputs) node->parents.push_back(t.node());
            node->backward_fn = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, const char* op,
                   BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    if (grad_enabled()) {
        bool any = false;
        for (const auto& t : inputs) any = any || t.requires_grad();
        if (any) {
            node->requires_grad = true;
            for (const auto& t : inputs) node->parents.push_back(t.node());
            node->backward_fn = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

// Gradient buffer of a parent, or nullptr when it does not take one.
double* grad_of(Node& self, std::size_t i) {
    Node& p = *self.parents[i];
    return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

void require_2d(const Tensor& t, const char* op) {
    if (t.dim() != 2) throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

enum class Pairing { Same, RowBroadcast };

Pairing pairing(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Pairing::Same;
    if (a.dim() == 2 && b.numel() == a.cols() && b.rows() == 1) return Pairing::RowBroadcast;
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not compatible");
}

template <class Fwd, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, DA da, DB db) {
    const Pairing pr = pairing(a, b, op);
    const std::size_t n = a.numel();
    const std::size_t width = b.numel();
    auto av = a.data();
    auto bv = b.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[pr == Pairing::Same ? i : i % width]);
    return make_result(a.shape(), std::move(out), {a, b}, op, [pr, n, width, da, db](Node& self) {
        const auto& x = self.parents[0]->data;
        const auto& y = self.parents[1]->data;
        double* ga = grad_of(self, 0);
        double* gb = grad_of(self, 1);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = pr == Pairing::Same ? i : i % width;
            const double g = self.grad[i];
            if (ga) ga[i] += g * da(x[i], y[j], self.data[i]);
            if (gb) gb[j] += g * db(x[i], y[j], self.data[i]);
        }
    });
}

template <class Fwd, class D>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, D deriv) {
    auto av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return make_result(a.shape(), std::move(out), {a}, op, [deriv](Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        const auto& x = self.parents[0]->data;
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * deriv(x[i], self.data[i]);
    });
}

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n);
    Map(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    return make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Node& self) {
        ConstMap dc(self.grad.data(), m, n);
        if (double* ga = grad_of(self, 0)) {
            Map(ga, m, k).noalias() += dc * ConstMap(self.parents[1]->data.data(), k, n).transpose();
        }
        if (double* gb = grad_of(self, 1)) {
            Map(gb, k, n).noalias() += ConstMap(self.parents[0]->data.data(), m, k).transpose() * dc;
        }
    });
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    Map(out.data(), c, r) = ConstMap(a.data().data(), r, c).transpose();
    return make_result({c, r}, std::move(out), {a}, "transpose", [r, c](Node& self) {
        if (double* ga = grad_of(self, 0)) Map(ga, r, c) += ConstMap(self.grad.data(), c, r).transpose();
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double out) { return -out / y; });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(
        a, "scale", [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(
        a, "add_scalar", [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
    return unary(
        a, "exp", [](double x) { return std::exp(x); }, [](double, double out) { return out; });
}

Tensor log(const Tensor& a) {
    return unary(
        a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor softplus(const Tensor& a) {
    return unary(
        a, "softplus",
        [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x, double) { return stable_sigmoid(x); });
}

Tensor relu(const Tensor& a) {
    return unary(
        a, "relu", [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
    return unary(
        a, "gelu",
        [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
        [](double x, double) {
            const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
    // Slices are addressed as (count, length, stride between elements).
    std::size_t count = 1, length = a.numel(), elem_stride = 1, slice_stride = 0;
    if (a.dim() == 2) {
        if (axis == 1) {
            count = a.rows();
            length = a.cols();
            slice_stride = a.cols();
        } else if (axis == 0) {
            count = a.cols();
            length = a.rows();
            elem_stride = a.cols();
            slice_stride = 1;
        } else {
            throw DimensionError("softmax: axis out of range");
        }
    } else if (a.dim() > 2 || axis > 1) {
        throw DimensionError("softmax: axis out of range for " + shape_str(a.shape()));
    }
    auto in = a.data();
    std::vector<double> out(in.size(), 0.0);
    for (std::size_t s = 0; s < count; ++s) {
        const std::size_t base = s * slice_stride;
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < length; ++i) {
            const double x = in[base + i * elem_stride];
            if (std::isnan(x) || x == std::numeric_limits<double>::infinity()) {
                throw ContractError("softmax: NaN or +inf input");
            }
            peak = std::max(peak, x);
        }
        if (std::isinf(peak)) throw DegenerateSliceError("softmax: slice has no finite entry");
        double total = 0.0;
        for (std::size_t i = 0; i < length; ++i) {
            const std::size_t at = base + i * elem_stride;
            const double e = std::isinf(in[at]) ? 0.0 : std::exp(in[at] - peak);
            out[at] = e;
            total += e;
        }
        for (std::size_t i = 0; i < length; ++i) out[base + i * elem_stride] /= total;
    }
    return make_result(a.shape(), std::move(out), {a}, "softmax",
                       [count, length, elem_stride, slice_stride](Node& self) {
                           double* ga = grad_of(self, 0);
                           if (!ga) return;
                           for (std::size_t s = 0; s < count; ++s) {
                               const std::size_t base = s * slice_stride;
                               double dot = 0.0;
                               for (std::size_t i = 0; i < length; ++i) {
                                   const std::size_t at = base + i * elem_stride;
                                   dot += self.data[at] * self.grad[at];
                               }
                               for (std::size_t i = 0; i < length; ++i) {
                                   const std::size_t at = base + i * elem_stride;
                                   ga[at] += self.data[at] * (self.grad[at] - dot);
                               }
                           }
                       });
}

Tensor log_softmax(const Tensor& a) {
    const std::size_t r = a.rows(), c = a.cols();
    auto in = a.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = in.data() + i * c;
        const double peak = *std::max_element(x, x + c);
        if (std::isinf(peak)) throw DegenerateSliceError("log_softmax: row has no finite entry");
        double total = 0.0;
        for (std::size_t j = 0; j < c; ++j) total += std::exp(x[j] - peak);
        const double lse = peak + std::log(total);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[j] - lse;
    }
    return make_result(a.shape(), std::move(out), {a}, "log_softmax", [r, c](Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < r; ++i) {
            double gsum = 0.0;
            for (std::size_t j = 0; j < c; ++j) gsum += self.grad[i * c + j];
            for (std::size_t j = 0; j < c; ++j) {
                ga[i * c + j] += self.grad[i * c + j] - std::exp(self.data[i * c + j]) * gsum;
            }
        }
    });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double x : a.data()) total += x;
    return make_result({}, {total}, {a}, "sum", [](Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        const std::size_t n = self.parents[0]->data.size();
        for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[0];
    });
}

Tensor mean(const Tensor& a) {
    const double n = static_cast<double>(a.numel());
    double total = 0.0;
    for (double x : a.data()) total += x;
    return make_result({}, {total / n}, {a}, "mean", [n](Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        const std::size_t count = self.parents[0]->data.size();
        for (std::size_t i = 0; i < count; ++i) ga[i] += self.grad[0] / n;
    });
}

Tensor sum_rows(const Tensor& a) {
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(c, 0.0);
    auto in = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += in[i * c + j];
    return make_result({1, c}, std::move(out), {a}, "sum_rows", [r, c](Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += self.grad[j];
    });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
    const std::size_t r = a.rows(), c = a.cols();
    if (index.empty()) throw ContractError("gather_rows: empty index");
    std::vector<double> out(index.size() * c);
    auto in = a.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= r) throw DimensionError("gather_rows: row index out of range");
        std::copy_n(in.data() + index[i] * c, c, out.data() + i * c);
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make_result({idx.size(), c}, std::move(out), {a}, "gather_rows", [idx, c](Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) ga[idx[i] * c + j] += self.grad[i * c + j];
    });
}

Tensor scatter_rows(const Tensor& src, std::span<const std::size_t> index, std::size_t out_rows) {
    const std::size_t c = src.cols();
    if (index.size() != src.rows()) throw DimensionError("scatter_rows: index length differs from source rows");
    std::vector<double> out(out_rows * c, 0.0);
    auto in = src.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= out_rows) throw DimensionError("scatter_rows: row index out of range");
        for (std::size_t j = 0; j < c; ++j) out[index[i] * c + j] += in[i * c + j];
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make_result({out_rows, c}, std::move(out), {src}, "scatter_rows", [idx, c](Node& self) {
        double* gs = grad_of(self, 0);
        if (!gs) return;
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) gs[i * c + j] += self.grad[idx[i] * c + j];
    });
}

Tensor select_column(const Tensor& a, std::span<const std::size_t> index, std::size_t column) {
    const std::size_t r = a.rows(), c = a.cols();
    if (column >= c) throw DimensionError("select_column: column out of range");
    std::vector<double> out(index.size());
    auto in = a.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= r) throw DimensionError("select_column: row index out of range");
        out[i] = in[index[i] * c + column];
    }
    std::vector<std::size_t> idx(index.begin(), index.end());
    return make_result({idx.size(), 1}, std::move(out), {a}, "select_column", [idx, c, column](Node& self) {
        double* ga = grad_of(self, 0);
        if (!ga) return;
        for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i] * c + column] += self.grad[i];
    });
}

Tensor scale_rows(const Tensor& a, const Tensor& w) {
    const std::size_t r = a.rows(), c = a.cols();
    if (w.numel() != r) throw DimensionError("scale_rows: need one weight per row");
    std::vector<double> out(r * c);
    auto av = a.data();
    auto wv = w.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = av[i * c + j] * wv[i];
    return make_result(a.shape(), std::move(out), {a, w}, "scale_rows", [r, c](Node& self) {
        const auto& x = self.parents[0]->data;
        const auto& wt = self.parents[1]->data;
        double* ga = grad_of(self, 0);
        double* gw = grad_of(self, 1);
        for (std::size_t i = 0; i < r; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                const double g = self.grad[i * c + j];
                if (ga) ga[i * c + j] += g * wt[i];
                acc += g * x[i * c + j];
            }
            if (gw) gw[i] += acc;
        }
    });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0) throw DimensionError("embedding: negative id");
        idx[i] = static_cast<std::size_t>(ids[i]);
    }
    return gather_rows(table, idx);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    if (axis > 1) throw DimensionError("concat: axis out of range");
    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat");
        const std::size_t other = axis == 0 ? p.cols() : p.rows();
        const std::size_t ref = axis == 0 ? parts[0].cols() : parts[0].rows();
        if (other != ref) throw DimensionError("concat: mismatched extents");
        offsets.push_back(total);
        total += axis == 0 ? p.rows() : p.cols();
    }
    const std::size_t r = axis == 0 ? total : parts[0].rows();
    const std::size_t c = axis == 0 ? parts[0].cols() : total;
    std::vector<double> out(r * c);
    std::vector<std::pair<std::size_t, std::size_t>> extents;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& t = parts[p];
        auto in = t.data();
        extents.emplace_back(t.rows(), t.cols());
        for (std::size_t i = 0; i < t.rows(); ++i)
            for (std::size_t j = 0; j < t.cols(); ++j) {
                const std::size_t oi = axis == 0 ? offsets[p] + i : i;
                const std::size_t oj = axis == 0 ? j : offsets[p] + j;
                out[oi * c + oj] = in[i * t.cols() + j];
            }
    }
    return make_result({r, c}, std::move(out), parts, "concat", [offsets, extents, axis, c](Node& self) {
        for (std::size_t p = 0; p < extents.size(); ++p) {
            double* gp = grad_of(self, p);
            if (!gp) continue;
            const auto [pr, pc] = extents[p];
            for (std::size_t i = 0; i < pr; ++i)
                for (std::size_t j = 0; j < pc; ++j) {
                    const std::size_t oi = axis == 0 ? offsets[p] + i : i;
                    const std::size_t oj = axis == 0 ? j : offsets[p] + j;
                    gp[i * pc + j] += self.grad[oi * c + oj];
                }
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.numel() != c || bias.numel() != c) throw DimensionError("layer_norm: gain/bias width mismatch");
    auto in = x.data();
    auto g = gain.data();
    auto b = bias.data();
    std::vector<double> out(r * c);
    // Normalized activations and per-row inverse std, kept for the reverse pass.
    std::vector<double> xhat(r * c), inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        const double* row = in.data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += row[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (row[j] - mu) * inv_std[i];
            out[i * c + j] = xhat[i * c + j] * g[j] + b[j];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gain, bias}, "layer_norm",
                       [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                           const auto& gv = self.parents[1]->data;
                           double* gx = grad_of(self, 0);
                           double* gg = grad_of(self, 1);
                           double* gb = grad_of(self, 2);
                           const double n = static_cast<double>(c);
                           std::vector<double> dxhat(c);
                           for (std::size_t i = 0; i < r; ++i) {
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t j = 0; j < c; ++j) {
                                   const double dy = self.grad[i * c + j];
                                   if (gg) gg[j] += dy * xhat[i * c + j];
                                   if (gb) gb[j] += dy;
                                   dxhat[j] = dy * gv[j];
                                   s1 += dxhat[j];
                                   s2 += dxhat[j] * xhat[i * c + j];
                               }
                               if (!gx) continue;
                               for (std::size_t j = 0; j < c; ++j) {
                                   gx[i * c + j] += inv_std[i] / n * (n * dxhat[j] - s1 - xhat[i * c + j] * s2);
                               }
                           }
                       });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch, std::size_t seq,
                        std::size_t heads) {
    if (q.shape() != k.shape() || q.shape() != v.shape()) throw DimensionError("causal_attention: q/k/v shapes differ");
    const std::size_t d = q.cols();
    if (q.rows() != batch * seq) throw DimensionError("causal_attention: rows != batch*seq");
    if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto qd = q.data();
    auto kd = k.data();
    auto vd = v.data();
    std::vector<double> out(batch * seq * d, 0.0);
    // Attention weights per (batch, head), lower-triangular seq x seq.
    std::vector<double> probs(batch * heads * seq * seq, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            double* attn = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const double* qi = qd.data() + (b * seq + i) * d + h * dh;
                double peak = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j <= i; ++j) {
                    const double* kj = kd.data() + (b * seq + j) * d + h * dh;
                    double s = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
                    s *= inv_sqrt;
                    attn[i * seq + j] = s;
                    peak = std::max(peak, s);
                }
                double total = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    attn[i * seq + j] = std::exp(attn[i * seq + j] - peak);
                    total += attn[i * seq + j];
                }
                double* oi = out.data() + (b * seq + i) * d + h * dh;
                for (std::size_t j = 0; j <= i; ++j) {
                    attn[i * seq + j] /= total;
                    const double* vj = vd.data() + (b * seq + j) * d + h * dh;
                    for (std::size_t t = 0; t < dh; ++t) oi[t] += attn[i * seq + j] * vj[t];
                }
            }
        }
    }
    return make_result(
        q.shape(), std::move(out), {q, k, v}, "causal_attention",
        [batch, seq, heads, d, dh, inv_sqrt, probs = std::move(probs)](Node& self) {
            const auto& qd = self.parents[0]->data;
            const auto& kd = self.parents[1]->data;
            const auto& vd = self.parents[2]->data;
            double* gq = grad_of(self, 0);
            double* gk = grad_of(self, 1);
            double* gv = grad_of(self, 2);
            std::vector<double> dattn(seq);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* attn = probs.data() + (b * heads + h) * seq * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const double* go = self.grad.data() + (b * seq + i) * d + h * dh;
                        double dot = 0.0;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const double* vj = vd.data() + (b * seq + j) * d + h * dh;
                            double s = 0.0;
                            for (std::size_t t = 0; t < dh; ++t) s += go[t] * vj[t];
                            dattn[j] = s;
                            dot += s * attn[i * seq + j];
                            if (gv) {
                                double* gvj = gv + (b * seq + j) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) gvj[t] += attn[i * seq + j] * go[t];
                            }
                        }
                        const double* qi = qd.data() + (b * seq + i) * d + h * dh;
                        for (std::size_t j = 0; j <= i; ++j) {
                            const double ds = attn[i * seq + j] * (dattn[j] - dot) * inv_sqrt;
                            const double* kj = kd.data() + (b * seq + j) * d + h * dh;
                            if (gq) {
                                double* gqi = gq + (b * seq + i) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) gqi[t] += ds * kj[t];
                            }
                            if (gk) {
                                double* gkj = gk + (b * seq + j) * d + h * dh;
                                for (std::size_t t = 0; t < dh; ++t) gkj[t] += ds * qi[t];
                            }
                        }
                    }
                }
            }
        });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
    const std::size_t r = logits.rows(), c = logits.cols();
    if (targets.size() != r || mask.size() != r) throw DimensionError("cross_entropy: targets/mask length != rows");
    std::size_t count = 0;
    for (auto m : mask) count += m ? 1 : 0;
    if (count == 0) throw ContractError("cross_entropy: mask selects no rows");
    auto in = logits.data();
    std::vector<double> probs(r * c, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (!mask[i]) continue;
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) throw DimensionError("cross_entropy: target id");
        const double* x = in.data() + i * c;
        const double peak = *std::max_element(x, x + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - peak);
        total += -(x[targets[i]] - peak - std::log(z));
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(x[j] - peak) / z;
    }
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    const double n = static_cast<double>(count);
    return make_result({}, {total / n}, {logits}, "cross_entropy",
                       [r, c, n, tg = std::move(tg), mk = std::move(mk), probs = std::move(probs)](Node& self) {
                           double* gl = grad_of(self, 0);
                           if (!gl) return;
                           const double g = self.grad[0] / n;
                           for (std::size_t i = 0; i < r; ++i) {
                               if (!mk[i]) continue;
                               for (std::size_t j = 0; j < c; ++j) gl[i * c + j] += g * probs[i * c + j];
                               gl[i * c + static_cast<std::size_t>(tg[i])] -= g;
                           }
                       });
}

Tensor kl_rows(const Tensor& log_p, const Tensor& log_q, std::span<const std::uint8_t> mask) {
    if (log_p.shape() != log_q.shape()) throw DimensionError("kl_rows: distribution shapes differ");
    const std::size_t r = log_p.rows(), c = log_p.cols();
    if (mask.size() != r) throw DimensionError("kl_rows: mask length != rows");
    std::size_t count = 0;
    for (auto m : mask) count += m ? 1 : 0;
    if (count == 0) throw ContractError("kl_rows: mask selects no rows");
    auto lp = log_p.data();
    auto lq = log_q.data();
    double total = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
        if (!mask[i]) continue;
        for (std::size_t j = 0; j < c; ++j) {
            const double p = std::exp(lp[i * c + j]);
            if (p == 0.0) continue;
            total += p * (lp[i * c + j] - lq[i * c + j]);
        }
    }
    std::vector<std::uint8_t> mk(mask.begin(), mask.end());
    const double n = static_cast<double>(count);
    return make_result({}, {total / n}, {log_p, log_q}, "kl_rows", [r, c, n, mk = std::move(mk)](Node& self) {
        const auto& lp = self.parents[0]->data;
        const auto& lq = self.parents[1]->data;
        double* gp = grad_of(self, 0);
        double* gq = grad_of(self, 1);
        const double g = self.grad[0] / n;
        for (std::size_t i = 0; i < r; ++i) {
            if (!mk[i]) continue;
            for (std::size_t j = 0; j < c; ++j) {
                const std::size_t at = i * c + j;
                const double p = std::exp(lp[at]);
                if (p == 0.0) continue;
                if (gp) gp[at] += g * p * (lp[at] - lq[at] + 1.0);
                if (gq) gq[at] -= g * p;
            }
        }
    });
}

Tensor cv_squared(const Tensor& v) {
    const std::size_t n = v.numel();
    auto x = v.data();
    // deviations from the first entry, so equal entries give exactly zero
    const double origin = x[0];
    double shift = 0.0;
    for (double e : x) shift += e - origin;
    shift /= static_cast<double>(n);
    const double mu = origin + shift;
    double var = 0.0;
    for (double e : x) var += ((e - origin) - shift) * ((e - origin) - shift);
    var /= static_cast<double>(n);
    const bool floored = mu <= kCvMeanFloor;
    const double denom = floored ? kCvMeanFloor : mu;
    return make_result({}, {var / (denom * denom)}, {v}, "cv_squared", [n, mu, var, denom, floored](Node& self) {
        double* gv = grad_of(self, 0);
        if (!gv) return;
        const auto& x = self.parents[0]->data;
        const double nn = static_cast<double>(n);
        const double g = self.grad[0];
        for (std::size_t i = 0; i < n; ++i) {
            double d = 2.0 * (x[i] - mu) / nn / (denom * denom);
            if (!floored) d -= 2.0 * var / (denom * denom * denom) / nn;
            gv[i] += g * d;
        }
    });
}

}  // namespace moelab::ops
