#include "mutualctr/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mutualctr::ad {

namespace {

// C[m x n] += A[m x k] · B[k x n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = arow[p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// Z[m x k] += X[m x n] · Yᵀ   (Y is [k x n])
void gemm_nt(const double* x, const double* y, double* z, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* xrow = x + i * n;
        double* zrow = z + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* yrow = y + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += xrow[j] * yrow[j];
            zrow[p] += acc;
        }
    }
}

// Z[k x n] += Xᵀ · Y   (X is [m x k], Y is [m x n])
void gemm_tn(const double* x, const double* y, double* z, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* xrow = x + i * k;
        const double* yrow = y + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double xv = xrow[p];
            double* zrow = z + p * n;
            for (std::size_t j = 0; j < n; ++j) zrow[j] += xv * yrow[j];
        }
    }
}

Tensor& grad_slot(std::vector<Tensor>& grads, std::size_t idx, const std::vector<std::size_t>& shape) {
    if (grads[idx].empty()) grads[idx] = Tensor::zeros(shape);
    return grads[idx];
}

double stable_sigmoid(double x) {
    double p;
    if (x >= 0.0) {
        p = 1.0 / (1.0 + std::exp(-x));
    } else {
        double t = std::exp(x);
        p = t / (1.0 + t);
    }
    // exp underflow at extreme inputs would land exactly on 0 or 1
    if (p >= 1.0) p = std::nextafter(1.0, 0.0);
    if (p <= 0.0) p = std::numeric_limits<double>::min();
    return p;
}

void require_rank2(const Var& v, const char* op) {
    if (v.shape().size() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got shape " + shape_str(v.shape()));
    }
}

} // namespace

const Tensor& Var::value() const { return tape->value_of(node); }
const std::vector<std::size_t>& Var::shape() const { return value().shape(); }

Tensor Gradients::get(const Parameter& p) const {
    auto it = grads_.find(&p);
    if (it == grads_.end()) return Tensor::zeros(p.value.shape());
    return it->second;
}

const Tensor* Gradients::find(const Parameter& p) const {
    auto it = grads_.find(&p);
    return it == grads_.end() ? nullptr : &it->second;
}

const Tensor& Tape::value_of(std::size_t node) const { return nodes_[node].val(); }

Var Tape::push(Tensor value, std::function<void(const Tensor&, std::vector<Tensor>&)> backward) {
    Node n;
    n.owned = std::move(value);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) { return push(std::move(value), nullptr); }

Var Tape::parameter(const Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{this, it->second};
    Node n;
    n.external = &p.value;
    nodes_.push_back(std::move(n));
    std::size_t idx = nodes_.size() - 1;
    param_nodes_.emplace(&p, idx);
    return Var{this, idx};
}

Var Tape::detach(Var x) { return constant(x.value()); }

Var Tape::matmul(Var a, Var b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    if (bv.rows() != k) {
        throw std::invalid_argument("matmul: inner dimensions differ: " + shape_str(av.shape()) + " x " +
                                    shape_str(bv.shape()));
    }
    Tensor out = Tensor::zeros({m, n});
    gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
    return push(std::move(out), [this, ai = a.node, bi = b.node, m, k, n](const Tensor& g, std::vector<Tensor>& grads) {
        const Tensor& A = value_of(ai);
        const Tensor& B = value_of(bi);
        gemm_nt(g.data(), B.data(), grad_slot(grads, ai, A.shape()).data(), m, n, k);
        gemm_tn(A.data(), g.data(), grad_slot(grads, bi, B.shape()).data(), m, k, n);
    });
}

Var Tape::add(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.same_shape(bv)) {
        Tensor out = av;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
        return push(std::move(out), [ai = a.node, bi = b.node, sh = av.shape()](const Tensor& g, std::vector<Tensor>& grads) {
            Tensor& da = grad_slot(grads, ai, sh);
            Tensor& db = grad_slot(grads, bi, sh);
            for (std::size_t i = 0; i < g.numel(); ++i) {
                da[i] += g[i];
                db[i] += g[i];
            }
        });
    }
    // bias broadcast: [m x n] + [n]
    if (av.rank() == 2 && bv.rank() == 1 && bv.numel() == av.cols()) {
        std::size_t m = av.rows(), n = av.cols();
        Tensor out = av;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
        return push(std::move(out), [ai = a.node, bi = b.node, m, n, ash = av.shape(), bsh = bv.shape()](
                                        const Tensor& g, std::vector<Tensor>& grads) {
            Tensor& da = grad_slot(grads, ai, ash);
            Tensor& db = grad_slot(grads, bi, bsh);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    da[i * n + j] += g[i * n + j];
                    db[j] += g[i * n + j];
                }
        });
    }
    throw std::invalid_argument("add: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                                " are neither equal nor a bias broadcast");
}

Var Tape::sub(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv)) {
        throw std::invalid_argument("sub: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
    Tensor out = av;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return push(std::move(out), [ai = a.node, bi = b.node, sh = av.shape()](const Tensor& g, std::vector<Tensor>& grads) {
        Tensor& da = grad_slot(grads, ai, sh);
        Tensor& db = grad_slot(grads, bi, sh);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            da[i] += g[i];
            db[i] -= g[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.same_shape(bv)) {
        Tensor out = av;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
        return push(std::move(out),
                    [this, ai = a.node, bi = b.node, sh = av.shape()](const Tensor& g, std::vector<Tensor>& grads) {
                        const Tensor& A = value_of(ai);
                        const Tensor& B = value_of(bi);
                        Tensor& da = grad_slot(grads, ai, sh);
                        Tensor& db = grad_slot(grads, bi, sh);
                        for (std::size_t i = 0; i < g.numel(); ++i) {
                            da[i] += g[i] * B[i];
                            db[i] += g[i] * A[i];
                        }
                    });
    }
    // row scaling: [m x n] * [m x 1] in either order
    const bool a_is_col = av.rank() == 2 && av.cols() == 1;
    const bool b_is_col = bv.rank() == 2 && bv.cols() == 1;
    Var full = b_is_col ? a : b;
    Var col = b_is_col ? b : a;
    const Tensor& fv = full.value();
    const Tensor& cv = col.value();
    if ((a_is_col || b_is_col) && fv.rank() == 2 && cv.rank() == 2 && cv.rows() == fv.rows()) {
        std::size_t m = fv.rows(), n = fv.cols();
        Tensor out = fv;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= cv[i];
        return push(std::move(out), [this, fi = full.node, ci = col.node, m, n](const Tensor& g, std::vector<Tensor>& grads) {
            const Tensor& F = value_of(fi);
            const Tensor& C = value_of(ci);
            Tensor& df = grad_slot(grads, fi, F.shape());
            Tensor& dc = grad_slot(grads, ci, C.shape());
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    df[i * n + j] += g[i * n + j] * C[i];
                    acc += g[i * n + j] * F[i * n + j];
                }
                dc[i] += acc;
            }
        });
    }
    throw std::invalid_argument("mul: shapes " + shape_str(av.shape()) + " and " + shape_str(bv.shape()) +
                                " are neither equal nor a row-scaling broadcast");
}

Var Tape::unary_map(Var x, double (*fwd)(double), double (*grad)(double, double)) {
    const Tensor& xv = x.value();
    Tensor out = xv;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(out[i]);
    return push(std::move(out),
                [this, xi = x.node, self = nodes_.size(), grad](const Tensor& g, std::vector<Tensor>& grads) {
                    const Tensor& in = value_of(xi);
                    const Tensor& outv = value_of(self);
                    Tensor& dx = grad_slot(grads, xi, in.shape());
                    for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i] * grad(in[i], outv[i]);
                });
}

Var Tape::square(Var x) {
    return unary_map(
        x, [](double v) { return v * v; }, [](double in, double) { return 2.0 * in; });
}

Var Tape::log(Var x) {
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        if (!(xv[i] > 0.0)) {
            throw std::domain_error("log: non-positive input " + std::to_string(xv[i]) + " at flat index " +
                                    std::to_string(i));
        }
    }
    return unary_map(
        x, [](double v) { return std::log(v); }, [](double in, double) { return 1.0 / in; });
}

Var Tape::sigmoid(Var x) {
    return unary_map(
        x, [](double v) { return stable_sigmoid(v); }, [](double, double out) { return out * (1.0 - out); });
}

Var Tape::relu(Var x) {
    return unary_map(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double in, double) { return in > 0.0 ? 1.0 : 0.0; });
}

Var Tape::scale(Var x, double c) {
    const Tensor& xv = x.value();
    Tensor out = xv;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return push(std::move(out), [xi = x.node, c, sh = xv.shape()](const Tensor& g, std::vector<Tensor>& grads) {
        Tensor& dx = grad_slot(grads, xi, sh);
        for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += c * g[i];
    });
}

Var Tape::clamp(Var x, double lo, double hi) {
    const Tensor& xv = x.value();
    Tensor out = xv;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::min(std::max(out[i], lo), hi);
    return push(std::move(out), [this, xi = x.node, lo, hi](const Tensor& g, std::vector<Tensor>& grads) {
        const Tensor& in = value_of(xi);
        Tensor& dx = grad_slot(grads, xi, in.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) {
            if (in[i] > lo && in[i] < hi) dx[i] += g[i];
        }
    });
}

Var Tape::sum(Var x) {
    const Tensor& xv = x.value();
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
    return push(Tensor::scalar(acc), [xi = x.node, sh = xv.shape()](const Tensor& g, std::vector<Tensor>& grads) {
        Tensor& dx = grad_slot(grads, xi, sh);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g[0];
    });
}

Var Tape::mean(Var x) {
    const Tensor& xv = x.value();
    double inv = 1.0 / static_cast<double>(xv.numel());
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i];
    return push(Tensor::scalar(acc * inv), [xi = x.node, sh = xv.shape(), inv](const Tensor& g, std::vector<Tensor>& grads) {
        Tensor& dx = grad_slot(grads, xi, sh);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += g[0] * inv;
    });
}

Var Tape::sum(Var x, std::size_t axis) {
    const Tensor& xv = x.value();
    if (axis >= xv.rank()) {
        throw std::invalid_argument("sum: axis " + std::to_string(axis) + " out of range for shape " +
                                    shape_str(xv.shape()));
    }
    if (xv.rank() == 1) return reshape(sum(x), {1});
    std::size_t m = xv.rows(), n = xv.cols();
    if (axis == 0) {
        Tensor out = Tensor::zeros({1, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j] += xv[i * n + j];
        return push(std::move(out), [xi = x.node, m, n](const Tensor& g, std::vector<Tensor>& grads) {
            Tensor& dx = grad_slot(grads, xi, {m, n});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[j];
        });
    }
    Tensor out = Tensor::zeros({m, 1});
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += xv[i * n + j];
        out[i] = acc;
    }
    return push(std::move(out), [xi = x.node, m, n](const Tensor& g, std::vector<Tensor>& grads) {
        Tensor& dx = grad_slot(grads, xi, {m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += g[i];
    });
}

Var Tape::mean(Var x, std::size_t axis) {
    const Tensor& xv = x.value();
    if (axis >= xv.rank()) {
        throw std::invalid_argument("mean: axis " + std::to_string(axis) + " out of range for shape " +
                                    shape_str(xv.shape()));
    }
    std::size_t count = xv.shape()[axis];
    return scale(sum(x, axis), 1.0 / static_cast<double>(count));
}

Var Tape::concat(std::span<const Var> parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no operands");
    const std::size_t rank = parts[0].shape().size();
    if (axis >= rank) {
        throw std::invalid_argument("concat: axis " + std::to_string(axis) + " out of range for rank " +
                                    std::to_string(rank));
    }
    for (const Var& p : parts) {
        if (p.shape().size() != rank) throw std::invalid_argument("concat: mixed ranks");
        for (std::size_t d = 0; d < rank; ++d) {
            if (d != axis && p.shape()[d] != parts[0].shape()[d]) {
                throw std::invalid_argument("concat: off-axis shape mismatch " + shape_str(p.shape()) + " vs " +
                                            shape_str(parts[0].shape()));
            }
        }
    }
    std::vector<std::size_t> operand_nodes;
    operand_nodes.reserve(parts.size());
    for (const Var& p : parts) operand_nodes.push_back(p.node);

    if (rank == 1 || axis == 0) {
        // stack along rows (or plain vector concat)
        std::size_t total_rows = 0;
        for (const Var& p : parts) total_rows += p.shape()[0];
        std::vector<std::size_t> out_shape = parts[0].shape();
        out_shape[0] = total_rows;
        std::size_t row_width = 1;
        for (std::size_t d = 1; d < rank; ++d) row_width *= out_shape[d];
        Tensor out = Tensor::zeros(out_shape);
        std::size_t off = 0;
        for (const Var& p : parts) {
            const Tensor& pv = p.value();
            std::copy(pv.data(), pv.data() + pv.numel(), out.data() + off);
            off += pv.numel();
        }
        return push(std::move(out), [this, ops = std::move(operand_nodes)](const Tensor& g, std::vector<Tensor>& grads) {
            std::size_t off = 0;
            for (std::size_t node : ops) {
                const Tensor& pv = value_of(node);
                Tensor& dp = grad_slot(grads, node, pv.shape());
                for (std::size_t i = 0; i < pv.numel(); ++i) dp[i] += g[off + i];
                off += pv.numel();
            }
        });
    }

    // axis == 1, rank 2: column-wise concat
    std::size_t m = parts[0].shape()[0];
    std::size_t total_cols = 0;
    for (const Var& p : parts) total_cols += p.shape()[1];
    Tensor out = Tensor::zeros({m, total_cols});
    std::size_t col_off = 0;
    for (const Var& p : parts) {
        const Tensor& pv = p.value();
        std::size_t w = pv.cols();
        for (std::size_t i = 0; i < m; ++i)
            std::copy(pv.data() + i * w, pv.data() + (i + 1) * w, out.data() + i * total_cols + col_off);
        col_off += w;
    }
    return push(std::move(out),
                [this, ops = std::move(operand_nodes), m, total_cols](const Tensor& g, std::vector<Tensor>& grads) {
                    std::size_t col_off = 0;
                    for (std::size_t node : ops) {
                        const Tensor& pv = value_of(node);
                        std::size_t w = pv.cols();
                        Tensor& dp = grad_slot(grads, node, pv.shape());
                        for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < w; ++j) dp[i * w + j] += g[i * total_cols + col_off + j];
                        col_off += w;
                    }
                });
}

Var Tape::slice_cols(Var x, std::size_t start, std::size_t len) {
    require_rank2(x, "slice_cols");
    const Tensor& xv = x.value();
    std::size_t m = xv.rows(), n = xv.cols();
    if (len == 0 || start + len > n) {
        throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                                    ") out of bounds for " + shape_str(xv.shape()));
    }
    Tensor out = Tensor::zeros({m, len});
    for (std::size_t i = 0; i < m; ++i)
        std::copy(xv.data() + i * n + start, xv.data() + i * n + start + len, out.data() + i * len);
    return push(std::move(out), [xi = x.node, m, n, start, len](const Tensor& g, std::vector<Tensor>& grads) {
        Tensor& dx = grad_slot(grads, xi, {m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < len; ++j) dx[i * n + start + j] += g[i * len + j];
    });
}

Var Tape::reshape(Var x, std::vector<std::size_t> new_shape) {
    const Tensor& xv = x.value();
    Tensor out(new_shape, xv.vec());
    return push(std::move(out), [xi = x.node, sh = xv.shape()](const Tensor& g, std::vector<Tensor>& grads) {
        Tensor& dx = grad_slot(grads, xi, sh);
        for (std::size_t i = 0; i < g.numel(); ++i) dx[i] += g[i];
    });
}

Var Tape::gather_rows(Var table, std::span<const std::uint32_t> indices) {
    require_rank2(table, "gather_rows");
    const Tensor& tv = table.value();
    std::size_t v = tv.rows(), d = tv.cols();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= v) {
            throw std::invalid_argument("gather_rows: index " + std::to_string(indices[i]) + " at position " +
                                        std::to_string(i) + " out of range for table " + shape_str(tv.shape()));
        }
    }
    Tensor out = Tensor::zeros({indices.size(), d});
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy(tv.data() + indices[i] * d, tv.data() + (indices[i] + 1) * d, out.data() + i * d);
    return push(std::move(out), [ti = table.node, idx = std::vector<std::uint32_t>(indices.begin(), indices.end()), v,
                                 d](const Tensor& g, std::vector<Tensor>& grads) {
        Tensor& dt = grad_slot(grads, ti, {v, d});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            double* drow = dt.data() + idx[i] * d;
            const double* grow = g.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) drow[j] += grow[j];
        }
    });
}

Var Tape::custom_unary(Var x, Tensor value, std::function<Tensor(const Tensor&)> vjp) {
    return push(std::move(value),
                [this, xi = x.node, vjp = std::move(vjp)](const Tensor& g, std::vector<Tensor>& grads) {
                    Tensor contribution = vjp(g);
                    const Tensor& in = value_of(xi);
                    Tensor& dx = grad_slot(grads, xi, in.shape());
                    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += contribution[i];
                });
}

Gradients Tape::backward(Var loss) const {
    if (loss.tape != this) throw std::invalid_argument("backward: loss Var belongs to a different tape");
    if (loss.value().numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.value().shape()));
    }
    std::vector<Tensor> grads(nodes_.size());
    grads[loss.node] = Tensor::full(loss.value().shape(), 1.0);
    for (std::size_t i = loss.node + 1; i-- > 0;) {
        const Node& n = nodes_[i];
        if (!n.backward || grads[i].empty()) continue;
        n.backward(grads[i], grads);
    }
    Gradients out;
    for (const auto& [param, node] : param_nodes_) {
        if (!grads[node].empty()) {
            out.grads_.emplace(param, std::move(grads[node]));
        } else {
            out.grads_.emplace(param, Tensor::zeros(param->value.shape()));
        }
    }
    return out;
}

double grad_check(const std::function<Var(Tape&)>& build_loss, std::span<Parameter* const> params, double epsilon) {
    if (!(epsilon > 0.0)) throw std::invalid_argument("grad_check: epsilon must be positive");

    Tape tape;
    Var loss = build_loss(tape);
    Gradients analytic = tape.backward(loss);

    auto eval = [&]() {
        Tape t;
        return build_loss(t).value()[0];
    };

    double max_rel = 0.0;
    for (Parameter* p : params) {
        Tensor ga = analytic.get(*p);
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            double orig = p->value[i];
            p->value[i] = orig + epsilon;
            double f_plus = eval();
            p->value[i] = orig - epsilon;
            double f_minus = eval();
            p->value[i] = orig;
            double numeric = (f_plus - f_minus) / (2.0 * epsilon);
            double denom = std::max({1.0, std::abs(ga[i]), std::abs(numeric)});
            max_rel = std::max(max_rel, std::abs(ga[i] - numeric) / denom);
        }
    }
    return max_rel;
}

} // namespace mutualctr::ad
