#include "fedtrl/numerics.hpp"

#include <cmath>

namespace fedtrl::num {

Var Tape::make_node(Matrix value, std::string op) {
    if (check_finite_ && !value.allFinite()) {
        throw std::runtime_error("non-finite value produced by node '" + op + "'");
    }
    Node n;
    n.grad = Matrix::Zero(value.rows(), value.cols());
    n.value = std::move(value);
    n.op = std::move(op);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Matrix value, std::string op) {
    return make_node(std::move(value), std::move(op));
}

Var Tape::param(const std::string& name, const Matrix& value) {
    Var v = make_node(value, "param:" + name);
    nodes_.back().param_name = name;
    return v;
}

GradientSet Tape::backward(Var output) {
    const Matrix& out = value(output);
    if (out.rows() != 1 || out.cols() != 1) {
        throw std::runtime_error("backward requires a scalar output node");
    }
    for (auto& n : nodes_) n.grad.setZero();
    nodes_.at(output.id).grad(0, 0) = 1.0;
    for (int i = output.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (!n.grad.allFinite()) {
            throw std::runtime_error("non-finite gradient at node '" + n.op + "'");
        }
        if (n.backward_fn) n.backward_fn();
    }
    GradientSet grads;
    for (const auto& n : nodes_) {
        if (!n.param_name.empty()) grads[n.param_name] = n.grad;
    }
    return grads;
}

namespace {

void require_same_shape(Var a, Var b, const char* op) {
    const Matrix& va = a.tape->value(a);
    const Matrix& vb = b.tape->value(b);
    if (va.rows() != vb.rows() || va.cols() != vb.cols()) {
        throw std::runtime_error(std::string(op) + ": shape mismatch (" +
                                 std::to_string(va.rows()) + "x" + std::to_string(va.cols()) + " vs " +
                                 std::to_string(vb.rows()) + "x" + std::to_string(vb.cols()) + ")");
    }
}

}  // namespace

Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a) + t->value(b), "add");
    t->set_backward(out, [t, a, b, out] {
        const Matrix& g = t->grad(out);
        t->accumulate(a, g);
        t->accumulate(b, g);
    });
    return out;
}

Var sub(Var a, Var b) {
    require_same_shape(a, b, "sub");
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a) - t->value(b), "sub");
    t->set_backward(out, [t, a, b, out] {
        const Matrix& g = t->grad(out);
        t->accumulate(a, g);
        t->accumulate(b, -g);
    });
    return out;
}

Var mul(Var a, Var b) {
    require_same_shape(a, b, "mul");
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a).cwiseProduct(t->value(b)), "mul");
    t->set_backward(out, [t, a, b, out] {
        const Matrix& g = t->grad(out);
        t->accumulate(a, g.cwiseProduct(t->value(b)));
        t->accumulate(b, g.cwiseProduct(t->value(a)));
    });
    return out;
}

Var divide(Var a, Var b) {
    require_same_shape(a, b, "div");
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a).cwiseQuotient(t->value(b)), "div");
    t->set_backward(out, [t, a, b, out] {
        const Matrix& g = t->grad(out);
        const Matrix& vb = t->value(b);
        t->accumulate(a, g.cwiseQuotient(vb));
        t->accumulate(b, -g.cwiseProduct(t->value(out)).cwiseQuotient(vb));
    });
    return out;
}

Var scale(Var a, double c) {
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a) * c, "scale");
    t->set_backward(out, [t, a, c, out] { t->accumulate(a, t->grad(out) * c); });
    return out;
}

Var add_const(Var a, double c) {
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a).array() + c, "add_const");
    t->set_backward(out, [t, a, out] { t->accumulate(a, t->grad(out)); });
    return out;
}

Var matmul(Var a, Var b) {
    Tape* t = a.tape;
    const Matrix& va = t->value(a);
    const Matrix& vb = t->value(b);
    if (va.cols() != vb.rows()) {
        throw std::runtime_error("matmul: inner dimensions disagree (" +
                                 std::to_string(va.cols()) + " vs " + std::to_string(vb.rows()) + ")");
    }
    Var out = t->make_node(va * vb, "matmul");
    t->set_backward(out, [t, a, b, out] {
        const Matrix& g = t->grad(out);
        t->accumulate(a, g * t->value(b).transpose());
        t->accumulate(b, t->value(a).transpose() * g);
    });
    return out;
}

Var transpose(Var a) {
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a).transpose(), "transpose");
    t->set_backward(out, [t, a, out] { t->accumulate(a, t->grad(out).transpose()); });
    return out;
}

Var relu(Var a) {
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a).cwiseMax(0.0), "relu");
    t->set_backward(out, [t, a, out] {
        Matrix mask = (t->value(a).array() > 0.0).cast<double>();
        t->accumulate(a, t->grad(out).cwiseProduct(mask));
    });
    return out;
}

Var gelu(Var a) {
    Tape* t = a.tape;
    const Matrix& x = t->value(a);
    Matrix phi = x.unaryExpr([](double v) { return 0.5 * (1.0 + std::erf(v * 0.7071067811865475244)); });
    Var out = t->make_node(x.cwiseProduct(phi), "gelu");
    t->set_backward(out, [t, a, out, phi] {
        const Matrix& x = t->value(a);
        Matrix pdf = x.unaryExpr([](double v) { return 0.3989422804014326779 * std::exp(-0.5 * v * v); });
        Matrix dx = phi + x.cwiseProduct(pdf);
        t->accumulate(a, t->grad(out).cwiseProduct(dx));
    });
    return out;
}

Var softplus(Var a) {
    Tape* t = a.tape;
    const Matrix& x = t->value(a);
    // log(1 + exp(x)) = max(x,0) + log1p(exp(-|x|))
    Matrix y = x.unaryExpr([](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
    Var out = t->make_node(std::move(y), "softplus");
    t->set_backward(out, [t, a, out] {
        Matrix sig = t->value(a).unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
        t->accumulate(a, t->grad(out).cwiseProduct(sig));
    });
    return out;
}

Var log(Var a) {
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a).array().log().matrix(), "log");
    t->set_backward(out, [t, a, out] {
        t->accumulate(a, t->grad(out).cwiseQuotient(t->value(a)));
    });
    return out;
}

Var exp(Var a) {
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a).array().exp().matrix(), "exp");
    t->set_backward(out, [t, a, out] {
        t->accumulate(a, t->grad(out).cwiseProduct(t->value(out)));
    });
    return out;
}

Var square(Var a) {
    Tape* t = a.tape;
    Var out = t->make_node(t->value(a).array().square().matrix(), "square");
    t->set_backward(out, [t, a, out] {
        t->accumulate(a, 2.0 * t->grad(out).cwiseProduct(t->value(a)));
    });
    return out;
}

Var sum(Var a) {
    Tape* t = a.tape;
    Matrix s(1, 1);
    s(0, 0) = t->value(a).sum();
    Var out = t->make_node(std::move(s), "sum");
    t->set_backward(out, [t, a, out] {
        const Matrix& va = t->value(a);
        double g = t->grad(out)(0, 0);
        t->accumulate(a, Matrix::Constant(va.rows(), va.cols(), g));
    });
    return out;
}

Var mean_all(Var a) {
    const Matrix& va = a.tape->value(a);
    return scale(sum(a), 1.0 / static_cast<double>(va.size()));
}

Var mean_rows(Var a) {
    Tape* t = a.tape;
    const Matrix& va = t->value(a);
    double inv_n = 1.0 / static_cast<double>(va.rows());
    Var out = t->make_node(va.colwise().mean(), "mean_rows");
    t->set_backward(out, [t, a, out, inv_n] {
        const Matrix& g = t->grad(out);  // 1xC
        const Matrix& va = t->value(a);
        t->accumulate(a, (Matrix::Ones(va.rows(), 1) * g) * inv_n);
    });
    return out;
}

Var add_rowvec(Var x, Var row) {
    Tape* t = x.tape;
    const Matrix& vx = t->value(x);
    const Matrix& vr = t->value(row);
    if (vr.rows() != 1 || vr.cols() != vx.cols()) {
        throw std::runtime_error("add_rowvec: expected 1x" + std::to_string(vx.cols()) + " row");
    }
    Var out = t->make_node(vx.rowwise() + vr.row(0), "add_rowvec");
    t->set_backward(out, [t, x, row, out] {
        const Matrix& g = t->grad(out);
        t->accumulate(x, g);
        t->accumulate(row, g.colwise().sum());
    });
    return out;
}

Var mul_rowvec(Var x, Var row) {
    Tape* t = x.tape;
    const Matrix& vx = t->value(x);
    const Matrix& vr = t->value(row);
    if (vr.rows() != 1 || vr.cols() != vx.cols()) {
        throw std::runtime_error("mul_rowvec: expected 1x" + std::to_string(vx.cols()) + " row");
    }
    Matrix y = vx.array().rowwise() * vr.row(0).array();
    Var out = t->make_node(std::move(y), "mul_rowvec");
    t->set_backward(out, [t, x, row, out] {
        const Matrix& g = t->grad(out);
        const Matrix& vx = t->value(x);
        const Matrix& vr = t->value(row);
        t->accumulate(x, (g.array().rowwise() * vr.row(0).array()).matrix());
        t->accumulate(row, (g.cwiseProduct(vx)).colwise().sum());
    });
    return out;
}

Var row_norm(Var x, double eps) {
    Tape* t = x.tape;
    const Matrix& vx = t->value(x);
    Eigen::Index n = vx.cols();
    Matrix y(vx.rows(), n);
    Eigen::VectorXd inv_std(vx.rows());
    for (Eigen::Index r = 0; r < vx.rows(); ++r) {
        double mu = vx.row(r).mean();
        double var = (vx.row(r).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        inv_std(r) = is;
        y.row(r) = ((vx.row(r).array() - mu) * is).matrix();
    }
    Var out = t->make_node(std::move(y), "row_norm");
    t->set_backward(out, [t, x, out, inv_std] {
        const Matrix& g = t->grad(out);
        const Matrix& y = t->value(out);
        Matrix dx(g.rows(), g.cols());
        double inv_n = 1.0 / static_cast<double>(g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            double gmean = g.row(r).mean();
            double gy = (g.row(r).cwiseProduct(y.row(r))).sum() * inv_n;
            dx.row(r) = inv_std(r) * (g.row(r).array() - gmean - y.row(r).array() * gy).matrix();
        }
        t->accumulate(x, dx);
    });
    return out;
}

Var masked_row_softmax(Var x, const Matrix& mask) {
    Tape* t = x.tape;
    const Matrix& vx = t->value(x);
    if (mask.rows() != vx.rows() || mask.cols() != vx.cols()) {
        throw std::runtime_error("masked_row_softmax: mask shape mismatch");
    }
    Matrix z = vx + mask;
    Matrix y(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        double m = z.row(r).maxCoeff();
        Eigen::ArrayXd e = (z.row(r).array() - m).exp();
        y.row(r) = (e / e.sum()).matrix();
    }
    Var out = t->make_node(std::move(y), "row_softmax");
    t->set_backward(out, [t, x, out] {
        const Matrix& g = t->grad(out);
        const Matrix& y = t->value(out);
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            double dot = g.row(r).cwiseProduct(y.row(r)).sum();
            dx.row(r) = (g.row(r).array() - dot).matrix().cwiseProduct(y.row(r));
        }
        t->accumulate(x, dx);
    });
    return out;
}

Var row_softmax(Var x) {
    const Matrix& vx = x.tape->value(x);
    return masked_row_softmax(x, Matrix::Zero(vx.rows(), vx.cols()));
}

Var concat_rows(Var a, Var b) {
    Tape* t = a.tape;
    const Matrix& va = t->value(a);
    const Matrix& vb = t->value(b);
    if (va.cols() != vb.cols()) throw std::runtime_error("concat_rows: column mismatch");
    Matrix y(va.rows() + vb.rows(), va.cols());
    y.topRows(va.rows()) = va;
    y.bottomRows(vb.rows()) = vb;
    Var out = t->make_node(std::move(y), "concat_rows");
    t->set_backward(out, [t, a, b, out] {
        const Matrix& g = t->grad(out);
        Eigen::Index ra = t->value(a).rows();
        t->accumulate(a, g.topRows(ra));
        t->accumulate(b, g.bottomRows(g.rows() - ra));
    });
    return out;
}

Var concat_cols(Var a, Var b) {
    Tape* t = a.tape;
    const Matrix& va = t->value(a);
    const Matrix& vb = t->value(b);
    if (va.rows() != vb.rows()) throw std::runtime_error("concat_cols: row mismatch");
    Matrix y(va.rows(), va.cols() + vb.cols());
    y.leftCols(va.cols()) = va;
    y.rightCols(vb.cols()) = vb;
    Var out = t->make_node(std::move(y), "concat_cols");
    t->set_backward(out, [t, a, b, out] {
        const Matrix& g = t->grad(out);
        Eigen::Index ca = t->value(a).cols();
        t->accumulate(a, g.leftCols(ca));
        t->accumulate(b, g.rightCols(g.cols() - ca));
    });
    return out;
}

Var slice_rows(Var a, int start, int count) {
    Tape* t = a.tape;
    const Matrix& va = t->value(a);
    if (start < 0 || count < 0 || start + count > va.rows()) {
        throw std::runtime_error("slice_rows: range out of bounds");
    }
    Var out = t->make_node(va.middleRows(start, count), "slice_rows");
    t->set_backward(out, [t, a, out, start, count] {
        const Matrix& va = t->value(a);
        Matrix g = Matrix::Zero(va.rows(), va.cols());
        g.middleRows(start, count) = t->grad(out);
        t->accumulate(a, g);
    });
    return out;
}

Var gradient_reversal(Var x, double lambda) {
    if (lambda < 0.0) {
        throw std::invalid_argument("gradient_reversal: lambda must be nonnegative");
    }
    Tape* t = x.tape;
    Var out = t->make_node(t->value(x), "gradient_reversal");
    t->set_backward(out, [t, x, out, lambda] {
        t->accumulate(x, (-lambda) * t->grad(out));
    });
    return out;
}

Var softmax_cross_entropy_mean(Var logits, const std::vector<int>& labels) {
    Tape* t = logits.tape;
    const Matrix& z = t->value(logits);
    if (static_cast<Eigen::Index>(labels.size()) != z.rows()) {
        throw std::runtime_error("cross_entropy: one label per logits row required");
    }
    Eigen::Index nc = z.cols();
    for (int lbl : labels) {
        if (lbl < 0 || lbl >= nc) throw std::runtime_error("cross_entropy: label out of range");
    }
    Matrix probs(z.rows(), nc);
    double loss = 0.0;
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        double m = z.row(r).maxCoeff();
        Eigen::ArrayXd e = (z.row(r).array() - m).exp();
        double lse = m + std::log(e.sum());
        probs.row(r) = (e / e.sum()).matrix();
        loss += lse - z(r, labels[static_cast<std::size_t>(r)]);
    }
    Matrix out(1, 1);
    out(0, 0) = loss / static_cast<double>(z.rows());
    Var v = t->make_node(std::move(out), "cross_entropy");
    t->set_backward(v, [t, logits, v, probs, labels] {
        double g = t->grad(v)(0, 0);
        Matrix d = probs;
        for (Eigen::Index r = 0; r < d.rows(); ++r) {
            d(r, labels[static_cast<std::size_t>(r)]) -= 1.0;
        }
        t->accumulate(logits, d * (g / static_cast<double>(d.rows())));
    });
    return v;
}

GradientSet finite_difference_oracle(
    const std::function<double(const std::map<std::string, Matrix>&)>& f,
    const std::map<std::string, Matrix>& params, double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_difference_oracle: step must be positive");
    GradientSet grads;
    std::map<std::string, Matrix> work = params;
    for (const auto& [name, value] : params) {
        Matrix g(value.rows(), value.cols());
        for (Eigen::Index i = 0; i < value.rows(); ++i) {
            for (Eigen::Index j = 0; j < value.cols(); ++j) {
                double orig = work[name](i, j);
                work[name](i, j) = orig + step;
                double fp = f(work);
                work[name](i, j) = orig - step;
                double fm = f(work);
                work[name](i, j) = orig;
                g(i, j) = (fp - fm) / (2.0 * step);
            }
        }
        grads[name] = std::move(g);
    }
    return grads;
}

}  // namespace fedtrl::num
