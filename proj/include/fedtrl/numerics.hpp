#pragma once

// Reverse-mode autodiff on dense Eigen matrices. A Tape owns the nodes of a
// single forward pass; ops append nodes in topological order, so the reverse
// sweep is a plain reverse iteration. Double precision only.

#include <Eigen/Dense>

#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedtrl::num {

using Matrix = Eigen::MatrixXd;

// Gradients keyed by parameter name, same shapes as the parameters.
using GradientSet = std::map<std::string, Matrix>;

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
};

class Tape {
public:
    explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value, std::string op = "constant");
    Var param(const std::string& name, const Matrix& value);

    const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
    Matrix& grad(Var v) { return nodes_.at(v.id).grad; }
    const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }

    // Reverse sweep from a 1x1 output. Returns d(output)/d(param) for every
    // parameter leaf on the tape.
    GradientSet backward(Var output);

    // Internal: used by the op free functions.
    Var make_node(Matrix value, std::string op);
    void set_backward(Var v, std::function<void()> fn) { nodes_.at(v.id).backward_fn = std::move(fn); }
    void accumulate(Var v, const Matrix& g) { nodes_.at(v.id).grad += g; }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::string op;
        std::function<void()> backward_fn;
        std::string param_name;  // nonempty for parameter leaves
    };

    std::vector<Node> nodes_;
    bool check_finite_;
};

// --- elementwise and linear algebra primitives ---

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);      // Hadamard
Var divide(Var a, Var b);   // elementwise
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var matmul(Var a, Var b);
Var transpose(Var a);

Var relu(Var a);
Var gelu(Var a);            // exact erf form
Var softplus(Var a);
Var log(Var a);
Var exp(Var a);
Var square(Var a);

Var sum(Var a);             // 1x1
Var mean_all(Var a);        // 1x1
Var mean_rows(Var a);       // column-wise mean, 1xC
Var add_rowvec(Var x, Var row);  // broadcast 1xC over rows of x
Var mul_rowvec(Var x, Var row);

// Per-row standardization (x - mean)/sqrt(var + eps), no affine part.
Var row_norm(Var x, double eps = 1e-5);

// Row softmax of x + mask where mask is an additive constant (0 / -inf style
// large negatives). Max-subtracted.
Var masked_row_softmax(Var x, const Matrix& mask);
Var row_softmax(Var x);

Var concat_rows(Var a, Var b);
Var concat_cols(Var a, Var b);
Var slice_rows(Var a, int start, int count);

// Identity forward; multiplies the incoming gradient by -lambda on the way
// back. lambda must be >= 0.
Var gradient_reversal(Var x, double lambda);

// Mean cross-entropy of row logits against integer labels, with max-subtracted
// log-sum-exp.
Var softmax_cross_entropy_mean(Var logits, const std::vector<int>& labels);

// --- test oracle ---

// Central differences of f over every coordinate of every parameter.
GradientSet finite_difference_oracle(
    const std::function<double(const std::map<std::string, Matrix>&)>& f,
    const std::map<std::string, Matrix>& params, double step = 1e-5);

}  // namespace fedtrl::num
