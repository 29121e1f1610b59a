#pragma once

#include "mutualctr/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace mutualctr::ad {

class Tape;

/// Handle to one node of a Tape. Cheap to copy; valid while the tape lives.
struct Var {
    const Tape* tape = nullptr;
    std::size_t node = 0;

    const Tensor& value() const;
    const std::vector<std::size_t>& shape() const;
};

/// Which L2 coefficient applies to a trainable tensor.
enum class L2Group { embedding, dense, none };

/// One trainable tensor. `id` is unique within a model and names the
/// parameter in checkpoints, gradient diagnostics and error messages.
struct Parameter {
    std::string id;
    Tensor value;
    L2Group group = L2Group::none;
};

/// Result of a backward pass: per-parameter gradients, keyed by the
/// Parameter object. Parameters never recorded on the tape, or recorded
/// but unreachable from the loss, read back as zeros.
class Gradients {
public:
    /// Gradient of the loss w.r.t. `p` (zeros if p did not contribute).
    Tensor get(const Parameter& p) const;

    /// Non-owning view; nullptr when the parameter has no gradient entry.
    const Tensor* find(const Parameter& p) const;

private:
    friend class Tape;
    std::unordered_map<const Parameter*, Tensor> grads_;
};

/// Recorded forward computation, replayed in reverse for gradients.
///
/// Nodes are appended in execution order, so the record is already a
/// topological order: backward walks it once, back to front. Graphs are
/// rebuilt from scratch every batch (define-by-run); a Tape and the Vars
/// pointing into it belong to a single training run.
///
/// Shape rules are strict: operands must match exactly except for the
/// two broadcast forms the models need, bias-vector add ([m x n] + [n])
/// and per-row scaling ([m x n] * [m x 1]). Anything else throws.
///
/// Axis reductions keep the reduced axis as size 1 so results feed
/// straight back into concat / row-broadcast ops; the axis-less forms
/// reduce to a scalar (shape [1]).
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Non-trainable input; no gradient flows into it.
    Var constant(Tensor value);

    /// Records `p` as a leaf. The tape keeps a pointer to the parameter's
    /// tensor, so the parameter must stay alive and unmodified until
    /// backward() is done. Re-registering the same parameter returns the
    /// existing node, which is how gradients from multiple uses accumulate.
    Var parameter(const Parameter& p);

    /// Copy of x's value with the gradient path cut.
    Var detach(Var x);

    // ---- primitive ops ------------------------------------------------

    Var matmul(Var a, Var b);

    Var add(Var a, Var b);   // equal shapes, or [m x n] + [n] bias broadcast
    Var sub(Var a, Var b);   // equal shapes
    Var mul(Var a, Var b);   // equal shapes, or [m x n] * [m x 1] row scaling
    Var square(Var x);
    Var log(Var x);          // throws std::domain_error on any value <= 0
    Var sigmoid(Var x);      // numerically stable; output strictly in (0,1)
    Var relu(Var x);         // subgradient at 0 is 0

    Var scale(Var x, double c);
    Var clamp(Var x, double lo, double hi); // gradient passes only inside (lo, hi)

    Var sum(Var x);                      // -> [1]
    Var mean(Var x);                     // -> [1]
    Var sum(Var x, std::size_t axis);    // keeps the axis as size 1
    Var mean(Var x, std::size_t axis);

    Var concat(std::span<const Var> parts, std::size_t axis);
    Var slice_cols(Var x, std::size_t start, std::size_t len);
    Var reshape(Var x, std::vector<std::size_t> new_shape);

    /// Embedding lookup: rows of `table` ([V x d]) selected by `indices`.
    /// Backward scatter-adds into the table gradient, so duplicate
    /// indices accumulate.
    Var gather_rows(Var table, std::span<const std::uint32_t> indices);

    /// Escape hatch for tests and extensions: a unary node with a
    /// caller-supplied value and vector-Jacobian product.
    Var custom_unary(Var x, Tensor value, std::function<Tensor(const Tensor& out_grad)> vjp);

    // ---- reverse pass --------------------------------------------------

    /// Reverse sweep from a scalar loss node. Visits each node at most
    /// once. Throws std::invalid_argument if the loss is not scalar.
    Gradients backward(Var loss) const;

    const Tensor& value_of(std::size_t node) const;
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;                 // value storage for computed nodes
        const Tensor* external = nullptr; // set instead for parameter leaves
        // accumulates into operand slots of `grads`; empty for leaves
        std::function<void(const Tensor& out_grad, std::vector<Tensor>& grads)> backward;

        const Tensor& val() const { return external ? *external : owned; }
    };

    Var push(Tensor value, std::function<void(const Tensor&, std::vector<Tensor>&)> backward);
    Var unary_map(Var x, double (*fwd)(double), double (*grad)(double value_in, double value_out));

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

/// Max relative finite-difference error over every coordinate of `params`.
///
/// `build_loss` must rebuild the scalar loss from the parameters' current
/// values on the tape it is given. Central differences with step
/// `epsilon`; relative error uses max(1, |analytic|, |numeric|) as the
/// denominator.
double grad_check(const std::function<Var(Tape&)>& build_loss,
                  std::span<Parameter* const> params, double epsilon);

} // namespace mutualctr::ad
