#pragma once

#include "gdssm/types.hpp"

#include <deque>
#include <functional>
#include <utility>
#include <vector>

namespace gdssm::ad {

using gdssm::Matrix;
using gdssm::Vector;

class Tape;

/// Lightweight handle to a tape node. Values are matrices; column vectors are
/// n x 1. Copying a Var copies the handle, not the value.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Matrix& value() const;
    int rows() const { return static_cast<int>(value().rows()); }
    int cols() const { return static_cast<int>(value().cols()); }
};

/// Reverse-mode tape over matrix-valued nodes. With gradients disabled the
/// same operations run value-only (no closures recorded), which is the
/// evaluation path for inference, metrics, and benchmarking.
class Tape {
public:
    explicit Tape(bool enable_grad = true) : grad_(enable_grad) {}

    bool grad_enabled() const { return grad_; }
    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    Var constant(Matrix v) { return make(std::move(v), false, nullptr); }
    Var input(Matrix v) { return make(std::move(v), grad_, nullptr); }

    /// Runs reverse accumulation from a scalar (1x1) root.
    void backward(const Var& root);

    /// Adjoint of `v` after backward(); zero matrix when the node was never reached.
    Matrix grad(const Var& v) const;

    // -- internal plumbing (used by the op free functions) --
    using Pull = std::function<void(Tape&, const Matrix& bar)>;

    struct Node {
        Matrix value;
        Matrix adj;
        bool requires_grad = false;
        Pull pull;
    };

    Var make(Matrix v, bool requires_grad, Pull pull) {
        nodes_.push_back(Node{std::move(v), Matrix(), requires_grad, std::move(pull)});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

    bool needs_grad(const Var& a) const { return grad_ && node(a.id).requires_grad; }

    template <class E>
    void accum(const Var& v, const E& g) {
        Node& n = node(v.id);
        if (!n.requires_grad) return;
        if (n.adj.size() == 0) n.adj = Matrix::Zero(n.value.rows(), n.value.cols());
        n.adj += g;
    }

private:
    std::deque<Node> nodes_;
    bool grad_;
};

inline const Matrix& Var::value() const { return tape->node(id).value; }

// ---------------------------------------------------------------------------
// Generic operations
// ---------------------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var cmul(Var a, Var b);            ///< elementwise product
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);       ///< a * b^T
Var transpose(Var a);
Var symmetrize(Var a);             ///< 0.5 (a + a^T)
Var sandwich(Var a, Var b);        ///< a * sym(b) * a^T (symmetric output)
Var vcat(Var a, Var b);
Var reshape(Var a, int rows, int cols); ///< column-major relayout
Var block(Var a, int i, int j, int rows, int cols);
Var exp_elem(Var a);
Var log_elem(Var a);
Var tanh_elem(Var a);
Var rowscale(Var v, Var a);        ///< diag(v) * a
Var colwise_add(Var x, Var b);     ///< x + b * ones^T
Var rowmean(Var x);                ///< (r x 1) mean over columns
Var add_diag(Var c, Var v);        ///< square c plus diag(v)
Var stack_scalars(const std::vector<Var>& xs); ///< k x 1 from 1x1 nodes
Var log_softmax(Var z);            ///< z is n x 1
Var logsumexp_weighted(Var logw, Var logp); ///< 1x1: log sum exp(logw + logp)

/// Gaussian log-density with factorization-failure jitter. In gradient mode a
/// triggered jitter raises NumericError (the repair is non-differentiable).
Var mvn_logpdf(Var mean, Var cov, const Vector& point);

// ---------------------------------------------------------------------------
// Agent-blocked / structured operations. Stacked layouts:
//   per-agent blocks:  (M*D) x D,  agent m at rows [m*D, (m+1)*D)
//   per-dim matrices:  (D*M) x M,  dim i at rows [i*M, (i+1)*M)
// ---------------------------------------------------------------------------

Var block_diag_expand(Var w, int m);                   ///< dense I_M (x) W
Var nodewise_affine_mean(Var w, Var b, Var mu, int m); ///< per-agent W mu_m + b
Var agg_mean(const Matrix& a, Var mu, int m);          ///< (A (x) I) mu, A constant
Var interleave_agents(Var x, int dx, Var y, int dy, int m); ///< per-agent [x_m; y_m]
Var nodewise_sandwich(Var w, Var bstack, int m);       ///< per-agent W B_m W^T
Var nodewise_matmul(Var w, Var nstack, int m);         ///< per-agent W N_m (stacked)
Var blocks_mix(const Matrix& k, Var bstack, int m);    ///< B'_m = sum_k K(m,k) B_k
Var alldiag_mix(Var w, Var cstack, int m);             ///< C'_a = sum_i W(a,i)^2 C_i
Var perdim_sandwich(const Matrix& a, Var cstack, int m); ///< C'_i = A C_i A^T
Var maindiag_affine_var(Var w, Var s2, int m);         ///< per-agent (W o W) s2_m
Var maindiag_agg_var(const Matrix& a, Var s2, int m);  ///< per-dim (A o A) mix
Var concat_blocks(Var bstack, Var nstack, const Vector& self_weight, int m);
Var blockwise_transpose(Var stack, int m);

/// ReLU output moments (see relu_gauss.hpp). Inputs are n x 1 vectors except
/// the covariance carriers, which follow the stacked layouts above.
Var relu_mean_vec(Var mu, Var var);
Var relu_var_vec(Var mu, Var var);
Var relu_jac_vec(Var mu, Var var);
Var relu_cov_full(Var mu, Var cov);
Var relu_cov_blocks(Var mu, Var bstack, int m);
Var relu_cov_alldiag(Var mu, Var cstack, int m, int d);

/// Expected-Jacobian assembly: per-agent chain blocks against the adjacency.
/// Block shapes are inferred from the stack (dout = rows/m).
Var assemble_jac_concat(Var nstack, const Matrix& a, int m);
Var assemble_jac_agg(Var nstack, const Matrix& a, int m);

/// Stein cross-covariance Cov[x, f] = Sigma * E[J]^T, masked to the structure.
Var stein_diag(Var s2, Var jac);
Var stein_blocks(Var bstack, Var jac, int m);
Var stein_alldiag(Var cstack, Var jac, int m, int d);

Var add_diag_blocks(Var bstack, Var v, int m);
Var add_diag_perdim(Var cstack, Var v, int m, int d);

/// Structure embedding / masking as linear tape ops.
Var diag_to_full(Var v);
Var diag_to_blocks(Var v, int m);
Var diag_to_alldiag(Var v, int m, int d);
Var blocks_to_full(Var bstack, int m);
Var alldiag_to_full(Var cstack, int m, int d);
Var mask_full_diag(Var c);
Var mask_full_blocks(Var c, int m);
Var mask_full_alldiag(Var c, int m, int d);

/// Diagonal (variances) of a structured carrier, as an n x 1 node.
Var structured_diagonal_full(Var c);
Var structured_diagonal_blocks(Var bstack, int m);
Var structured_diagonal_alldiag(Var cstack, int m, int d);

/// Symmetrize + factorization check with jitter escalation (value side).
/// Gradient mode: jitter triggering raises NumericError.
Var psd_repair_full(Var c);
Var psd_repair_blocks(Var bstack, int m);
Var psd_repair_alldiag(Var cstack, int m, int d);
Var floor_check_vec(Var v); ///< MainDiagonal analogue: entries must stay >= 0

} // namespace gdssm::ad
