#pragma once

#include "gdssm/types.hpp"

#include <string>

namespace gdssm {

/// Sparsity pattern of a covariance matrix over M agents with D features each.
enum class CovStructure {
    Full,         ///< dense M*D x M*D matrix
    MainDiagonal, ///< variances only
    MainBlocks,   ///< per-agent D x D blocks
    AllDiagonals, ///< per-feature M x M cross-agent matrices
};

const char* to_string(CovStructure s);
CovStructure cov_structure_from_string(const std::string& name);

/// Covariance of the joint state over all agents, stored in one of the four
/// sparsity patterns. Layout is agent-major: dense index of feature i of
/// agent m is m*D + i.
///
/// Storage per tag:
///   Full:         (M*D) x (M*D)
///   MainDiagonal: (M*D) x 1
///   MainBlocks:   (M*D) x D     -- agent m occupies rows [m*D, (m+1)*D)
///   AllDiagonals: (D*M) x M     -- feature i occupies rows [i*M, (i+1)*M)
class StructuredCovariance {
public:
    StructuredCovariance() = default;
    StructuredCovariance(CovStructure tag, int num_agents, int dim, Matrix data);

    static StructuredCovariance zero(CovStructure tag, int num_agents, int dim);

    CovStructure tag() const { return tag_; }
    int num_agents() const { return m_; }
    int dim() const { return d_; }
    int size() const { return m_ * d_; }
    const Matrix& data() const { return data_; }
    Matrix& data() { return data_; }

    /// Per-agent block accessor for MainBlocks storage.
    Eigen::Block<const Matrix> agent_block(int m) const;
    /// Per-feature matrix accessor for AllDiagonals storage.
    Eigen::Block<const Matrix> dim_matrix(int i) const;

    /// Variances along the main diagonal, available in every structure.
    Vector diagonal() const;

    /// Checks storage invariants (symmetry of blocks, non-negative variances).
    void validate() const;

private:
    CovStructure tag_ = CovStructure::Full;
    int m_ = 0;
    int d_ = 0;
    Matrix data_;
};

/// Expected storage shape (rows, cols) for a structure tag.
std::pair<int, int> structured_shape(CovStructure tag, int num_agents, int dim);

/// Keeps exactly the entries of `target` from a dense symmetric matrix.
/// `full` must be (M*D) x (M*D) with D = full.rows()/num_agents.
StructuredCovariance mask_covariance(const Matrix& full, CovStructure target, int num_agents);

/// Dense embedding: retained entries placed, zeros elsewhere.
Matrix embed_to_full(const StructuredCovariance& cov);

/// Re-masks a structured covariance into another pattern (through the dense
/// embedding; entries not shared are dropped or zero-filled).
StructuredCovariance convert_structure(const StructuredCovariance& cov, CovStructure target);

/// Jitter escalation used by every factorization-based repair:
/// starts at 1e-9 and multiplies by 10 up to 1e-5.
inline constexpr double kJitterStart = 1e-9;
inline constexpr double kJitterMax = 1e-5;

/// Cholesky with the jitter policy. Returns the (possibly jittered) factor;
/// sets `jitter_used` to 0 when the matrix factorized as-is.
/// Throws NumericError once the escalation is exhausted.
Eigen::LLT<Matrix> cholesky_with_jitter(const Matrix& sym, double* jitter_used = nullptr);

/// Symmetrizes and, on factorization failure, adds escalating jitter in place.
/// Throws NumericError when repair is exhausted. Returns the jitter applied.
double psd_repair(Matrix& sym);

} // namespace gdssm
