#include "gdssm/structured.hpp"

namespace gdssm {

const char* to_string(CovStructure s) {
    switch (s) {
        case CovStructure::Full: return "full";
        case CovStructure::MainDiagonal: return "main-diag";
        case CovStructure::MainBlocks: return "main-blocks";
        case CovStructure::AllDiagonals: return "all-diags";
    }
    return "?";
}

CovStructure cov_structure_from_string(const std::string& name) {
    if (name == "full") return CovStructure::Full;
    if (name == "main-diag") return CovStructure::MainDiagonal;
    if (name == "main-blocks") return CovStructure::MainBlocks;
    if (name == "all-diags") return CovStructure::AllDiagonals;
    throw DataError("unknown covariance structure tag: " + name);
}

std::pair<int, int> structured_shape(CovStructure tag, int m, int d) {
    switch (tag) {
        case CovStructure::Full: return {m * d, m * d};
        case CovStructure::MainDiagonal: return {m * d, 1};
        case CovStructure::MainBlocks: return {m * d, d};
        case CovStructure::AllDiagonals: return {d * m, m};
    }
    return {0, 0};
}

StructuredCovariance::StructuredCovariance(CovStructure tag, int m, int d, Matrix data)
    : tag_(tag), m_(m), d_(d), data_(std::move(data)) {
    require(m > 0 && d > 0, "StructuredCovariance: agent count and dim must be positive");
    auto [r, c] = structured_shape(tag, m, d);
    require(data_.rows() == r && data_.cols() == c,
            "StructuredCovariance: storage shape mismatch");
}

StructuredCovariance StructuredCovariance::zero(CovStructure tag, int m, int d) {
    auto [r, c] = structured_shape(tag, m, d);
    return StructuredCovariance(tag, m, d, Matrix::Zero(r, c));
}

Eigen::Block<const Matrix> StructuredCovariance::agent_block(int m) const {
    require(tag_ == CovStructure::MainBlocks, "agent_block requires MainBlocks storage");
    return data_.block(m * d_, 0, d_, d_);
}

Eigen::Block<const Matrix> StructuredCovariance::dim_matrix(int i) const {
    require(tag_ == CovStructure::AllDiagonals, "dim_matrix requires AllDiagonals storage");
    return data_.block(i * m_, 0, m_, m_);
}

Vector StructuredCovariance::diagonal() const {
    const int n = m_ * d_;
    Vector out(n);
    switch (tag_) {
        case CovStructure::Full:
            out = data_.diagonal();
            break;
        case CovStructure::MainDiagonal:
            out = data_.col(0);
            break;
        case CovStructure::MainBlocks:
            for (int m = 0; m < m_; ++m)
                for (int i = 0; i < d_; ++i) out[m * d_ + i] = data_(m * d_ + i, i);
            break;
        case CovStructure::AllDiagonals:
            for (int m = 0; m < m_; ++m)
                for (int i = 0; i < d_; ++i) out[m * d_ + i] = data_(i * m_ + m, m);
            break;
    }
    return out;
}

void StructuredCovariance::validate() const {
    const double tol = 1e-8;
    switch (tag_) {
        case CovStructure::Full:
            require((data_ - data_.transpose()).cwiseAbs().maxCoeff() <= tol,
                    "Full covariance not symmetric");
            break;
        case CovStructure::MainDiagonal:
            require(data_.minCoeff() >= -tol, "MainDiagonal has negative variance");
            break;
        case CovStructure::MainBlocks:
            for (int m = 0; m < m_; ++m) {
                Matrix b = data_.block(m * d_, 0, d_, d_);
                require((b - b.transpose()).cwiseAbs().maxCoeff() <= tol,
                        "MainBlocks block not symmetric");
            }
            break;
        case CovStructure::AllDiagonals:
            for (int i = 0; i < d_; ++i) {
                Matrix b = data_.block(i * m_, 0, m_, m_);
                require((b - b.transpose()).cwiseAbs().maxCoeff() <= tol,
                        "AllDiagonals matrix not symmetric");
            }
            break;
    }
}

StructuredCovariance mask_covariance(const Matrix& full, CovStructure target, int num_agents) {
    const int n = static_cast<int>(full.rows());
    require(full.cols() == n, "mask_covariance: input not square");
    require(num_agents > 0 && n % num_agents == 0,
            "mask_covariance: dimension not divisible into agent blocks");
    require((full - full.transpose()).cwiseAbs().maxCoeff() <= 1e-8 * std::max(1.0, full.cwiseAbs().maxCoeff()),
            "mask_covariance: input not symmetric");
    const int m = num_agents;
    const int d = n / m;
    auto [r, c] = structured_shape(target, m, d);
    Matrix data(r, c);
    switch (target) {
        case CovStructure::Full:
            data = full;
            break;
        case CovStructure::MainDiagonal:
            data = full.diagonal();
            break;
        case CovStructure::MainBlocks:
            for (int a = 0; a < m; ++a)
                data.block(a * d, 0, d, d) = full.block(a * d, a * d, d, d);
            break;
        case CovStructure::AllDiagonals:
            for (int i = 0; i < d; ++i)
                for (int a = 0; a < m; ++a)
                    for (int b = 0; b < m; ++b)
                        data(i * m + a, b) = full(a * d + i, b * d + i);
            break;
    }
    return StructuredCovariance(target, m, d, std::move(data));
}

Matrix embed_to_full(const StructuredCovariance& cov) {
    const int m = cov.num_agents();
    const int d = cov.dim();
    const int n = m * d;
    Matrix out = Matrix::Zero(n, n);
    const Matrix& data = cov.data();
    switch (cov.tag()) {
        case CovStructure::Full:
            out = data;
            break;
        case CovStructure::MainDiagonal:
            out.diagonal() = data.col(0);
            break;
        case CovStructure::MainBlocks:
            for (int a = 0; a < m; ++a)
                out.block(a * d, a * d, d, d) = data.block(a * d, 0, d, d);
            break;
        case CovStructure::AllDiagonals:
            for (int i = 0; i < d; ++i)
                for (int a = 0; a < m; ++a)
                    for (int b = 0; b < m; ++b)
                        out(a * d + i, b * d + i) = data(i * m + a, b);
            break;
    }
    return out;
}

StructuredCovariance convert_structure(const StructuredCovariance& cov, CovStructure target) {
    if (cov.tag() == target) return cov;
    return mask_covariance(embed_to_full(cov), target, cov.num_agents());
}

Eigen::LLT<Matrix> cholesky_with_jitter(const Matrix& sym, double* jitter_used) {
    Eigen::LLT<Matrix> llt(sym);
    if (llt.info() == Eigen::Success) {
        if (jitter_used) *jitter_used = 0.0;
        return llt;
    }
    const int n = static_cast<int>(sym.rows());
    for (double eps = kJitterStart; eps <= kJitterMax * (1.0 + 1e-12); eps *= 10.0) {
        Matrix repaired = sym + eps * Matrix::Identity(n, n);
        llt.compute(repaired);
        if (llt.info() == Eigen::Success) {
            if (jitter_used) *jitter_used = eps;
            return llt;
        }
    }
    throw NumericError("covariance not positive definite after jitter up to 1e-5");
}

double psd_repair(Matrix& sym) {
    sym = 0.5 * (sym + sym.transpose()).eval();
    double jitter = 0.0;
    Eigen::LLT<Matrix> llt(sym);
    if (llt.info() == Eigen::Success) return 0.0;
    const int n = static_cast<int>(sym.rows());
    for (double eps = kJitterStart; eps <= kJitterMax * (1.0 + 1e-12); eps *= 10.0) {
        Matrix repaired = sym + eps * Matrix::Identity(n, n);
        llt.compute(repaired);
        if (llt.info() == Eigen::Success) {
            sym = repaired;
            return eps;
        }
        jitter = eps;
    }
    (void)jitter;
    throw NumericError("PSD repair exhausted (jitter 1e-9..1e-5)");
}

} // namespace gdssm
