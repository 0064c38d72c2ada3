#include "gdssm/tape.hpp"

#include "gdssm/relu_gauss.hpp"
#include "gdssm/structured.hpp"

#include <cmath>

namespace gdssm::ad {

namespace {

Tape& tape_of(const Var& a) {
    if (!a.valid()) throw ShapeError("operation on an invalid tape handle");
    return *a.tape;
}

Tape& tape_of(const Var& a, const Var& b) {
    Tape& t = tape_of(a);
    if (b.tape != &t) throw ShapeError("operands live on different tapes");
    return t;
}

bool rg(Tape& t, const Var& a) { return t.needs_grad(a); }
bool rg(Tape& t, const Var& a, const Var& b) { return t.needs_grad(a) || t.needs_grad(b); }

} // namespace

void Tape::backward(const Var& root) {
    if (!grad_) throw Error("backward() on a gradient-disabled tape");
    require(root.tape == this, "backward: root from another tape");
    Node& r = node(root.id);
    require(r.value.size() == 1, "backward: root must be scalar");
    if (!r.requires_grad) return;
    r.adj = Matrix::Ones(1, 1);
    for (int id = root.id; id >= 0; --id) {
        Node& n = node(id);
        if (n.adj.size() == 0 || !n.pull) continue;
        n.pull(*this, n.adj);
    }
}

Matrix Tape::grad(const Var& v) const {
    const Node& n = node(v.id);
    if (n.adj.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.adj;
}

// ---------------------------------------------------------------------------
// Generic ops
// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
    Tape& t = tape_of(a, b);
    Matrix v = a.value() + b.value();
    if (!rg(t, a, b)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a, b](Tape& t, const Matrix& bar) {
        t.accum(a, bar);
        t.accum(b, bar);
    });
}

Var sub(Var a, Var b) {
    Tape& t = tape_of(a, b);
    Matrix v = a.value() - b.value();
    if (!rg(t, a, b)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a, b](Tape& t, const Matrix& bar) {
        t.accum(a, bar);
        t.accum(b, -bar);
    });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double c) {
    Tape& t = tape_of(a);
    Matrix v = c * a.value();
    if (!rg(t, a)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true,
                  [a, c](Tape& t, const Matrix& bar) { t.accum(a, c * bar); });
}

Var cmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    Matrix v = a.value().cwiseProduct(b.value());
    if (!rg(t, a, b)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a, b](Tape& t, const Matrix& bar) {
        t.accum(a, bar.cwiseProduct(b.value()));
        t.accum(b, bar.cwiseProduct(a.value()));
    });
}

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    Matrix v = a.value() * b.value();
    if (!rg(t, a, b)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a, b](Tape& t, const Matrix& bar) {
        t.accum(a, bar * b.value().transpose());
        t.accum(b, a.value().transpose() * bar);
    });
}

Var matmul_nt(Var a, Var b) {
    Tape& t = tape_of(a, b);
    Matrix v = a.value() * b.value().transpose();
    if (!rg(t, a, b)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a, b](Tape& t, const Matrix& bar) {
        t.accum(a, bar * b.value());
        t.accum(b, bar.transpose() * a.value());
    });
}

Var transpose(Var a) {
    Tape& t = tape_of(a);
    Matrix v = a.value().transpose();
    if (!rg(t, a)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true,
                  [a](Tape& t, const Matrix& bar) { t.accum(a, bar.transpose()); });
}

Var symmetrize(Var a) {
    Tape& t = tape_of(a);
    Matrix v = 0.5 * (a.value() + a.value().transpose());
    if (!rg(t, a)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a](Tape& t, const Matrix& bar) {
        t.accum(a, 0.5 * (bar + bar.transpose()));
    });
}

Var sandwich(Var a, Var b) {
    Tape& t = tape_of(a, b);
    Matrix bs = 0.5 * (b.value() + b.value().transpose());
    Matrix v = a.value() * bs * a.value().transpose();
    v = 0.5 * (v + v.transpose()).eval();
    if (!rg(t, a, b)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a, b](Tape& t, const Matrix& bar) {
        Matrix g2 = bar + bar.transpose();
        Matrix bs = 0.5 * (b.value() + b.value().transpose());
        t.accum(a, g2 * a.value() * bs);
        t.accum(b, 0.5 * a.value().transpose() * g2 * a.value());
    });
}

Var vcat(Var a, Var b) {
    Tape& t = tape_of(a, b);
    require(a.cols() == b.cols(), "vcat: column mismatch");
    Matrix v(a.rows() + b.rows(), a.cols());
    v.topRows(a.rows()) = a.value();
    v.bottomRows(b.rows()) = b.value();
    if (!rg(t, a, b)) return t.make(std::move(v), false, nullptr);
    const int ra = a.rows(), rb = b.rows();
    return t.make(std::move(v), true, [a, b, ra, rb](Tape& t, const Matrix& bar) {
        t.accum(a, bar.topRows(ra));
        t.accum(b, bar.bottomRows(rb));
    });
}

Var reshape(Var a, int rows, int cols) {
    Tape& t = tape_of(a);
    require(rows * cols == a.rows() * a.cols(), "reshape: size mismatch");
    Matrix v = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
    if (!rg(t, a)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a](Tape& t, const Matrix& bar) {
        t.accum(a, Eigen::Map<const Matrix>(bar.data(), a.rows(), a.cols()));
    });
}

Var block(Var a, int i, int j, int rows, int cols) {
    Tape& t = tape_of(a);
    Matrix v = a.value().block(i, j, rows, cols);
    if (!rg(t, a)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a, i, j, rows, cols](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(a.rows(), a.cols());
        g.block(i, j, rows, cols) = bar;
        t.accum(a, g);
    });
}

Var exp_elem(Var a) {
    Tape& t = tape_of(a);
    Matrix v = a.value().array().exp();
    bool needs = rg(t, a);
    Var out = t.make(std::move(v), needs, nullptr);
    if (needs) {
        t.node(out.id).pull = [a, out](Tape& t, const Matrix& bar) {
            t.accum(a, bar.cwiseProduct(out.value()));
        };
    }
    return out;
}

Var log_elem(Var a) {
    Tape& t = tape_of(a);
    Matrix v = a.value().array().log();
    if (!rg(t, a)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a](Tape& t, const Matrix& bar) {
        t.accum(a, bar.cwiseQuotient(a.value()));
    });
}

Var tanh_elem(Var a) {
    Tape& t = tape_of(a);
    Matrix v = a.value().array().tanh();
    bool needs = rg(t, a);
    Var out = t.make(std::move(v), needs, nullptr);
    if (needs) {
        t.node(out.id).pull = [a, out](Tape& t, const Matrix& bar) {
            t.accum(a, bar.cwiseProduct(
                           (1.0 - out.value().array().square()).matrix()));
        };
    }
    return out;
}

Var rowscale(Var v, Var a) {
    Tape& t = tape_of(v, a);
    require(v.cols() == 1 && v.rows() == a.rows(), "rowscale: shape mismatch");
    Matrix out = v.value().col(0).asDiagonal() * a.value();
    if (!rg(t, v, a)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [v, a](Tape& t, const Matrix& bar) {
        t.accum(v, bar.cwiseProduct(a.value()).rowwise().sum());
        t.accum(a, v.value().col(0).asDiagonal() * bar);
    });
}

Var colwise_add(Var x, Var b) {
    Tape& t = tape_of(x, b);
    require(b.cols() == 1 && b.rows() == x.rows(), "colwise_add: shape mismatch");
    Matrix v = x.value();
    v.colwise() += b.value().col(0);
    if (!rg(t, x, b)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [x, b](Tape& t, const Matrix& bar) {
        t.accum(x, bar);
        t.accum(b, bar.rowwise().sum());
    });
}

Var rowmean(Var x) {
    Tape& t = tape_of(x);
    Matrix v = x.value().rowwise().mean();
    if (!rg(t, x)) return t.make(std::move(v), false, nullptr);
    const double inv = 1.0 / x.cols();
    return t.make(std::move(v), true, [x, inv](Tape& t, const Matrix& bar) {
        t.accum(x, (bar * inv).replicate(1, x.cols()));
    });
}

Var add_diag(Var c, Var v) {
    Tape& t = tape_of(c, v);
    require(c.rows() == c.cols() && v.cols() == 1 && v.rows() == c.rows(),
            "add_diag: shape mismatch");
    Matrix out = c.value();
    out.diagonal() += v.value().col(0);
    if (!rg(t, c, v)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [c, v](Tape& t, const Matrix& bar) {
        t.accum(c, bar);
        t.accum(v, bar.diagonal());
    });
}

Var stack_scalars(const std::vector<Var>& xs) {
    require(!xs.empty(), "stack_scalars: empty");
    Tape& t = tape_of(xs.front());
    Matrix v(static_cast<int>(xs.size()), 1);
    bool needs = false;
    for (size_t i = 0; i < xs.size(); ++i) {
        require(xs[i].value().size() == 1, "stack_scalars: operand not scalar");
        v(static_cast<int>(i), 0) = xs[i].value()(0, 0);
        needs = needs || t.needs_grad(xs[i]);
    }
    if (!needs) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [xs](Tape& t, const Matrix& bar) {
        for (size_t i = 0; i < xs.size(); ++i)
            t.accum(xs[i], Matrix::Constant(1, 1, bar(static_cast<int>(i), 0)));
    });
}

Var log_softmax(Var z) {
    Tape& t = tape_of(z);
    require(z.cols() == 1, "log_softmax: expects a column vector");
    const double m = z.value().maxCoeff();
    const double lse = m + std::log((z.value().array() - m).exp().sum());
    Matrix v = z.value().array() - lse;
    bool needs = rg(t, z);
    Var out = t.make(std::move(v), needs, nullptr);
    if (needs) {
        t.node(out.id).pull = [z, out](Tape& t, const Matrix& bar) {
            Matrix soft = out.value().array().exp();
            t.accum(z, bar - soft * bar.sum());
        };
    }
    return out;
}

Var logsumexp_weighted(Var logw, Var logp) {
    Tape& t = tape_of(logw, logp);
    require(logw.cols() == 1 && logp.cols() == 1 && logw.rows() == logp.rows(),
            "logsumexp_weighted: shape mismatch");
    Vector s = logw.value().col(0) + logp.value().col(0);
    const double m = s.maxCoeff();
    const double lse = m + std::log((s.array() - m).exp().sum());
    Matrix v = Matrix::Constant(1, 1, lse);
    if (!rg(t, logw, logp)) return t.make(std::move(v), false, nullptr);
    Vector soft = (s.array() - lse).exp();
    return t.make(std::move(v), true, [logw, logp, soft](Tape& t, const Matrix& bar) {
        t.accum(logw, bar(0, 0) * soft);
        t.accum(logp, bar(0, 0) * soft);
    });
}

Var mvn_logpdf(Var mean, Var cov, const Vector& point) {
    Tape& t = tape_of(mean, cov);
    const int n = mean.rows();
    require(cov.rows() == n && cov.cols() == n && point.size() == n,
            "mvn_logpdf: shape mismatch");
    Matrix sym = 0.5 * (cov.value() + cov.value().transpose());
    double jitter = 0.0;
    Eigen::LLT<Matrix> llt = cholesky_with_jitter(sym, &jitter);
    const bool needs = rg(t, mean, cov);
    if (jitter > 0.0 && needs)
        throw NumericError("PSD jitter triggered during gradient evaluation");
    const Vector diff = point - mean.value().col(0);
    const Vector alpha = llt.matrixL().solve(diff);
    double logdet = 0.0;
    for (int i = 0; i < n; ++i) logdet += std::log(llt.matrixL()(i, i));
    static constexpr double kLog2Pi = 1.8378770664093454835606594728112;
    Matrix v = Matrix::Constant(1, 1, -0.5 * (n * kLog2Pi + alpha.squaredNorm()) - logdet);
    if (!needs) return t.make(std::move(v), false, nullptr);
    // solve once; capture what the pull needs
    Vector binv_diff = llt.solve(diff);
    Matrix binv = llt.solve(Matrix::Identity(n, n));
    return t.make(std::move(v), true,
                  [mean, cov, binv_diff, binv](Tape& t, const Matrix& bar) {
                      const double g = bar(0, 0);
                      t.accum(mean, g * binv_diff);
                      Matrix dcov = -0.5 * (binv - binv_diff * binv_diff.transpose());
                      t.accum(cov, g * dcov);
                  });
}

// ---------------------------------------------------------------------------
// Agent-blocked / structured ops
// ---------------------------------------------------------------------------

Var block_diag_expand(Var w, int m) {
    Tape& t = tape_of(w);
    const int r = w.rows(), c = w.cols();
    Matrix v = Matrix::Zero(m * r, m * c);
    for (int k = 0; k < m; ++k) v.block(k * r, k * c, r, c) = w.value();
    if (!rg(t, w)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [w, m, r, c](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(r, c);
        for (int k = 0; k < m; ++k) g += bar.block(k * r, k * c, r, c);
        t.accum(w, g);
    });
}

Var nodewise_affine_mean(Var w, Var b, Var mu, int m) {
    Tape& t = tape_of(w, mu);
    const int din = w.cols(), dout = w.rows();
    require(mu.rows() == m * din && mu.cols() == 1, "nodewise_affine_mean: shape mismatch");
    Eigen::Map<const Matrix> x(mu.value().data(), din, m);
    Matrix y = w.value() * x;
    y.colwise() += b.value().col(0);
    Matrix v = Eigen::Map<const Matrix>(y.data(), m * dout, 1);
    if (!rg(t, w, mu) && !t.needs_grad(b)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [w, b, mu, m, din, dout](Tape& t, const Matrix& bar) {
        Eigen::Map<const Matrix> g(bar.data(), dout, m);
        Eigen::Map<const Matrix> x(mu.value().data(), din, m);
        t.accum(w, g * x.transpose());
        t.accum(b, g.rowwise().sum());
        Matrix gx = w.value().transpose() * g;
        t.accum(mu, Eigen::Map<const Matrix>(gx.data(), m * din, 1));
    });
}

Var agg_mean(const Matrix& a, Var mu, int m) {
    Tape& t = tape_of(mu);
    require(a.rows() == m && a.cols() == m, "agg_mean: adjacency shape");
    const int d = mu.rows() / m;
    Eigen::Map<const Matrix> x(mu.value().data(), d, m);
    Matrix y = x * a.transpose();
    Matrix v = Eigen::Map<const Matrix>(y.data(), m * d, 1);
    if (!rg(t, mu)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a, mu, m, d](Tape& t, const Matrix& bar) {
        Eigen::Map<const Matrix> g(bar.data(), d, m);
        Matrix gx = g * a;
        t.accum(mu, Eigen::Map<const Matrix>(gx.data(), m * d, 1));
    });
}

Var interleave_agents(Var x, int dx, Var y, int dy, int m) {
    Tape& t = tape_of(x, y);
    require(x.rows() == m * dx && y.rows() == m * dy, "interleave_agents: shape mismatch");
    Matrix v(m * (dx + dy), 1);
    for (int k = 0; k < m; ++k) {
        v.block(k * (dx + dy), 0, dx, 1) = x.value().block(k * dx, 0, dx, 1);
        v.block(k * (dx + dy) + dx, 0, dy, 1) = y.value().block(k * dy, 0, dy, 1);
    }
    if (!rg(t, x, y)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [x, y, dx, dy, m](Tape& t, const Matrix& bar) {
        Matrix gx(m * dx, 1), gy(m * dy, 1);
        for (int k = 0; k < m; ++k) {
            gx.block(k * dx, 0, dx, 1) = bar.block(k * (dx + dy), 0, dx, 1);
            gy.block(k * dy, 0, dy, 1) = bar.block(k * (dx + dy) + dx, 0, dy, 1);
        }
        t.accum(x, gx);
        t.accum(y, gy);
    });
}

Var nodewise_sandwich(Var w, Var bstack, int m) {
    Tape& t = tape_of(w, bstack);
    const int din = w.cols(), dout = w.rows();
    require(bstack.rows() == m * din && bstack.cols() == din, "nodewise_sandwich: shape");
    Matrix v(m * dout, dout);
    for (int k = 0; k < m; ++k) {
        Matrix bs = 0.5 * (bstack.value().block(k * din, 0, din, din) +
                           bstack.value().block(k * din, 0, din, din).transpose());
        Matrix c = w.value() * bs * w.value().transpose();
        v.block(k * dout, 0, dout, dout) = 0.5 * (c + c.transpose());
    }
    if (!rg(t, w, bstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [w, bstack, m, din, dout](Tape& t, const Matrix& bar) {
        Matrix gw = Matrix::Zero(dout, din);
        Matrix gb = Matrix::Zero(m * din, din);
        for (int k = 0; k < m; ++k) {
            Matrix g2 = bar.block(k * dout, 0, dout, dout) +
                        bar.block(k * dout, 0, dout, dout).transpose();
            Matrix bs = 0.5 * (bstack.value().block(k * din, 0, din, din) +
                               bstack.value().block(k * din, 0, din, din).transpose());
            gw += g2 * w.value() * bs;
            gb.block(k * din, 0, din, din) = 0.5 * w.value().transpose() * g2 * w.value();
        }
        t.accum(w, gw);
        t.accum(bstack, gb);
    });
}

Var nodewise_matmul(Var w, Var nstack, int m) {
    Tape& t = tape_of(w, nstack);
    const int din = w.cols(), dout = w.rows();
    const int cols = nstack.cols();
    require(nstack.rows() == m * din, "nodewise_matmul: shape");
    Matrix v(m * dout, cols);
    for (int k = 0; k < m; ++k)
        v.block(k * dout, 0, dout, cols) = w.value() * nstack.value().block(k * din, 0, din, cols);
    if (!rg(t, w, nstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true,
                  [w, nstack, m, din, dout, cols](Tape& t, const Matrix& bar) {
                      Matrix gw = Matrix::Zero(dout, din);
                      Matrix gn(m * din, cols);
                      for (int k = 0; k < m; ++k) {
                          const Matrix g = bar.block(k * dout, 0, dout, cols);
                          gw += g * nstack.value().block(k * din, 0, din, cols).transpose();
                          gn.block(k * din, 0, din, cols) = w.value().transpose() * g;
                      }
                      t.accum(w, gw);
                      t.accum(nstack, gn);
                  });
}

Var blocks_mix(const Matrix& k, Var bstack, int m) {
    Tape& t = tape_of(bstack);
    const int d = bstack.cols();
    require(bstack.rows() == m * d && k.rows() == m && k.cols() == m, "blocks_mix: shape");
    Matrix v = Matrix::Zero(m * d, d);
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b)
            if (k(a, b) != 0.0)
                v.block(a * d, 0, d, d) += k(a, b) * bstack.value().block(b * d, 0, d, d);
    if (!rg(t, bstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [k, bstack, m, d](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(m * d, d);
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b)
                if (k(a, b) != 0.0)
                    g.block(b * d, 0, d, d) += k(a, b) * bar.block(a * d, 0, d, d);
        t.accum(bstack, g);
    });
}

Var alldiag_mix(Var w, Var cstack, int m) {
    Tape& t = tape_of(w, cstack);
    const int din = w.cols(), dout = w.rows();
    require(cstack.rows() == din * m && cstack.cols() == m, "alldiag_mix: shape");
    Matrix v = Matrix::Zero(dout * m, m);
    for (int a = 0; a < dout; ++a)
        for (int i = 0; i < din; ++i) {
            const double c = w.value()(a, i) * w.value()(a, i);
            if (c != 0.0) {
                Matrix cs = 0.5 * (cstack.value().block(i * m, 0, m, m) +
                                   cstack.value().block(i * m, 0, m, m).transpose());
                v.block(a * m, 0, m, m) += c * cs;
            }
        }
    if (!rg(t, w, cstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [w, cstack, m, din, dout](Tape& t, const Matrix& bar) {
        Matrix gw = Matrix::Zero(dout, din);
        Matrix gc = Matrix::Zero(din * m, m);
        for (int a = 0; a < dout; ++a) {
            Matrix gba = 0.5 * (bar.block(a * m, 0, m, m) +
                                bar.block(a * m, 0, m, m).transpose());
            for (int i = 0; i < din; ++i) {
                Matrix cs = 0.5 * (cstack.value().block(i * m, 0, m, m) +
                                   cstack.value().block(i * m, 0, m, m).transpose());
                gw(a, i) += 2.0 * w.value()(a, i) * (gba.cwiseProduct(cs)).sum();
                gc.block(i * m, 0, m, m) += w.value()(a, i) * w.value()(a, i) * gba;
            }
        }
        t.accum(w, gw);
        t.accum(cstack, gc);
    });
}

Var perdim_sandwich(const Matrix& a, Var cstack, int m) {
    Tape& t = tape_of(cstack);
    const int d = cstack.rows() / m;
    require(cstack.rows() == d * m && cstack.cols() == m && a.rows() == m && a.cols() == m,
            "perdim_sandwich: shape");
    Matrix v(d * m, m);
    for (int i = 0; i < d; ++i) {
        Matrix cs = 0.5 * (cstack.value().block(i * m, 0, m, m) +
                           cstack.value().block(i * m, 0, m, m).transpose());
        Matrix c = a * cs * a.transpose();
        v.block(i * m, 0, m, m) = 0.5 * (c + c.transpose());
    }
    if (!rg(t, cstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [a, cstack, m, d](Tape& t, const Matrix& bar) {
        Matrix g(d * m, m);
        for (int i = 0; i < d; ++i) {
            Matrix g2 = bar.block(i * m, 0, m, m) + bar.block(i * m, 0, m, m).transpose();
            g.block(i * m, 0, m, m) = 0.5 * a.transpose() * g2 * a;
        }
        t.accum(cstack, g);
    });
}

Var maindiag_affine_var(Var w, Var s2, int m) {
    Tape& t = tape_of(w, s2);
    const int din = w.cols(), dout = w.rows();
    require(s2.rows() == m * din && s2.cols() == 1, "maindiag_affine_var: shape");
    Matrix w2 = w.value().array().square();
    Eigen::Map<const Matrix> x(s2.value().data(), din, m);
    Matrix y = w2 * x;
    Matrix v = Eigen::Map<const Matrix>(y.data(), m * dout, 1);
    if (!rg(t, w, s2)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [w, s2, m, din, dout](Tape& t, const Matrix& bar) {
        Eigen::Map<const Matrix> g(bar.data(), dout, m);
        Eigen::Map<const Matrix> x(s2.value().data(), din, m);
        t.accum(w, 2.0 * w.value().cwiseProduct(g * x.transpose()));
        Matrix w2 = w.value().array().square();
        Matrix gx = w2.transpose() * g;
        t.accum(s2, Eigen::Map<const Matrix>(gx.data(), m * din, 1));
    });
}

Var maindiag_agg_var(const Matrix& a, Var s2, int m) {
    Matrix a2 = a.array().square();
    return agg_mean(a2, s2, m);
}

Var concat_blocks(Var bstack, Var nstack, const Vector& self_weight, int m) {
    Tape& t = tape_of(bstack, nstack);
    const int d = bstack.cols();
    require(nstack.cols() == d && bstack.rows() == m * d && nstack.rows() == m * d &&
                self_weight.size() == m,
            "concat_blocks: shape");
    Matrix v = Matrix::Zero(m * 2 * d, 2 * d);
    for (int k = 0; k < m; ++k) {
        Matrix bs = 0.5 * (bstack.value().block(k * d, 0, d, d) +
                           bstack.value().block(k * d, 0, d, d).transpose());
        Matrix ns = 0.5 * (nstack.value().block(k * d, 0, d, d) +
                           nstack.value().block(k * d, 0, d, d).transpose());
        const double akk = self_weight[k];
        v.block(k * 2 * d, 0, d, d) = bs;
        v.block(k * 2 * d, d, d, d) = akk * bs;
        v.block(k * 2 * d + d, 0, d, d) = akk * bs;
        v.block(k * 2 * d + d, d, d, d) = ns;
    }
    if (!rg(t, bstack, nstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true,
                  [bstack, nstack, self_weight, m, d](Tape& t, const Matrix& bar) {
                      Matrix gb(m * d, d), gn(m * d, d);
                      for (int k = 0; k < m; ++k) {
                          const double akk = self_weight[k];
                          Matrix x = bar.block(k * 2 * d, 0, d, d) +
                                     akk * (bar.block(k * 2 * d, d, d, d) +
                                            bar.block(k * 2 * d + d, 0, d, d));
                          gb.block(k * d, 0, d, d) = 0.5 * (x + x.transpose());
                          Matrix y = bar.block(k * 2 * d + d, d, d, d);
                          gn.block(k * d, 0, d, d) = 0.5 * (y + y.transpose());
                      }
                      t.accum(bstack, gb);
                      t.accum(nstack, gn);
                  });
}

Var blockwise_transpose(Var stack, int m) {
    Tape& t = tape_of(stack);
    const int d = stack.cols();
    require(stack.rows() == m * d, "blockwise_transpose: shape");
    Matrix v(m * d, d);
    for (int k = 0; k < m; ++k)
        v.block(k * d, 0, d, d) = stack.value().block(k * d, 0, d, d).transpose();
    if (!rg(t, stack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [stack, m, d](Tape& t, const Matrix& bar) {
        Matrix g(m * d, d);
        for (int k = 0; k < m; ++k)
            g.block(k * d, 0, d, d) = bar.block(k * d, 0, d, d).transpose();
        t.accum(stack, g);
    });
}

// ---------------------------------------------------------------------------
// ReLU moment ops
// ---------------------------------------------------------------------------

namespace {

using relu_gauss::Scalar2;

template <Scalar2 (*Kernel)(double, double)>
Var relu_elementwise(Var mu, Var var) {
    Tape& t = tape_of(mu, var);
    require(mu.rows() == var.rows() && mu.cols() == 1 && var.cols() == 1,
            "relu op: expects column vectors");
    const int n = mu.rows();
    const bool needs = rg(t, mu, var);
    Matrix v(n, 1);
    Matrix dmu, dvar;
    if (needs) {
        dmu.resize(n, 1);
        dvar.resize(n, 1);
    }
    for (int i = 0; i < n; ++i) {
        Scalar2 r = Kernel(mu.value()(i, 0), var.value()(i, 0));
        v(i, 0) = r.value;
        if (needs) {
            dmu(i, 0) = r.d_mu;
            dvar(i, 0) = r.d_var;
        }
    }
    if (!needs) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [mu, var, dmu, dvar](Tape& t, const Matrix& bar) {
        t.accum(mu, bar.cwiseProduct(dmu));
        t.accum(var, bar.cwiseProduct(dvar));
    });
}

} // namespace

Var relu_mean_vec(Var mu, Var var) { return relu_elementwise<relu_gauss::relu_mean>(mu, var); }
Var relu_var_vec(Var mu, Var var) { return relu_elementwise<relu_gauss::relu_var>(mu, var); }
Var relu_jac_vec(Var mu, Var var) {
    return relu_elementwise<relu_gauss::relu_heaviside>(mu, var);
}

Var relu_cov_full(Var mu, Var cov) {
    Tape& t = tape_of(mu, cov);
    const int n = mu.rows();
    require(cov.rows() == n && cov.cols() == n && mu.cols() == 1, "relu_cov_full: shape");
    const bool needs = rg(t, mu, cov);
    const Matrix& c = cov.value();
    const Vector m = mu.value().col(0);
    Matrix v(n, n);
    // per-entry partials stored for the pull closure
    struct PairRec {
        int i, j;
        relu_gauss::Pair5 p;
    };
    struct DiagRec {
        int i;
        Scalar2 s;
    };
    std::vector<PairRec> pairs;
    std::vector<DiagRec> diags;
    if (needs) {
        diags.reserve(n);
        pairs.reserve(static_cast<size_t>(n) * (n - 1) / 2);
    }
    for (int i = 0; i < n; ++i) {
        Scalar2 d = relu_gauss::relu_var(m[i], c(i, i));
        v(i, i) = d.value;
        if (needs) diags.push_back({i, d});
        for (int j = i + 1; j < n; ++j) {
            const double cij = 0.5 * (c(i, j) + c(j, i));
            relu_gauss::Pair5 p =
                relu_gauss::relu_pair_cov(m[i], m[j], c(i, i), c(j, j), cij, needs);
            v(i, j) = p.value;
            v(j, i) = p.value;
            if (needs) pairs.push_back({i, j, p});
        }
    }
    if (!needs) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true,
                  [mu, cov, pairs, diags](Tape& t, const Matrix& bar) {
                      const int n = static_cast<int>(bar.rows());
                      Matrix gmu = Matrix::Zero(n, 1);
                      Matrix gcov = Matrix::Zero(n, n);
                      for (const auto& d : diags) {
                          const double g = bar(d.i, d.i);
                          gmu(d.i, 0) += g * d.s.d_mu;
                          gcov(d.i, d.i) += g * d.s.d_var;
                      }
                      for (const auto& pr : pairs) {
                          const double g = bar(pr.i, pr.j) + bar(pr.j, pr.i);
                          gmu(pr.i, 0) += g * pr.p.d_mu_i;
                          gmu(pr.j, 0) += g * pr.p.d_mu_j;
                          gcov(pr.i, pr.i) += g * pr.p.d_var_i;
                          gcov(pr.j, pr.j) += g * pr.p.d_var_j;
                          gcov(pr.i, pr.j) += 0.5 * g * pr.p.d_cov;
                          gcov(pr.j, pr.i) += 0.5 * g * pr.p.d_cov;
                      }
                      t.accum(mu, gmu);
                      t.accum(cov, gcov);
                  });
}

Var relu_cov_blocks(Var mu, Var bstack, int m) {
    Tape& t = tape_of(mu, bstack);
    const int d = bstack.cols();
    require(bstack.rows() == m * d && mu.rows() == m * d, "relu_cov_blocks: shape");
    const bool needs = rg(t, mu, bstack);
    Matrix v(m * d, d);
    struct Rec {
        int k, i, j; // agent, local indices
        relu_gauss::Pair5 p;
    };
    struct DiagRec {
        int k, i;
        relu_gauss::Scalar2 s;
    };
    std::vector<Rec> pairs;
    std::vector<DiagRec> diags;
    const Matrix& b = bstack.value();
    const Vector& mv = mu.value().col(0);
    for (int k = 0; k < m; ++k) {
        for (int i = 0; i < d; ++i) {
            Scalar2 s = relu_gauss::relu_var(mv[k * d + i], b(k * d + i, i));
            v(k * d + i, i) = s.value;
            if (needs) diags.push_back({k, i, s});
            for (int j = i + 1; j < d; ++j) {
                const double cij = 0.5 * (b(k * d + i, j) + b(k * d + j, i));
                relu_gauss::Pair5 p = relu_gauss::relu_pair_cov(
                    mv[k * d + i], mv[k * d + j], b(k * d + i, i), b(k * d + j, j), cij, needs);
                v(k * d + i, j) = p.value;
                v(k * d + j, i) = p.value;
                if (needs) pairs.push_back({k, i, j, p});
            }
        }
    }
    if (!needs) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true,
                  [mu, bstack, pairs, diags, m, d](Tape& t, const Matrix& bar) {
                      Matrix gmu = Matrix::Zero(m * d, 1);
                      Matrix gb = Matrix::Zero(m * d, d);
                      for (const auto& r : diags) {
                          const double g = bar(r.k * d + r.i, r.i);
                          gmu(r.k * d + r.i, 0) += g * r.s.d_mu;
                          gb(r.k * d + r.i, r.i) += g * r.s.d_var;
                      }
                      for (const auto& r : pairs) {
                          const double g = bar(r.k * d + r.i, r.j) + bar(r.k * d + r.j, r.i);
                          gmu(r.k * d + r.i, 0) += g * r.p.d_mu_i;
                          gmu(r.k * d + r.j, 0) += g * r.p.d_mu_j;
                          gb(r.k * d + r.i, r.i) += g * r.p.d_var_i;
                          gb(r.k * d + r.j, r.j) += g * r.p.d_var_j;
                          gb(r.k * d + r.i, r.j) += 0.5 * g * r.p.d_cov;
                          gb(r.k * d + r.j, r.i) += 0.5 * g * r.p.d_cov;
                      }
                      t.accum(mu, gmu);
                      t.accum(bstack, gb);
                  });
}

Var relu_cov_alldiag(Var mu, Var cstack, int m, int d) {
    Tape& t = tape_of(mu, cstack);
    require(cstack.rows() == d * m && cstack.cols() == m && mu.rows() == m * d,
            "relu_cov_alldiag: shape");
    const bool needs = rg(t, mu, cstack);
    Matrix v(d * m, m);
    struct Rec {
        int i, a, b; // dim, agents
        relu_gauss::Pair5 p;
    };
    struct DiagRec {
        int i, a;
        relu_gauss::Scalar2 s;
    };
    std::vector<Rec> pairs;
    std::vector<DiagRec> diags;
    const Matrix& c = cstack.value();
    const Vector& mv = mu.value().col(0);
    for (int i = 0; i < d; ++i) {
        for (int a = 0; a < m; ++a) {
            Scalar2 s = relu_gauss::relu_var(mv[a * d + i], c(i * m + a, a));
            v(i * m + a, a) = s.value;
            if (needs) diags.push_back({i, a, s});
            for (int b2 = a + 1; b2 < m; ++b2) {
                const double cab = 0.5 * (c(i * m + a, b2) + c(i * m + b2, a));
                relu_gauss::Pair5 p = relu_gauss::relu_pair_cov(
                    mv[a * d + i], mv[b2 * d + i], c(i * m + a, a), c(i * m + b2, b2), cab,
                    needs);
                v(i * m + a, b2) = p.value;
                v(i * m + b2, a) = p.value;
                if (needs) pairs.push_back({i, a, b2, p});
            }
        }
    }
    if (!needs) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true,
                  [mu, cstack, pairs, diags, m, d](Tape& t, const Matrix& bar) {
                      Matrix gmu = Matrix::Zero(m * d, 1);
                      Matrix gc = Matrix::Zero(d * m, m);
                      for (const auto& r : diags) {
                          const double g = bar(r.i * m + r.a, r.a);
                          gmu(r.a * d + r.i, 0) += g * r.s.d_mu;
                          gc(r.i * m + r.a, r.a) += g * r.s.d_var;
                      }
                      for (const auto& r : pairs) {
                          const double g = bar(r.i * m + r.a, r.b) + bar(r.i * m + r.b, r.a);
                          gmu(r.a * d + r.i, 0) += g * r.p.d_mu_i;
                          gmu(r.b * d + r.i, 0) += g * r.p.d_mu_j;
                          gc(r.i * m + r.a, r.a) += g * r.p.d_var_i;
                          gc(r.i * m + r.b, r.b) += g * r.p.d_var_j;
                          gc(r.i * m + r.a, r.b) += 0.5 * g * r.p.d_cov;
                          gc(r.i * m + r.b, r.a) += 0.5 * g * r.p.d_cov;
                      }
                      t.accum(mu, gmu);
                      t.accum(cstack, gc);
                  });
}

// ---------------------------------------------------------------------------
// Expected-Jacobian assembly and Stein products
// ---------------------------------------------------------------------------

Var assemble_jac_concat(Var nstack, const Matrix& a, int m) {
    Tape& t = tape_of(nstack);
    const int din = nstack.cols() / 2;
    const int dout = nstack.rows() / m;
    require(nstack.rows() == m * dout && nstack.cols() == 2 * din, "assemble_jac_concat: shape");
    Matrix v = Matrix::Zero(m * dout, m * din);
    for (int i = 0; i < m; ++i) {
        const Matrix n1 = nstack.value().block(i * dout, 0, dout, din);
        const Matrix n2 = nstack.value().block(i * dout, din, dout, din);
        v.block(i * dout, i * din, dout, din) = n1;
        for (int k = 0; k < m; ++k)
            if (a(i, k) != 0.0) v.block(i * dout, k * din, dout, din) += a(i, k) * n2;
    }
    if (!rg(t, nstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [nstack, a, m, din, dout](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(m * dout, 2 * din);
        for (int i = 0; i < m; ++i) {
            g.block(i * dout, 0, dout, din) = bar.block(i * dout, i * din, dout, din);
            Matrix acc = Matrix::Zero(dout, din);
            for (int k = 0; k < m; ++k)
                if (a(i, k) != 0.0) acc += a(i, k) * bar.block(i * dout, k * din, dout, din);
            g.block(i * dout, din, dout, din) = acc;
        }
        t.accum(nstack, g);
    });
}

Var assemble_jac_agg(Var nstack, const Matrix& a, int m) {
    Tape& t = tape_of(nstack);
    const int din = nstack.cols();
    const int dout = nstack.rows() / m;
    require(nstack.rows() == m * dout, "assemble_jac_agg: shape");
    Matrix v = Matrix::Zero(m * dout, m * din);
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < m; ++k)
            if (a(i, k) != 0.0)
                v.block(i * dout, k * din, dout, din) =
                    a(i, k) * nstack.value().block(i * dout, 0, dout, din);
    if (!rg(t, nstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [nstack, a, m, din, dout](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(m * dout, din);
        for (int i = 0; i < m; ++i)
            for (int k = 0; k < m; ++k)
                if (a(i, k) != 0.0)
                    g.block(i * dout, 0, dout, din) +=
                        a(i, k) * bar.block(i * dout, k * din, dout, din);
        t.accum(nstack, g);
    });
}

Var stein_diag(Var s2, Var jac) {
    Tape& t = tape_of(s2, jac);
    const int n = s2.rows();
    require(jac.rows() == n && jac.cols() == n && s2.cols() == 1, "stein_diag: shape");
    Matrix v = s2.value().cwiseProduct(jac.value().diagonal());
    if (!rg(t, s2, jac)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [s2, jac](Tape& t, const Matrix& bar) {
        t.accum(s2, bar.cwiseProduct(jac.value().diagonal()));
        Matrix gj = Matrix::Zero(jac.rows(), jac.cols());
        gj.diagonal() = bar.cwiseProduct(s2.value());
        t.accum(jac, gj);
    });
}

Var stein_blocks(Var bstack, Var jac, int m) {
    Tape& t = tape_of(bstack, jac);
    const int d = bstack.cols();
    require(bstack.rows() == m * d && jac.rows() == m * d && jac.cols() == m * d,
            "stein_blocks: shape");
    Matrix v(m * d, d);
    for (int k = 0; k < m; ++k) {
        Matrix bs = 0.5 * (bstack.value().block(k * d, 0, d, d) +
                           bstack.value().block(k * d, 0, d, d).transpose());
        v.block(k * d, 0, d, d) = bs * jac.value().block(k * d, k * d, d, d).transpose();
    }
    if (!rg(t, bstack, jac)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [bstack, jac, m, d](Tape& t, const Matrix& bar) {
        Matrix gb(m * d, d);
        Matrix gj = Matrix::Zero(m * d, m * d);
        for (int k = 0; k < m; ++k) {
            const Matrix j0 = jac.value().block(k * d, k * d, d, d);
            Matrix bs = 0.5 * (bstack.value().block(k * d, 0, d, d) +
                               bstack.value().block(k * d, 0, d, d).transpose());
            Matrix g = bar.block(k * d, 0, d, d);
            Matrix omega = g * j0;
            gb.block(k * d, 0, d, d) = 0.5 * (omega + omega.transpose());
            gj.block(k * d, k * d, d, d) = g.transpose() * bs;
        }
        t.accum(bstack, gb);
        t.accum(jac, gj);
    });
}

Var stein_alldiag(Var cstack, Var jac, int m, int d) {
    Tape& t = tape_of(cstack, jac);
    require(cstack.rows() == d * m && cstack.cols() == m && jac.rows() == m * d &&
                jac.cols() == m * d,
            "stein_alldiag: shape");
    Matrix v(d * m, m);
    for (int i = 0; i < d; ++i) {
        Matrix jsub(m, m);
        for (int a = 0; a < m; ++a)
            for (int k = 0; k < m; ++k) jsub(a, k) = jac.value()(a * d + i, k * d + i);
        Matrix cs = 0.5 * (cstack.value().block(i * m, 0, m, m) +
                           cstack.value().block(i * m, 0, m, m).transpose());
        v.block(i * m, 0, m, m) = cs * jsub.transpose();
    }
    if (!rg(t, cstack, jac)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [cstack, jac, m, d](Tape& t, const Matrix& bar) {
        Matrix gc(d * m, m);
        Matrix gj = Matrix::Zero(m * d, m * d);
        for (int i = 0; i < d; ++i) {
            Matrix jsub(m, m);
            for (int a = 0; a < m; ++a)
                for (int k = 0; k < m; ++k) jsub(a, k) = jac.value()(a * d + i, k * d + i);
            Matrix cs = 0.5 * (cstack.value().block(i * m, 0, m, m) +
                               cstack.value().block(i * m, 0, m, m).transpose());
            const Matrix g = bar.block(i * m, 0, m, m);
            Matrix omega = g * jsub;
            gc.block(i * m, 0, m, m) = 0.5 * (omega + omega.transpose());
            Matrix gjsub = g.transpose() * cs;
            for (int a = 0; a < m; ++a)
                for (int k = 0; k < m; ++k) gj(a * d + i, k * d + i) += gjsub(a, k);
        }
        t.accum(cstack, gc);
        t.accum(jac, gj);
    });
}

Var add_diag_blocks(Var bstack, Var v, int m) {
    Tape& t = tape_of(bstack, v);
    const int d = bstack.cols();
    require(v.rows() == m * d && v.cols() == 1, "add_diag_blocks: shape");
    Matrix out = bstack.value();
    for (int k = 0; k < m; ++k)
        for (int i = 0; i < d; ++i) out(k * d + i, i) += v.value()(k * d + i, 0);
    if (!rg(t, bstack, v)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [bstack, v, m, d](Tape& t, const Matrix& bar) {
        t.accum(bstack, bar);
        Matrix gv(m * d, 1);
        for (int k = 0; k < m; ++k)
            for (int i = 0; i < d; ++i) gv(k * d + i, 0) = bar(k * d + i, i);
        t.accum(v, gv);
    });
}

Var add_diag_perdim(Var cstack, Var v, int m, int d) {
    Tape& t = tape_of(cstack, v);
    require(cstack.rows() == d * m && v.rows() == m * d && v.cols() == 1,
            "add_diag_perdim: shape");
    Matrix out = cstack.value();
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < m; ++a) out(i * m + a, a) += v.value()(a * d + i, 0);
    if (!rg(t, cstack, v)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [cstack, v, m, d](Tape& t, const Matrix& bar) {
        t.accum(cstack, bar);
        Matrix gv(m * d, 1);
        for (int i = 0; i < d; ++i)
            for (int a = 0; a < m; ++a) gv(a * d + i, 0) = bar(i * m + a, a);
        t.accum(v, gv);
    });
}

// ---------------------------------------------------------------------------
// Structure embedding / masking
// ---------------------------------------------------------------------------

Var diag_to_full(Var v) {
    Tape& t = tape_of(v);
    const int n = v.rows();
    Matrix out = Matrix::Zero(n, n);
    out.diagonal() = v.value().col(0);
    if (!rg(t, v)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true,
                  [v](Tape& t, const Matrix& bar) { t.accum(v, bar.diagonal()); });
}

Var diag_to_blocks(Var v, int m) {
    Tape& t = tape_of(v);
    const int d = v.rows() / m;
    Matrix out = Matrix::Zero(m * d, d);
    for (int k = 0; k < m; ++k)
        for (int i = 0; i < d; ++i) out(k * d + i, i) = v.value()(k * d + i, 0);
    if (!rg(t, v)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [v, m, d](Tape& t, const Matrix& bar) {
        Matrix g(m * d, 1);
        for (int k = 0; k < m; ++k)
            for (int i = 0; i < d; ++i) g(k * d + i, 0) = bar(k * d + i, i);
        t.accum(v, g);
    });
}

Var diag_to_alldiag(Var v, int m, int d) {
    Tape& t = tape_of(v);
    require(v.rows() == m * d, "diag_to_alldiag: shape");
    Matrix out = Matrix::Zero(d * m, m);
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < m; ++a) out(i * m + a, a) = v.value()(a * d + i, 0);
    if (!rg(t, v)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [v, m, d](Tape& t, const Matrix& bar) {
        Matrix g(m * d, 1);
        for (int i = 0; i < d; ++i)
            for (int a = 0; a < m; ++a) g(a * d + i, 0) = bar(i * m + a, a);
        t.accum(v, g);
    });
}

Var blocks_to_full(Var bstack, int m) {
    Tape& t = tape_of(bstack);
    const int d = bstack.cols();
    Matrix out = Matrix::Zero(m * d, m * d);
    for (int k = 0; k < m; ++k)
        out.block(k * d, k * d, d, d) = bstack.value().block(k * d, 0, d, d);
    if (!rg(t, bstack)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [bstack, m, d](Tape& t, const Matrix& bar) {
        Matrix g(m * d, d);
        for (int k = 0; k < m; ++k) g.block(k * d, 0, d, d) = bar.block(k * d, k * d, d, d);
        t.accum(bstack, g);
    });
}

Var alldiag_to_full(Var cstack, int m, int d) {
    Tape& t = tape_of(cstack);
    require(cstack.rows() == d * m && cstack.cols() == m, "alldiag_to_full: shape");
    Matrix out = Matrix::Zero(m * d, m * d);
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b) out(a * d + i, b * d + i) = cstack.value()(i * m + a, b);
    if (!rg(t, cstack)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [cstack, m, d](Tape& t, const Matrix& bar) {
        Matrix g(d * m, m);
        for (int i = 0; i < d; ++i)
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b) g(i * m + a, b) = bar(a * d + i, b * d + i);
        t.accum(cstack, g);
    });
}

Var mask_full_diag(Var c) {
    Tape& t = tape_of(c);
    Matrix out = c.value().diagonal();
    if (!rg(t, c)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [c](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(c.rows(), c.cols());
        g.diagonal() = bar.col(0);
        t.accum(c, g);
    });
}

Var mask_full_blocks(Var c, int m) {
    Tape& t = tape_of(c);
    const int d = c.rows() / m;
    Matrix out(m * d, d);
    for (int k = 0; k < m; ++k) out.block(k * d, 0, d, d) = c.value().block(k * d, k * d, d, d);
    if (!rg(t, c)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [c, m, d](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(c.rows(), c.cols());
        for (int k = 0; k < m; ++k) g.block(k * d, k * d, d, d) = bar.block(k * d, 0, d, d);
        t.accum(c, g);
    });
}

Var mask_full_alldiag(Var c, int m, int d) {
    Tape& t = tape_of(c);
    Matrix out(d * m, m);
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < m; ++a)
            for (int b = 0; b < m; ++b) out(i * m + a, b) = c.value()(a * d + i, b * d + i);
    if (!rg(t, c)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [c, m, d](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(c.rows(), c.cols());
        for (int i = 0; i < d; ++i)
            for (int a = 0; a < m; ++a)
                for (int b = 0; b < m; ++b) g(a * d + i, b * d + i) += bar(i * m + a, b);
        t.accum(c, g);
    });
}

Var structured_diagonal_full(Var c) { return mask_full_diag(c); }

Var structured_diagonal_blocks(Var bstack, int m) {
    Tape& t = tape_of(bstack);
    const int d = bstack.cols();
    Matrix out(m * d, 1);
    for (int k = 0; k < m; ++k)
        for (int i = 0; i < d; ++i) out(k * d + i, 0) = bstack.value()(k * d + i, i);
    if (!rg(t, bstack)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [bstack, m, d](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(m * d, d);
        for (int k = 0; k < m; ++k)
            for (int i = 0; i < d; ++i) g(k * d + i, i) = bar(k * d + i, 0);
        t.accum(bstack, g);
    });
}

Var structured_diagonal_alldiag(Var cstack, int m, int d) {
    Tape& t = tape_of(cstack);
    Matrix out(m * d, 1);
    for (int i = 0; i < d; ++i)
        for (int a = 0; a < m; ++a) out(a * d + i, 0) = cstack.value()(i * m + a, a);
    if (!rg(t, cstack)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true, [cstack, m, d](Tape& t, const Matrix& bar) {
        Matrix g = Matrix::Zero(d * m, m);
        for (int i = 0; i < d; ++i)
            for (int a = 0; a < m; ++a) g(i * m + a, a) = bar(a * d + i, 0);
        t.accum(cstack, g);
    });
}

// ---------------------------------------------------------------------------
// PSD repair
// ---------------------------------------------------------------------------

namespace {

// Symmetrize; check/repair on the value side. Repair in gradient mode aborts.
Matrix repair_dense(const Matrix& c, bool grad_mode) {
    Matrix sym = 0.5 * (c + c.transpose());
    Eigen::LLT<Matrix> llt(sym);
    if (llt.info() == Eigen::Success) return sym;
    if (grad_mode)
        throw NumericError("PSD jitter triggered during gradient evaluation");
    const int n = static_cast<int>(sym.rows());
    for (double eps = kJitterStart; eps <= kJitterMax * (1.0 + 1e-12); eps *= 10.0) {
        Matrix repaired = sym + eps * Matrix::Identity(n, n);
        llt.compute(repaired);
        if (llt.info() == Eigen::Success) return repaired;
    }
    throw NumericError("PSD repair exhausted (jitter 1e-9..1e-5)");
}

} // namespace

Var psd_repair_full(Var c) {
    Tape& t = tape_of(c);
    Matrix v = repair_dense(c.value(), t.needs_grad(c));
    if (!rg(t, c)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [c](Tape& t, const Matrix& bar) {
        t.accum(c, 0.5 * (bar + bar.transpose()));
    });
}

Var psd_repair_blocks(Var bstack, int m) {
    Tape& t = tape_of(bstack);
    const int d = bstack.cols();
    Matrix v(m * d, d);
    for (int k = 0; k < m; ++k)
        v.block(k * d, 0, d, d) =
            repair_dense(bstack.value().block(k * d, 0, d, d), t.needs_grad(bstack));
    if (!rg(t, bstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [bstack, m, d](Tape& t, const Matrix& bar) {
        Matrix g(m * d, d);
        for (int k = 0; k < m; ++k) {
            const Matrix b = bar.block(k * d, 0, d, d);
            g.block(k * d, 0, d, d) = 0.5 * (b + b.transpose());
        }
        t.accum(bstack, g);
    });
}

Var psd_repair_alldiag(Var cstack, int m, int d) {
    Tape& t = tape_of(cstack);
    Matrix v(d * m, m);
    for (int i = 0; i < d; ++i)
        v.block(i * m, 0, m, m) =
            repair_dense(cstack.value().block(i * m, 0, m, m), t.needs_grad(cstack));
    if (!rg(t, cstack)) return t.make(std::move(v), false, nullptr);
    return t.make(std::move(v), true, [cstack, m, d](Tape& t, const Matrix& bar) {
        Matrix g(d * m, m);
        for (int i = 0; i < d; ++i) {
            const Matrix b = bar.block(i * m, 0, m, m);
            g.block(i * m, 0, m, m) = 0.5 * (b + b.transpose());
        }
        t.accum(cstack, g);
    });
}

Var floor_check_vec(Var v) {
    Tape& t = tape_of(v);
    Matrix out = v.value();
    const double lo = out.minCoeff();
    if (lo < 0.0) {
        if (t.needs_grad(v))
            throw NumericError("negative variance during gradient evaluation");
        double eps = kJitterStart;
        while (eps <= kJitterMax * (1.0 + 1e-12) && lo + eps < 0.0) eps *= 10.0;
        if (lo + eps < 0.0) throw NumericError("variance repair exhausted (jitter 1e-9..1e-5)");
        out.array() += eps;
    }
    if (!rg(t, v)) return t.make(std::move(out), false, nullptr);
    return t.make(std::move(out), true,
                  [v](Tape& t, const Matrix& bar) { t.accum(v, bar); });
}

} // namespace gdssm::ad
