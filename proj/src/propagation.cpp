#include "kcap/propagation.hpp"

#include <cmath>
#include <cstring>

#include "kcap/error.hpp"
#include "kcap/kernels.hpp"
#include "kcap/score_sampler.hpp"
#include "kcap/threading.hpp"

namespace kcap {

namespace {

constexpr uint64_t kAttDrawLabel = 0x6e747461;  // per-draw stream label ("attn")
constexpr uint64_t kLayerLabel = 0x7265616c;    // per-layer seed derivation ("layr")

void check_state(const KernelState& st) {
    require(st.sigma11.rows() == st.sigma11.cols() && st.sigma22.rows() == st.sigma22.cols(),
            ErrorCode::ShapeMismatch, "kernel state: diagonal blocks must be square");
    require(st.sigma12.rows() == st.t1() && st.sigma12.cols() == st.t2(), ErrorCode::ShapeMismatch,
            "kernel state: cross block shape mismatch");
    require(st.sigma11.all_finite() && st.sigma12.all_finite() && st.sigma22.all_finite(), ErrorCode::NotFinite,
            "kernel state: non-finite covariance entries");
}

// mean/variance accumulator over equal-shape matrices
struct MeanVar {
    Mat sum, sq;
    void init(int r, int c) {
        sum = Mat(r, c);
        sq = Mat(r, c);
    }
    void add(const Mat& v) {
        const double* src = v.data();
        double* s = sum.data();
        double* q = sq.data();
        const size_t n = v.size();
        for (size_t i = 0; i < n; ++i) {
            s[i] += src[i];
            q[i] += src[i] * src[i];
        }
    }
    void merge(const MeanVar& o) {
        sum += o.sum;
        sq += o.sq;
    }
    Mat mean(int64_t n) const {
        Mat m = sum;
        m *= 1.0 / static_cast<double>(n);
        return m;
    }
    // stderr of the mean: sqrt(unbiased sample variance / n). A single draw
    // carries no variance information, so n = 1 falls back to the raw second
    // moment -- the stderr then has the magnitude of the draw itself rather
    // than claiming zero uncertainty.
    Mat stderr_of_mean(int64_t n) const {
        Mat se(sum.rows(), sum.cols());
        const double inv = 1.0 / static_cast<double>(n);
        for (int i = 0; i < se.rows(); ++i)
            for (int j = 0; j < se.cols(); ++j) {
                double m = sum(i, j) * inv;
                double var = n > 1 ? std::max(0.0, (sq(i, j) - static_cast<double>(n) * m * m) /
                                                       static_cast<double>(n - 1))
                                   : sq(i, j);
                se(i, j) = std::sqrt(var * inv);
            }
        return se;
    }
};

// Per-draw evaluation of the attention summands for one block pair.
// Holds every temporary so the MC loop does no allocation.
struct BlockEval {
    const Mat* sig;     // incoming sigma' block (ti x tj)
    const Mat* th;      // incoming theta' block or nullptr
    Mat sigsig;         // sig .* sig
    Mat sigth;          // sig .* theta
    Mat sig2th;         // 2*sig + theta
    Mat asig, ath;      // A_i sig, A_i theta
    Mat siga, tha;      // sig A_j^T, theta A_j^T
    Mat had;            // hadamard scratch
    Mat f, g, scratch;  // trace-identity results
    Mat sig_out;        // A_i sig A_j^T
    Mat th_out;         // per-draw tangent summand

    void init(const Mat& s, const Mat* t) {
        sig = &s;
        th = t;
        const int r = s.rows(), c = s.cols();
        asig = Mat(r, c);
        siga = Mat(r, c);
        had = Mat(r, c);
        sig_out = Mat(r, c);
        scratch = Mat(r, c);
        if (th != nullptr) {
            sigsig = hadamard(s, s);
            sigth = hadamard(s, *t);
            sig2th = *t;
            add_scaled(sig2th, 2.0, s);
            ath = Mat(r, c);
            tha = Mat(r, c);
            f = Mat(r, c);
            g = Mat(r, c);
            th_out = Mat(r, c);
        }
    }

    // ai, aj: row-softmax attention matrices for the two sides of this block.
    void eval(const Mat& ai, const Mat& aj) {
        matmul_into(asig, ai, *sig);
        matmul_nt_into(sig_out, asig, aj);
        if (th == nullptr) return;

        matmul_into(ath, ai, *th);
        matmul_nt_into(th_out, ath, aj);  // A_i theta' A_j^T; reworked below

        matmul_nt_into(siga, *sig, aj);
        matmul_nt_into(tha, *th, aj);

        // F = Tr(J^T sig' J sig'^T) for all row pairs, via the Hadamard identity.
        matmul_into(had, ai, sigsig);
        matmul_nt_into(f, had, aj);
        hadamard_into(had, siga, siga);
        matmul_into(scratch, ai, had);
        add_scaled(f, -1.0, scratch);
        hadamard_into(had, asig, asig);
        matmul_nt_into(scratch, had, aj);
        add_scaled(f, -1.0, scratch);
        hadamard_into(had, sig_out, sig_out);
        f += had;

        // G = Tr(J^T sig' J theta'^T), same identity with N = theta'.
        matmul_into(had, ai, sigth);
        matmul_nt_into(g, had, aj);
        hadamard_into(had, siga, tha);
        matmul_into(scratch, ai, had);
        add_scaled(g, -1.0, scratch);
        hadamard_into(had, asig, ath);
        matmul_nt_into(scratch, had, aj);
        add_scaled(g, -1.0, scratch);
        hadamard_into(had, sig_out, th_out);
        g += had;

        // Per-draw tangent summand:
        //   2 A sig A^T + A theta' A^T + (2 sig'+theta') .* F + sig' .* G
        add_scaled(th_out, 2.0, sig_out);
        hadamard_into(had, sig2th, f);
        th_out += had;
        hadamard_into(had, *sig, g);
        th_out += had;
    }
};

struct AttAcc {
    MeanVar sig[3];
    MeanVar th[3];
};

void attention_update(KernelState& st, const McConfig& mc, bool with_ntk) {
    check_state(st);
    require(mc.n_mc >= 1, ErrorCode::BadConfig, "attention update: n_mc must be >= 1");
    if (mc.antithetic)
        require(mc.n_mc % 2 == 0, ErrorCode::BadConfig, "attention update: antithetic draws come in pairs, n_mc must be even");
    if (with_ntk)
        require(st.has_ntk(), ErrorCode::MissingNtk, "attention ntk update: state has no tangent blocks");

    const int t1 = st.t1(), t2 = st.t2();
    ScorePairSampler sampler(st.sigma11, st.sigma12, st.sigma22);
    st.degenerate = st.degenerate || sampler.flags().degenerate_sigma11;

    // Uncertainty already present in the incoming blocks: carried through as a
    // scalar floor under the fresh MC error (value-path Lipschitz constant 1;
    // see the amplification metric in propagate_transformer for the rest).
    double in_carry = 0.0;
    for (const Mat* m : {&st.se11, &st.se12, &st.se22})
        if (m->size() > 0) in_carry = std::max(in_carry, m->max_abs());
    if (with_ntk)
        for (const Mat* m : {&st.tse11, &st.tse12, &st.tse22})
            if (m->size() > 0) in_carry = std::max(in_carry, m->max_abs());

    const Mat* sig_blocks[3] = {&st.sigma11, &st.sigma12, &st.sigma22};
    const Mat* th_blocks[3] = {with_ntk ? &*st.theta11 : nullptr, with_ntk ? &*st.theta12 : nullptr,
                               with_ntk ? &*st.theta22 : nullptr};

    // samples = draws, or antithetic pairs (each pair averaged before
    // accumulation so the stderr reflects the paired estimator).
    const int64_t n_samples = mc.antithetic ? mc.n_mc / 2 : mc.n_mc;
    int64_t chunk = std::max<int64_t>(1, mc.chunk);

    AttAcc total;
    for (int b = 0; b < 3; ++b) {
        total.sig[b].init(sig_blocks[b]->rows(), sig_blocks[b]->cols());
        if (with_ntk) total.th[b].init(sig_blocks[b]->rows(), sig_blocks[b]->cols());
    }

    auto make_acc = [&]() {
        AttAcc acc;
        for (int b = 0; b < 3; ++b) {
            acc.sig[b].init(sig_blocks[b]->rows(), sig_blocks[b]->cols());
            if (with_ntk) acc.th[b].init(sig_blocks[b]->rows(), sig_blocks[b]->cols());
        }
        return acc;
    };

    auto body = [&](AttAcc& acc, int64_t begin, int64_t end) {
        ScorePairSampler::Workspace ws = sampler.make_workspace();
        BlockEval ev[3];
        ev[0].init(st.sigma11, th_blocks[0]);
        ev[1].init(st.sigma12, th_blocks[1]);
        ev[2].init(st.sigma22, th_blocks[2]);
        Mat u1(t1, t1), u2(t2, t2), s1, s2;
        Mat pair_sig[3], pair_th[3];
        if (mc.antithetic)
            for (int b = 0; b < 3; ++b) {
                pair_sig[b] = Mat(sig_blocks[b]->rows(), sig_blocks[b]->cols());
                if (with_ntk) pair_th[b] = Mat(sig_blocks[b]->rows(), sig_blocks[b]->cols());
            }

        for (int64_t s = begin; s < end; ++s) {
            Rng r(mix_seed(mc.seed, kAttDrawLabel, static_cast<uint64_t>(s)));
            for (int i = 0; i < t1 * t1; ++i) u1.data()[i] = r.normal();
            for (int i = 0; i < t2 * t2; ++i) u2.data()[i] = r.normal();

            const int reps = mc.antithetic ? 2 : 1;
            for (int rep = 0; rep < reps; ++rep) {
                if (rep == 1) {
                    u1 *= -1.0;
                    u2 *= -1.0;
                }
                sampler.draw_from(u1, u2, s1, s2, ws);
                softmax_rows_inplace(s1);  // s1, s2 now hold A1, A2
                softmax_rows_inplace(s2);
                const Mat* a_side[3][2] = {{&s1, &s1}, {&s1, &s2}, {&s2, &s2}};
                for (int b = 0; b < 3; ++b) {
                    ev[b].eval(*a_side[b][0], *a_side[b][1]);
                    if (!mc.antithetic) {
                        acc.sig[b].add(ev[b].sig_out);
                        if (with_ntk) acc.th[b].add(ev[b].th_out);
                    } else if (rep == 0) {
                        pair_sig[b] = ev[b].sig_out;
                        if (with_ntk) pair_th[b] = ev[b].th_out;
                    } else {
                        pair_sig[b] += ev[b].sig_out;
                        pair_sig[b] *= 0.5;
                        acc.sig[b].add(pair_sig[b]);
                        if (with_ntk) {
                            pair_th[b] += ev[b].th_out;
                            pair_th[b] *= 0.5;
                            acc.th[b].add(pair_th[b]);
                        }
                    }
                }
            }
        }
    };

    auto reduce = [&](AttAcc& acc) {
        for (int b = 0; b < 3; ++b) {
            total.sig[b].merge(acc.sig[b]);
            if (with_ntk) total.th[b].merge(acc.th[b]);
        }
    };

    chunked_reduce<AttAcc>(n_samples, chunk, mc.workers, make_acc, body, reduce);

    auto finish_se = [&](const MeanVar& mv) {
        Mat se = mv.stderr_of_mean(n_samples);
        if (in_carry > 0.0)
            for (int i = 0; i < se.rows(); ++i)
                for (int j = 0; j < se.cols(); ++j) se(i, j) = std::sqrt(se(i, j) * se(i, j) + in_carry * in_carry);
        return se;
    };

    st.se11 = finish_se(total.sig[0]);
    st.se12 = finish_se(total.sig[1]);
    st.se22 = finish_se(total.sig[2]);
    st.sigma11 = total.sig[0].mean(n_samples);
    st.sigma12 = total.sig[1].mean(n_samples);
    st.sigma22 = total.sig[2].mean(n_samples);
    st.sigma11.symmetrize();
    st.sigma22.symmetrize();
    if (with_ntk) {
        st.tse11 = finish_se(total.th[0]);
        st.tse12 = finish_se(total.th[1]);
        st.tse22 = finish_se(total.th[2]);
        st.theta11 = total.th[0].mean(n_samples);
        st.theta12 = total.th[1].mean(n_samples);
        st.theta22 = total.th[2].mean(n_samples);
        st.theta11->symmetrize();
        st.theta22->symmetrize();
    }
}

void check_prob_row(const std::vector<double>& a, const char* which) {
    double sum = 0.0;
    for (double v : a) {
        require(v >= -1e-8, ErrorCode::NotProbabilityVector, std::string(which) + ": negative entry");
        sum += v;
    }
    require(std::fabs(sum - 1.0) <= 1e-8, ErrorCode::NotProbabilityVector,
            std::string(which) + ": entries must sum to 1");
}

}  // namespace

KernelState embed_covariance(const Mat& x1, const Mat& x2, PeMode pe, bool with_ntk) {
    require(x1.cols() == x2.cols(), ErrorCode::ShapeMismatch, "embed_covariance: embedding dims differ");
    require(x1.rows() >= 1 && x2.rows() >= 1 && x1.cols() >= 1, ErrorCode::ShapeMismatch,
            "embed_covariance: empty input");
    require(x1.all_finite() && x2.all_finite(), ErrorCode::NotFinite, "embed_covariance: non-finite input");

    const int t1 = x1.rows(), t2 = x2.rows(), d = x1.cols();
    const bool flags = pe == PeMode::special_token_flags;
    const double denom = static_cast<double>(d + (flags ? 1 : 0));
    auto special = [](int a, int t) { return a == 0 || a == t - 1 ? 1.0 : 0.0; };

    auto block = [&](const Mat& xa, const Mat& xb) {
        Mat s(xa.rows(), xb.rows());
        for (int a = 0; a < xa.rows(); ++a)
            for (int b = 0; b < xb.rows(); ++b) {
                double v = kernels().dot(xa.row(a), xb.row(b), static_cast<size_t>(d));
                if (flags) v += special(a, xa.rows()) * special(b, xb.rows());
                s(a, b) = v / denom;
            }
        return s;
    };

    KernelState st;
    st.sigma11 = block(x1, x1);
    st.sigma12 = block(x1, x2);
    st.sigma22 = block(x2, x2);
    st.sigma11.symmetrize();
    st.sigma22.symmetrize();
    st.se11 = Mat(t1, t1);
    st.se12 = Mat(t1, t2);
    st.se22 = Mat(t2, t2);
    if (with_ntk) {
        st.theta11 = st.sigma11;
        st.theta12 = st.sigma12;
        st.theta22 = st.sigma22;
        st.tse11 = Mat(t1, t1);
        st.tse12 = Mat(t1, t2);
        st.tse22 = Mat(t2, t2);
    }
    return st;
}

void attention_cov_update(KernelState& state, const McConfig& mc) { attention_update(state, mc, false); }

void attention_ntk_update(KernelState& state, const McConfig& mc) { attention_update(state, mc, true); }

void layernorm_cov(KernelState& st, const BlockParams& params) {
    check_state(st);
    const int t1 = st.t1(), t2 = st.t2();
    std::vector<double> r1(static_cast<size_t>(t1)), r2(static_cast<size_t>(t2));
    auto scale_of = [&](double diag) {
        require(diag >= -1e-10, ErrorCode::NegativeVariance, "layernorm_cov: negative pre-norm variance");
        double denom = std::max(diag, 0.0) + params.ln_eps;
        require(denom > 0.0, ErrorCode::NegativeVariance, "layernorm_cov: zero variance with eps = 0");
        return 1.0 / std::sqrt(denom);
    };
    for (int a = 0; a < t1; ++a) r1[static_cast<size_t>(a)] = scale_of(st.sigma11(a, a));
    for (int b = 0; b < t2; ++b) r2[static_cast<size_t>(b)] = scale_of(st.sigma22(b, b));

    auto rescale = [](Mat& m, const std::vector<double>& ra, const std::vector<double>& rb) {
        for (int a = 0; a < m.rows(); ++a)
            for (int b = 0; b < m.cols(); ++b) m(a, b) *= ra[static_cast<size_t>(a)] * rb[static_cast<size_t>(b)];
    };
    rescale(st.sigma11, r1, r1);
    rescale(st.sigma12, r1, r2);
    rescale(st.sigma22, r2, r2);
    rescale(st.se11, r1, r1);
    rescale(st.se12, r1, r2);
    rescale(st.se22, r2, r2);

    if (st.has_ntk()) {
        rescale(*st.theta11, r1, r1);
        rescale(*st.theta12, r1, r2);
        rescale(*st.theta22, r2, r2);
        rescale(st.tse11, r1, r1);
        rescale(st.tse12, r1, r2);
        rescale(st.tse22, r2, r2);
        if (params.ln_param_grad) {
            // Gradient w.r.t. the norm's scale parameters at gamma = 1 is the
            // normalized field itself, adding the post-norm covariance.
            *st.theta11 += st.sigma11;
            *st.theta12 += st.sigma12;
            *st.theta22 += st.sigma22;
            st.tse11 += st.se11;
            st.tse12 += st.se12;
            st.tse22 += st.se22;
        }
    }
}

namespace {

void mlp_update(KernelState& st, const BlockParams& p, bool with_ntk) {
    check_state(st);
    if (with_ntk) require(st.has_ntk(), ErrorCode::MissingNtk, "mlp ntk update: state has no tangent blocks");
    const double sw2 = p.sigma_w * p.sigma_w, sb2 = p.sigma_b * p.sigma_b;
    const int t1 = st.t1(), t2 = st.t2();

    std::vector<double> d1(static_cast<size_t>(t1)), d2(static_cast<size_t>(t2));
    for (int a = 0; a < t1; ++a) d1[static_cast<size_t>(a)] = st.sigma11(a, a);
    for (int b = 0; b < t2; ++b) d2[static_cast<size_t>(b)] = st.sigma22(b, b);

    auto apply = [&](Mat& sig, Mat& se, Mat* th, Mat* tse, const std::vector<double>& da,
                     const std::vector<double>& db) {
        for (int a = 0; a < sig.rows(); ++a)
            for (int b = 0; b < sig.cols(); ++b) {
                DualResult dual = dual_activation(da[static_cast<size_t>(a)], sig(a, b), db[static_cast<size_t>(b)],
                                                  p.activation, p.gh_order);
                const double deriv_gain = sw2 * dual.derivative_value;
                const double sig_new = sb2 + sw2 * dual.value;
                // d/dk12 E[phi phi] = E[phi' phi'], so the first-order stderr
                // transport reuses the derivative dual.
                const double se_new = deriv_gain * se(a, b);
                if (th != nullptr) {
                    (*th)(a, b) = sig_new + (*th)(a, b) * deriv_gain;
                    (*tse)(a, b) = std::sqrt(se_new * se_new + deriv_gain * (*tse)(a, b) * deriv_gain * (*tse)(a, b));
                }
                sig(a, b) = sig_new;
                se(a, b) = se_new;
            }
    };

    apply(st.sigma11, st.se11, with_ntk ? &*st.theta11 : nullptr, &st.tse11, d1, d1);
    apply(st.sigma12, st.se12, with_ntk ? &*st.theta12 : nullptr, &st.tse12, d1, d2);
    apply(st.sigma22, st.se22, with_ntk ? &*st.theta22 : nullptr, &st.tse22, d2, d2);
}

}  // namespace

void mlp_cov_update(KernelState& state, const BlockParams& params) { mlp_update(state, params, false); }

void mlp_ntk_update(KernelState& state, const BlockParams& params) { mlp_update(state, params, true); }

double softmax_jacobian_trace(const std::vector<double>& a1_row, const std::vector<double>& a2_row, const Mat& m,
                              const Mat& n) {
    require(static_cast<int>(a1_row.size()) == m.rows() && static_cast<int>(a2_row.size()) == m.cols(),
            ErrorCode::ShapeMismatch, "softmax_jacobian_trace: row lengths must match the matrix");
    require(m.same_shape(n), ErrorCode::ShapeMismatch, "softmax_jacobian_trace: M and N must share a shape");
    check_prob_row(a1_row, "softmax_jacobian_trace: a1");
    check_prob_row(a2_row, "softmax_jacobian_trace: a2");

    const int r = m.rows(), c = m.cols();
    // Row specialization of the Hadamard identity: O(T^2).
    double t_diag = 0.0, t_right = 0.0, t_left = 0.0;
    double a1m_a2 = 0.0, a1n_a2 = 0.0;
    std::vector<double> ma2(static_cast<size_t>(r), 0.0), na2(static_cast<size_t>(r), 0.0);
    for (int i = 0; i < r; ++i) {
        double mi = 0.0, ni = 0.0;
        for (int j = 0; j < c; ++j) {
            const double a2j = a2_row[static_cast<size_t>(j)];
            t_diag += a1_row[static_cast<size_t>(i)] * m(i, j) * n(i, j) * a2j;
            mi += m(i, j) * a2j;
            ni += n(i, j) * a2j;
        }
        ma2[static_cast<size_t>(i)] = mi;
        na2[static_cast<size_t>(i)] = ni;
        t_right += a1_row[static_cast<size_t>(i)] * mi * ni;
        a1m_a2 += a1_row[static_cast<size_t>(i)] * mi;
        a1n_a2 += a1_row[static_cast<size_t>(i)] * ni;
    }
    for (int j = 0; j < c; ++j) {
        double a1m = 0.0, a1n = 0.0;
        for (int i = 0; i < r; ++i) {
            a1m += a1_row[static_cast<size_t>(i)] * m(i, j);
            a1n += a1_row[static_cast<size_t>(i)] * n(i, j);
        }
        t_left += a1m * a1n * a2_row[static_cast<size_t>(j)];
    }
    return t_diag - t_right - t_left + a1m_a2 * a1n_a2;
}

Mat softmax_jacobian_trace_all(const Mat& a1, const Mat& a2, const Mat& m, const Mat& n) {
    require(a1.rows() == a1.cols() && a2.rows() == a2.cols(), ErrorCode::ShapeMismatch,
            "softmax_jacobian_trace_all: attention matrices must be square");
    require(m.rows() == a1.rows() && m.cols() == a2.rows() && n.same_shape(m), ErrorCode::ShapeMismatch,
            "softmax_jacobian_trace_all: shape mismatch");

    Mat mn = hadamard(m, n);
    Mat out = matmul_nt(matmul(a1, mn), a2);
    Mat ma2 = matmul_nt(m, a2);
    Mat na2 = matmul_nt(n, a2);
    Mat term2 = matmul(a1, hadamard(ma2, na2));
    add_scaled(out, -1.0, term2);
    Mat a1m = matmul(a1, m);
    Mat a1n = matmul(a1, n);
    Mat term3 = matmul_nt(hadamard(a1m, a1n), a2);
    add_scaled(out, -1.0, term3);
    Mat amat = matmul_nt(a1m, a2);
    Mat anat = matmul_nt(a1n, a2);
    out += hadamard(amat, anat);
    return out;
}

namespace {

void transpose_state(KernelState& st) {
    std::swap(st.sigma11, st.sigma22);
    st.sigma12 = st.sigma12.transposed();
    std::swap(st.se11, st.se22);
    st.se12 = st.se12.transposed();
    if (st.has_ntk()) {
        std::swap(*st.theta11, *st.theta22);
        *st.theta12 = st.theta12->transposed();
        std::swap(st.tse11, st.tse22);
        st.tse12 = st.tse12.transposed();
    }
}

}  // namespace

uint64_t content_hash(const Mat& m) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, size_t len) {
        const unsigned char* bytes = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < len; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    int32_t dims[2] = {m.rows(), m.cols()};
    feed(dims, sizeof(dims));
    feed(m.data(), m.size() * sizeof(double));
    return h;
}

PropagateResult propagate_transformer(const Mat& x1, const Mat& x2, int depth, const BlockParams& params,
                                      const McConfig& mc, KernelMode mode, PeMode pe) {
    require(depth >= 1, ErrorCode::BadConfig, "propagate_transformer: depth must be >= 1");

    // Canonical pair order makes the sampler see the same triple for (x1, x2)
    // and (x2, x1); the result is transposed back at the end.
    const bool swap_pair = content_hash(x2) < content_hash(x1);
    const Mat& a = swap_pair ? x2 : x1;
    const Mat& b = swap_pair ? x1 : x2;

    const bool ntk = mode == KernelMode::ntk;
    KernelState st = embed_covariance(a, b, pe, ntk);

    // Worst-case first-order error amplification across layers: each attention
    // step can scale incoming perturbations by at most 1 through the value
    // path plus O(max|sigma'|) through the softmax measure. Reported, not used.
    double gain = 1.0;

    for (int l = 0; l < depth; ++l) {
        double sig_max = std::max({st.sigma11.max_abs(), st.sigma12.max_abs(), st.sigma22.max_abs()});
        gain *= 1.0 + 4.0 * sig_max;

        McConfig layer_mc = mc;
        layer_mc.seed = mix_seed(mc.seed, kLayerLabel, static_cast<uint64_t>(l));
        if (ntk)
            attention_ntk_update(st, layer_mc);
        else
            attention_cov_update(st, layer_mc);
        layernorm_cov(st, params);
        if (ntk)
            mlp_ntk_update(st, params);
        else
            mlp_cov_update(st, params);
        st.layer_index = l + 1;
    }

    if (swap_pair) transpose_state(st);

    PropagateResult out;
    out.k_matrix = ntk ? *st.theta12 : st.sigma12;
    const Mat& se = ntk ? st.tse12 : st.se12;
    out.k_value = out.k_matrix(out.k_matrix.rows() - 1, out.k_matrix.cols() - 1);
    out.k_stderr = se(se.rows() - 1, se.cols() - 1) * gain;
    out.state = std::move(st);
    return out;
}

FcnKernelResult fcn_kernel(const Mat& x1, const Mat& x2, int depth, const BlockParams& params) {
    require(depth >= 1, ErrorCode::BadConfig, "fcn_kernel: depth must be >= 1");
    require(x1.cols() == x2.cols(), ErrorCode::ShapeMismatch, "fcn_kernel: embedding dims differ");
    require(x1.all_finite() && x2.all_finite(), ErrorCode::NotFinite, "fcn_kernel: non-finite input");

    // Flatten; unequal lengths zero-pad to the longer input, and the dot
    // products normalize by the padded length.
    const size_t n1 = x1.size(), n2 = x2.size();
    const size_t n = std::max(n1, n2);
    double d11 = 0.0, d12 = 0.0, d22 = 0.0;
    d11 = kernels().dot(x1.data(), x1.data(), n1);
    d22 = kernels().dot(x2.data(), x2.data(), n2);
    d12 = kernels().dot(x1.data(), x2.data(), std::min(n1, n2));

    const double sw2 = params.sigma_w * params.sigma_w, sb2 = params.sigma_b * params.sigma_b;
    const double inv = 1.0 / static_cast<double>(n);
    FcnKernelResult k{sb2 + sw2 * d12 * inv, sb2 + sw2 * d11 * inv, sb2 + sw2 * d22 * inv};

    for (int l = 1; l < depth; ++l) {
        const double v11 = dual_activation(k.k11, k.k11, k.k11, params.activation, params.gh_order).value;
        const double v22 = dual_activation(k.k22, k.k22, k.k22, params.activation, params.gh_order).value;
        const double v12 = dual_activation(k.k11, k.k12, k.k22, params.activation, params.gh_order).value;
        k.k11 = sb2 + sw2 * v11;
        k.k22 = sb2 + sw2 * v22;
        k.k12 = sb2 + sw2 * v12;
    }
    return k;
}

FcnNtkResult fcn_ntk(const Mat& x1, const Mat& x2, int depth, const BlockParams& params) {
    FcnKernelResult k = fcn_kernel(x1, x2, 1, params);
    FcnNtkResult r{k.k12, k.k11, k.k22, k};
    const double sw2 = params.sigma_w * params.sigma_w, sb2 = params.sigma_b * params.sigma_b;
    for (int l = 1; l < depth; ++l) {
        const DualResult d11 = dual_activation(k.k11, k.k11, k.k11, params.activation, params.gh_order);
        const DualResult d22 = dual_activation(k.k22, k.k22, k.k22, params.activation, params.gh_order);
        const DualResult d12 = dual_activation(k.k11, k.k12, k.k22, params.activation, params.gh_order);
        k.k11 = sb2 + sw2 * d11.value;
        k.k22 = sb2 + sw2 * d22.value;
        k.k12 = sb2 + sw2 * d12.value;
        r.theta11 = k.k11 + sw2 * d11.derivative_value * r.theta11;
        r.theta22 = k.k22 + sw2 * d22.derivative_value * r.theta22;
        r.theta12 = k.k12 + sw2 * d12.derivative_value * r.theta12;
    }
    r.nngp = k;
    return r;
}

}  // namespace kcap
