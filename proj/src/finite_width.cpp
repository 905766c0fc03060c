#include "kcap/finite_width.hpp"

#include <cmath>

#include "kcap/error.hpp"
#include "kcap/kernels.hpp"
#include "kcap/linalg.hpp"
#include "kcap/rng.hpp"
#include "kcap/threading.hpp"

namespace kcap {

namespace {

constexpr uint64_t kDrawLabel = 0x77647766;  // per-draw weight stream ("fwdw")

void fill_gaussian(Mat& m, Rng& rng) {
    double* p = m.data();
    const size_t n = m.size();
    for (size_t i = 0; i < n; ++i) p[i] = rng.normal();
}

void check_dims(const FiniteDims& d) {
    require(d.d_in >= 1 && d.d_model >= 1 && d.H >= 1 && d.L >= 1, ErrorCode::BadConfig,
            "finite dims must be positive");
    require(d.resolved_dk() >= 1, ErrorCode::BadConfig, "finite dims: d_k resolves to zero (H > d_model?)");
}

double activation_of(double x, Activation act) {
    return act == Activation::relu ? std::max(0.0, x) : gelu_value(x);
}

// LayerNorm rows in place at gamma = 1, beta parameterizable.
void layernorm_rows(const Mat& z, const std::vector<double>& gamma, const std::vector<double>& beta, double eps,
                    Mat& out) {
    const int t = z.rows(), d = z.cols();
    if (out.rows() != t || out.cols() != d) out = Mat(t, d);
    for (int a = 0; a < t; ++a) {
        const double* row = z.row(a);
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double norm2 = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = row[j] - mean;
            norm2 += c * c;
        }
        const double scale = 1.0 / std::sqrt(norm2 / d + eps);
        double* o = out.row(a);
        for (int j = 0; j < d; ++j) o[j] = gamma[static_cast<size_t>(j)] * (row[j] - mean) * scale + beta[static_cast<size_t>(j)];
    }
}

struct MeanVarAcc {
    Mat sum, sq;
    void init(int r, int c) {
        sum = Mat(r, c);
        sq = Mat(r, c);
    }
    void add(const Mat& v) {
        const double* src = v.data();
        double* s = sum.data();
        double* q = sq.data();
        for (size_t i = 0; i < v.size(); ++i) {
            s[i] += src[i];
            q[i] += src[i] * src[i];
        }
    }
    void merge(const MeanVarAcc& o) {
        sum += o.sum;
        sq += o.sq;
    }
};

EmpiricalCov finish(const MeanVarAcc& acc, int64_t n) {
    EmpiricalCov out;
    out.n_draws = n;
    out.mean = acc.sum;
    out.mean *= 1.0 / static_cast<double>(n);
    out.se = Mat(acc.sum.rows(), acc.sum.cols());
    for (int i = 0; i < out.se.rows(); ++i)
        for (int j = 0; j < out.se.cols(); ++j) {
            double m = out.mean(i, j);
            double var = std::max(0.0, acc.sq(i, j) / static_cast<double>(n) - m * m);
            out.se(i, j) = std::sqrt(var / static_cast<double>(n));
        }
    return out;
}

bool same_matrix(const Mat& a, const Mat& b) {
    if (!a.same_shape(b)) return false;
    for (size_t i = 0; i < a.size(); ++i)
        if (a.data()[i] != b.data()[i]) return false;
    return true;
}

// Per-draw tap payload handed to the product accumulator.
struct TapValue {
    const Mat* part1 = nullptr;  // token rows of x1 (vector taps) or S(x1) (scores)
    const Mat* part2 = nullptr;
    int row_offset2 = 0;  // row offset of x2 inside part2 (stacked layouts)
};

void accumulate_products(MeanVarAcc& acc, Mat& scratch, const TapValue& tv, Tap tap, int t1, int t2, int d_model) {
    if (tap == Tap::scores) {
        const Mat& s1 = *tv.part1;
        const Mat& s2 = *tv.part2;
        size_t i = 0;
        for (int a = 0; a < t1; ++a)
            for (int c = 0; c < t1; ++c)
                for (int b = 0; b < t2; ++b)
                    for (int e = 0; e < t2; ++e) scratch.data()[i++] = s1(a, c) * s2(b, e);
        acc.add(scratch);
        return;
    }
    const Mat& z1 = *tv.part1;
    const Mat& z2 = *tv.part2;
    const double inv = 1.0 / static_cast<double>(d_model);
    for (int a = 0; a < t1; ++a)
        for (int b = 0; b < t2; ++b)
            scratch(a, b) = kernels().dot(z1.row(a), z2.row(tv.row_offset2 + b), static_cast<size_t>(d_model)) * inv;
    acc.add(scratch);
}

}  // namespace

FiniteParams init_params(const FiniteDims& dims, uint64_t seed) {
    check_dims(dims);
    Rng rng(seed);
    FiniteParams p;
    p.dims = dims;
    const int dm = dims.d_model, dk = dims.resolved_dk();

    const double emb_std = 1.0 / std::sqrt(static_cast<double>(dims.d_in));
    p.w_emb = Mat(dims.d_in, dm);
    for (size_t i = 0; i < p.w_emb.size(); ++i) p.w_emb.data()[i] = emb_std * rng.normal();

    const double attn_std = 1.0 / std::sqrt(static_cast<double>(dm));
    const double mlp_std = dims.sigma_w / std::sqrt(static_cast<double>(dm));
    p.blocks.resize(static_cast<size_t>(dims.L));
    for (auto& blk : p.blocks) {
        blk.wq.resize(static_cast<size_t>(dims.H));
        blk.wk.resize(static_cast<size_t>(dims.H));
        blk.wv.resize(static_cast<size_t>(dims.H));
        for (int h = 0; h < dims.H; ++h) {
            blk.wq[static_cast<size_t>(h)] = Mat(dm, dk);
            blk.wk[static_cast<size_t>(h)] = Mat(dm, dk);
            blk.wv[static_cast<size_t>(h)] = Mat(dm, dm);
            for (Mat* w : {&blk.wq[static_cast<size_t>(h)], &blk.wk[static_cast<size_t>(h)], &blk.wv[static_cast<size_t>(h)]})
                for (size_t i = 0; i < w->size(); ++i) w->data()[i] = attn_std * rng.normal();
        }
        blk.gamma.assign(static_cast<size_t>(dm), 1.0);
        blk.beta.assign(static_cast<size_t>(dm), 0.0);
        blk.w_mlp = Mat(dm, dm);
        for (size_t i = 0; i < blk.w_mlp.size(); ++i) blk.w_mlp.data()[i] = mlp_std * rng.normal();
        blk.b_mlp.resize(static_cast<size_t>(dm));
        for (auto& b : blk.b_mlp) b = dims.sigma_b * rng.normal();
    }
    return p;
}

uint64_t flop_count(int L, int H, int d_model, int d_k, int T) {
    require(L >= 1 && H >= 1 && d_model >= 1 && d_k >= 1 && T >= 1, ErrorCode::BadConfig,
            "flop_count: arguments must be positive");
    const uint64_t t = static_cast<uint64_t>(T), dm = static_cast<uint64_t>(d_model), dk = static_cast<uint64_t>(d_k);
    const uint64_t per_head = 4 * t * dm * dk + 2 * t * dm * dm + 2 * t * t * dk + 3 * t * t + 2 * t * t * dm;
    return static_cast<uint64_t>(L) * (static_cast<uint64_t>(H) * per_head + 2 * t * dm * dm);
}

ForwardTrace forward(const Mat& x, const FiniteParams& params) {
    const FiniteDims& d = params.dims;
    check_dims(d);
    require(x.cols() == d.d_in, ErrorCode::ShapeMismatch, "forward: input dimension mismatch");
    require(x.rows() >= 1, ErrorCode::ShapeMismatch, "forward: empty input");
    require(x.all_finite(), ErrorCode::NotFinite, "forward: non-finite input");

    const int t = x.rows(), dm = d.d_model, dk = d.resolved_dk();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    const double inv_sqrt_h = 1.0 / std::sqrt(static_cast<double>(d.H));

    ForwardTrace tr;
    tr.z_embed = matmul(x, params.w_emb);
    tr.scores.resize(static_cast<size_t>(d.L));
    tr.z_attn.resize(static_cast<size_t>(d.L));
    tr.z_ln.resize(static_cast<size_t>(d.L));
    tr.z_out.resize(static_cast<size_t>(d.L));

    Mat z_prev = tr.z_embed;
    for (int b = 0; b < d.L; ++b) {
        const BlockWeights& blk = params.blocks[static_cast<size_t>(b)];
        Mat z(t, dm);
        tr.scores[static_cast<size_t>(b)].resize(static_cast<size_t>(d.H));
        for (int h = 0; h < d.H; ++h) {
            Mat q = matmul(z_prev, blk.wq[static_cast<size_t>(h)]);
            Mat k = matmul(z_prev, blk.wk[static_cast<size_t>(h)]);
            Mat v = matmul(z_prev, blk.wv[static_cast<size_t>(h)]);
            tr.flops += 2ull * t * dm * dk * 2 + 2ull * t * dm * dm;
            Mat s = matmul_nt(q, k);
            tr.flops += 2ull * t * t * dk;
            s *= inv_sqrt_dk;
            tr.scores[static_cast<size_t>(b)][static_cast<size_t>(h)] = s;
            softmax_rows_inplace(s);
            tr.flops += 3ull * t * t;
            Mat av = matmul(s, v);
            tr.flops += 2ull * t * t * dm;
            z += av;
        }
        z *= inv_sqrt_h;
        tr.z_attn[static_cast<size_t>(b)] = z;

        Mat ln;
        layernorm_rows(z, blk.gamma, blk.beta, d.ln_eps, ln);
        tr.z_ln[static_cast<size_t>(b)] = ln;

        for (size_t i = 0; i < ln.size(); ++i) ln.data()[i] = activation_of(ln.data()[i], d.activation);
        Mat out = matmul_nt(ln, blk.w_mlp);
        tr.flops += 2ull * t * dm * dm;
        for (int a = 0; a < t; ++a)
            for (int j = 0; j < dm; ++j) out(a, j) += blk.b_mlp[static_cast<size_t>(j)];
        tr.z_out[static_cast<size_t>(b)] = out;
        z_prev = std::move(out);
    }
    return tr;
}

namespace {

// One conditional draw of the stacked pair through blocks 0..block, recording
// the tap. Each layer's output is sampled from its exact conditional Gaussian
// law given the previous layer: columns of X W are iid N(0, X X^T * var) for
// iid weight columns, so a T x T Cholesky replaces the d_model x d_model
// weight tensor.
struct ConditionalDraw {
    int t_tot, t1, t2, dm, dk;
    bool single;  // x1 == x2: one copy propagated, parts alias
    const FiniteDims* dims;
    Mat l_x;  // Cholesky of the stacked input gram / d_in
    Mat z, g_embed, c, czz, lc_gq, lc_gk, sfull, blka, tmp_tot, cm, zln, s1, s2;
    Mat g_qk_q, g_qk_k;
    std::vector<double> gamma, beta;

    void init(const Mat& x1, const Mat& x2, const FiniteDims& d, bool same) {
        dims = &d;
        single = same;
        t1 = x1.rows();
        t2 = x2.rows();
        t_tot = single ? t1 : t1 + t2;
        dm = d.d_model;
        dk = d.resolved_dk();

        Mat xs(t_tot, d.d_in);
        for (int a = 0; a < t1; ++a)
            for (int j = 0; j < d.d_in; ++j) xs(a, j) = x1(a, j);
        if (!single)
            for (int b = 0; b < t2; ++b)
                for (int j = 0; j < d.d_in; ++j) xs(t1 + b, j) = x2(b, j);
        Mat gram = matmul_nt(xs, xs);
        gram *= 1.0 / static_cast<double>(d.d_in);
        l_x = cholesky_psd(gram).L;

        z = Mat(t_tot, dm);
        g_embed = Mat(t_tot, dm);
        c = Mat(t_tot, t_tot);
        czz = Mat(t_tot, t_tot);
        g_qk_q = Mat(t_tot, dk);
        g_qk_k = Mat(t_tot, dk);
        lc_gq = Mat(t_tot, dk);
        lc_gk = Mat(t_tot, dk);
        sfull = Mat(t_tot, t_tot);
        blka = Mat(t_tot, t_tot);
        tmp_tot = Mat(t_tot, t_tot);
        cm = Mat(t_tot, t_tot);
        s1 = Mat(t1, t1);
        s2 = Mat(single ? t1 : t2, single ? t1 : t2);
        gamma.assign(static_cast<size_t>(dm), 1.0);
        beta.assign(static_cast<size_t>(dm), 0.0);
    }

    // Runs one draw; on return, tap_value points at the recorded tensors.
    void run(Rng& rng, Tap tap, int block, TapValue& tv) {
        const FiniteDims& d = *dims;
        const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

        fill_gaussian(g_embed, rng);
        matmul_into(z, l_x, g_embed);  // embedded representation, exact law

        for (int b = 0; b <= block; ++b) {
            matmul_nt_into(c, z, z);
            c *= 1.0 / static_cast<double>(dm);
            c.symmetrize();
            Mat lc = cholesky_psd(c).L;

            for (size_t i = 0; i < czz.size(); ++i) czz.data()[i] = 0.0;
            bool scores_done = false;
            for (int h = 0; h < d.H; ++h) {
                fill_gaussian(g_qk_q, rng);
                fill_gaussian(g_qk_k, rng);
                matmul_into(lc_gq, lc, g_qk_q);
                matmul_into(lc_gk, lc, g_qk_k);
                matmul_nt_into(sfull, lc_gq, lc_gk);
                sfull *= inv_sqrt_dk;

                for (int a = 0; a < t1; ++a)
                    for (int cc = 0; cc < t1; ++cc) s1(a, cc) = sfull(a, cc);
                if (!single)
                    for (int a = 0; a < t2; ++a)
                        for (int cc = 0; cc < t2; ++cc) s2(a, cc) = sfull(t1 + a, t1 + cc);

                if (tap == Tap::scores && b == block && h == 0) {
                    tv.part1 = &s1;
                    tv.part2 = single ? &s1 : &s2;
                    scores_done = true;
                    break;  // remaining heads are independent of head 0's law
                }

                softmax_rows_inplace(s1);
                if (!single) softmax_rows_inplace(s2);
                for (size_t i = 0; i < blka.size(); ++i) blka.data()[i] = 0.0;
                for (int a = 0; a < t1; ++a)
                    for (int cc = 0; cc < t1; ++cc) blka(a, cc) = s1(a, cc);
                if (!single)
                    for (int a = 0; a < t2; ++a)
                        for (int cc = 0; cc < t2; ++cc) blka(t1 + a, t1 + cc) = s2(a, cc);
                matmul_into(tmp_tot, blka, c);
                matmul_nt_into(sfull, tmp_tot, blka);  // reuse sfull as A C A^T
                czz += sfull;
            }
            if (scores_done) return;

            czz *= 1.0 / static_cast<double>(d.H);
            czz.symmetrize();
            Mat lzz = cholesky_psd(czz).L;
            fill_gaussian(g_embed, rng);
            matmul_into(z, lzz, g_embed);  // pre-activation attention output

            if (tap == Tap::pre_attn_out && b == block) {
                tv.part1 = &z;
                tv.part2 = &z;
                tv.row_offset2 = single ? 0 : t1;
                return;
            }

            layernorm_rows(z, gamma, beta, d.ln_eps, zln);
            if (tap == Tap::post_ln && b == block) {
                tv.part1 = &zln;
                tv.part2 = &zln;
                tv.row_offset2 = single ? 0 : t1;
                return;
            }

            for (size_t i = 0; i < zln.size(); ++i) zln.data()[i] = activation_of(zln.data()[i], d.activation);
            matmul_nt_into(cm, zln, zln);
            cm *= d.sigma_w * d.sigma_w / static_cast<double>(dm);
            const double sb2 = d.sigma_b * d.sigma_b;
            for (size_t i = 0; i < cm.size(); ++i) cm.data()[i] += sb2;
            cm.symmetrize();
            Mat lm = cholesky_psd(cm).L;
            fill_gaussian(g_embed, rng);
            matmul_into(z, lm, g_embed);  // block output, exact law

            if (tap == Tap::post_mlp && b == block) {
                tv.part1 = &z;
                tv.part2 = &z;
                tv.row_offset2 = single ? 0 : t1;
                return;
            }
        }
        fail(ErrorCode::BadConfig, "empirical_covariance: tap/block combination never reached");
    }
};

}  // namespace

EmpiricalCov empirical_covariance(const Mat& x1, const Mat& x2, const FiniteDims& dims, int64_t n_draws,
                                  uint64_t seed, Tap tap, int block, CovMethod method, int workers) {
    check_dims(dims);
    require(x1.cols() == dims.d_in && x2.cols() == dims.d_in, ErrorCode::ShapeMismatch,
            "empirical_covariance: input dimension mismatch");
    require(n_draws >= 100, ErrorCode::BadConfig, "empirical_covariance: need at least 100 draws");
    require(block >= 0 && block < dims.L, ErrorCode::BadConfig, "empirical_covariance: block out of range");

    const int t1 = x1.rows(), t2 = x2.rows();
    const bool same = same_matrix(x1, x2);
    const int rows = tap == Tap::scores ? t1 * t1 : t1;
    const int cols = tap == Tap::scores ? t2 * t2 : t2;

    MeanVarAcc total;
    total.init(rows, cols);

    auto make_acc = [&]() {
        MeanVarAcc acc;
        acc.init(rows, cols);
        return acc;
    };

    auto body_conditional = [&](MeanVarAcc& acc, int64_t begin, int64_t end) {
        ConditionalDraw cd;
        cd.init(x1, x2, dims, same);
        Mat scratch(rows, cols);
        for (int64_t s = begin; s < end; ++s) {
            Rng rng(mix_seed(seed, kDrawLabel, static_cast<uint64_t>(s)));
            TapValue tv;
            cd.run(rng, tap, block, tv);
            accumulate_products(acc, scratch, tv, tap, t1, t2, dims.d_model);
        }
    };

    auto body_explicit = [&](MeanVarAcc& acc, int64_t begin, int64_t end) {
        Mat scratch(rows, cols);
        for (int64_t s = begin; s < end; ++s) {
            FiniteParams params = init_params(dims, mix_seed(seed, kDrawLabel, static_cast<uint64_t>(s)));
            ForwardTrace tr1 = forward(x1, params);
            ForwardTrace tr2 = same ? ForwardTrace{} : forward(x2, params);
            const ForwardTrace& t2ref = same ? tr1 : tr2;
            TapValue tv;
            switch (tap) {
                case Tap::scores:
                    tv.part1 = &tr1.scores[static_cast<size_t>(block)][0];
                    tv.part2 = &t2ref.scores[static_cast<size_t>(block)][0];
                    break;
                case Tap::pre_attn_out:
                    tv.part1 = &tr1.z_attn[static_cast<size_t>(block)];
                    tv.part2 = &t2ref.z_attn[static_cast<size_t>(block)];
                    break;
                case Tap::post_ln:
                    tv.part1 = &tr1.z_ln[static_cast<size_t>(block)];
                    tv.part2 = &t2ref.z_ln[static_cast<size_t>(block)];
                    break;
                case Tap::post_mlp:
                    tv.part1 = &tr1.z_out[static_cast<size_t>(block)];
                    tv.part2 = &t2ref.z_out[static_cast<size_t>(block)];
                    break;
            }
            accumulate_products(acc, scratch, tv, tap, t1, t2, dims.d_model);
        }
    };

    auto reduce = [&](MeanVarAcc& acc) { total.merge(acc); };

    const int64_t chunk = 256;
    if (method == CovMethod::conditional)
        chunked_reduce<MeanVarAcc>(n_draws, chunk, workers, make_acc, body_conditional, reduce);
    else
        chunked_reduce<MeanVarAcc>(n_draws, chunk, workers, make_acc, body_explicit, reduce);

    return finish(total, n_draws);
}

namespace {

struct ScalarAcc {
    double sum = 0.0, sq = 0.0;
    void add(double v) {
        sum += v;
        sq += v * v;
    }
};

void finish_scalar(const ScalarAcc& a, int64_t n, double& mean, double& se) {
    mean = a.sum / static_cast<double>(n);
    double var = std::max(0.0, a.sq / static_cast<double>(n) - mean * mean);
    se = std::sqrt(var / static_cast<double>(n));
}

// 2x2 Cholesky with a degenerate-safe first pivot.
void chol2(double c11, double c12, double c22, double& l11, double& l21, double& l22) {
    l11 = std::sqrt(std::max(0.0, c11));
    l21 = l11 > 0.0 ? c12 / l11 : 0.0;
    l22 = std::sqrt(std::max(0.0, c22 - l21 * l21));
}

}  // namespace

FcnEmpirical empirical_fcn_covariance(const Mat& x1, const Mat& x2, int depth, const BlockParams& params, int width,
                                      int64_t n_draws, uint64_t seed, CovMethod method) {
    require(depth >= 1, ErrorCode::BadConfig, "empirical_fcn_covariance: depth must be >= 1");
    require(width >= 1, ErrorCode::BadConfig, "empirical_fcn_covariance: width must be >= 1");
    require(n_draws >= 100, ErrorCode::BadConfig, "empirical_fcn_covariance: need at least 100 draws");
    require(x1.cols() == x2.cols(), ErrorCode::ShapeMismatch, "empirical_fcn_covariance: input dims differ");

    const size_t n1 = x1.size(), n2 = x2.size();
    const size_t n = std::max(n1, n2);
    std::vector<double> v1(n, 0.0), v2(n, 0.0);
    for (size_t i = 0; i < n1; ++i) v1[i] = x1.data()[i];
    for (size_t i = 0; i < n2; ++i) v2[i] = x2.data()[i];

    const double sw2 = params.sigma_w * params.sigma_w, sb2 = params.sigma_b * params.sigma_b;
    const double inv_n = 1.0 / static_cast<double>(n);
    double dot11 = 0.0, dot12 = 0.0, dot22 = 0.0;
    for (size_t i = 0; i < n; ++i) {
        dot11 += v1[i] * v1[i];
        dot12 += v1[i] * v2[i];
        dot22 += v2[i] * v2[i];
    }
    const double c11_0 = sb2 + sw2 * dot11 * inv_n;
    const double c12_0 = sb2 + sw2 * dot12 * inv_n;
    const double c22_0 = sb2 + sw2 * dot22 * inv_n;

    ScalarAcc a12, a11, a22;
    const size_t w = static_cast<size_t>(width);
    std::vector<double> h1(w), h2(w);

    for (int64_t s = 0; s < n_draws; ++s) {
        Rng rng(mix_seed(seed, kDrawLabel ^ 0x666e63ull, static_cast<uint64_t>(s)));

        if (method == CovMethod::conditional) {
            // Pairs (h1_i, h2_i) are iid across units given the previous layer,
            // with the 2x2 covariance below; identical in law to explicit W.
            double l11, l21, l22;
            chol2(c11_0, c12_0, c22_0, l11, l21, l22);
            for (size_t i = 0; i < w; ++i) {
                double g1 = rng.normal(), g2 = rng.normal();
                h1[i] = l11 * g1;
                h2[i] = l21 * g1 + l22 * g2;
            }
            for (int l = 1; l < depth; ++l) {
                double d11 = 0.0, d12 = 0.0, d22 = 0.0;
                for (size_t i = 0; i < w; ++i) {
                    double p1 = activation_of(h1[i], params.activation);
                    double p2 = activation_of(h2[i], params.activation);
                    d11 += p1 * p1;
                    d12 += p1 * p2;
                    d22 += p2 * p2;
                    h1[i] = p1;
                    h2[i] = p2;
                }
                const double inv_w = 1.0 / static_cast<double>(w);
                chol2(sb2 + sw2 * d11 * inv_w, sb2 + sw2 * d12 * inv_w, sb2 + sw2 * d22 * inv_w, l11, l21, l22);
                for (size_t i = 0; i < w; ++i) {
                    double g1 = rng.normal(), g2 = rng.normal();
                    h1[i] = l11 * g1;
                    h2[i] = l21 * g1 + l22 * g2;
                }
            }
        } else {
            // Explicit weights: h = (sigma_w / sqrt(fan_in)) W phi(prev) + sigma_b b.
            std::vector<double> prev1(v1), prev2(v2);
            size_t fan_in = n;
            for (int l = 0; l < depth; ++l) {
                const double scale = params.sigma_w / std::sqrt(static_cast<double>(fan_in));
                for (size_t i = 0; i < w; ++i) {
                    double acc1 = 0.0, acc2 = 0.0;
                    for (size_t j = 0; j < fan_in; ++j) {
                        double wij = rng.normal();
                        acc1 += wij * prev1[j];
                        acc2 += wij * prev2[j];
                    }
                    double b = params.sigma_b * rng.normal();
                    h1[i] = scale * acc1 + b;
                    h2[i] = scale * acc2 + b;
                }
                if (l + 1 < depth) {
                    prev1.resize(w);
                    prev2.resize(w);
                    for (size_t i = 0; i < w; ++i) {
                        prev1[i] = activation_of(h1[i], params.activation);
                        prev2[i] = activation_of(h2[i], params.activation);
                    }
                    fan_in = w;
                }
            }
        }

        double k12 = 0.0, k11 = 0.0, k22 = 0.0;
        for (size_t i = 0; i < w; ++i) {
            k12 += h1[i] * h2[i];
            k11 += h1[i] * h1[i];
            k22 += h2[i] * h2[i];
        }
        const double inv_w = 1.0 / static_cast<double>(w);
        a12.add(k12 * inv_w);
        a11.add(k11 * inv_w);
        a22.add(k22 * inv_w);
    }

    FcnEmpirical out{};
    finish_scalar(a12, n_draws, out.k12, out.se12);
    finish_scalar(a11, n_draws, out.k11, out.se11);
    finish_scalar(a22, n_draws, out.k22, out.se22);
    return out;
}

}  // namespace kcap
