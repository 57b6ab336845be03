#pragma once

// Minimal deterministic numerical kernel: the dense primitives the captioner
// needs, their hand-derived backwards, AdamW, and a finite-difference
// gradient checker. Everything is templated on the scalar type: float for
// training, double for gradient checks.
//
// Determinism contract: every reduction runs in a fixed sequential order
// (over the last axis of the reduced operand); no reassociation, no FMA
// (-ffp-contract=off), no threads. Loop shapes are chosen so the innermost
// loop writes independent accumulators and can vectorize without changing
// the accumulation order of any single output element.
//
// Gradient convention: parameter gradients ACCUMULATE (+=) so one buffer can
// sum over rows/samples; activation gradients are OVERWRITTEN.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "flexcap/rng.hpp"
#include "flexcap/tensor.hpp"

namespace flexcap::nn {

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

// y[m][n] = (or +=) sum_k x[m][k] * w[k][n]
template <typename T>
void matmul(const T* x, const T* w, T* y, int M, int K, int N,
            bool accumulate = false) {
    for (int m = 0; m < M; ++m) {
        T* yr = y + static_cast<size_t>(m) * N;
        if (!accumulate)
            for (int n = 0; n < N; ++n) yr[n] = T(0);
        const T* xr = x + static_cast<size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            T xv = xr[k];
            const T* wr = w + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) yr[n] += xv * wr[n];
        }
    }
}

// dw[k][n] += sum_m x[m][k] * dy[m][n]   (i.e. x^T * dy)
template <typename T>
void matmul_at_b(const T* x, const T* dy, T* dw, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        const T* xr = x + static_cast<size_t>(m) * K;
        const T* dr = dy + static_cast<size_t>(m) * N;
        for (int k = 0; k < K; ++k) {
            T xv = xr[k];
            T* wr = dw + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) wr[n] += xv * dr[n];
        }
    }
}

template <typename T>
void transpose(const T* w, T* wt, int K, int N) {
    for (int k = 0; k < K; ++k)
        for (int n = 0; n < N; ++n)
            wt[static_cast<size_t>(n) * K + k] = w[static_cast<size_t>(k) * N + n];
}

namespace detail {
template <typename T>
std::vector<T>& scratch() {
    static thread_local std::vector<T> buf;
    return buf;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// linear layer: y = x w + b, with w stored (in x out)
// ---------------------------------------------------------------------------

template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, int M, int K,
                    int N) {
    matmul(x, w, y, M, K, N);
    if (b) {
        for (int m = 0; m < M; ++m) {
            T* yr = y + static_cast<size_t>(m) * N;
            for (int n = 0; n < N; ++n) yr[n] += b[n];
        }
    }
}

// dx = dy w^T (overwritten, skipped when null); dw += x^T dy; db += col-sums
template <typename T>
void linear_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db,
                     int M, int K, int N) {
    if (dx) {
        // materialize w^T once so the dx matmul keeps a vectorizable
        // independent-accumulator inner loop (cost is 1/M of the matmul)
        auto& wt = detail::scratch<T>();
        wt.resize(static_cast<size_t>(K) * N);
        transpose(w, wt.data(), K, N);
        matmul(dy, wt.data(), dx, M, N, K);
    }
    if (dw) matmul_at_b(x, dy, dw, M, K, N);
    if (db) {
        for (int m = 0; m < M; ++m) {
            const T* dr = dy + static_cast<size_t>(m) * N;
            for (int n = 0; n < N; ++n) db[n] += dr[n];
        }
    }
}

// ---------------------------------------------------------------------------
// softmax (max-subtracted) and layer norm
// ---------------------------------------------------------------------------

template <typename T>
void softmax_inplace(T* p, int n) {
    T mx = p[0];
    for (int i = 1; i < n; ++i) mx = p[i] > mx ? p[i] : mx;
    T sum = T(0);
    for (int i = 0; i < n; ++i) {
        p[i] = std::exp(p[i] - mx);
        sum += p[i];
    }
    T inv = T(1) / sum;
    for (int i = 0; i < n; ++i) p[i] *= inv;
}

template <typename T>
void layer_norm_forward(const T* x, const T* gain, const T* bias, T* y, int n,
                        T eps = T(1e-5)) {
    assert(n >= 1);
    T mean = T(0);
    for (int i = 0; i < n; ++i) mean += x[i];
    mean /= T(n);
    T var = T(0);
    for (int i = 0; i < n; ++i) {
        T d = x[i] - mean;
        var += d * d;
    }
    var /= T(n);
    T rstd = T(1) / std::sqrt(var + eps);
    for (int i = 0; i < n; ++i)
        y[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
}

// dx overwritten; dgain/dbias accumulated. Recomputes the row statistics.
template <typename T>
void layer_norm_backward(const T* x, const T* gain, const T* dy, T* dx,
                         T* dgain, T* dbias, int n, T eps = T(1e-5)) {
    T mean = T(0);
    for (int i = 0; i < n; ++i) mean += x[i];
    mean /= T(n);
    T var = T(0);
    for (int i = 0; i < n; ++i) {
        T d = x[i] - mean;
        var += d * d;
    }
    var /= T(n);
    T rstd = T(1) / std::sqrt(var + eps);

    // xhat_i = (x_i - mean) * rstd; y_i = xhat_i * g_i + b_i
    T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
    for (int i = 0; i < n; ++i) {
        T xhat = (x[i] - mean) * rstd;
        T dxhat = dy[i] * gain[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        if (dgain) dgain[i] += dy[i] * xhat;
        if (dbias) dbias[i] += dy[i];
    }
    if (dx) {
        T inv_n = T(1) / T(n);
        for (int i = 0; i < n; ++i) {
            T xhat = (x[i] - mean) * rstd;
            T dxhat = dy[i] * gain[i];
            dx[i] = rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
        }
    }
}

// ---------------------------------------------------------------------------
// GELU (exact erf form)
// ---------------------------------------------------------------------------

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
T gelu_grad(T x) {
    T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
    T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);  // 1/sqrt(2pi)
    return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// scaled dot-product attention, single head, strided rows.
// mask is row-major Sq x Sk of {0 forbid, 1 allow}; null = full allow.
// Every query row must have at least one allowed key (asserted).
//
// Logit scale: with trunc-normal(0.02) init the raw q·k std is (d·0.02²)²-ish,
// ~0.03 at d=64 — an order flatter than the regime that init was tuned for at
// d=768, leaving softmax near-uniform for thousands of steps. kAttnGain/√dh
// restores init-time logit std ≈ 0.3 so attention can differentiate early.
// ---------------------------------------------------------------------------

inline constexpr double kAttnGain = 12.0;

template <typename T>
void attention_forward(const T* q, int qs, const T* k, int ks, const T* v,
                       int vs, const uint8_t* mask, int Sq, int Sk, int dh,
                       T* probs /*Sq x Sk*/, T* out, int os) {
    T scale = T(kAttnGain) / std::sqrt(T(dh));
    for (int i = 0; i < Sq; ++i) {
        const T* qi = q + static_cast<size_t>(i) * qs;
        T* pi = probs + static_cast<size_t>(i) * Sk;
        const uint8_t* mi = mask ? mask + static_cast<size_t>(i) * Sk : nullptr;
        // scores
        T mx = T(0);
        bool any = false;
        for (int j = 0; j < Sk; ++j) {
            if (mi && !mi[j]) {
                pi[j] = T(0);  // tagged forbidden; skipped below
                continue;
            }
            const T* kj = k + static_cast<size_t>(j) * ks;
            T s = T(0);
            for (int t = 0; t < dh; ++t) s += qi[t] * kj[t];
            s *= scale;
            pi[j] = s;
            mx = (!any || s > mx) ? s : mx;
            any = true;
        }
        assert(any && "attention row with zero allowed positions");
        (void)any;
        // masked softmax over allowed entries
        T sum = T(0);
        for (int j = 0; j < Sk; ++j) {
            if (mi && !mi[j]) {
                pi[j] = T(0);
                continue;
            }
            pi[j] = std::exp(pi[j] - mx);
            sum += pi[j];
        }
        T inv = T(1) / sum;
        for (int j = 0; j < Sk; ++j) pi[j] *= inv;
        // out row = convex combination of value rows
        T* oi = out + static_cast<size_t>(i) * os;
        for (int t = 0; t < dh; ++t) oi[t] = T(0);
        for (int j = 0; j < Sk; ++j) {
            T p = pi[j];
            if (p == T(0)) continue;
            const T* vj = v + static_cast<size_t>(j) * vs;
            for (int t = 0; t < dh; ++t) oi[t] += p * vj[t];
        }
    }
}

// Backward from cached probs. dq/dk/dv regions are zeroed then accumulated
// (they belong exclusively to this head's slice).
template <typename T>
void attention_backward(const T* q, int qs, const T* k, int ks, const T* v,
                        int vs, const T* probs, int Sq, int Sk, int dh,
                        const T* dout, int dos, T* dq, int dqs, T* dk, int dks,
                        T* dv, int dvs) {
    T scale = T(kAttnGain) / std::sqrt(T(dh));
    for (int i = 0; i < Sq; ++i) {
        T* dqi = dq + static_cast<size_t>(i) * dqs;
        for (int t = 0; t < dh; ++t) dqi[t] = T(0);
    }
    for (int j = 0; j < Sk; ++j) {
        T* dkj = dk + static_cast<size_t>(j) * dks;
        T* dvj = dv + static_cast<size_t>(j) * dvs;
        for (int t = 0; t < dh; ++t) {
            dkj[t] = T(0);
            dvj[t] = T(0);
        }
    }
    std::vector<T> dscore(Sk);
    for (int i = 0; i < Sq; ++i) {
        const T* pi = probs + static_cast<size_t>(i) * Sk;
        const T* doi = dout + static_cast<size_t>(i) * dos;
        const T* qi = q + static_cast<size_t>(i) * qs;
        T* dqi = dq + static_cast<size_t>(i) * dqs;
        // dv[j] += p_ij * dout_i ; dp_ij = <dout_i, v_j>
        T dot_p_dp = T(0);
        for (int j = 0; j < Sk; ++j) {
            T p = pi[j];
            if (p == T(0)) {
                dscore[j] = T(0);
                continue;
            }
            const T* vj = v + static_cast<size_t>(j) * vs;
            T* dvj = dv + static_cast<size_t>(j) * dvs;
            T dp = T(0);
            for (int t = 0; t < dh; ++t) {
                dvj[t] += p * doi[t];
                dp += doi[t] * vj[t];
            }
            dscore[j] = p * dp;  // completed below with the softmax coupling
            dot_p_dp += p * dp;
        }
        // softmax backward: ds_ij = p_ij * (dp_ij - sum_j' p_ij' dp_ij')
        for (int j = 0; j < Sk; ++j) {
            if (pi[j] == T(0)) continue;
            T ds = (dscore[j] - pi[j] * dot_p_dp) * scale;
            const T* kj = k + static_cast<size_t>(j) * ks;
            T* dkj = dk + static_cast<size_t>(j) * dks;
            for (int t = 0; t < dh; ++t) {
                dqi[t] += ds * kj[t];
                dkj[t] += ds * qi[t];
            }
        }
    }
}

// Tensor-level convenience (single head, contiguous, used by tests).
template <typename T>
TensorT<T> attention(const TensorT<T>& q, const TensorT<T>& k,
                     const TensorT<T>& v, const std::vector<uint8_t>& mask) {
    int Sq = q.shape[0], Sk = k.shape[0], dh = q.shape[1];
    assert(k.shape[1] == dh && v.shape[0] == Sk);
    TensorT<T> out({Sq, v.shape[1]});
    TensorT<T> probs({Sq, Sk});
    attention_forward(q.ptr(), dh, k.ptr(), dh, v.ptr(), v.shape[1],
                      mask.empty() ? nullptr : mask.data(), Sq, Sk, dh,
                      probs.ptr(), out.ptr(), v.shape[1]);
    return out;
}

// ---------------------------------------------------------------------------
// masked cross-entropy over a logits matrix (one text sample)
// ---------------------------------------------------------------------------

// Mean negative log-likelihood over unmasked rows; all-masked -> 0.
// Throws if any unmasked target id is outside [0, V).
template <typename T>
T cross_entropy_masked(const T* logits, const int* targets,
                       const uint8_t* loss_mask, int M, int V) {
    T total = T(0);
    int count = 0;
    for (int i = 0; i < M; ++i) {
        if (!loss_mask[i]) continue;
        int t = targets[i];
        if (t < 0 || t >= V)
            throw std::out_of_range("cross_entropy_masked: target id " +
                                    std::to_string(t) + " outside vocab");
        const T* row = logits + static_cast<size_t>(i) * V;
        T mx = row[0];
        for (int j = 1; j < V; ++j) mx = row[j] > mx ? row[j] : mx;
        T sum = T(0);
        for (int j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
        total += std::log(sum) - (row[t] - mx);
        ++count;
    }
    return count > 0 ? total / T(count) : T(0);
}

// Fused loss + gradient: dlogits = grad_scale * (softmax(row) - onehot) on
// unmasked rows, exactly zero on masked rows. Returns the same mean NLL as
// cross_entropy_masked. grad_scale folds in any batch-level normalization.
template <typename T>
T cross_entropy_fused(const T* logits, const int* targets,
                      const uint8_t* loss_mask, int M, int V, T* dlogits,
                      T grad_scale) {
    T total = T(0);
    int count = 0;
    for (int i = 0; i < M; ++i) {
        const T* row = logits + static_cast<size_t>(i) * V;
        T* drow = dlogits + static_cast<size_t>(i) * V;
        if (!loss_mask[i]) {
            for (int j = 0; j < V; ++j) drow[j] = T(0);
            continue;
        }
        int t = targets[i];
        if (t < 0 || t >= V)
            throw std::out_of_range("cross_entropy_fused: target id " +
                                    std::to_string(t) + " outside vocab");
        T mx = row[0];
        for (int j = 1; j < V; ++j) mx = row[j] > mx ? row[j] : mx;
        T sum = T(0);
        for (int j = 0; j < V; ++j) {
            drow[j] = std::exp(row[j] - mx);
            sum += drow[j];
        }
        T inv = T(1) / sum;
        for (int j = 0; j < V; ++j) drow[j] *= inv * grad_scale;
        drow[t] -= grad_scale;
        total += std::log(sum) - (row[t] - mx);
        ++count;
    }
    return count > 0 ? total / T(count) : T(0);
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// One update over a flat span. t is the post-increment step count (>= 1).
// Decoupled decay: w -= lr*wd*w, applied separately from the adaptive step.
template <typename T>
void adamw_update(T* w, const T* g, T* m, T* v, size_t n, long t, double lr,
                  const AdamWConfig& cfg = {}) {
    assert(t >= 1);
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t i = 0; i < n; ++i) {
        double gi = static_cast<double>(g[i]);
        double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
        double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        double mhat = mi / bc1;
        double vhat = vi / bc2;
        double wi = static_cast<double>(w[i]);
        wi -= lr * cfg.weight_decay * wi;               // decoupled decay
        wi -= lr * mhat / (std::sqrt(vhat) + cfg.eps);  // adaptive step
        w[i] = static_cast<T>(wi);
    }
}

// ---------------------------------------------------------------------------
// finite-difference gradient checker (64-bit only)
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_err = 0.0;
    size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double numeric_at_worst = 0.0;
};

// Central differences against a provided analytic gradient. Relative error
// denominator is max(|analytic|, |numeric|, 1e-8).
inline GradCheckResult grad_check(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& params, const std::vector<double>& analytic,
    double eps = 1e-4) {
    assert(params.size() == analytic.size());
    GradCheckResult res;
    std::vector<double> p = params;
    for (size_t i = 0; i < p.size(); ++i) {
        double keep = p[i];
        p[i] = keep + eps;
        double fp = f(p);
        p[i] = keep - eps;
        double fm = f(p);
        p[i] = keep;
        double numeric = (fp - fm) / (2.0 * eps);
        double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), 1e-8});
        double rel = std::fabs(analytic[i] - numeric) / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = i;
            res.analytic_at_worst = analytic[i];
            res.numeric_at_worst = numeric;
        }
    }
    return res;
}

// Seeded truncated-normal fill (std sigma, cutoff at 2 sigma).
template <typename T>
void fill_truncated_normal(T* p, size_t n, Rng& rng, double sigma = 0.02) {
    for (size_t i = 0; i < n; ++i)
        p[i] = static_cast<T>(rng.truncated_normal(-2.0, 2.0) * sigma);
}

}  // namespace flexcap::nn
