# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rollout kernel; semantics mirror ``drpets._kernels._ref``.

The batch loop is plain C under OpenMP: candidates are independent, one
thread owns each candidate end to end, and every thread works in its own
padded scratch slab, so results are bit-identical for any thread count.
"""

import numpy as np


cdef extern from *:
    """
    #include <stdint.h>
    #include <string.h>
    #include <math.h>
    #ifdef _OPENMP
    #include <omp.h>
    #else
    static int omp_get_thread_num(void) { return 0; }
    #endif

    /* Cephes-style double-precision exp: rational approximation on the
       range-reduced argument, then an exponent-field scale. ~2 ulp, no
       libm call in the hot loop; NaN propagates so divergence detection
       matches the numpy reference. */
    static inline double drp_exp(double x) {
        if (isnan(x)) return x;
        if (x > 709.0) return INFINITY;
        if (x < -709.0) return 0.0;
        double px = floor(1.4426950408889634073599 * x + 0.5);
        int64_t n = (int64_t) px;
        x -= px * 6.93145751953125E-1;
        x -= px * 1.42860682030941723212E-6;
        double xx = x * x;
        px = x * (((1.26177193074810590878E-4 * xx
                    + 3.02994407707441961300E-2) * xx
                   + 9.99999999999999999910E-1));
        double qx = ((3.00198505138664455042E-6 * xx
                      + 2.52448340349684104192E-3) * xx
                     + 2.27265548208155028766E-1) * xx
                    + 2.00000000000000000005E0;
        x = 1.0 + 2.0 * px / (qx - px);
        uint64_t bits;
        memcpy(&bits, &x, 8);
        bits += ((uint64_t) n) << 52;
        memcpy(&x, &bits, 8);
        return x;
    }

    static inline double drp_reward(int env_id, double plen,
                                    const double* o, double u) {
        if (env_id == 0) {
            double th = atan2(o[1], o[0]);
            return -(th * th + 0.1 * o[2] * o[2] + 0.001 * u * u);
        }
        double tipx = o[0] + plen * o[3];
        double tipy = plen * o[2];
        double dsq = tipx * tipx + (tipy - plen) * (tipy - plen);
        return drp_exp(-dsq / ((0.5 * plen) * (0.5 * plen))) - 0.01 * u * u;
    }

    static void drp_rollout_batch(
        const double* restrict theta, int64_t theta_stride,
        const int64_t* restrict dims, int L,
        const int64_t* restrict off_w, const int64_t* restrict off_b,
        const double* restrict in_mean, const double* restrict in_std,
        const double* restrict t_mean, const double* restrict t_std,
        const double* restrict ltv,
        const double* restrict start, int D,
        const double* restrict seqs, int M, int T,
        const double* restrict normals, int B, int Q,
        const double* restrict disc, double gamma,
        int env_id, double plen, double min_rew,
        double lv_lo, double lv_hi, int pair, int want_scores,
        double* restrict scratch, int64_t slab, int64_t o_act1,
        int64_t o_obs, int64_t o_nxt, int64_t o_r, int64_t o_s,
        int n_threads, double* restrict j_out, double* restrict g_out)
    {
        const int64_t n_step = (int64_t)(T > 1 ? T - 1 : 0) * D;
        #pragma omp parallel for schedule(static) num_threads(n_threads)
        for (int m = 0; m < M; m++) {
            double* base = scratch + (int64_t) omp_get_thread_num() * slab;
            double* act0 = base;
            double* act1 = base + o_act1;
            double* obs = base + o_obs;
            double* nxt = base + o_nxt;
            double* rloc = base + o_r;
            double* sloc = base + o_s;
            const double* seq = seqs + (int64_t) m * T;
            for (int b = 0; b < B; b++) {
                const double* th_row = theta + (int64_t) b * theta_stride;
                double* g_row = g_out + ((int64_t) m * B + b) * 2 * D;
                double jsum = 0.0;
                for (int q = 0; q < Q; q++) {
                    const double* nrm = normals
                        + (((int64_t) m * B + b) * Q + q) * n_step;
                    for (int i = 0; i < D; i++) obs[i] = start[i];
                    int div_k = T;
                    for (int k = 0; k < T; k++) {
                        double u = seq[k];
                        if (k < div_k) {
                            double r = drp_reward(env_id, plen, obs, u);
                            if (isfinite(r)) {
                                rloc[k] = r;
                            } else {
                                /* reward overflow also kills the particle */
                                rloc[k] = min_rew;
                                div_k = k;
                            }
                        } else {
                            rloc[k] = min_rew;
                        }
                        if (k == T - 1 || k >= div_k) continue;
                        for (int i = 0; i < D; i++)
                            act0[i] = (obs[i] - in_mean[i]) / in_std[i];
                        act0[D] = (u - in_mean[D]) / in_std[D];
                        double* src = act0;
                        double* dst = act1;
                        for (int l = 0; l < L; l++) {
                            const int n_in = (int) dims[l];
                            const int n_out = (int) dims[l + 1];
                            const double* bias = th_row + off_b[l];
                            for (int j = 0; j < n_out; j++) dst[j] = bias[j];
                            const double* w = th_row + off_w[l];
                            for (int i = 0; i < n_in; i++) {
                                const double v = src[i];
                                const double* wrow = w + (int64_t) i * n_out;
                                for (int j = 0; j < n_out; j++)
                                    dst[j] += v * wrow[j];
                            }
                            if (l < L - 1)
                                for (int j = 0; j < n_out; j++) {
                                    double x = dst[j];
                                    dst[j] = x / (1.0 + drp_exp(-x));
                                }
                            double* tmp = src; src = dst; dst = tmp;
                        }
                        const double* out = src;
                        const double* z_row = nrm + (int64_t) k * D;
                        double* s_row = sloc + (int64_t) (k + 1) * 2 * D;
                        for (int i = 0; i < D; i++) {
                            double mean_i = t_mean[i] + t_std[i] * out[i];
                            double lv = out[D + i] + ltv[i];
                            if (lv < lv_lo) lv = lv_lo;
                            else if (lv > lv_hi) lv = lv_hi;
                            double sig = drp_exp(0.5 * lv);
                            double z = z_row[i];
                            nxt[i] = obs[i] + mean_i + sig * z;
                            if (want_scores) {
                                s_row[i] = z / sig;
                                s_row[D + i] = 0.5 * (z * z - 1.0);
                            }
                        }
                        if (pair >= 0) {
                            double c = nxt[pair], s = nxt[pair + 1];
                            double sc = hypot(c, s);
                            nxt[pair] = c / sc;
                            nxt[pair + 1] = s / sc;
                        }
                        int ok = 1;
                        for (int i = 0; i < D; i++)
                            if (!isfinite(nxt[i])) ok = 0;
                        if (ok)
                            for (int i = 0; i < D; i++) obs[i] = nxt[i];
                        else
                            div_k = k + 1;
                    }
                    double total = 0.0;
                    for (int k = 0; k < T; k++) total += disc[k] * rloc[k];
                    jsum += total;
                    if (want_scores && T >= 2) {
                        double togo = 0.0;
                        for (int k = T - 1; k >= 1; k--) {
                            togo = rloc[k] + gamma * togo;
                            if (k < div_k) {
                                const double wgt = disc[k] * togo;
                                const double* s_row = sloc + (int64_t) k * 2 * D;
                                for (int j = 0; j < 2 * D; j++)
                                    g_row[j] += wgt * s_row[j];
                            }
                        }
                    }
                }
                j_out[(int64_t) m * B + b] = jsum / Q;
                if (want_scores)
                    for (int j = 0; j < 2 * D; j++) g_row[j] /= Q;
            }
        }
    }
    """
    double drp_exp(double x) noexcept nogil
    void drp_rollout_batch(
        const double* theta, long theta_stride,
        const long* dims, int L,
        const long* off_w, const long* off_b,
        const double* in_mean, const double* in_std,
        const double* t_mean, const double* t_std, const double* ltv,
        const double* start, int D,
        const double* seqs, int M, int T,
        const double* normals, int B, int Q,
        const double* disc, double gamma,
        int env_id, double plen, double min_rew,
        double lv_lo, double lv_hi, int pair, int want_scores,
        double* scratch, long slab, long o_act1,
        long o_obs, long o_nxt, long o_r, long o_s,
        int n_threads, double* j_out, double* g_out) noexcept nogil


def rollout_returns(theta, dims, input_mean, input_std, target_mean, target_std,
                    log_target_var, start_obs, seqs, normals, gamma, env_id,
                    angle_pair, pole_length, min_rew, logvar_min, logvar_max,
                    with_scores, threads=1):
    cdef double[:, ::1] theta_v = np.ascontiguousarray(theta, dtype=np.float64)
    cdef long[::1] dims_v = np.ascontiguousarray(dims, dtype=np.int64)
    cdef double[::1] in_mean_v = np.ascontiguousarray(input_mean, dtype=np.float64)
    cdef double[::1] in_std_v = np.ascontiguousarray(input_std, dtype=np.float64)
    cdef double[::1] t_mean_v = np.ascontiguousarray(target_mean, dtype=np.float64)
    cdef double[::1] t_std_v = np.ascontiguousarray(target_std, dtype=np.float64)
    cdef double[::1] ltv_v = np.ascontiguousarray(log_target_var, dtype=np.float64)
    cdef double[::1] start_v = np.ascontiguousarray(start_obs, dtype=np.float64)
    cdef double[:, ::1] seqs_v = np.ascontiguousarray(seqs, dtype=np.float64)
    cdef double[:, :, :, :, ::1] normals_v = np.ascontiguousarray(normals, dtype=np.float64)

    cdef int B = theta_v.shape[0]
    cdef int M = seqs_v.shape[0]
    cdef int T = seqs_v.shape[1]
    cdef int Q = normals_v.shape[2]
    cdef int D = start_v.shape[0]
    cdef int L = dims_v.shape[0] - 1
    if normals_v.shape[0] != M or normals_v.shape[1] != B or normals_v.shape[4] != D:
        raise ValueError("normals array shape does not match (M, B, Q, T-1, D)")
    if normals_v.shape[3] != (T - 1 if T > 1 else 0):
        raise ValueError("normals horizon axis must have length T-1")

    offs_w = np.zeros(L, dtype=np.int64)
    offs_b = np.zeros(L, dtype=np.int64)
    off = 0
    for l in range(L):
        offs_w[l] = off
        off += int(dims_v[l]) * int(dims_v[l + 1])
        offs_b[l] = off
        off += int(dims_v[l + 1])
    if off != theta_v.shape[1]:
        raise ValueError("packed parameter size does not match layer dims")
    cdef long[::1] off_w = offs_w
    cdef long[::1] off_b = offs_b

    disc_np = np.ascontiguousarray(float(gamma) ** np.arange(T, dtype=np.float64))
    cdef double[::1] disc_v = disc_np

    cdef int n_threads = max(1, int(threads))
    cdef bint want_scores = bool(with_scores)

    # One padded scratch slab per thread: [act0 | act1 | obs | nxt | rloc | sloc].
    cdef long width = ((int(np.asarray(dims).max()) + 7) // 8) * 8
    cdef long o_act1 = width
    cdef long o_obs = 2 * width
    cdef long o_nxt = o_obs + D
    cdef long o_r = o_nxt + D
    cdef long o_s = o_r + T
    cdef long slab = ((o_s + (T * 2 * D if want_scores else 0) + 7) // 8) * 8
    scratch_np = np.zeros((n_threads, slab))
    cdef double[:, ::1] scratch_v = scratch_np

    j_np = np.zeros((M, B))
    g_np = np.zeros((M, B, 2 * D))
    cdef double[:, ::1] j_v = j_np
    cdef double[:, :, ::1] g_v = g_np

    cdef const double* normals_p = NULL
    if normals_v.size > 0:
        normals_p = &normals_v[0, 0, 0, 0, 0]

    cdef double gam = float(gamma)
    cdef int env = int(env_id)
    cdef int pair = int(angle_pair)
    cdef double plen = float(pole_length)
    cdef double floor_r = float(min_rew)
    cdef double lv_lo = float(logvar_min)
    cdef double lv_hi = float(logvar_max)

    with nogil:
        drp_rollout_batch(
            &theta_v[0, 0], theta_v.shape[1],
            &dims_v[0], L, &off_w[0], &off_b[0],
            &in_mean_v[0], &in_std_v[0], &t_mean_v[0], &t_std_v[0], &ltv_v[0],
            &start_v[0], D, &seqs_v[0, 0], M, T,
            normals_p, B, Q, &disc_v[0], gam,
            env, plen, floor_r,
            lv_lo, lv_hi, pair, want_scores,
            &scratch_v[0, 0], slab, o_act1, o_obs, o_nxt, o_r, o_s,
            n_threads, &j_v[0, 0], &g_v[0, 0, 0])
    return j_np, g_np
