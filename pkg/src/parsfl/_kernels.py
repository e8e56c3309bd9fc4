"""Hot kernels for clustering, with a numba path and a vectorised numpy path.

Set ``PARSFL_DISABLE_NUMBA=1`` (or run without numba installed) to use the
numpy implementations. Both paths are always importable so they can be
benchmarked and cross-checked against each other.

Smoothing convention shared by every kernel: a distribution ``p`` becomes
``(p + eps) / sum(p + eps)`` before any logarithm is taken.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("PARSFL_DISABLE_NUMBA", "").strip().lower() not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"

INVALID = np.nan  # structurally impossible change (same cluster, top worker, emptying a cluster)
INFEASIBLE = np.inf  # change breaks the bandwidth or top-compute constraint


def smooth(p: np.ndarray, eps: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64) + eps
    return p / p.sum(axis=-1, keepdims=True)


# -- symmetric KL to centroids -------------------------------------------------


def sym_kl_numpy(X: np.ndarray, C: np.ndarray, eps: float) -> np.ndarray:
    P, Q = smooth(X, eps), smooth(C, eps)
    diff = P[:, None, :] - Q[None, :, :]
    logdiff = np.log(P)[:, None, :] - np.log(Q)[None, :, :]
    return 0.5 * np.sum(diff * logdiff, axis=-1)


# -- exchange-move table -------------------------------------------------------


def _kl_rows(mix: np.ndarray, log_q: np.ndarray, eps: float) -> np.ndarray:
    p = mix + eps
    p = p / p.sum(axis=-1, keepdims=True)
    return np.sum(p * (np.log(p) - log_q), axis=-1)


def _top2(vals: np.ndarray, mask: np.ndarray):
    """Column-wise largest value, its row, and second largest among masked rows."""
    v = np.where(mask, vals, -np.inf)
    order = np.argsort(-v, axis=0, kind="stable")
    cols = np.arange(v.shape[1])
    first = v[order[0], cols]
    second = v[order[1], cols] if v.shape[0] > 1 else np.full(v.shape[1], -np.inf)
    return first, order[0], second


def exchange_table_numpy(V, q_s, T, R, mu_p, B, tops, member_of, b, lam, wnorm, klnorm, eps, cur_u):
    """Utility deltas for every single-member move and every pairwise swap.

    Returns ``(moves, swaps)``: ``moves[i, c]`` is the change in total utility
    when member ``i`` moves to cluster ``c``; ``swaps[i, j]`` (``i < j``) when
    members ``i`` and ``j`` trade clusters. Entries are ``nan`` for impossible
    changes and ``inf`` for changes that violate a constraint.
    """
    N, _ = V.shape
    C = len(tops)
    log_q = np.log(q_s)
    is_mem = member_of >= 0
    cl = np.where(is_mem, member_of, 0)
    onehot = np.zeros((N, C))
    onehot[np.flatnonzero(is_mem), member_of[is_mem]] = 1.0
    n = onehot.sum(axis=0)
    S = onehot.T @ V
    Tc = T[:, tops]
    Rc = R[:, tops]
    mask = onehot > 0
    sumT = (onehot * Tc).sum(axis=0)
    t1, targ, t2 = _top2(Tc, mask)
    r1, rarg, r2 = _top2(Rc, mask)
    Bt = B[tops]
    Pt = mu_p[tops]
    rows = np.arange(N)

    def utility(n_new, mix, tmax, tsum, rmax, top_bw, top_mu):
        feas = (n_new * b <= top_bw) & (n_new * top_mu <= rmax)
        W = tmax - tsum / n_new
        u = lam * W / wnorm + (1.0 - lam) * _kl_rows(mix, log_q, eps) / klnorm
        return np.where(feas, u, np.inf)

    # max over own cluster with member i removed
    t_excl = np.where(targ[cl] == rows, t2[cl], t1[cl])
    r_excl = np.where(rarg[cl] == rows, r2[cl], r1[cl])
    n1 = n[cl] - 1

    with np.errstate(divide="ignore", invalid="ignore"):
        # moves: source side depends on i only
        mix_src = (S[cl] - V) / n1[:, None]
        u_src = utility(n1, mix_src, t_excl, sumT[cl] - Tc[rows, cl], r_excl, Bt[cl], Pt[cl])
        n2 = n[None, :] + 1
        mix_dst = (S[None, :, :] + V[:, None, :]) / n2[..., None]
        u_dst = utility(n2, mix_dst, np.maximum(t1[None, :], Tc), sumT[None, :] + Tc,
                        np.maximum(r1[None, :], Rc), Bt[None, :], Pt[None, :])
        moves = u_src[:, None] + u_dst - cur_u[cl][:, None] - cur_u[None, :]
        bad = (~is_mem)[:, None] | (cl[:, None] == np.arange(C)[None, :]) | (n1 < 1)[:, None]
        moves = np.where(bad, np.nan, np.where(np.isfinite(moves), moves, np.inf))

        # swaps: rep[a, z] = utility of a's cluster after a is replaced by z
        mix_rep = (S[cl][:, None, :] - V[:, None, :] + V[None, :, :]) / n[cl][:, None, None]
        t_in = Tc[:, cl].T  # t_in[a, z] = T[z, top of a's cluster]
        r_in = Rc[:, cl].T
        rep = utility(n[cl][:, None], mix_rep, np.maximum(t_excl[:, None], t_in),
                      (sumT[cl] - Tc[rows, cl])[:, None] + t_in, np.maximum(r_excl[:, None], r_in),
                      Bt[cl][:, None], Pt[cl][:, None])
        swaps = rep + rep.T - cur_u[cl][:, None] - cur_u[cl][None, :]
        ok = is_mem[:, None] & is_mem[None, :] & (cl[:, None] != cl[None, :])
        ok &= np.triu(np.ones((N, N), dtype=bool), 1)
        swaps = np.where(ok, np.where(np.isfinite(swaps), swaps, np.inf), np.nan)
    return moves, swaps


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _member_utility(V, log_q, T, R, mu_p, B, top, buf, k, b, lam, wnorm, klnorm, eps, mix):
        if k * b > B[top]:
            return np.inf
        M = V.shape[1]
        for m in range(M):
            mix[m] = 0.0
        tmax = -np.inf
        rmax = -np.inf
        tsum = 0.0
        for a in range(k):
            w = buf[a]
            for m in range(M):
                mix[m] += V[w, m]
            t = T[w, top]
            tsum += t
            if t > tmax:
                tmax = t
            r = R[w, top]
            if r > rmax:
                rmax = r
        if k * mu_p[top] > rmax:
            return np.inf
        tot = 0.0
        for m in range(M):
            mix[m] = mix[m] / k + eps
            tot += mix[m]
        kl = 0.0
        for m in range(M):
            p = mix[m] / tot
            kl += p * (np.log(p) - log_q[m])
        W = tmax - tsum / k
        return lam * W / wnorm + (1.0 - lam) * kl / klnorm

    @numba.njit(cache=True)
    def _exchange_numba(V, log_q, T, R, mu_p, B, tops, member_of, b, lam, wnorm, klnorm, eps, cur_u):
        N, M = V.shape
        C = tops.shape[0]
        counts = np.zeros(C, np.int64)
        for i in range(N):
            if member_of[i] >= 0:
                counts[member_of[i]] += 1
        width = 1
        for c in range(C):
            if counts[c] + 1 > width:
                width = counts[c] + 1
        lists = np.full((C, width), -1, np.int64)
        fill = np.zeros(C, np.int64)
        for i in range(N):
            c = member_of[i]
            if c >= 0:
                lists[c, fill[c]] = i
                fill[c] += 1
        buf = np.empty(width, np.int64)
        mix = np.empty(M)
        moves = np.full((N, C), np.nan)
        swaps = np.full((N, N), np.nan)
        for i in range(N):
            c1 = member_of[i]
            if c1 < 0 or counts[c1] < 2:
                continue
            k = 0
            for a in range(counts[c1]):
                if lists[c1, a] != i:
                    buf[k] = lists[c1, a]
                    k += 1
            u1 = _member_utility(V, log_q, T, R, mu_p, B, tops[c1], buf, k, b, lam, wnorm, klnorm, eps, mix)
            for c2 in range(C):
                if c2 == c1:
                    continue
                if u1 == np.inf:
                    moves[i, c2] = np.inf
                    continue
                k = 0
                for a in range(counts[c2]):
                    buf[k] = lists[c2, a]
                    k += 1
                buf[k] = i
                k += 1
                u2 = _member_utility(V, log_q, T, R, mu_p, B, tops[c2], buf, k, b, lam, wnorm, klnorm, eps, mix)
                moves[i, c2] = np.inf if u2 == np.inf else u1 + u2 - cur_u[c1] - cur_u[c2]
        for i in range(N):
            c1 = member_of[i]
            if c1 < 0:
                continue
            for j in range(i + 1, N):
                c2 = member_of[j]
                if c2 < 0 or c2 == c1:
                    continue
                k = 0
                for a in range(counts[c1]):
                    w = lists[c1, a]
                    buf[k] = j if w == i else w
                    k += 1
                u1 = _member_utility(V, log_q, T, R, mu_p, B, tops[c1], buf, k, b, lam, wnorm, klnorm, eps, mix)
                if u1 == np.inf:
                    swaps[i, j] = np.inf
                    continue
                k = 0
                for a in range(counts[c2]):
                    w = lists[c2, a]
                    buf[k] = i if w == j else w
                    k += 1
                u2 = _member_utility(V, log_q, T, R, mu_p, B, tops[c2], buf, k, b, lam, wnorm, klnorm, eps, mix)
                swaps[i, j] = np.inf if u2 == np.inf else u1 + u2 - cur_u[c1] - cur_u[c2]
        return moves, swaps

    @numba.njit(cache=True)
    def _smooth_rows(X, eps):
        N, M = X.shape
        P = np.empty((N, M))
        L = np.empty((N, M))
        for i in range(N):
            s = 0.0
            for m in range(M):
                s += X[i, m] + eps
            for m in range(M):
                P[i, m] = (X[i, m] + eps) / s
                L[i, m] = np.log(P[i, m])
        return P, L

    @numba.njit(cache=True)
    def _sym_kl_numba(X, C, eps):
        P, LP = _smooth_rows(X, eps)
        Q, LQ = _smooth_rows(C, eps)
        N, M = P.shape
        K = Q.shape[0]
        out = np.empty((N, K))
        for i in range(N):
            for k in range(K):
                acc = 0.0
                for m in range(M):
                    acc += (P[i, m] - Q[k, m]) * (LP[i, m] - LQ[k, m])
                out[i, k] = 0.5 * acc
        return out


def exchange_table_numba(V, q_s, T, R, mu_p, B, tops, member_of, b, lam, wnorm, klnorm, eps, cur_u):
    return _exchange_numba(
        np.ascontiguousarray(V, dtype=np.float64), np.log(np.asarray(q_s, dtype=np.float64)),
        np.ascontiguousarray(T, dtype=np.float64), np.ascontiguousarray(R, dtype=np.float64),
        np.asarray(mu_p, dtype=np.float64), np.asarray(B, dtype=np.float64),
        np.asarray(tops, dtype=np.int64), np.asarray(member_of, dtype=np.int64),
        float(b), float(lam), float(wnorm), float(klnorm), float(eps), np.asarray(cur_u, dtype=np.float64),
    )


def sym_kl_numba(X, C, eps):
    return _sym_kl_numba(np.ascontiguousarray(X, dtype=np.float64), np.ascontiguousarray(C, dtype=np.float64),
                         float(eps))


if USE_NUMBA:
    exchange_table = exchange_table_numba
    sym_kl = sym_kl_numba
else:
    exchange_table = exchange_table_numpy
    sym_kl = sym_kl_numpy
