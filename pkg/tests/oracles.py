"""Independent reference implementations used as test oracles.

Each one is written from the defining formula with plain loops or brute-force
enumeration and shares no code with the package.
"""

import itertools
import math

import numpy as np


def oracle_vicreg(Z, Zp, lam=25.0, mu=25.0, nu=1.0, gamma=1.0, eps=1e-4):
    """Straight-line evaluation of each term from its definition, with loops."""
    n, d = Z.shape
    s = sum((Z[i, j] - Zp[i, j]) ** 2 for i in range(n) for j in range(d)) / (n * d)

    def v(X):
        total = 0.0
        for j in range(d):
            m = sum(X[i, j] for i in range(n)) / n
            var = sum((X[i, j] - m) ** 2 for i in range(n)) / (n - 1)
            total += max(0.0, gamma - np.sqrt(var + eps))
        return total / d

    def c(X):
        means = [sum(X[i, j] for i in range(n)) / n for j in range(d)]
        total = 0.0
        for j in range(d):
            for k in range(d):
                if j != k:
                    cov = sum((X[i, j] - means[j]) * (X[i, k] - means[k]) for i in range(n)) / (n - 1)
                    total += cov**2
        return total / d

    vv, cc = v(Z) + v(Zp), c(Z) + c(Zp)
    return lam * s + mu * vv + nu * cc, s, vv, cc


def finite_difference_grad(f, x, h=1e-4):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def brute_force_tiles(mask, depth_mm, width_mm, spec):
    """Every grid window checked on its own, pixel by pixel."""
    h, w = mask.shape
    pa, pl = depth_mm / h, width_mm / w
    sa = max(1, min(h, int(round(spec.roi_size_mm / pa))))
    sl = max(1, min(w, int(round(spec.roi_size_mm / pl))))
    out = []
    il = 0
    while il * spec.stride_mm + spec.roi_size_mm <= width_mm + 1e-9:
        ia = 0
        while ia * spec.stride_mm + spec.roi_size_mm <= depth_mm + 1e-9:
            a0 = min(int(round(ia * spec.stride_mm / pa)), h - sa)
            l0 = min(int(round(il * spec.stride_mm / pl)), w - sl)
            inside = 0
            for a in range(a0, a0 + sa):
                for l in range(l0, l0 + sl):
                    inside += bool(mask[a, l])
            if inside / (sa * sl) >= spec.overlap_threshold:
                out.append((a0, a0 + sa, l0, l0 + sl, ia * spec.stride_mm, il * spec.stride_mm))
            ia += 1
        il += 1
    return out


def pair_count_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def textbook_welch(a, b):
    """Welch-Satterthwaite t and df; p from the regularized incomplete beta."""
    from scipy.special import betainc

    na, nb = len(a), len(b)
    ma, mb = sum(a) / na, sum(b) / nb
    va = sum((x - ma) ** 2 for x in a) / (na - 1)
    vb = sum((x - mb) ** 2 for x in b) / (nb - 1)
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    df = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    # two-tailed Student-t tail probability
    return float(betainc(df / 2, 0.5, df / (df + t * t)))


def student_t4_two_tailed(t):
    """Closed form of P(|T| > t) for 4 degrees of freedom."""
    return 1 - t * (6 + t * t) / (4 + t * t) ** 1.5


def oracle_head(Y, W_Q, W_K, W_V):
    """Loop-based softmax attention for a single head."""
    n, dh = Y.shape[0], W_Q.shape[0]
    Q, K, V = Y @ W_Q.T, Y @ W_K.T, Y @ W_V.T
    A = np.zeros((n, n))
    for i in range(n):
        logits = [sum(Q[i, k] * K[j, k] for k in range(dh)) / math.sqrt(dh) for j in range(n)]
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        A[i] = [x / sum(e) for x in e]
    return A @ V, A
