"""Jit-compiled numerical kernels.

Everything here is deliberately loop-based and allocation-light: these
routines sit inside the per-iteration hot path of the identification loop,
where a single sweep over ``T`` time steps and ``N`` particles must cost a
few milliseconds.  The public modules wrap these with validation and
friendlier types; nothing in here should be imported by user code.

All randomness inside the filter kernel flows from ``np.random.seed`` on
numba's internal generator, so a fixed seed gives bit-identical output for
identical inputs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# status codes returned by the filter kernel
OK = 0
DIVERGED = 1


@njit(cache=True)
def _fill_trig(x, argscale, clamp_lo, clamp_hi, maxfreq, ctab, stab):
    """Tabulate cos/sin of all harmonics of each coordinate of ``x``.

    Uses the angle-addition recurrence so only one cos/sin pair is evaluated
    per coordinate.  Arguments are clamped to the compact domain first.
    """
    dims = x.shape[0]
    for d in range(dims):
        v = x[d]
        if v < clamp_lo[d]:
            v = clamp_lo[d]
        elif v > clamp_hi[d]:
            v = clamp_hi[d]
        a = argscale[d] * v
        c1 = np.cos(a)
        s1 = np.sin(a)
        ctab[d, 0] = 1.0
        stab[d, 0] = 0.0
        ck = 1.0
        sk = 0.0
        for k in range(1, maxfreq + 1):
            cn = c1 * ck - s1 * sk
            sn = s1 * ck + c1 * sk
            ctab[d, k] = cn
            stab[d, k] = sn
            ck = cn
            sk = sn


@njit(cache=True)
def _features_into(ftype, freq, x, ctab, stab, out):
    """Evaluate one feature vector given pre-tabulated harmonics."""
    m, dims = ftype.shape
    for j in range(m):
        v = 1.0
        for d in range(dims):
            t = ftype[j, d]
            if t == 1:
                v *= ctab[d, freq[j, d]]
            elif t == 2:
                v *= stab[d, freq[j, d]]
            elif t == 3:
                v *= x[d]
        out[j] = v


@njit(cache=True)
def features_batch(ftype, freq, argscale, clamp_lo, clamp_hi, maxfreq, X):
    """Feature matrix ``(len(X), m)`` for points in the rows of ``X``."""
    n, dims = X.shape
    m = ftype.shape[0]
    out = np.empty((n, m))
    ctab = np.empty((dims, maxfreq + 1))
    stab = np.empty((dims, maxfreq + 1))
    for r in range(n):
        _fill_trig(X[r], argscale, clamp_lo, clamp_hi, maxfreq, ctab, stab)
        _features_into(ftype, freq, X[r], ctab, stab, out[r])
    return out


@njit(cache=True)
def _searchsorted_unit(cum, u):
    """First index i with cum[i] >= u; cum is nondecreasing with cum[-1]=1."""
    lo = 0
    hi = cum.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] < u:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def filter_kernel(y, ufeat, cond, N,
                  Gf, Gg, Lq, Lr, init_mean, Linit,
                  ftype, freq, argscale, clamp_lo, clamp_hi, maxfreq,
                  seed, systematic):
    """One sweep of a conditional particle filter with ancestor sampling.

    Runs ``N`` particles over the measurements ``y`` with particle ``N-1``
    pinned to the reference trajectory ``cond``.  Free particles are
    propagated from multinomially (or systematically) resampled ancestors
    through the state mean plus Cholesky-factored process noise, and the
    reference particle's ancestor is sampled from weights combining the
    filter weights with the transition density back to the reference.

    Parameters are raw arrays: coefficient matrices ``Gf`` (n_x, m_x+m_u)
    and ``Gg`` (n_y, m_x+m_u), lower Cholesky factors ``Lq``, ``Lr``,
    ``Linit`` of the process/measurement/initial covariances, the compiled
    state feature table, and precomputed input features ``ufeat`` (T, m_u).

    Returns
    -------
    (states, feats, weights, ancestors, tidx, J, degenerate_count,
     status, fail_t)
        ``states`` (T, N, n_x) raw particles per step, ``feats`` their
        feature vectors, ``weights`` (T, N) normalized measurement weights,
        ``ancestors`` (T-1, N) resampling indices, ``tidx`` (T, N) the
        ancestral-tracing index map (column i of ``tidx`` picks the
        surviving trajectory that ends in particle i at time T-1), ``J``
        the index of the sampled output trajectory, and degeneracy /
        divergence bookkeeping.  ``status != OK`` means a propagated state
        went non-finite at time ``fail_t``; arrays beyond that step are
        unspecified.
    """
    T, n_y = y.shape
    n_x = cond.shape[1]
    m_x = ftype.shape[0]
    m_u = ufeat.shape[1]

    np.random.seed(seed)

    states = np.empty((T, N, n_x))
    feats = np.empty((T, N, m_x))
    weights = np.empty((T, N))
    ancestors = np.zeros((max(T - 1, 1), N), dtype=np.int64)
    tidx = np.empty((T, N), dtype=np.int64)

    logw = np.empty(N)
    stepmean = np.empty((N, n_x))
    cum = np.empty(N)
    aw = np.empty(N)
    z = np.empty(n_x)
    r = np.empty(n_y)
    ctab = np.empty((n_x, maxfreq + 1))
    stab = np.empty((n_x, maxfreq + 1))

    degenerate = 0
    status = OK
    fail_t = -1

    log2pi = np.log(2.0 * np.pi)
    ldr = 0.0
    for i in range(n_y):
        ldr += np.log(Lr[i, i])
    c_meas = -0.5 * n_y * log2pi - ldr
    ldq = 0.0
    for i in range(n_x):
        ldq += np.log(Lq[i, i])
    c_trans = -0.5 * n_x * log2pi - ldq

    # initial particles: N-1 draws from the initial distribution, the last
    # slot pinned to the reference
    for i in range(N - 1):
        for d in range(n_x):
            z[d] = np.random.standard_normal()
        for d in range(n_x):
            acc = init_mean[d]
            for e in range(d + 1):
                acc += Linit[d, e] * z[e]
            states[0, i, d] = acc
    for d in range(n_x):
        states[0, N - 1, d] = cond[0, d]

    for t in range(T):
        # measurement log-weights
        wmax = -np.inf
        for i in range(N):
            xi = states[t, i]
            _fill_trig(xi, argscale, clamp_lo, clamp_hi, maxfreq, ctab, stab)
            _features_into(ftype, freq, xi, ctab, stab, feats[t, i])
            fi = feats[t, i]
            for d in range(n_y):
                acc = y[t, d]
                for j in range(m_x):
                    acc -= Gg[d, j] * fi[j]
                for j in range(m_u):
                    acc -= Gg[d, m_x + j] * ufeat[t, j]
                r[d] = acc
            quad = 0.0
            for d in range(n_y):
                acc = r[d]
                for e in range(d):
                    acc -= Lr[d, e] * r[e]
                acc /= Lr[d, d]
                r[d] = acc
                quad += acc * acc
            lw = c_meas - 0.5 * quad
            logw[i] = lw
            if lw > wmax:
                wmax = lw

        if not np.isfinite(wmax):
            # every weight underflowed or the likelihood is non-finite;
            # fall back to uniform weights and keep going
            for i in range(N):
                weights[t, i] = 1.0 / N
            degenerate += 1
        else:
            s = 0.0
            for i in range(N):
                w = np.exp(logw[i] - wmax)
                weights[t, i] = w
                s += w
            for i in range(N):
                weights[t, i] /= s

        if t == T - 1:
            break

        # predictive means for every particle (reused in ancestor sampling)
        for i in range(N):
            fi = feats[t, i]
            for d in range(n_x):
                acc = 0.0
                for j in range(m_x):
                    acc += Gf[d, j] * fi[j]
                for j in range(m_u):
                    acc += Gf[d, m_x + j] * ufeat[t, j]
                stepmean[i, d] = acc

        c = 0.0
        for i in range(N):
            c += weights[t, i]
            cum[i] = c
        cum[N - 1] = 1.0

        # ancestors of the free particles
        if systematic and N > 1:
            u0 = np.random.random()
            for i in range(N - 1):
                u = (i + u0) / (N - 1)
                ancestors[t, i] = _searchsorted_unit(cum, u)
        else:
            for i in range(N - 1):
                ancestors[t, i] = _searchsorted_unit(cum, np.random.random())

        # propagate free particles, pin the reference
        for i in range(N - 1):
            a = ancestors[t, i]
            for d in range(n_x):
                z[d] = np.random.standard_normal()
            for d in range(n_x):
                acc = stepmean[a, d]
                for e in range(d + 1):
                    acc += Lq[d, e] * z[e]
                states[t + 1, i, d] = acc
                if not np.isfinite(acc):
                    status = DIVERGED
                    fail_t = t + 1
        for d in range(n_x):
            states[t + 1, N - 1, d] = cond[t + 1, d]
        if status != OK:
            return (states, feats, weights, ancestors, tidx, 0,
                    degenerate, status, fail_t)

        # ancestor sampling for the reference particle: filter weight times
        # transition density to the next reference state
        awmax = -np.inf
        for i in range(N):
            quad = 0.0
            for d in range(n_x):
                acc = cond[t + 1, d] - stepmean[i, d]
                for e in range(d):
                    acc -= Lq[d, e] * z[e]
                z[d] = acc / Lq[d, d]
                quad += z[d] * z[d]
            law = np.log(weights[t, i]) + c_trans - 0.5 * quad
            aw[i] = law
            if law > awmax:
                awmax = law
        if not np.isfinite(awmax):
            for i in range(N):
                aw[i] = 1.0 / N
            degenerate += 1
        else:
            s = 0.0
            for i in range(N):
                w = np.exp(aw[i] - awmax)
                aw[i] = w
                s += w
            for i in range(N):
                aw[i] /= s
        c = 0.0
        for i in range(N):
            c += aw[i]
            cum[i] = c
        cum[N - 1] = 1.0
        ancestors[t, N - 1] = _searchsorted_unit(cum, np.random.random())

    # sample the output trajectory index from the final weights
    c = 0.0
    for i in range(N):
        c += weights[T - 1, i]
        cum[i] = c
    cum[N - 1] = 1.0
    J = _searchsorted_unit(cum, np.random.random())

    # ancestral tracing: tidx[t, i] = index at time t of the trajectory
    # that ends in particle i at time T-1
    for i in range(N):
        tidx[T - 1, i] = i
    for t in range(T - 2, -1, -1):
        for i in range(N):
            tidx[t, i] = ancestors[t, tidx[t + 1, i]]

    return (states, feats, weights, ancestors, tidx, J,
            degenerate, status, fail_t)
