"""Graphical lasso with a penalised diagonal.

Solves

    maximize  log det W - tr(S W) - rho * sum_{j,k} |W_jk|

over positive definite ``W`` by block coordinate descent on the covariance
estimate (Friedman, Hastie & Tibshirani), one lasso problem per column.
With the diagonal penalised the covariance diagonal is fixed at
``S_jj + rho``.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import linalg

from ._compat import njit
from .errors import ConvergenceWarning, GlassoNonConvergence, NonPD


def duality_gap(S, W, rho) -> float:
    """``tr(S W) - p + rho * ||W||_1``; zero at the optimum."""
    return float(np.sum(S * W) - W.shape[0] + rho * np.abs(W).sum())


def glasso_objective(S, W, rho) -> float:
    sign, logdet = np.linalg.slogdet(W)
    if sign <= 0:
        return -np.inf
    return float(logdet - np.sum(S * W) - rho * np.abs(W).sum())


@njit
def _bcd_sweeps(S, C, B, rho, max_sweeps, lasso_tol, ctol):
    """Block coordinate descent sweeps; returns the number of sweeps run.

    Column ``j`` solves ``min 0.5 b'C_{-j,-j} b - b'S_{-j,j} + rho ||b||_1``
    by cyclic coordinate descent, with ``B[:, j]`` (``B[j, j] = 0``) as the
    warm start, then sets ``C_{-j,j} = C_{-j,-j} b``.
    """
    p = S.shape[0]
    Cb = np.empty(p)
    scale = 0.0
    for a in range(p):
        for c in range(p):
            v = abs(S[a, c])
            if v > scale:
                scale = v
    if scale == 0.0:
        scale = 1.0
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        cmove = 0.0
        for j in range(p):
            for k in range(p):
                acc = 0.0
                for l in range(p):
                    if l != j:
                        acc += C[k, l] * B[l, j]
                Cb[k] = acc
            for _ in range(10000):
                dmax = 0.0
                for k in range(p):
                    if k == j:
                        continue
                    bk = B[k, j]
                    ckk = C[k, k]
                    z = S[k, j] - Cb[k] + ckk * bk
                    if z > rho:
                        nb = (z - rho) / ckk
                    elif z < -rho:
                        nb = (z + rho) / ckk
                    else:
                        nb = 0.0
                    d = nb - bk
                    if d != 0.0:
                        B[k, j] = nb
                        for l in range(p):
                            Cb[l] += d * C[l, k]
                        if abs(d) > dmax:
                            dmax = abs(d)
                if dmax < lasso_tol:
                    break
            for k in range(p):
                if k != j:
                    mv = abs(Cb[k] - C[k, j])
                    if mv > cmove:
                        cmove = mv
                    C[k, j] = Cb[k]
                    C[j, k] = Cb[k]
        if cmove <= ctol * scale:
            break
    return sweeps


def graphical_lasso(
    S,
    rho: float,
    W_init=None,
    tol: float = 1e-4,
    max_iter: int = 200,
    lasso_tol: float = 1e-10,
    ctol: float = 1e-9,
    raise_on_fail: bool = False,
):
    """Penalised precision estimate.

    Parameters
    ----------
    S : (p, p) array
        Empirical covariance.
    rho : float
        Penalty on every entry of ``W`` (diagonal included).
    W_init : (p, p) array, optional
        Warm-start precision. Falls back to a cold start when the warm
        covariance iterate is indefinite or the sweeps diverge.
    tol : float
        Stop once the duality gap falls below ``tol`` and the covariance
        iterate moves by less than ``ctol`` (relative) in a sweep.

    Returns
    -------
    W, C, gap, n_iter
        Precision, covariance estimate ``W^-1``, final duality gap and number
        of sweeps.
    """
    S = np.asarray(S, dtype=float)
    p = S.shape[0]
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho == 0:
        try:
            c, low = linalg.cho_factor(S)
        except linalg.LinAlgError:
            raise NonPD("covariance is singular and rho = 0") from None
        W = linalg.cho_solve((c, low), np.eye(p))
        W = 0.5 * (W + W.T)
        return W, S.copy(), duality_gap(S, W, 0.0), 0
    if p == 1:
        W = np.array([[1.0 / (S[0, 0] + rho)]])
        return W, np.array([[S[0, 0] + rho]]), duality_gap(S, W, rho), 0

    if W_init is not None:
        try:
            return _solve(S, rho, W_init, tol, max_iter, lasso_tol, ctol, raise_on_fail)
        except _BadStart:
            pass
    return _solve(S, rho, None, tol, max_iter, lasso_tol, ctol, raise_on_fail)


class _BadStart(Exception):
    pass


def _solve(S, rho, W_init, tol, max_iter, lasso_tol, ctol, raise_on_fail):
    p = S.shape[0]
    # B[:, j] holds the lasso solution for column j (length p-1 embedded in p)
    B = np.zeros((p, p))
    if W_init is not None:
        W0 = np.asarray(W_init, dtype=float)
        C = linalg.inv(W0)
        C = 0.5 * (C + C.T)
        for j in range(p):
            B[:, j] = -W0[:, j] / W0[j, j]
            B[j, j] = 0.0
        C[np.diag_indices(p)] = np.diag(S) + rho
        # resetting the diagonal can break definiteness of a warm start
        try:
            linalg.cholesky(C, lower=True)
        except linalg.LinAlgError:
            raise _BadStart from None
    else:
        C = S.copy()
        C[np.diag_indices(p)] = np.diag(S) + rho

    B = np.ascontiguousarray(B)
    C = np.ascontiguousarray(C)
    gap = np.inf
    W = None
    it = 0
    while it < max_iter:
        # the gap formula presumes W^-1 is dual feasible, which only holds
        # once the covariance iterate has settled (checked inside the sweeps)
        it += _bcd_sweeps(S, C, B, float(rho), max_iter - it, lasso_tol, ctol)
        W = _precision_from(C, B)
        gap = duality_gap(S, W, rho)
        if not np.isfinite(gap):
            break
        if gap < tol:
            break
        ctol *= 0.01
    if not np.isfinite(gap):
        if W_init is not None:
            raise _BadStart
        raise NonPD("graphical lasso iterates became non-finite")
    if gap >= tol:
        if raise_on_fail:
            raise GlassoNonConvergence(gap, max_iter)
        warnings.warn(f"graphical lasso duality gap {gap:.2e} after {max_iter} sweeps", ConvergenceWarning, stacklevel=3)
    W = 0.5 * (W + W.T)
    try:
        linalg.cholesky(W, lower=True)
    except linalg.LinAlgError:
        if W_init is not None:
            raise _BadStart from None
        raise NonPD("graphical lasso produced a non positive definite precision") from None
    return W, C, gap, it


def _precision_from(C, B):
    p = C.shape[0]
    W = np.empty((p, p))
    for j in range(p):
        wjj = 1.0 / (C[j, j] - C[:, j] @ B[:, j])
        W[:, j] = -B[:, j] * wjj
        W[j, j] = wjj
    return W
