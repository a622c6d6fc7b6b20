"""Penalized model-based functional clustering with spatial mixing weights.

Profile coefficient vectors ``beta_i`` follow a ``K``-component Gaussian
mixture whose mixing proportions vary over space through a multinomial
logit on a spatial basis ``psi``::

    log(pi_k(v) / pi_K(v)) = sum_l omega_{k,l} psi_l(v),   k < K.

Means carry an L1 penalty ``lambda1`` and precision matrices an L1 penalty
``lambda2`` on every entry. Parameters are fitted by generalized EM: each
M-step only accepts updates that do not lower its part of the expected
penalized log-likelihood, so the penalized objective never decreases
between re-seeding events.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import log_softmax, logsumexp

from ._compat import njit
from .errors import (
    AllRestartsFailed,
    BadK,
    BiodivError,
    ConvergenceWarning,
    DegenerateRow,
    EmptyCluster,
    LogitNonConvergence,
    NonPD,
)
from .glasso import graphical_lasso

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelParams:
    mu: np.ndarray  # (K, p)
    W: np.ndarray  # (K, p, p) precisions
    omega: np.ndarray  # (K - 1, L)
    Sigma: np.ndarray = field(init=False, repr=False)
    logdet: np.ndarray = field(init=False, repr=False)
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        self.W = np.asarray(self.W, dtype=float).reshape(self.mu.shape[0], self.p, self.p)
        om = np.asarray(self.omega, dtype=float)
        if om.ndim != 2:
            om = om.reshape(self.K - 1, -1) if self.K > 1 else np.zeros((0, 0))
        self.omega = om
        self.refresh()

    def refresh(self):
        K, p = self.K, self.p
        self.chol = np.empty((K, p, p))
        self.logdet = np.empty(K)
        self.Sigma = np.empty((K, p, p))
        for k in range(K):
            Wk = 0.5 * (self.W[k] + self.W[k].T)
            self.W[k] = Wk
            try:
                Lk = linalg.cholesky(Wk, lower=True)
            except linalg.LinAlgError:
                raise NonPD(f"precision of cluster {k} is not positive definite") from None
            self.chol[k] = Lk
            self.logdet[k] = 2.0 * np.log(np.diag(Lk)).sum()
            Si = linalg.cho_solve((Lk, True), np.eye(p))
            self.Sigma[k] = 0.5 * (Si + Si.T)

    @property
    def K(self) -> int:
        return self.mu.shape[0]

    @property
    def p(self) -> int:
        return self.mu.shape[1]

    @property
    def L(self) -> int:
        return self.omega.shape[1] if self.omega.ndim == 2 else 0

    def copy(self) -> ModelParams:
        return ModelParams(self.mu.copy(), self.W.copy(), self.omega.copy())

    def permuted(self, perm) -> ModelParams:
        """Relabel clusters so that new cluster ``i`` is old cluster ``perm[i]``.

        Logit coefficients are re-expressed against the new baseline class.
        """
        perm = np.asarray(perm)
        full = np.vstack([self.omega, np.zeros((1, self.omega.shape[1]))])
        full = full[perm]
        om = full[:-1] - full[-1]
        return ModelParams(self.mu[perm].copy(), self.W[perm].copy(), om)


@dataclass
class FitConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    max_iter: int = 200
    rel_tol: float = 1e-6
    n_init: int = 5
    seed: int = 0
    spatial: bool = True
    logit_ridge: float = 1e-6
    kmeans_n_init: int = 10
    min_cluster_mass: float | None = None
    max_reseeds: int = 5
    glasso_tol: float = 1e-4

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalties must be non-negative")
        if not (self.rel_tol > 0 and self.max_iter > 0 and self.n_init > 0):
            raise ValueError("tolerances and iteration counts must be positive")


@dataclass
class FittedModel:
    params: ModelParams
    tau: np.ndarray
    labels: np.ndarray
    objective_trace: list
    converged: bool
    config: FitConfig
    loglik: float
    n_iter: int
    reseed_points: list = field(default_factory=list)  # trace indices whose value follows a re-seed
    restart_objectives: list = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]

    @property
    def K(self) -> int:
        return self.params.K

    def priors(self, psi) -> np.ndarray:
        return mixing_proportions(self.params.omega, psi)


# ---------------------------------------------------------------------------
# building blocks


def mixing_proportions(omega, psi) -> np.ndarray:
    """Softmax of ``zeta_k = omega_k . psi`` with the last class as baseline.

    ``psi`` is a single length-``L`` row or an ``(N, L)`` matrix; the result
    has shape ``(K,)`` or ``(N, K)`` accordingly.
    """
    omega = np.asarray(omega, dtype=float)
    psi = np.asarray(psi, dtype=float)
    single = psi.ndim == 1
    psi2 = np.atleast_2d(psi)
    if omega.size == 0:
        out = np.ones((psi2.shape[0], 1))
    else:
        zeta = psi2 @ omega.T
        zeta = np.column_stack([zeta, np.zeros(psi2.shape[0])])
        out = np.exp(log_softmax(zeta, axis=1))
    return out[0] if single else out


def log_mixing_proportions(omega, psi) -> np.ndarray:
    psi = np.atleast_2d(np.asarray(psi, dtype=float))
    if np.size(omega) == 0:
        return np.zeros((psi.shape[0], 1))
    zeta = psi @ np.asarray(omega).T
    zeta = np.column_stack([zeta, np.zeros(psi.shape[0])])
    return log_softmax(zeta, axis=1)


def log_density(beta, mu, W, logdet: float | None = None):
    """Multivariate normal log-density in precision form.

    ``beta`` may be a single vector or an ``(N, p)`` array.
    """
    W = np.asarray(W, dtype=float)
    if logdet is None:
        try:
            Lc = linalg.cholesky(0.5 * (W + W.T), lower=True)
        except linalg.LinAlgError:
            raise NonPD("precision matrix is not positive definite") from None
        logdet = 2.0 * np.log(np.diag(Lc)).sum()
    d = np.atleast_2d(beta) - np.asarray(mu, dtype=float)
    p = d.shape[1]
    quad = np.einsum("ij,jk,ik->i", d, W, d)
    out = 0.5 * logdet - 0.5 * p * LOG_2PI - 0.5 * quad
    return out if np.ndim(beta) > 1 else float(out[0])


def component_log_densities(params: ModelParams, betas) -> np.ndarray:
    betas = np.asarray(betas, dtype=float)
    out = np.empty((betas.shape[0], params.K))
    for k in range(params.K):
        z = (betas - params.mu[k]) @ params.chol[k]
        out[:, k] = 0.5 * params.logdet[k] - 0.5 * params.p * LOG_2PI - 0.5 * np.einsum("ij,ij->i", z, z)
    return out


def _joint(params: ModelParams, betas, psi) -> np.ndarray:
    return log_mixing_proportions(params.omega, psi) + component_log_densities(params, betas)


def _e_step(params, betas, psi):
    lj = _joint(params, betas, psi)
    norm = logsumexp(lj, axis=1)
    if not np.all(np.isfinite(norm)):
        bad = int(np.flatnonzero(~np.isfinite(norm))[0])
        raise DegenerateRow(f"row {bad}: all component log-densities are -inf")
    tau = np.exp(lj - norm[:, None])
    tau /= tau.sum(axis=1, keepdims=True)
    return tau, float(norm.sum())


def e_step(params: ModelParams, betas, psi) -> np.ndarray:
    """Posterior membership probabilities, computed in log space."""
    return _e_step(params, betas, psi)[0]


def loglik(params: ModelParams, betas, psi) -> float:
    """Unpenalized mixture log-likelihood."""
    return _e_step(params, betas, psi)[1]


def penalty(params: ModelParams, lambda1: float, lambda2: float) -> float:
    return float(lambda1 * np.abs(params.mu).sum() + lambda2 * np.abs(params.W).sum())


def penalized_loglik(params: ModelParams, betas, psi, lambda1: float = 0.0, lambda2: float = 0.0) -> float:
    return loglik(params, betas, psi) - penalty(params, lambda1, lambda2)


def hard_assignment(tau) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest cluster index."""
    return np.argmax(np.asarray(tau), axis=1)


# ---------------------------------------------------------------------------
# M-steps


@njit
def _lasso_mean(bbar, W, n, lam, mu, tol, max_sweeps):
    # min 0.5 n (mu - bbar)' W (mu - bbar) + lam ||mu||_1, cyclic CD in place
    p = bbar.shape[0]
    r = np.empty(p)
    for j in range(p):
        acc = 0.0
        for l in range(p):
            acc += W[j, l] * (mu[l] - bbar[l])
        r[j] = acc
    for _ in range(max_sweeps):
        dmax = 0.0
        for j in range(p):
            a = n * W[j, j]
            b = a * mu[j] - n * r[j]
            if b > lam:
                nj = (b - lam) / a
            elif b < -lam:
                nj = (b + lam) / a
            else:
                nj = 0.0
            d = nj - mu[j]
            if d != 0.0:
                mu[j] = nj
                for l in range(p):
                    r[l] += W[l, j] * d
                if abs(d) > dmax:
                    dmax = abs(d)
        if dmax < tol:
            break
    return mu


def m_step_means(tau, betas, W, lambda1: float, mu_init=None, min_mass: float | None = None) -> np.ndarray:
    """L1-penalized cluster means by coordinate descent with soft-thresholding.

    For cluster ``k`` minimizes ``0.5 n_k (mu - bbar_k)' W_k (mu - bbar_k) +
    lambda1 ||mu||_1`` where ``bbar_k`` is the ``tau``-weighted mean.
    Raises :class:`EmptyCluster` when a cluster's posterior mass is below
    ``min_mass`` (default ``p + 1``).
    """
    tau = np.asarray(tau, dtype=float)
    betas = np.asarray(betas, dtype=float)
    K = tau.shape[1]
    nk = tau.sum(axis=0)
    floor = betas.shape[1] + 1.0 if min_mass is None else min_mass
    if np.any(nk < floor) or np.any(nk <= 0):
        low = np.flatnonzero((nk < floor) | (nk <= 0)).tolist()
        raise EmptyCluster(f"clusters {low} have posterior mass below {floor:g}")
    bbar = (tau.T @ betas) / nk[:, None]
    mu = bbar.copy() if mu_init is None else np.array(mu_init, dtype=float)
    if lambda1 == 0:
        return bbar
    for k in range(K):
        Wk = np.ascontiguousarray(W[k])
        scale = max(np.abs(bbar[k]).max(), 1.0)
        mu[k] = _lasso_mean(bbar[k], Wk, float(nk[k]), float(lambda1), np.ascontiguousarray(mu[k]), 1e-12 * scale, 10000)
    return mu


def weighted_scatter(tau_k, betas, mu_k):
    nk = tau_k.sum()
    d = betas - mu_k
    S = (d * tau_k[:, None]).T @ d / nk
    return 0.5 * (S + S.T), nk


def _precision_q(S, W, nk, lambda2):
    """Cluster-k part of the expected penalized log-likelihood that depends on W."""
    sign, logdet = np.linalg.slogdet(W)
    if sign <= 0:
        return -np.inf
    return 0.5 * nk * (logdet - np.sum(S * W)) - lambda2 * np.abs(W).sum()


def m_step_precisions(tau, betas, mu, lambda2: float, W_init=None, tol: float = 1e-4) -> np.ndarray:
    """Sparse precisions via the graphical lasso with ``rho_k = 2 lambda2 / n_k``.

    With ``W_init`` given, a cluster keeps its old precision whenever the
    new one would lower the expected penalized log-likelihood (protects
    ascent against solver tolerance).
    """
    tau = np.asarray(tau, dtype=float)
    K = tau.shape[1]
    p = betas.shape[1]
    out = np.empty((K, p, p))
    for k in range(K):
        S, nk = weighted_scatter(tau[:, k], betas, mu[k])
        rho = 2.0 * lambda2 / nk
        W0 = None if W_init is None else W_init[k]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            W, _, gap, _ = graphical_lasso(S, rho, W_init=W0, tol=tol)
        if W0 is not None and _precision_q(S, W, nk, lambda2) < _precision_q(S, W0, nk, lambda2):
            W = W0
        out[k] = W
    return out


def _logit_objective(Om, tau, psi, ridge):
    K = tau.shape[1]
    lp = log_mixing_proportions(Om, psi)
    full = np.vstack([Om, np.zeros((1, Om.shape[1]))])
    cen = full - full.mean(axis=0)
    return float(np.sum(tau * lp)), float(np.sum(tau * lp) - ridge * np.sum(cen * cen)), lp


def m_step_mixing(tau, psi, omega_init=None, ridge: float = 1e-6, max_iter: int = 50, tol: float = 1e-10,
                  raise_on_fail: bool = False) -> np.ndarray:
    """Weighted multinomial logit by Newton's method with step halving.

    Maximizes ``sum_ik tau_ik log pi_k(psi_i) - ridge * sum_k ||omega_k -
    mean(omega)||^2`` (class ``K`` fixed at zero). The ridge acts on the
    class-centred coefficients, which keeps the estimate finite for
    separable data and symmetric under relabelling of the classes. The
    returned coefficients never have a lower unpenalized weighted
    log-likelihood than ``omega_init``. Hitting ``max_iter`` raises
    :class:`LogitNonConvergence` when ``raise_on_fail`` is set and otherwise
    returns the last (improved) iterate.
    """
    tau = np.asarray(tau, dtype=float)
    psi = np.asarray(psi, dtype=float)
    N, K = tau.shape
    L = psi.shape[1]
    if K == 1:
        return np.zeros((0, L))
    Om0 = np.zeros((K - 1, L)) if omega_init is None else np.array(omega_init, dtype=float)
    Om = Om0.copy()
    base0, F, lp = _logit_objective(Om, tau, psi, ridge)
    C = np.eye(K - 1) - 1.0 / K
    n = (K - 1) * L
    done = False
    for _ in range(max_iter):
        pi = np.exp(lp)
        G = (tau[:, :-1] - pi[:, :-1]).T @ psi - 2.0 * ridge * (C @ Om)
        P = pi[:, :-1]
        # Hessian of the negative objective, blocks (k, l) of size L x L
        H = np.einsum("ik,ia,ib->kab", P, psi, psi)
        Hfull = np.zeros((K - 1, L, K - 1, L))
        for k in range(K - 1):
            Hfull[k, :, k, :] += H[k]
        Hfull -= np.einsum("ik,il,ia,ib->kalb", P, P, psi, psi)
        Hm = Hfull.reshape(n, n) + 2.0 * ridge * np.kron(C, np.eye(L))
        try:
            step = linalg.solve(Hm + 1e-12 * np.eye(n), G.reshape(-1), assume_a="sym").reshape(K - 1, L)
        except linalg.LinAlgError:
            step = linalg.lstsq(Hm, G.reshape(-1))[0].reshape(K - 1, L)
        t = 1.0
        improved = False
        for _ in range(40):
            cand = Om + t * step
            _, Fc, lpc = _logit_objective(cand, tau, psi, ridge)
            if Fc >= F:
                improved = True
                break
            t *= 0.5
        if not improved:
            done = True
            break
        dF = Fc - F
        Om, F, lp = cand, Fc, lpc
        if dF <= tol * (1.0 + abs(F)):
            done = True
            break
    if not done and raise_on_fail:
        raise LogitNonConvergence(f"weighted logit not converged after {max_iter} Newton steps")
    if omega_init is not None:
        base_new = float(np.sum(tau * lp))
        if base_new < base0:
            return Om0
    return Om


# ---------------------------------------------------------------------------
# initialisation and EM


def _pooled_precision(betas, labels, K):
    p = betas.shape[1]
    resid = np.empty_like(betas)
    for k in range(K):
        m = labels == k
        if np.any(m):
            resid[m] = betas[m] - betas[m].mean(axis=0)
    var = resid.var(axis=0) if betas.shape[0] > 1 else np.ones(p)
    return np.diag(1.0 / (var + 1e-3))


def init_model(betas, K: int, psi, seed: int = 0, n_init: int = 10) -> ModelParams:
    """k-means start: cluster means, pooled diagonal precision, zero logits."""
    from sklearn.cluster import KMeans

    betas = np.asarray(betas, dtype=float)
    N, p = betas.shape
    if not 1 <= K <= N:
        raise BadK(f"K must be between 1 and N={N}, got {K}")
    L = np.asarray(psi).shape[1]
    if K == 1:
        labels = np.zeros(N, dtype=int)
    else:
        km = KMeans(n_clusters=K, n_init=n_init, random_state=int(seed))
        labels = km.fit_predict(betas)
    mu = np.vstack([betas[labels == k].mean(axis=0) if np.any(labels == k) else betas.mean(axis=0) for k in range(K)])
    Wp = _pooled_precision(betas, labels, K)
    return ModelParams(mu, np.repeat(Wp[None], K, axis=0), np.zeros((K - 1, L)))


def _restart_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1)[0] % (2**31 - 1)) for c in ss.spawn(n)]


_DEAD_MASS = 1e-12


def _em_run(betas, psi, params: ModelParams, cfg: FitConfig):
    lam1, lam2 = cfg.lambda1, cfg.lambda2
    N, p = betas.shape
    K = params.K
    min_mass = (p + 1.0) if cfg.min_cluster_mass is None else cfg.min_cluster_mass
    if not cfg.spatial:
        params = ModelParams(params.mu, params.W, np.zeros_like(params.omega))
    tau, ll = _e_step(params, betas, psi)
    trace = [ll - penalty(params, lam1, lam2)]
    reseeds = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        nk = tau.sum(axis=0)
        low = np.flatnonzero(nk < min_mass)
        # after max_reseeds a light cluster is left to the penalized M-steps
        if low.size and K > 1 and len(reseeds) < cfg.max_reseeds:
            params = _reseed(params, betas, tau, low)
            reseeds.append(len(trace))
            tau, ll = _e_step(params, betas, psi)
            trace.append(ll - penalty(params, lam1, lam2))
            still = low[tau[:, low].sum(axis=0) < min_mass]
            if still.size:
                tau = _claim_nearest(tau, betas, params.mu, still, min_mass)
                # the M-steps now start from edited memberships
                reseeds.append(len(trace))
        # once re-seeding is exhausted, a component that has lost all of its
        # mass keeps its last parameters and the rest are updated without it
        live = np.flatnonzero(tau.sum(axis=0) >= _DEAD_MASS)
        if live.size == K or len(reseeds) < cfg.max_reseeds:
            live = np.arange(K)
        mu, W = params.mu.copy(), params.W.copy()
        mu[live] = m_step_means(tau[:, live], betas, params.W[live], lam1, mu_init=params.mu[live],
                                min_mass=_DEAD_MASS)
        W[live] = m_step_precisions(tau[:, live], betas, mu[live], lam2, W_init=params.W[live],
                                    tol=cfg.glasso_tol)
        if cfg.spatial and K > 1:
            omega = m_step_mixing(tau, psi, params.omega, ridge=cfg.logit_ridge)
        else:
            omega = params.omega
        params = ModelParams(mu, W, omega)
        tau, ll = _e_step(params, betas, psi)
        obj = ll - penalty(params, lam1, lam2)
        prev = trace[-1]
        trace.append(obj)
        if abs(obj - prev) <= cfg.rel_tol * max(abs(prev), 1.0):
            converged = True
            break
    return params, tau, ll, trace, converged, it, reseeds


def _reseed(params, betas, tau, low):
    """Move light clusters to the worst-explained points, with pooled precision."""
    mu = params.mu.copy()
    W = params.W.copy()
    Wp = _pooled_precision(betas, hard_assignment(tau), params.K)
    order = np.argsort(tau.max(axis=1), kind="stable")
    for j, k in enumerate(low):
        mu[k] = betas[order[j]]
        W[k] = Wp
    return ModelParams(mu, W, params.omega)


def _claim_nearest(tau, betas, mu, clusters, min_mass):
    """Hand each re-seeded cluster, with weight one, the ``ceil(min_mass)`` points nearest its mean.

    Used when a fresh component attracts almost no posterior mass because
    sharper components dominate everywhere.
    """
    tau = tau.copy()
    N = betas.shape[0]
    n_take = min(int(math.ceil(min_mass)), N)
    taken = np.zeros(N, dtype=bool)
    for k in clusters:
        d = np.sum((betas - mu[k]) ** 2, axis=1)
        d[taken] = np.inf
        near = np.argsort(d, kind="stable")[:n_take]
        tau[near] = 0.0
        tau[near, k] = 1.0
        taken[near] = True
    return tau


def fit_em(betas, psi, K: int, config: FitConfig | None = None, init: ModelParams | None = None) -> FittedModel:
    """Fit the penalized spatial mixture; best of ``config.n_init`` restarts.

    Parameters
    ----------
    betas : (N, p) array
        Profile coefficient vectors.
    psi : (N, L) array
        Spatial basis evaluated at the cells.
    K : int
        Number of clusters.
    config : FitConfig
    init : ModelParams, optional
        Explicit starting point; replaces the k-means restarts.
    """
    cfg = FitConfig() if config is None else config
    betas = np.asarray(betas, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if betas.shape[0] != psi.shape[0]:
        raise ValueError("betas and psi must have the same number of rows")
    if init is not None:
        starts = [init.copy()]
    else:
        if not 1 <= K <= betas.shape[0]:
            raise BadK(f"K must be between 1 and N={betas.shape[0]}, got {K}")
        n_runs = 1 if K == 1 else cfg.n_init
        starts = [init_model(betas, K, psi, s, cfg.kmeans_n_init) for s in _restart_seeds(cfg.seed, n_runs)]

    best = None
    errors = []
    objs = []
    for params0 in starts:
        try:
            res = _em_run(betas, psi, params0, cfg)
        except BiodivError as exc:
            errors.append(exc)
            objs.append(float("nan"))
            continue
        objs.append(res[3][-1])
        if best is None or res[3][-1] > best[3][-1]:
            best = res
    if best is None:
        raise AllRestartsFailed("; ".join(f"{type(e).__name__}: {e}" for e in errors))
    params, tau, ll, trace, converged, it, reseeds = best
    return FittedModel(params, tau, hard_assignment(tau), trace, converged, cfg, ll, it, reseeds, objs)


# ---------------------------------------------------------------------------
# serialisation


def model_to_dict(model: FittedModel) -> dict:
    P = model.params
    c = model.config
    return {
        "K": P.K,
        "p": P.p,
        "L": P.L,
        "N": int(model.tau.shape[0]),
        "mu": P.mu.tolist(),
        "W": [Wk.reshape(-1).tolist() for Wk in P.W],
        "omega": P.omega.tolist(),
        "lambda1": c.lambda1,
        "lambda2": c.lambda2,
        "spatial": c.spatial,
        "seed": c.seed,
        "loglik": model.loglik,
        "objective_trace": list(model.objective_trace),
        "converged": bool(model.converged),
        "n_iter": int(model.n_iter),
    }


def params_from_dict(d: dict) -> ModelParams:
    K, p, L = int(d["K"]), int(d["p"]), int(d["L"])
    W = np.array(d["W"], dtype=float).reshape(K, p, p)
    omega = np.array(d["omega"], dtype=float).reshape(K - 1, L)
    return ModelParams(np.array(d["mu"], dtype=float), W, omega)


def dumps_model(model: FittedModel) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True, allow_nan=True)
