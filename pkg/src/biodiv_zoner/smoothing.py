"""Monotone functional representation of biodiversity profiles.

Each profile is written as

    H(q) = xi0 + xi1 * m(q),    m(q) = int_0^q exp( int_0^s Ht(u) du ) ds,

where ``Ht = sum_j alpha_j phi_j`` is an unconstrained cubic B-spline
expansion on ``[0, Q]``. ``m`` is strictly increasing, so ``xi1 <= 0``
gives a non-increasing curve solving ``H'' = Ht * H'``. The coefficient
vector ``beta = (xi0, xi1, alpha_1..alpha_J)`` is what gets clustered.

The inner integral is exact (spline antiderivative); the outer one uses
the trapezoid rule with the Euler-Maclaurin end correction, which is
fourth-order accurate because the integrand's derivative ``Ht * exp(w)``
is available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

from .diversity import ProfilePoints
from .errors import BadConfig, OutOfDomain

_EXP_LIMIT = 700.0
DEFAULT_SMOOTH_LAMBDA = 1e-5


def cumulative_hermite(x, f, df):
    """Cumulative integral of ``f`` from ``x[0]`` using endpoint derivatives.

    Each panel uses ``h/2 (f_a + f_b) + h^2/12 (f'_a - f'_b)``, exact for
    cubics. ``f`` and ``df`` may be 2-D with samples along axis 0.
    """
    x = np.asarray(x, dtype=float)
    h = np.diff(x)
    if f.ndim > 1:
        h = h.reshape((-1,) + (1,) * (f.ndim - 1))
    inc = 0.5 * h * (f[1:] + f[:-1]) + (h * h / 12.0) * (df[:-1] - df[1:])
    out = np.empty_like(f, dtype=float)
    out[0] = 0.0
    np.cumsum(inc, axis=0, out=out[1:])
    return out


class BasisSystem:
    """Clamped cubic (by default) B-spline basis on ``[0, Q]`` plus quadrature grid.

    Parameters
    ----------
    J : int
        Number of basis functions; ``J - degree - 1`` equally spaced
        interior knots.
    Q : float
        Upper end of the order domain.
    degree : int
        Spline degree (3 = cubic).
    n_quad : int
        Number of uniform quadrature nodes on ``[0, Q]``.
    """

    def __init__(self, J: int = 15, Q: float = 5.0, degree: int = 3, n_quad: int = 501):
        if degree < 1 or J < degree + 1 or J < 4:
            raise BadConfig(f"need J >= max(4, degree + 1); got J={J}, degree={degree}")
        if not Q > 0:
            raise BadConfig("Q must be positive")
        if n_quad < 200:
            raise BadConfig("quadrature grid needs at least 200 points")
        self.J = int(J)
        self.Q = float(Q)
        self.degree = int(degree)
        self.n_quad = int(n_quad)
        n_int = J - degree - 1
        inner = np.linspace(0.0, Q, n_int + 2)[1:-1]
        self.knots = np.r_[np.zeros(degree + 1), inner, np.full(degree + 1, self.Q)]
        self.interior_knots = inner
        self._spl = BSpline(self.knots, np.eye(J), degree, extrapolate=False)
        self._anti = self._spl.antiderivative()
        self.grid = np.linspace(0.0, Q, n_quad)
        self.Phi = self.values(self.grid)
        self.A = self.integrals(self.grid)
        self.penalty = self._roughness_gram()

    def __repr__(self):
        return f"BasisSystem(J={self.J}, Q={self.Q}, degree={self.degree}, n_quad={self.n_quad})"

    def same_as(self, other: BasisSystem) -> bool:
        return (
            self.J == other.J
            and self.Q == other.Q
            and self.degree == other.degree
            and self.n_quad == other.n_quad
        )

    def _check(self, q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if np.any(q < -1e-12) or np.any(q > self.Q + 1e-12) or not np.all(np.isfinite(q)):
            raise OutOfDomain(f"orders must lie in [0, {self.Q}]")
        return np.clip(q, 0.0, self.Q)

    def values(self, q) -> np.ndarray:
        """Basis values ``phi_j(q)``, shape ``(n, J)``."""
        return self._spl(self._check(q))

    def integrals(self, q) -> np.ndarray:
        """``int_0^q phi_j``, shape ``(n, J)``."""
        return self._anti(self._check(q))

    def _roughness_gram(self) -> np.ndarray:
        # exact for piecewise polynomials of degree <= 2*5-1 per knot span
        d2 = self._spl.derivative(2)
        xg, wg = np.polynomial.legendre.leggauss(5)
        brk = np.unique(self.knots)
        R = np.zeros((self.J, self.J))
        for a, b in zip(brk[:-1], brk[1:]):
            x = 0.5 * (b - a) * xg + 0.5 * (a + b)
            D = d2(x)
            R += (D * (0.5 * (b - a) * wg)[:, None]).T @ D
        return 0.5 * (R + R.T)


def build_basis(J: int = 15, Q: float = 5.0, degree: int = 3, n_quad: int = 501) -> BasisSystem:
    return BasisSystem(J, Q, degree, n_quad)


def evaluate_unconstrained(alpha, basis: BasisSystem, q):
    """``Ht(q) = sum_j alpha_j phi_j(q)``."""
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (basis.J,):
        raise BadConfig(f"alpha must have length {basis.J}")
    out = basis.values(q) @ alpha
    return out if np.ndim(q) else float(out[0])


class MonotoneTransform:
    """Evaluator for ``m(q)`` built from one coefficient vector ``alpha``.

    ``outer_order=1`` (default) is the single outer integral solving
    ``m'' = Ht * m'``. ``outer_order=2`` integrates once more, giving
    ``D^-2[exp(D^-1 Ht)]``; it is kept for comparison only and is concave in
    the resulting profile, so fitting always uses order 1.
    """

    def __init__(self, alpha, basis: BasisSystem, outer_order: int = 1):
        if outer_order not in (1, 2):
            raise BadConfig("outer_order must be 1 or 2")
        self.alpha = np.asarray(alpha, dtype=float)
        if self.alpha.shape != (basis.J,):
            raise BadConfig(f"alpha must have length {basis.J}")
        self.basis = basis
        self.outer_order = outer_order
        w = basis.A @ self.alpha
        if np.max(w) > _EXP_LIMIT:
            raise OverflowError("inner exponential overflows; alpha too large")
        self._f = np.exp(w)
        self._df = (basis.Phi @ self.alpha) * self._f
        self._m1 = cumulative_hermite(basis.grid, self._f, self._df)
        if outer_order == 2:
            self._m2 = cumulative_hermite(basis.grid, self._m1, self._f)

    def _local(self, q):
        q = self.basis._check(q)
        g = self.basis.grid
        i = np.clip(np.searchsorted(g, q, side="right") - 1, 0, g.size - 2)
        f = np.exp(self.basis.integrals(q) @ self.alpha)
        df = (self.basis.values(q) @ self.alpha) * f
        return q, i, f, df

    def _eval(self, q):
        q, i, f, df = self._local(q)
        t = self.basis.grid[i]
        h = q - t
        m1 = self._m1[i] + 0.5 * h * (self._f[i] + f) + h * h / 12.0 * (self._df[i] - df)
        if self.outer_order == 1:
            return m1, f
        m2 = self._m2[i] + 0.5 * h * (self._m1[i] + m1) + h * h / 12.0 * (self._f[i] - f)
        return m2, m1

    def __call__(self, q):
        m, _ = self._eval(q)
        return m if np.ndim(q) else float(m[0])

    def derivative(self, q):
        """``dm/dq``: ``exp(int_0^q Ht)`` for order 1."""
        _, d = self._eval(q)
        return d if np.ndim(q) else float(d[0])

    def exp_inner(self, q):
        """``exp(int_0^q Ht)``; equals the second derivative of ``m`` for order 1."""
        _, _, f, _ = self._local(q)
        return f if np.ndim(q) else float(f[0])

    @property
    def on_grid(self) -> np.ndarray:
        return self._m1 if self.outer_order == 1 else self._m2


def integrate_transform(alpha, basis: BasisSystem, outer_order: int = 1) -> MonotoneTransform:
    return MonotoneTransform(alpha, basis, outer_order)


@dataclass
class ProfileCoefficients:
    xi0: float
    xi1: float
    alpha: np.ndarray
    cell_id: int = -1
    constant_flag: bool = False

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        if self.xi1 > 0:
            raise ValueError("xi1 must be <= 0 for a non-increasing profile")

    @property
    def beta(self) -> np.ndarray:
        return np.r_[self.xi0, self.xi1, self.alpha]

    @classmethod
    def from_beta(cls, beta, cell_id: int = -1, constant_flag: bool | None = None):
        beta = np.asarray(beta, dtype=float)
        xi1 = min(float(beta[1]), 0.0)
        alpha = beta[2:]
        if constant_flag is None:
            constant_flag = xi1 == 0.0 and not np.any(alpha)
        return cls(float(beta[0]), xi1, alpha, cell_id, bool(constant_flag))


@dataclass
class SmoothedProfile:
    coefficients: ProfileCoefficients
    basis: BasisSystem = field(repr=False)
    fitted: np.ndarray = field(repr=False)
    rmse: float
    converged: bool = True
    n_iter: int = 0
    objective_trace: list = field(default_factory=list, repr=False)
    convexity_violation: float = 0.0

    def __call__(self, q, derivative_order: int = 0):
        return evaluate_profile(self.coefficients, self.basis, q, derivative_order)


def evaluate_profile(coeffs: ProfileCoefficients, basis: BasisSystem, q, derivative_order: int = 0):
    """Fitted profile (order 0) or its first derivative (order 1) at ``q``."""
    if derivative_order not in (0, 1):
        raise BadConfig("derivative_order must be 0 or 1")
    qa = basis._check(q)
    if coeffs.constant_flag or coeffs.xi1 == 0.0:
        out = np.full(qa.shape, coeffs.xi0 if derivative_order == 0 else 0.0)
    else:
        m = MonotoneTransform(coeffs.alpha, basis)
        if derivative_order == 0:
            out = coeffs.xi0 + coeffs.xi1 * m(qa)
        else:
            out = coeffs.xi1 * m.derivative(qa)
    return out if np.ndim(q) else float(out[0])


def _merge_nodes(grid: np.ndarray, q: np.ndarray, tol: float = 1e-9):
    """Union of a grid and extra points; returns nodes and indices of ``q``."""
    pos = np.searchsorted(grid, q)
    extra = []
    for qq, p in zip(q, pos):
        near = [k for k in (p - 1, p) if 0 <= k < grid.size and abs(grid[k] - qq) <= tol]
        if not near:
            extra.append(qq)
    nodes = np.union1d(grid, np.asarray(extra, dtype=float)) if extra else grid
    idx = np.clip(np.searchsorted(nodes, q - tol), 0, nodes.size - 1)
    return nodes, idx


class _FitProblem:
    """Penalized least squares in ``alpha`` with ``(xi0, xi1)`` profiled out."""

    def __init__(self, q, h, basis: BasisSystem, lam: float):
        self.h = np.asarray(h, dtype=float)
        self.basis = basis
        self.lam = lam
        self.nodes, self.idx = _merge_nodes(basis.grid, np.asarray(q, dtype=float))
        self.Phi = basis.values(self.nodes)
        self.A = basis.integrals(self.nodes)
        self.R = basis.penalty

    def transform(self, alpha, jac: bool):
        w = self.A @ alpha
        if not np.all(np.isfinite(w)) or np.max(w) > _EXP_LIMIT:
            return None
        f = np.exp(w)
        ht = self.Phi @ alpha
        m = cumulative_hermite(self.nodes, f, ht * f)[self.idx]
        if not jac:
            return m, None
        G = f[:, None] * self.A
        dG = f[:, None] * (ht[:, None] * self.A + self.Phi)
        Dm = cumulative_hermite(self.nodes, G, dG)[self.idx]
        return m, Dm

    def linear_fit(self, m):
        X = np.column_stack([np.ones_like(m), m])
        xi, *_ = np.linalg.lstsq(X, self.h, rcond=None)
        # non-increasing data against increasing m gives xi1 <= 0 (Chebyshev);
        # clip guards round-off only
        if xi[1] > 0:
            xi = np.array([self.h.mean(), 0.0])
        r = self.h - X @ xi
        return xi, r, X

    def objective(self, alpha):
        out = self.transform(alpha, jac=False)
        if out is None:
            return np.inf, None, None
        m, _ = out
        xi, r, _ = self.linear_fit(m)
        return float(r @ r + self.lam * alpha @ self.R @ alpha), xi, r


def fit_profile(
    points: ProfilePoints,
    basis: BasisSystem,
    smooth_lambda: float = DEFAULT_SMOOTH_LAMBDA,
    max_iter: int = 500,
    tol: float = 1e-13,
    cell_id: int = -1,
) -> SmoothedProfile:
    """Fit one profile by damped Gauss-Newton over ``alpha``.

    At every iterate the linear coefficients ``(xi0, xi1)`` are refit by
    least squares, and the step in ``alpha`` uses the projected Jacobian of
    the variable-projection residual. Trial steps that do not lower the
    penalized objective are rejected and the damping is raised, so the
    objective trace is non-increasing. Profiles whose range is below 1e-6
    are returned as constants without optimisation.
    """
    q = np.asarray(points.q, dtype=float)
    h = np.asarray(points.h, dtype=float)
    if smooth_lambda < 0:
        raise BadConfig("smooth_lambda must be non-negative")
    if q.max() > basis.Q + 1e-12:
        raise OutOfDomain("profile points extend beyond the basis domain")

    if h.max() - h.min() < 1e-6:
        coeffs = ProfileCoefficients(float(h.mean()), 0.0, np.zeros(basis.J), cell_id, True)
        fitted = np.full(basis.grid.size, coeffs.xi0)
        rmse = float(np.sqrt(np.mean((h - coeffs.xi0) ** 2)))
        return SmoothedProfile(coeffs, basis, fitted, rmse, True, 0, [rmse**2 * h.size], 0.0)

    if h.size < basis.J + 2:
        raise BadConfig(f"need at least J + 2 = {basis.J + 2} profile points, got {h.size}")

    prob = _FitProblem(q, h, basis, smooth_lambda)
    alpha = np.zeros(basis.J)
    F, xi, r = prob.objective(alpha)
    trace = [F]
    mu = 1e-3
    converged = False
    it = 0
    eye = np.eye(basis.J)
    lamR = smooth_lambda * prob.R
    for it in range(1, max_iter + 1):
        m, Dm = prob.transform(alpha, jac=True)
        xi, r, X = prob.linear_fit(m)
        # Kaufman's variable-projection Jacobian of r wrt alpha
        Qx, _ = np.linalg.qr(X)
        Jr = -xi[1] * (Dm - Qx @ (Qx.T @ Dm))
        g = Jr.T @ r + lamR @ alpha
        JtJ = Jr.T @ Jr + lamR
        scale = max(np.max(np.diag(JtJ)), 1e-300)
        accepted = False
        for _ in range(60):
            try:
                step = linalg.solve(JtJ + mu * scale * eye, -g, assume_a="sym")
            except (linalg.LinAlgError, ValueError):
                mu *= 10.0
                continue
            F_new, xi_new, r_new = prob.objective(alpha + step)
            if F_new < F:
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            converged = True
            break
        alpha = alpha + step
        dF = F - F_new
        F, xi, r = F_new, xi_new, r_new
        trace.append(F)
        mu = max(mu / 5.0, 1e-15)
        if dF <= tol * (1.0 + F) and np.linalg.norm(step) <= 1e-8 * (1.0 + np.linalg.norm(alpha)):
            converged = True
            break
        if dF <= 1e-16 * (1.0 + F):
            converged = True
            break

    coeffs = ProfileCoefficients(float(xi[0]), float(min(xi[1], 0.0)), alpha, cell_id, False)
    tr = MonotoneTransform(alpha, basis)
    fitted = coeffs.xi0 + coeffs.xi1 * tr.on_grid
    rmse = float(np.sqrt(np.mean(r**2)))
    # H'' = Ht * H'; negative values mean local concavity
    d2 = (basis.Phi @ alpha) * coeffs.xi1 * np.exp(basis.A @ alpha)
    return SmoothedProfile(
        coeffs, basis, fitted, rmse, converged, it, trace, float(max(0.0, -d2.min()))
    )


def fit_profiles(points_list, basis: BasisSystem, smooth_lambda: float = DEFAULT_SMOOTH_LAMBDA, cell_ids=None, n_jobs: int = 1):
    """Fit many profiles; results keep input order regardless of ``n_jobs``."""
    cell_ids = list(range(len(points_list))) if cell_ids is None else list(cell_ids)
    args = [(p, basis, smooth_lambda, cid) for p, cid in zip(points_list, cell_ids)]
    if n_jobs == 1:
        return [_fit_one(a) for a in args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(_fit_one, args, chunksize=16))


def _fit_one(args):
    p, basis, lam, cid = args
    return fit_profile(p, basis, lam, cell_id=cid)


def coefficient_matrix(profiles) -> np.ndarray:
    """Stack ``beta`` vectors of fitted profiles into an ``(N, J + 2)`` array."""
    return np.vstack([sp.coefficients.beta for sp in profiles])


def curves_on(profiles, basis: BasisSystem, q=None, derivative_order: int = 0) -> np.ndarray:
    """Evaluate many fitted profiles on a common set of orders."""
    q = basis.grid if q is None else np.asarray(q, dtype=float)
    return np.vstack([evaluate_profile(sp.coefficients, basis, q, derivative_order) for sp in profiles])
