"""Information-criterion scoring and the (K, lambda1, lambda2) grid search."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import BiodivError
from .pfc import FitConfig, FittedModel, fit_em

NONZERO_TOL = 1e-8
DEFAULT_K_GRID = (2, 3, 4, 5, 6)
DEFAULT_LAMBDA_GRID = tuple(float(v) for v in np.logspace(-3, 1, 5))


def complexity(model: FittedModel, L: int | None = None) -> int:
    """Number of free parameters left after shrinkage.

    Nonzero mean entries, plus nonzero entries on and above the diagonal of
    each estimated covariance ``W_k^-1``, plus ``L (K - 1)`` logit
    coefficients. ``L`` defaults to the fitted model's basis size.
    """
    P = model.params if isinstance(model, FittedModel) else model
    if L is None:
        L = P.L
    K = P.K
    iu = np.triu_indices(P.p)
    n_mu = int(np.count_nonzero(np.abs(P.mu) > NONZERO_TOL))
    n_sigma = int(sum(np.count_nonzero(np.abs(P.Sigma[k][iu]) > NONZERO_TOL) for k in range(K)))
    return n_mu + n_sigma + int(L) * (K - 1)


def entropy_term(tau) -> float:
    """``sum_ik tau_ik log tau_ik`` with ``0 log 0 = 0`` (always <= 0)."""
    t = np.asarray(tau, dtype=float)
    pos = t > 0
    return float(np.sum(t[pos] * np.log(t[pos])))


def bic(model: FittedModel, L: int | None = None, N: int | None = None) -> float:
    """Unpenalized log-likelihood at the penalized estimate minus ``C/2 log N``."""
    N = model.tau.shape[0] if N is None else N
    return float(model.loglik - 0.5 * complexity(model, L) * math.log(N))


def icl(model: FittedModel, L: int | None = None, N: int | None = None) -> float:
    return bic(model, L, N) + entropy_term(model.tau)


@dataclass(frozen=True)
class ScoreRecord:
    K: int
    lambda1: float
    lambda2: float
    loglik: float
    C: int
    bic: float
    icl: float
    entropy_term: float
    converged: bool = True
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error

    @property
    def key(self) -> tuple:
        return (self.K, self.lambda1, self.lambda2)


def score(model: FittedModel, L: int | None = None) -> ScoreRecord:
    c = model.config
    ent = entropy_term(model.tau)
    b = bic(model, L)
    return ScoreRecord(model.K, float(c.lambda1), float(c.lambda2), float(model.loglik), complexity(model, L), b, b + ent,
                       ent, bool(model.converged))


def _failed(K, l1, l2, exc) -> ScoreRecord:
    nan = float("nan")
    return ScoreRecord(int(K), float(l1), float(l2), nan, 0, nan, nan, nan, False, f"{type(exc).__name__}: {exc}")


@dataclass
class SearchResult:
    records: list
    best_bic: ScoreRecord | None
    best_icl: ScoreRecord | None
    models: dict

    def ranking(self, criterion: str = "bic") -> list:
        """Successful records from best to worst; ties keep grid order."""
        ok = [r for r in self.records if r.ok]
        return sorted(ok, key=lambda r: -getattr(r, criterion))

    def model_for(self, record: ScoreRecord) -> FittedModel | None:
        return self.models.get(record.key)


def _fit_one(args):
    betas, psi, K, l1, l2, cfg = args
    c = replace(cfg, lambda1=float(l1), lambda2=float(l2))
    try:
        m = fit_em(betas, psi, int(K), c)
    except (BiodivError, np.linalg.LinAlgError) as exc:
        return _failed(K, l1, l2, exc), None
    return score(m, psi.shape[1]), m


def grid_search(betas, psi, K_grid=DEFAULT_K_GRID, lambda1_grid=DEFAULT_LAMBDA_GRID,
                lambda2_grid=DEFAULT_LAMBDA_GRID, config: FitConfig | None = None,
                n_jobs: int = 1, keep_models: bool = True) -> SearchResult:
    """Fit every triplet with the same seed and score it.

    Failed fits appear in the table with their error and NaN scores. The
    table is ordered by ``(K, lambda1, lambda2)``; ``SearchResult.ranking``
    orders it by either criterion.
    """
    if not (len(K_grid) and len(lambda1_grid) and len(lambda2_grid)):
        raise ValueError("grids must be non-empty")
    cfg = FitConfig() if config is None else config
    betas = np.asarray(betas, dtype=float)
    psi = np.asarray(psi, dtype=float)
    triplets = [(int(K), float(a), float(b)) for K in sorted(set(K_grid))
                for a in sorted(set(lambda1_grid)) for b in sorted(set(lambda2_grid))]
    jobs = [(betas, psi, K, a, b, cfg) for K, a, b in triplets]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(_fit_one, jobs))
    else:
        results = [_fit_one(j) for j in jobs]
    records = [r for r, _ in results]
    models = {r.key: m for r, m in results if m is not None} if keep_models else {}
    res = SearchResult(records, None, None, models)
    rb, ri = res.ranking("bic"), res.ranking("icl")
    res.best_bic = rb[0] if rb else None
    res.best_icl = ri[0] if ri else None
    return res


SCORE_FIELDS = ("K", "lambda1", "lambda2", "loglik", "C", "bic", "icl", "entropy_term", "converged", "rank_bic",
                "rank_icl", "error")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else format(v, ".10g")
    return str(v)


def score_table_csv(result: SearchResult) -> str:
    rank_b = {r.key: i + 1 for i, r in enumerate(result.ranking("bic"))}
    rank_i = {r.key: i + 1 for i, r in enumerate(result.ranking("icl"))}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_FIELDS)
    for r in result.records:
        d = asdict(r)
        d["rank_bic"] = rank_b.get(r.key, "")
        d["rank_icl"] = rank_i.get(r.key, "")
        w.writerow([_fmt(d[f]) for f in SCORE_FIELDS])
    return buf.getvalue()


def read_score_table(stream) -> list[ScoreRecord]:
    out = []
    for row in csv.DictReader(stream):
        out.append(ScoreRecord(int(row["K"]), float(row["lambda1"]), float(row["lambda2"]), float(row["loglik"]),
                               int(row["C"]), float(row["bic"]), float(row["icl"]), float(row["entropy_term"]),
                               row["converged"] == "true", row["error"]))
    return out
