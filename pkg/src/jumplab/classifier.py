"""Binary EXO/ENDO classification from fitted profile features.

Logit and probit regressions are fitted by iteratively reweighted least
squares (Newton steps on the log-likelihood) and reported with observed-
information standard errors, AUC and an adjusted McFadden pseudo-R^2. A
distance-weighted k-nearest-neighbour vote provides a model-free comparison
scored by the adjusted Rand index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats
from sklearn.metrics import adjusted_rand_score
from sklearn.neighbors import NearestNeighbors

from .errors import ConfigError

log = logging.getLogger(__name__)

ENDO, EXO = 0, 1
FEATURES = ("p_l", "p_r", "A")
MAX_WEIGHT = 1e12  # cap on 1/distance for coincident points


@dataclass
class RegressionModel:
    link: str
    names: tuple
    coef: np.ndarray  # feature coefficients followed by the intercept
    se: np.ndarray
    loglik: float
    loglik_null: float
    auc: float
    pseudo_r2_adj: float
    n: int
    converged: bool
    separation: bool
    n_iter: int

    @property
    def z(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se

    def linear_predictor(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.coef[:-1] + self.coef[-1]

    def predict_proba(self, X) -> np.ndarray:
        eta = self.linear_predictor(X)
        return special.expit(eta) if self.link == "logit" else special.ndtr(eta)

    def table(self) -> list:
        rows = [(n, c, s) for n, c, s in zip(self.names, self.coef[:-1], self.se[:-1])]
        rows.append(("intercept", self.coef[-1], self.se[-1]))
        return rows


def _loglik(eta, y, link):
    if link == "logit":
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return float(np.sum(np.where(y == 1, special.log_ndtr(eta), special.log_ndtr(-eta))))


def _score_hessian(X, y, eta, link):
    """Gradient and observed information of the log-likelihood."""
    if link == "logit":
        mu = special.expit(eta)
        g = X.T @ (y - mu)
        w = mu * (1.0 - mu)
        return g, (X * w[:, None]).T @ X
    # probit: d/d eta of log Phi(q eta) is q * lambda with lambda = phi/Phi(q eta)
    q = 2.0 * y - 1.0
    lam = q * np.exp(special.log_ndtr(q * eta) * -1.0 + stats.norm.logpdf(eta))
    g = X.T @ lam
    w = lam * (lam + eta)
    return g, (X * w[:, None]).T @ X


def fit_binary_regression(X, y, link: str = "logit", names=FEATURES, tol: float = 1e-8,
                          max_iter: int = 100) -> RegressionModel:
    """Maximum-likelihood logit/probit fit with an intercept.

    Newton iterations stop when the log-likelihood changes by less than ``tol``.
    Perfect or quasi-complete separation is reported through ``separation``
    (coefficients diverge, fitted probabilities hit 0/1) instead of raising.
    """
    if link not in ("logit", "probit"):
        raise ConfigError("link must be 'logit' or 'probit'")
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if set(np.unique(y)) - {0.0, 1.0}:
        raise ValueError("labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    n, k = X.shape
    Xd = np.column_stack([X, np.ones(n)])
    if np.linalg.matrix_rank(Xd) < k + 1:
        raise ValueError("collinear feature columns")
    names = tuple(names)[:k] if len(tuple(names)) >= k else tuple(f"x{i}" for i in range(k))
    beta = np.zeros(k + 1)
    ll = _loglik(Xd @ beta, y, link)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = Xd @ beta
        g, H = _score_hessian(Xd, y, eta, link)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        # step halving keeps the likelihood monotone
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = _loglik(Xd @ cand, y, link)
            if ll_new >= ll - 1e-12 or t < 1e-8:
                break
            t *= 0.5
        beta = cand
        done = abs(ll_new - ll) < tol
        ll = ll_new
        if done:
            converged = True
            break
    eta = Xd @ beta
    p = special.expit(eta) if link == "logit" else special.ndtr(eta)
    separation = bool(np.max(np.abs(beta)) > 1e3 / max(np.max(np.abs(Xd)), 1e-300)
                      or ((np.min(np.where(y == 1, p, 1.0)) > 1 - 1e-8)
                          and (np.max(np.where(y == 0, p, 0.0)) < 1e-8)))
    _, H = _score_hessian(Xd, y, eta, link)
    try:
        cov = np.linalg.inv(H)
        var = np.diag(cov)
        se = np.where(var > 0, np.sqrt(np.abs(var)), np.inf)
    except np.linalg.LinAlgError:
        se = np.full(k + 1, np.inf)
    ybar = y.mean()
    ll0 = float(n * (ybar * math.log(ybar) + (1 - ybar) * math.log(1 - ybar)))
    r2_adj = 1.0 - (ll - (k + 1)) / ll0
    if separation:
        log.info("regression: separation detected, coefficients are not finite estimates")
    return RegressionModel(link, names, beta, se, ll, ll0, auc(eta, y), r2_adj, n, converged,
                           separation, it)


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties 1/2)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    ranks = stats.rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def stratified_split(y, test_frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y)
    test = []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        m = max(1, int(round(test_frac * idx.size)))
        m = min(m, idx.size - 1) if idx.size > 1 else m
        test.append(rng.choice(idx, m, replace=False))
    test = np.sort(np.concatenate(test))
    train = np.setdiff1d(np.arange(y.size), test)
    return train, test


@dataclass
class SplitResult:
    mean: float
    sd: float
    aucs: np.ndarray


def train_test_eval(X, y, link: str = "logit", test_frac: float = 0.2, reps: int = 1000,
                    rng=None) -> SplitResult:
    """Out-of-sample AUC over repeated stratified train/test splits."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y).astype(int)
    rng = np.random.default_rng() if rng is None else rng
    if min(np.sum(y == 0), np.sum(y == 1)) < 2:
        raise ValueError("each class needs at least two samples for a split")
    out = np.empty(reps)
    for r in range(reps):
        for _ in range(100):
            train, test = stratified_split(y, test_frac, rng)
            if np.unique(y[train]).size == 2 and np.unique(y[test]).size == 2:
                break
        model = fit_binary_regression(X[train], y[train], link)
        out[r] = auc(model.linear_predictor(X[test]), y[test])
    return SplitResult(float(out.mean()), float(out.std(ddof=1)) if reps > 1 else 0.0, out)


def knn_classify(points, labels, K: int) -> np.ndarray:
    """Leave-one-out distance-weighted K-NN vote (weights 1/distance).

    Coincident neighbours get weight ``MAX_WEIGHT``. Equal weights go to
    ENDO (label 0).
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    y = np.asarray(labels).astype(int)
    n = P.shape[0]
    if not 1 <= K < n:
        raise ConfigError("K must lie in [1, n - 1]")
    nn = NearestNeighbors(n_neighbors=K + 1).fit(P)
    dist, idx = nn.kneighbors(P)
    # drop self, which need not come first when duplicates exist
    self_hit = idx == np.arange(n)[:, None]
    has_self = self_hit.any(axis=1)
    drop = np.where(has_self, np.argmax(self_hit, axis=1), K)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(n), drop] = False
    dist = dist[keep].reshape(n, K)
    idx = idx[keep].reshape(n, K)
    with np.errstate(divide="ignore"):
        w = np.where(dist > 0, 1.0 / dist, MAX_WEIGHT)
    w = np.minimum(w, MAX_WEIGHT)
    v1 = np.sum(w * (y[idx] == 1), axis=1)
    v0 = np.sum(w * (y[idx] == 0), axis=1)
    return (v1 > v0).astype(int)


def ari(predicted, truth) -> float:
    a = np.asarray(predicted)
    b = np.asarray(truth)
    if a.size == 0 or a.size != b.size:
        raise ValueError("ARI needs two non-empty labelings of equal length")
    return float(adjusted_rand_score(b, a))


def impute_median(series) -> np.ndarray:
    """Replace MISSING entries of each row by that row's median."""
    X = np.array(series, dtype=float)
    finite = np.isfinite(X)
    med = np.array([np.median(r[f]) if f.any() else np.nan for r, f in zip(X, finite)])
    med = np.where(np.isfinite(med), med, 0.0)
    bad = ~np.isfinite(X)
    X[bad] = np.broadcast_to(med[:, None], X.shape)[bad]
    return X


@dataclass
class AriCurve:
    K: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    sd: np.ndarray
    samples: np.ndarray


def ari_curve(points, labels, Ks, n_boot: int = 200, band: float = 0.01, rng=None) -> AriCurve:
    """ARI of the K-NN labels versus truth on class-balanced subsamples.

    Each replicate draws, without replacement, as many ENDO points as there
    are EXO points; all EXO points are kept.
    """
    P = np.asarray(points, dtype=float)
    y = np.asarray(labels).astype(int)
    rng = np.random.default_rng() if rng is None else rng
    exo = np.flatnonzero(y == EXO)
    endo = np.flatnonzero(y == ENDO)
    m = min(exo.size, endo.size)
    if m < 2:
        raise ValueError("need at least two points per class")
    Ks = np.asarray(list(Ks), dtype=int)
    out = np.full((n_boot, Ks.size), np.nan)
    for b in range(n_boot):
        sub = np.concatenate([rng.choice(exo, m, replace=False) if exo.size > m else exo,
                              rng.choice(endo, m, replace=False) if endo.size > m else endo])
        for j, K in enumerate(Ks):
            if K < sub.size:
                out[b, j] = ari(knn_classify(P[sub], y[sub], int(K)), y[sub])
    return AriCurve(Ks, np.nanmean(out, axis=0), np.nanquantile(out, band, axis=0),
                    np.nanquantile(out, 1 - band, axis=0), np.nanstd(out, axis=0, ddof=1), out)
