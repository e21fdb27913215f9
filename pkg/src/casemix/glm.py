"""Logistic and multinomial maximum likelihood via Newton iterations.

These fitters serve both the outcome models and the trial-membership
(propensity) models. They accept plain design matrices; formula binding
happens at the call site. Aliased columns are dropped by pivoted QR and
recorded on the fit, quasi-separation is flagged (and warned) rather than
raised, because downstream simulation studies must keep reporting such
replications.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import qr
from scipy.special import expit
from scipy.stats import chi2

from .errors import (
    AllSameResponse,
    DimensionMismatch,
    NoConvergence,
    RankDeficient,
    SeparationWarning,
    UnknownReference,
)
from .formula import Interaction, ModelFormula

SEPARATION_LP = 30.0
SEPARATION_DEV = 1e-6


def _drop_aliased(X: np.ndarray, names: Sequence[str]):
    """Pivoted-QR rank detection; returns kept column indices (original order)."""
    n, p = X.shape
    if p == 0:
        raise RankDeficient("design matrix has no columns")
    _, R, piv = qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(n, p) * np.finfo(float).eps if diag.size and diag[0] > 0 else 0.0
    rank = int(np.sum(diag > tol))
    if rank == 0:
        raise RankDeficient("design matrix has rank 0", dropped=tuple(names))
    kept = np.sort(piv[:rank])
    dropped = [names[i] for i in range(p) if i not in set(kept.tolist())]
    return kept, dropped


def _bernoulli_deviance(eta, y, w):
    # -2 loglik; log(1+e^eta) via logaddexp for stability
    return 2.0 * float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)))


@dataclass
class FittedLogistic:
    coef: np.ndarray                 # one per retained design column
    fisher_cov: np.ndarray           # inverse observed information, retained columns
    converged: bool
    iterations: int
    deviance: float
    separation_flag: bool
    column_names: tuple              # retained column labels
    dropped_columns: tuple           # aliased labels removed before fitting
    kept: np.ndarray                 # retained column indices into the original design
    p_original: int
    n: int
    formula: Optional[ModelFormula] = None

    def linear_predictor(self, rows: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != self.p_original:
            raise DimensionMismatch(
                f"expected rows of width {self.p_original}, got {rows.shape[1]}")
        return rows[:, self.kept] @ self.coef

    def predict(self, rows: np.ndarray) -> np.ndarray:
        return expit(self.linear_predictor(rows))


@dataclass
class FittedMultinomial:
    coef: np.ndarray                 # (C-1) x p, rows ordered like `categories` minus reference
    categories: tuple                # all categories, reference last excluded from coef rows
    reference: object
    fisher_cov: np.ndarray           # ((C-1)p) x ((C-1)p), row-major by category then column
    converged: bool
    iterations: int
    deviance: float
    separation_flag: bool
    column_names: tuple
    dropped_columns: tuple
    kept: np.ndarray
    p_original: int
    n: int
    formula: Optional[ModelFormula] = None

    def category_index(self, cat) -> int:
        try:
            return self.categories.index(cat)
        except ValueError:
            raise UnknownReference(f"unknown category {cat!r}") from None

    def linear_predictors(self, rows: np.ndarray) -> np.ndarray:
        """n x C matrix of category linear predictors (reference column = 0)."""
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != self.p_original:
            raise DimensionMismatch(
                f"expected rows of width {self.p_original}, got {rows.shape[1]}")
        Z = rows[:, self.kept]
        eta = np.zeros((Z.shape[0], len(self.categories)))
        r = 0
        for c, cat in enumerate(self.categories):
            if cat == self.reference:
                continue
            eta[:, c] = Z @ self.coef[r]
            r += 1
        return eta

    def predict(self, rows: np.ndarray) -> np.ndarray:
        eta = self.linear_predictors(rows)
        eta = eta - eta.max(axis=1, keepdims=True)
        e = np.exp(eta)
        return e / e.sum(axis=1, keepdims=True)


def fit_logistic(X: np.ndarray, y: np.ndarray, weights: Optional[np.ndarray] = None,
                 *, tol: float = 1e-8, max_iter: int = 100,
                 column_names: Optional[Sequence[str]] = None,
                 formula: Optional[ModelFormula] = None) -> FittedLogistic:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n == 0:
        raise AllSameResponse("no rows to fit")
    if len(y) != n:
        raise DimensionMismatch("response length does not match design")
    if np.all(y == y[0]):
        raise AllSameResponse("response is constant; the MLE does not exist")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    names = tuple(column_names) if column_names is not None else tuple(
        f"x{i}" for i in range(p))

    kept, dropped = _drop_aliased(X, names)
    Xk = X[:, kept]
    pk = Xk.shape[1]

    beta = np.zeros(pk)
    eta = Xk @ beta
    dev = _bernoulli_deviance(eta, y, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        g = Xk.T @ (w * (y - mu))
        wt = w * mu * (1.0 - mu)
        H = (Xk * wt[:, None]).T @ Xk
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        # step-halving: never accept a deviance increase
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            cand_dev = _bernoulli_deviance(Xk @ cand, y, w)
            if cand_dev <= dev + 1e-10:
                break
            scale *= 0.5
        beta = beta + scale * step
        eta = Xk @ beta
        dev = _bernoulli_deviance(eta, y, w)
        if np.max(np.abs(scale * step)) < tol:
            converged = True
            break

    separated = bool(np.max(np.abs(eta)) > SEPARATION_LP or dev < SEPARATION_DEV)
    mu = expit(eta)
    wt = w * mu * (1.0 - mu)
    H = (Xk * wt[:, None]).T @ Xk
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(H)

    fit = FittedLogistic(coef=beta, fisher_cov=cov, converged=converged, iterations=it,
                         deviance=dev, separation_flag=separated,
                         column_names=tuple(names[i] for i in kept),
                         dropped_columns=tuple(dropped), kept=kept, p_original=p, n=n,
                         formula=formula)
    if separated:
        warnings.warn("fitted probabilities numerically 0/1: possible separation",
                      SeparationWarning, stacklevel=2)
    if not converged and not separated:
        raise NoConvergence(f"no convergence in {max_iter} iterations", last_fit=fit)
    return fit


def fit_multinomial(X: np.ndarray, categories: np.ndarray, reference,
                    *, tol: float = 1e-8, max_iter: int = 100,
                    weights: Optional[np.ndarray] = None,
                    column_names: Optional[Sequence[str]] = None,
                    formula: Optional[ModelFormula] = None) -> FittedMultinomial:
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    cats_arr = np.asarray(categories)
    if len(cats_arr) != n:
        raise DimensionMismatch("category length does not match design")
    uniq = list(dict.fromkeys(cats_arr.tolist()))  # first-appearance order
    if len(uniq) < 2:
        raise AllSameResponse("need at least two observed categories")
    if reference not in uniq:
        raise UnknownReference(f"reference {reference!r} not among observed categories")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    names = tuple(column_names) if column_names is not None else tuple(
        f"x{i}" for i in range(p))

    kept, dropped = _drop_aliased(X, names)
    Xk = X[:, kept]
    pk = Xk.shape[1]
    others = [c for c in uniq if c != reference]
    C = len(others)
    Y = np.column_stack([(cats_arr == c).astype(float) for c in others])  # n x C

    B = np.zeros((C, pk))
    converged = False
    it = 0

    def dev_of(Bm):
        eta = Xk @ Bm.T                       # n x C, reference eta = 0
        m = np.maximum(eta.max(axis=1), 0.0)
        lse = m + np.log(np.exp(-m) + np.exp(eta - m[:, None]).sum(axis=1))
        return 2.0 * float(np.sum(w * (lse - (Y * eta).sum(axis=1))))

    dev = dev_of(B)
    for it in range(1, max_iter + 1):
        eta = Xk @ B.T
        m = np.maximum(eta.max(axis=1), 0.0)
        denom = np.exp(-m) + np.exp(eta - m[:, None]).sum(axis=1)
        P = np.exp(eta - m[:, None]) / denom[:, None]  # n x C
        g = np.empty(C * pk)
        H = np.empty((C * pk, C * pk))
        for a in range(C):
            g[a * pk:(a + 1) * pk] = Xk.T @ (w * (Y[:, a] - P[:, a]))
            for b in range(C):
                wt = w * P[:, a] * ((1.0 if a == b else 0.0) - P[:, b])
                H[a * pk:(a + 1) * pk, b * pk:(b + 1) * pk] = (Xk * wt[:, None]).T @ Xk
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        step = step.reshape(C, pk)
        scale = 1.0
        for _ in range(30):
            cand = B + scale * step
            if dev_of(cand) <= dev + 1e-10:
                break
            scale *= 0.5
        B = B + scale * step
        dev = dev_of(B)
        if np.max(np.abs(scale * step)) < tol:
            converged = True
            break

    eta = Xk @ B.T
    separated = bool(np.max(np.abs(eta)) > SEPARATION_LP or dev < SEPARATION_DEV)
    m = np.maximum(eta.max(axis=1), 0.0)
    denom = np.exp(-m) + np.exp(eta - m[:, None]).sum(axis=1)
    P = np.exp(eta - m[:, None]) / denom[:, None]
    H = np.empty((C * pk, C * pk))
    for a in range(C):
        for b in range(C):
            wt = w * P[:, a] * ((1.0 if a == b else 0.0) - P[:, b])
            H[a * pk:(a + 1) * pk, b * pk:(b + 1) * pk] = (Xk * wt[:, None]).T @ Xk
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(H)

    fit = FittedMultinomial(coef=B, categories=tuple(uniq), reference=reference,
                            fisher_cov=cov, converged=converged, iterations=it,
                            deviance=dev, separation_flag=separated,
                            column_names=tuple(names[i] for i in kept),
                            dropped_columns=tuple(dropped), kept=kept, p_original=p,
                            n=n, formula=formula)
    if separated:
        warnings.warn("category probabilities numerically 0/1: possible separation",
                      SeparationWarning, stacklevel=2)
    if not converged and not separated:
        raise NoConvergence(f"no convergence in {max_iter} iterations", last_fit=fit)
    return fit


def predict_prob(fit, rows: np.ndarray) -> np.ndarray:
    """Probability (logistic) or probability vector per row (multinomial)."""
    single = np.asarray(rows).ndim == 1
    out = fit.predict(rows)
    return out[0] if single else out


def backward_eliminate(ds, base: ModelFormula, candidates: Sequence[Interaction],
                       alpha: float = 0.05, target: str = "outcome-model") -> ModelFormula:
    """Drop the least significant candidate interaction until all retained
    candidates are significant at `alpha`. Main terms are never dropped; ties
    on the p-value drop the candidate listed latest."""
    if target not in ("outcome-model", "membership-model"):
        raise ValueError("target must be 'outcome-model' or 'membership-model'")
    candidates = list(candidates)
    if not candidates:
        return base
    covs = ds.covariate_columns()
    remaining = list(candidates)
    while remaining:
        form = base.with_terms(remaining)
        labels = form.column_names()
        if target == "outcome-model":
            X = form.design_matrix(covs, treat=ds.treat)
            fit = fit_logistic(X, ds.outcome.astype(float), column_names=labels,
                               formula=form)
            pvals = _term_pvalues_logistic(fit, remaining)
        else:
            if form.requires_treat:
                raise ValueError("membership models cannot reference treat")
            X = form.design_matrix(covs)
            if ds.K == 2:
                resp = (ds.study_idx == 1).astype(float)
                fit = fit_logistic(X, resp, column_names=labels, formula=form)
                pvals = _term_pvalues_logistic(fit, remaining)
            else:
                fit = fit_multinomial(X, ds.study_idx, reference=0,
                                      column_names=labels, formula=form)
                pvals = _term_pvalues_multinomial(fit, remaining)
        worst_i, worst_p = 0, -1.0
        for i, pv in enumerate(pvals):
            if pv >= worst_p:          # >= so the latest tied candidate wins
                worst_i, worst_p = i, pv
        if worst_p <= alpha:
            break
        remaining.pop(worst_i)
    return base.with_terms(remaining)


def _term_pvalues_logistic(fit: FittedLogistic, terms) -> list:
    kept_labels = list(fit.column_names)
    out = []
    for t in terms:
        lab = t.label()
        if lab not in kept_labels:
            out.append(1.0)            # aliased away: no evidence to keep it
            continue
        j = kept_labels.index(lab)
        se2 = fit.fisher_cov[j, j]
        if se2 <= 0:
            out.append(1.0)
            continue
        stat = fit.coef[j] ** 2 / se2
        out.append(float(chi2.sf(stat, 1)))
    return out


def _term_pvalues_multinomial(fit: FittedMultinomial, terms) -> list:
    kept_labels = list(fit.column_names)
    pk = len(kept_labels)
    C = fit.coef.shape[0]
    out = []
    for t in terms:
        lab = t.label()
        if lab not in kept_labels:
            out.append(1.0)
            continue
        j = kept_labels.index(lab)
        idx = [a * pk + j for a in range(C)]
        c = fit.coef[:, j]
        V = fit.fisher_cov[np.ix_(idx, idx)]
        try:
            stat = float(c @ np.linalg.solve(V, c))
        except np.linalg.LinAlgError:
            out.append(1.0)
            continue
        out.append(float(chi2.sf(stat, C)))
    return out
