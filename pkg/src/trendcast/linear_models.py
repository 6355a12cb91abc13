"""OLS, ridge and lasso benchmarks with an unpenalized intercept."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch, TooFewSamples

logger = logging.getLogger(__name__)

LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class LinearFit:
    family: str
    coefficients: np.ndarray
    intercept: float
    lam: float = 0.0
    iterations_used: int = 0
    converged: bool = True
    rank_deficient: bool = False
    feature_names: list[str] = field(default_factory=list)
    objective_trace: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "lambda": self.lam,
            "intercept": self.intercept,
            "coefficients": [float(c) for c in self.coefficients],
            "feature_names": list(self.feature_names),
            "iterations_used": self.iterations_used,
            "converged": self.converged,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def from_json(cls, d: dict) -> "LinearFit":
        return cls(d["family"], np.asarray(d["coefficients"], dtype=np.float64), float(d["intercept"]),
                   float(d["lambda"]), int(d.get("iterations_used", 0)), bool(d.get("converged", True)),
                   feature_names=list(d.get("feature_names", [])))

    @classmethod
    def load(cls, path: str | Path) -> "LinearFit":
        return cls.from_json(json.loads(Path(path).read_text()))


def _check(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeMismatch(f"X {X.shape} incompatible with y {y.shape}")
    return X, y


def fit_ols(X, y, feature_names=None) -> LinearFit:
    """Least squares via QR; rank-deficient designs fall back to the minimum-norm solution."""
    X, y = _check(X, y)
    n, m = X.shape
    if n <= m:
        raise TooFewSamples(f"OLS needs n > m, got n={n}, m={m}")
    A = np.column_stack([np.ones(n), X])
    q, r = np.linalg.qr(A)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-12 * max(diag.max(), 1.0):
        sol, *_ = np.linalg.lstsq(A, y, rcond=None)
        logger.warning("OLS design is rank deficient; using minimum-norm solution")
        return LinearFit("ols", sol[1:], float(sol[0]), rank_deficient=True, feature_names=list(feature_names or []))
    sol = np.linalg.solve(r, q.T @ y)
    return LinearFit("ols", sol[1:], float(sol[0]), feature_names=list(feature_names or []))


def fit_ridge(X, y, lam: float, feature_names=None) -> LinearFit:
    """beta = (Xc'Xc + lam I)^-1 Xc'yc on centered data; intercept recovered from the means."""
    X, y = _check(X, y)
    if lam <= 0:
        raise ValueError("ridge lambda must be positive")
    if len(X) < 2:
        raise TooFewSamples("ridge needs n >= 2")
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    m = X.shape[1]
    beta = np.linalg.solve(Xc.T @ Xc + lam * np.eye(m), Xc.T @ yc)
    return LinearFit("ridge", beta, float(ym - xm @ beta), lam, feature_names=list(feature_names or []))


def soft_threshold(x: float, lam: float) -> float:
    if x > lam:
        return x - lam
    if x < -lam:
        return x + lam
    return 0.0


def lasso_objective(Xc, yc, beta, lam) -> float:
    r = yc - Xc @ beta
    return 0.5 * float(r @ r) + lam * float(np.abs(beta).sum())


def fit_lasso(X, y, lam: float, tol: float = 1e-8, max_iter: int = 10000, feature_names=None) -> LinearFit:
    """Cyclic coordinate descent on 0.5||yc - Xc b||^2 + lam ||b||_1.

    Convergence is declared when the largest coefficient change in a sweep
    drops below ``tol``. Hitting ``max_iter`` returns the last iterate with
    ``converged=False``.
    """
    X, y = _check(X, y)
    if lam <= 0:
        raise ValueError("lasso lambda must be positive")
    xm, ym = X.mean(axis=0), y.mean()
    Xc, yc = X - xm, y - ym
    m = X.shape[1]
    norms = np.einsum("ij,ij->j", Xc, Xc)
    beta = np.zeros(m)
    resid = yc.copy()
    trace = [lasso_objective(Xc, yc, beta, lam)]
    # null-path boundary: the zero vector is optimal, skip float residue from the sweeps
    if lam >= np.abs(Xc.T @ yc).max() * (1.0 - 1e-12):
        return LinearFit("lasso", beta, float(ym), lam, 0, True,
                         feature_names=list(feature_names or []), objective_trace=trace)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        max_change = 0.0
        for j in range(m):
            if norms[j] == 0.0:
                continue
            old = beta[j]
            rho = Xc[:, j] @ resid + norms[j] * old
            new = soft_threshold(rho, lam) / norms[j]
            if new != old:
                resid -= Xc[:, j] * (new - old)
                beta[j] = new
                max_change = max(max_change, abs(new - old))
        trace.append(lasso_objective(Xc, yc, beta, lam))
        if max_change < tol:
            converged = True
            break
    if not converged:
        logger.warning("lasso did not converge in %d sweeps (lambda=%g)", max_iter, lam)
    return LinearFit("lasso", beta, float(ym - xm @ beta), lam, it, converged,
                     feature_names=list(feature_names or []), objective_trace=trace)


def predict(fit: LinearFit, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != len(fit.coefficients):
        raise ShapeMismatch(f"model has {len(fit.coefficients)} coefficients, X has {X.shape[1]} columns")
    return X @ fit.coefficients + fit.intercept


def select_lambda(family: str, X_train, y_train, X_val, y_val, grid=LAMBDA_GRID, feature_names=None):
    """Fit every lambda in ``grid`` and keep the one with lowest validation RMSE (first wins ties)."""
    fitter = {"ridge": fit_ridge, "lasso": fit_lasso}[family]
    best, best_rmse, scores = None, np.inf, []
    for lam in grid:
        f = fitter(X_train, y_train, lam, feature_names=feature_names)
        rmse = float(np.sqrt(np.mean((predict(f, X_val) - y_val) ** 2)))
        scores.append((lam, rmse))
        if rmse < best_rmse:
            best, best_rmse = f, rmse
    return best, scores
