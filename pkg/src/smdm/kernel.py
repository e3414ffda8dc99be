"""Gaussian reproducing-kernel ridge regression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ModelError, SizeMismatchError

RESIDUAL_TOL = 1e-8


def gaussian_kernel(xi, xj, beta: float, n: int) -> float:
    """``exp(-beta * |xi - xj|^2 / n)`` with ``n`` the number of training samples."""
    a = np.asarray(xi, dtype=float).reshape(-1)
    b = np.asarray(xj, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise SizeMismatchError(f"feature dims differ: {a.shape} vs {b.shape}")
    if beta <= 0 or n < 1:
        raise ModelError("beta must be > 0 and n >= 1")
    d = a - b
    return float(np.exp(-beta * float(d @ d) / n))


def sq_distances(a, b) -> np.ndarray:
    """Pairwise squared Euclidean distances between rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def kernel_from_sq(d2, beta: float, n: int) -> np.ndarray:
    return np.exp(-(beta / n) * np.asarray(d2, dtype=float))


def solve_weights(k, y, lam: float):
    """``alpha = (K + lam I)^-1 Y`` by Cholesky, verified by its relative residual."""
    k = np.asarray(k, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam <= 0:
        raise ModelError("lambda must be positive")
    a = k + lam * np.eye(len(k))
    try:
        c = linalg.cho_factor(a, lower=True, check_finite=False)
        alpha = linalg.cho_solve(c, y, check_finite=False)
    except linalg.LinAlgError:
        alpha = linalg.solve(a, y, assume_a="sym")
    resid = np.linalg.norm(a @ alpha - y) / max(np.linalg.norm(y), 1e-300)
    if not np.isfinite(resid) or resid > RESIDUAL_TOL:
        cond = np.linalg.cond(a) if np.all(np.isfinite(a)) else float("inf")
        raise ModelError(f"kernel solve residual {resid:.3e} (condition estimate {cond:.3e})")
    return alpha, float(resid)


@dataclass(frozen=True)
class KernelModel:
    """Fitted ridge regression ``y(x) = sum_j alpha_j k(x, x_j)``."""

    x: np.ndarray
    y: np.ndarray
    alpha: np.ndarray
    beta: float
    lam: float
    mode: str = "per_region"
    residual: float = 0.0

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def kernel_matrix(self) -> np.ndarray:
        return kernel_from_sq(sq_distances(self.x, self.x), self.beta, self.n)

    def objective(self, alpha=None) -> float:
        """Ridge objective ``|Y - K a|^2 + lam a^T K a`` (summed over outputs)."""
        a = self.alpha if alpha is None else np.asarray(alpha, dtype=float)
        k = self.kernel_matrix()
        r = self.y - k @ a
        return float(np.sum(r * r) + self.lam * np.sum(a * (k @ a)))


def fit_kernel_model(x, y, beta: float, lam: float = 1e-3, mode: str = "per_region") -> KernelModel:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(len(x), -1)
    if len(x) < 1:
        raise ModelError("no training samples")
    if beta <= 0:
        raise ModelError("beta must be positive")
    k = kernel_from_sq(sq_distances(x, x), beta, len(x))
    alpha, resid = solve_weights(k, y, lam)
    return KernelModel(x, y, alpha, float(beta), float(lam), mode, resid)


def predict_displacement(model: KernelModel, x) -> np.ndarray:
    """Prediction for one feature vector (returns (3,)) or a batch (returns (q, 3))."""
    q = np.asarray(x, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != model.dim:
        raise SizeMismatchError(f"feature dim {q.shape[1]} does not match model dim {model.dim}")
    out = kernel_from_sq(sq_distances(q, model.x), model.beta, model.n) @ model.alpha
    return out[0] if single else out
