"""Gaussian templates, one full-covariance template per byte class."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .snr import N_BYTE_CLASSES

UNPROFILED_SCORE = -np.inf


@dataclass
class TemplateModel:
    means: np.ndarray  # (256, d)
    chol: np.ndarray  # (256, d, d), lower-triangular factors of the covariances
    profiled: np.ndarray  # (256,) bool
    reg_epsilon: np.ndarray  # (256,) loading that made each covariance factorizable

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def covariances(self) -> np.ndarray:
        return self.chol @ np.swapaxes(self.chol, 1, 2)


def _regularized_cholesky(cov: np.ndarray, scale: float, eps: float, retries: int
                          ) -> tuple[np.ndarray, float]:
    d = cov.shape[0]
    eye = np.eye(d)
    for _ in range(retries):
        try:
            return np.linalg.cholesky(cov + eps * scale * eye), eps
        except np.linalg.LinAlgError:
            eps = eps * 10 if eps > 0 else 1e-12
    raise np.linalg.LinAlgError(f"covariance not positive definite after {retries} retries")


def fit_templates(x: np.ndarray, y: np.ndarray, reg_epsilon: float = 1e-6,
                  max_retries: int = 12) -> TemplateModel:
    """Per-class sample mean and covariance of PoI-reduced traces ``x``.

    Each covariance gets ``reg_epsilon * mean(diag) * I`` added, with ``eps``
    growing tenfold until the Cholesky factorization succeeds. A class with
    an all-zero diagonal borrows the average diagonal of the other classes
    (or 1 when every class is noiseless). Classes absent from ``y`` are
    marked unprofiled.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.int64)
    d = x.shape[1]
    means = np.zeros((N_BYTE_CLASSES, d))
    covs = np.zeros((N_BYTE_CLASSES, d, d))
    counts = np.bincount(y, minlength=N_BYTE_CLASSES)
    profiled = counts > 0
    order = np.argsort(y, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    for c in np.flatnonzero(profiled):
        xc = x[order[bounds[c]:bounds[c + 1]]]
        means[c] = xc.mean(axis=0)
        if len(xc) > 1:
            dev = xc - means[c]
            covs[c] = dev.T @ dev / (len(xc) - 1)

    diag_means = np.einsum("cii->c", covs) / d
    positive = diag_means[profiled & (diag_means > 0)]
    fallback = float(positive.mean()) if positive.size else 1.0

    chol = np.zeros_like(covs)
    eps_used = np.full(N_BYTE_CLASSES, np.nan)
    for c in np.flatnonzero(profiled):
        scale = diag_means[c] if diag_means[c] > 0 else fallback
        chol[c], eps_used[c] = _regularized_cholesky(covs[c], scale, reg_epsilon, max_retries)
    return TemplateModel(means, chol, profiled, eps_used)


def template_log_scores(model: TemplateModel, x: np.ndarray) -> np.ndarray:
    """Gaussian log-densities of PoI-reduced traces, shape ``(N, 256)``.

    Computed through the Cholesky factors, so nothing underflows.
    Unprofiled classes score ``-inf``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.dim:
        raise ValueError(f"traces have {x.shape[1]} PoI samples, templates expect {model.dim}")
    d = model.dim
    out = np.full((x.shape[0], N_BYTE_CLASSES), UNPROFILED_SCORE)
    const = 0.5 * d * np.log(2 * np.pi)
    for c in np.flatnonzero(model.profiled):
        L = model.chol[c]
        z = solve_triangular(L, (x - model.means[c]).T, lower=True, check_finite=False)
        logdet = np.log(np.diagonal(L)).sum()
        out[:, c] = -0.5 * np.einsum("ij,ij->j", z, z) - logdet - const
    return out
