"""Fréchet distance between Gaussian fits of feature sets."""

from __future__ import annotations

import numpy as np

REG_EPS = 1e-6


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False)
    return mu, np.atleast_2d(sigma)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """Tr((A B)^{1/2}) for PSD A, B via the symmetric form A^{1/2} B A^{1/2}."""
    ra = _psd_sqrt(a)
    m = ra @ b @ ra
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def _symmetric_trace_sqrt(a: np.ndarray, b: np.ndarray) -> float:
    # average both orders so d(a, b) == d(b, a) bit for bit
    return (_trace_sqrt_product(a, b) + _trace_sqrt_product(b, a)) / 2


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = 0.0) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}) with optional eps*I added to both."""
    mu1, mu2 = np.asarray(mu1, np.float64), np.asarray(mu2, np.float64)
    s1 = np.atleast_2d(np.asarray(sigma1, np.float64))
    s2 = np.atleast_2d(np.asarray(sigma2, np.float64))
    if eps:
        eye = np.eye(len(s1))
        s1, s2 = s1 + eps * eye, s2 + eps * eye
    diff = mu1 - mu2
    value = diff @ diff + np.trace(s1) + np.trace(s2) - 2 * _symmetric_trace_sqrt(s1, s2)
    return max(float(value), 0.0)


def frechet_from_features(f1: np.ndarray, f2: np.ndarray, eps: float = REG_EPS) -> tuple[float, bool]:
    """Distance between two (n_i, d) feature sets.

    When either set has fewer samples than dimensions, both covariances get
    ``eps * I`` and the second element of the result is True. In that case the
    computation is done exactly inside the span of the centred samples: both
    covariances vanish on its orthogonal complement, where the regularized
    product is ``eps**2 * I`` and contributes ``eps`` per dimension.
    """
    f1 = np.asarray(f1, np.float64)
    f2 = np.asarray(f2, np.float64)
    n1, d = f1.shape
    n2 = f2.shape[0]
    if n1 < 2 or n2 < 2:
        raise ValueError("need at least two feature vectors per set")
    mu1, mu2 = f1.mean(0), f2.mean(0)
    if n1 > d and n2 > d:
        s1, s2 = np.cov(f1, rowvar=False), np.cov(f2, rowvar=False)
        return frechet_distance(mu1, s1, mu2, s2), False

    x1 = (f1 - mu1) / np.sqrt(n1 - 1)
    x2 = (f2 - mu2) / np.sqrt(n2 - 1)
    stacked = np.concatenate([x1, x2]).T  # (d, n1 + n2)
    q, _ = np.linalg.qr(stacked)
    r = q.shape[1]
    p1, p2 = x1 @ q, x2 @ q
    eye = np.eye(r)
    a = p1.T @ p1 + eps * eye
    b = p2.T @ p2 + eps * eye
    diff = mu1 - mu2
    tr1 = float((x1 * x1).sum()) + eps * d
    tr2 = float((x2 * x2).sum()) + eps * d
    tr_sqrt = _symmetric_trace_sqrt(a, b) + eps * (d - r)
    value = diff @ diff + tr1 + tr2 - 2 * tr_sqrt
    return max(float(value), 0.0), True
