"""Synthetic-data quality (IS, FID on victim features) and model agreement metrics.

Both image-quality scores use the victim classifier in place of an Inception
network: IS reads its softmax outputs, FID reads the activations entering its
last dense layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import LabeledDataset
from .errors import DimensionError, DomainError
from .models import Network, argmax_rows

PROB_FLOOR = 1e-12


@dataclass
class FeatureExtract:
    network: Network

    @property
    def tap_point(self) -> int:
        return self.network.feature_layer()

    def __call__(self, x, batch_size: int = 4096) -> np.ndarray:
        from . import tensor as T

        x = np.asarray(x, dtype=np.float64)
        out = []
        with T.no_grad():
            for start in range(0, len(x), batch_size):
                out.append(self.network.features(x[start : start + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, 0))


@dataclass
class GaussianSummary:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        d = self.mu.shape[0]
        if self.sigma.shape != (d, d):
            raise DimensionError(f"sigma shape {self.sigma.shape} does not match mean length {d}")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def inception_score_from_probs(probs: np.ndarray) -> float:
    """exp(mean_x KL(p(y|x) || p(y))) with the marginal taken over the given rows."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise DomainError("inception score needs a non-empty [n, K] probability matrix")
    if p.shape[0] < 2:
        raise DomainError("inception score needs at least 2 samples")
    marginal = p.mean(axis=0)
    pc = np.maximum(p, PROB_FLOOR)
    mc = np.maximum(marginal, PROB_FLOOR)
    kl = (p * (np.log(pc) - np.log(mc))).sum(axis=1)
    return float(np.exp(kl.mean()))


def inception_score(model: Network, samples) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise DomainError("inception score of an empty sample set")
    return inception_score_from_probs(model.predict_proba(samples))


def gaussian_summary(features) -> GaussianSummary:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise DimensionError("features must be an [n, d] matrix")
    if f.shape[0] < 2:
        raise DomainError("need at least 2 feature rows for a covariance")
    mu = f.mean(axis=0)
    centered = f - mu
    s = centered.T @ centered / (f.shape[0] - 1)
    return GaussianSummary(mu, (s + s.T) / 2)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvectors in columns, so
    ``a ≈ V @ diag(w) @ V.T``.  Converges when the off-diagonal Frobenius
    norm falls below ``tol`` times the full norm.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    a = (a + a.T) / 2
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n < 2 or scale == 0.0:
        return np.diag(a).copy(), v
    for _ in range(max_sweeps):
        off = np.linalg.norm(a - np.diag(np.diag(a)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
    return np.diag(a).copy(), v


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to zero."""
    w, v = jacobi_eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(sa: np.ndarray, sb: np.ndarray) -> float:
    """Tr((Σa Σb)^{1/2}) computed as Tr((√Σa Σb √Σa)^{1/2})."""
    root = sqrtm_psd(sa)
    inner = root @ sb @ root
    w, _ = jacobi_eigh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def fid(a: GaussianSummary, b: GaussianSummary) -> float:
    if a.dim != b.dim:
        raise DimensionError(f"summaries have dimensions {a.dim} and {b.dim}")
    diff = a.mu - b.mu
    return float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * trace_sqrt_product(a.sigma, b.sigma))


def feature_fid(model: Network, x_a, x_b) -> float:
    extract = FeatureExtract(model)
    return fid(gaussian_summary(extract(x_a)), gaussian_summary(extract(x_b)))


def accuracy(model: Network, dataset: LabeledDataset) -> float:
    return float(np.mean(model.predict(dataset.inputs) == dataset.labels))


def agreement(f_a: Network, f_b: Network, inputs) -> float:
    inputs = np.asarray(inputs, dtype=np.float64)
    return float(np.mean(argmax_rows(f_a.predict_proba(inputs)) == argmax_rows(f_b.predict_proba(inputs))))


def quality_report(victim: Network, reference, sets: dict[str, np.ndarray]) -> dict[str, dict[str, float]]:
    """IS and FID for each named sample set, FID measured against ``reference`` inputs."""
    extract = FeatureExtract(victim)
    ref = gaussian_summary(extract(reference))
    out = {}
    for tag in sorted(sets):
        x = np.asarray(sets[tag], dtype=np.float64)
        out[tag] = {
            "fid": fid(ref, gaussian_summary(extract(x))),
            "is": inception_score(victim, x),
        }
    return out


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
