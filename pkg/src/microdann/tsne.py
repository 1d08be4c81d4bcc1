"""Exact (quadratic) t-SNE."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import InvalidData

LEARNING_RATE = 200.0
EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_SWITCH = 250
MIN_GAIN = 0.01


@dataclass
class TsnePoint:
    coords: tuple[float, float]
    class_label: int
    domain_label: int


@dataclass
class TsneResult:
    coords: np.ndarray
    kl_initial: float
    kl_final: float
    row_perplexity: np.ndarray
    conditional: np.ndarray = field(repr=False)

    def points(self, class_labels, domain_labels) -> list[TsnePoint]:
        return [
            TsnePoint((float(x), float(y)), int(c), int(d))
            for (x, y), c, d in zip(self.coords, class_labels, domain_labels)
        ]


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    # shift by the smallest distance so exp() never underflows to all-zero
    p = np.exp(-(d - d.min()) * beta)
    s = p.sum()
    p /= s
    h = float(beta * np.dot(d - d.min(), p) + np.log(s))
    return h, p


def conditional_affinities(sq_dist: np.ndarray, perplexity: float, tol: float = 1e-2,
                           max_steps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise P_{j|i} with each row's perplexity calibrated by bisection on beta = 1/(2 sigma^2).

    Returns the conditional matrix and the achieved perplexity per row.
    """
    n = sq_dist.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    achieved = np.zeros(n)
    for i in range(n):
        d = np.delete(sq_dist[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        h, row = _row_entropy(d, beta)
        for _ in range(max_steps):
            if abs(h - target) <= tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = beta / 2 if lo == 0.0 else (beta + lo) / 2
            h, row = _row_entropy(d, beta)
        P[i, np.arange(n) != i] = row
        achieved[i] = np.exp(h)
    return P, achieved


def _kl(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def _student_q(Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    return num / num.sum(), num


def tsne(embeddings, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0) -> TsneResult:
    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    if n < 3:
        raise InvalidData(f"t-SNE needs at least 3 points, got {n}")
    if not 0 < perplexity < n:
        raise InvalidData(f"perplexity {perplexity} must lie in (0, {n})")

    cond, achieved = conditional_affinities(squareform(pdist(X, "sqeuclidean")), perplexity)
    P = (cond + cond.T) / (2 * n)
    P = np.maximum(P, 1e-300)
    np.fill_diagonal(P, 0.0)

    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    kl_initial = _kl(P, _student_q(Y)[0])

    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iterations):
        exaggeration = EXAGGERATION if it < EXAGGERATION_ITERS else 1.0
        momentum = 0.5 if it < MOMENTUM_SWITCH else 0.8
        Q, num = _student_q(Y)
        W = (exaggeration * P - Q) * num
        grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)

        same_sign = np.sign(grad) == np.sign(velocity)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, MIN_GAIN, out=gains)
        velocity = momentum * velocity - LEARNING_RATE * gains * grad
        Y = Y + velocity
        Y -= Y.mean(axis=0)

    kl_final = _kl(P, _student_q(Y)[0])
    return TsneResult(Y, kl_initial, kl_final, achieved, cond)
