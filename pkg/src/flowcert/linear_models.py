"""Models linear in the parameters, F_h(x) = h Phi(x), on frozen random ReLU features.

Binary tasks use a single output with sign readout (labels in {-1, +1});
multi-class tasks use ``K_out`` outputs with argmax readout (labels are class
ids) and store ``h`` flattened from a ``K_out x w`` matrix.

For every surrogate the parameter-space Laplacian is ``|Phi|^2`` times the
Laplacian of the per-example loss with respect to the logits, averaged over
the batch, because the logits are linear in ``h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .flow_engine import Objective


class SingularSystem(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    """x -> ReLU(x W) with ``W`` of shape (d_in, w), frozen after sampling."""

    W: np.ndarray

    @classmethod
    def random(cls, d_in: int, width: int, seed) -> "FeatureMap":
        rng = np.random.Generator(np.random.PCG64(seed))
        return cls(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, width)))

    @property
    def d_in(self) -> int:
        return self.W.shape[0]

    @property
    def width(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d_in:
            raise ValueError(f"expected inputs of length {self.d_in}, got {x.shape[-1]}")
        return np.maximum(x @ self.W, 0.0)


def features(fmap: FeatureMap, x: np.ndarray) -> np.ndarray:
    return fmap(x)


def predict(h: np.ndarray, phi: np.ndarray, n_classes: int = 1) -> np.ndarray:
    """Sign readout (0 maps to +1) for one output, lowest-index argmax otherwise."""
    if n_classes == 1:
        return np.where(phi @ h >= 0.0, 1, -1)
    logits = phi @ np.reshape(h, (n_classes, -1)).T
    return np.argmax(logits, axis=1)


def zero_one_losses(h: np.ndarray, phi: np.ndarray, labels: np.ndarray,
                    n_classes: int = 1) -> tuple[float, np.ndarray]:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty dataset")
    flags = predict(h, phi, n_classes) != labels
    return float(flags.mean()), flags


# -- surrogates --------------------------------------------------------------


def linear_surrogate(h: np.ndarray, phi: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, float]:
    """Mean of -F(x) y: value -h.gamma, gradient -gamma, Laplacian 0."""
    gamma = phi.T @ y / len(y)
    return float(-h @ gamma), -gamma, 0.0


def quadratic_surrogate(h: np.ndarray, phi: np.ndarray, y: np.ndarray, alpha: float = 1.0,
                        beta: float = 1.0) -> tuple[float, np.ndarray, float]:
    """alpha |h|^2 / 2N + mean of (F - beta y)^2 / 2; Laplacian is the constant Gamma."""
    m, N = len(y), h.size
    resid = phi @ h - beta * y
    value = alpha * float(h @ h) / (2 * N) + 0.5 * float(resid @ resid) / m
    grad = alpha * h / N + phi.T @ resid / m
    lap = alpha + float(np.einsum("ij,ij->", phi, phi)) / m
    return value, grad, lap


def _log_softmax_parts(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    z = e.sum(axis=1, keepdims=True)
    lse = (shift + np.log(z))[:, 0]
    return lse, e / z


def cross_entropy_surrogate(h: np.ndarray, phi: np.ndarray, labels: np.ndarray,
                            n_classes: int) -> tuple[float, np.ndarray, float]:
    m = len(labels)
    H = np.reshape(h, (n_classes, -1))
    logits = phi @ H.T
    lse, probs = _log_softmax_parts(logits)
    rows = np.arange(m)
    value = float(np.mean(lse - logits[rows, labels]))
    probs_minus = probs.copy()
    probs_minus[rows, labels] -= 1.0
    grad = (probs_minus.T @ phi / m).ravel()
    sq = np.einsum("ij,ij->i", phi, phi)
    lap = float(np.mean(sq * (1.0 - np.einsum("ij,ij->i", probs, probs))))
    return value, grad, lap


class _BatchObjective(Objective):
    def __init__(self, phi: np.ndarray, labels: np.ndarray):
        self.phi = np.asarray(phi, dtype=float)
        self.labels = np.asarray(labels)
        if self.phi.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on the number of examples")
        if self.labels.size == 0:
            raise ValueError("empty batch")
        self.m = len(self.labels)


class LinearSurrogate(_BatchObjective):
    def __init__(self, phi, labels):
        super().__init__(phi, labels)
        self.gamma = self.phi.T @ self.labels.astype(float) / self.m

    def value(self, h):
        return float(-h @ self.gamma)

    def gradient(self, h):
        return -self.gamma

    def laplacian(self, h):
        return 0.0


class QuadraticSurrogate(_BatchObjective):
    def __init__(self, phi, labels, alpha: float = 1.0, beta: float = 1.0):
        super().__init__(phi, labels)
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        self.alpha, self.beta = float(alpha), float(beta)
        self.y = self.labels.astype(float)
        self.N = self.phi.shape[1]
        self.Gamma = self.alpha + float(np.einsum("ij,ij->", self.phi, self.phi)) / self.m

    def value(self, h):
        r = self.phi @ h - self.beta * self.y
        return self.alpha * float(h @ h) / (2 * self.N) + 0.5 * float(r @ r) / self.m

    def gradient(self, h):
        r = self.phi @ h - self.beta * self.y
        return self.alpha * h / self.N + self.phi.T @ r / self.m

    def laplacian(self, h):
        return self.Gamma


class CrossEntropySurrogate(_BatchObjective):
    def __init__(self, phi, labels, n_classes: int):
        super().__init__(phi, labels)
        if n_classes < 2:
            raise ValueError("cross-entropy needs at least two classes")
        self.labels = self.labels.astype(np.intp)
        if self.labels.min() < 0 or self.labels.max() >= n_classes:
            raise ValueError("labels must be class ids in [0, n_classes)")
        self.n_classes = n_classes
        self._rows = np.arange(self.m)
        self._sq = np.einsum("ij,ij->i", self.phi, self.phi)

    def _parts(self, h):
        logits = self.phi @ np.reshape(h, (self.n_classes, -1)).T
        lse, probs = _log_softmax_parts(logits)
        return logits, lse, probs

    def value(self, h):
        logits, lse, _ = self._parts(h)
        return float(np.mean(lse - logits[self._rows, self.labels]))

    def gradient(self, h):
        return self.gradient_and_laplacian(h)[0]

    def laplacian(self, h):
        _, _, probs = self._parts(h)
        return self.example_laplacians(probs).mean()

    def example_laplacians(self, probs: np.ndarray) -> np.ndarray:
        return self._sq * (1.0 - np.einsum("ij,ij->i", probs, probs))

    def gradient_and_laplacian(self, h):
        _, _, probs = self._parts(h)
        lap = float(self.example_laplacians(probs).mean())
        probs[self._rows, self.labels] -= 1.0
        grad = (probs.T @ self.phi / self.m).ravel()
        return grad, lap


def make_surrogate(kind: str, phi: np.ndarray, labels: np.ndarray, alpha: float = 1.0,
                   beta: float = 1.0, n_classes: int = 2) -> Objective:
    if kind == "linear":
        return LinearSurrogate(phi, labels)
    if kind == "quadratic":
        return QuadraticSurrogate(phi, labels, alpha, beta)
    if kind == "cross_entropy":
        return CrossEntropySurrogate(phi, labels, n_classes)
    raise ValueError(f"unknown surrogate {kind!r}")


# -- closed forms --------------------------------------------------------------


@dataclass(frozen=True)
class SufficientStats:
    """gamma = mean y Phi, Gamma = alpha + mean |Phi|^2, Theta = alpha/N Id + mean Phi Phi^T."""

    gamma: np.ndarray
    Gamma: float
    Theta: np.ndarray | None
    alpha: float = 0.0

    @cached_property
    def theta_eigh(self) -> tuple[np.ndarray, np.ndarray]:
        if self.Theta is None:
            raise ValueError("Theta was not computed for these statistics")
        return np.linalg.eigh(self.Theta)


def sufficient_stats(phi: np.ndarray, y: np.ndarray, alpha: float = 0.0,
                     with_theta: bool = True) -> SufficientStats:
    phi = np.asarray(phi, dtype=float)
    y = np.asarray(y, dtype=float)
    m, w = phi.shape
    theta = None
    if with_theta:
        theta = phi.T @ phi / m
        theta[np.diag_indices(w)] += alpha / w
        theta = 0.5 * (theta + theta.T)
    return SufficientStats(
        gamma=phi.T @ y / m,
        Gamma=alpha + float(np.einsum("ij,ij->", phi, phi)) / m,
        Theta=theta,
        alpha=alpha,
    )


def linear_analytic_flow(h0: np.ndarray, stats: SufficientStats, T: float) -> np.ndarray:
    return np.asarray(h0, dtype=float) + stats.gamma * T


def quadratic_analytic_flow(h0: np.ndarray, stats: SufficientStats, beta: float,
                            T: float) -> np.ndarray:
    """h0 + (Id - exp(-T Theta)) (Theta^{-1} beta gamma - h0), via one eigendecomposition."""
    lam, V = stats.theta_eigh
    top = float(lam.max())
    if top <= 0 or lam.min() < 1e-12 * top:
        raise SingularSystem(
            f"Theta is near-singular (eigenvalues in [{lam.min():.3e}, {top:.3e}]); use alpha > 0")
    c0 = V.T @ np.asarray(h0, dtype=float)
    fixed = (V.T @ (beta * stats.gamma)) / lam
    decay = -np.expm1(-T * lam)
    return V @ (c0 + decay * (fixed - c0))
