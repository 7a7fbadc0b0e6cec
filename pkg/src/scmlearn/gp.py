"""Exact Gaussian-process regression with known additive Gaussian noise.

One posterior per node mechanism. The kernel is a radial basis function
``amplitude * exp(-||x - y||^2 / (2 * bandwidth^2))`` and the observation
noise variance is fixed, so the posterior is available in closed form:

    mean(x) = k(x, X) (K + s2 I)^-1 y
    cov(x, y) = k(x, y) - k(x, X) (K + s2 I)^-1 k(X, y)

with K the Gram matrix of the data inputs X. Fitting caches a Cholesky
factor of (K + s2 I); queries reuse it, and a fitted posterior is never
mutated, so concurrent queries are safe.

Parentless nodes are the zero-dimensional case: an unknown constant with a
Gaussian prior, handled by :func:`constant_posterior`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

__all__ = [
    "IllConditionedError",
    "Kernel",
    "RegressionData",
    "NodePosterior",
    "kernel_eval",
    "kernel_matrix",
    "fit_posterior",
    "posterior_mean_var",
    "constant_posterior",
    "ConstantPosterior",
]

# Jitter added to the Gram diagonal: start small, double on factorisation
# failure, give up past the cap. The noise variances in play are orders of
# magnitude larger, so this never distorts results.
_BASE_JITTER = 1e-10
_MAX_JITTER = 1e-6


class IllConditionedError(RuntimeError):
    """Gram matrix could not be factorised even at maximum jitter."""


@dataclass(frozen=True)
class Kernel:
    """RBF kernel; ``amplitude`` is the prior variance k(x, x)."""

    bandwidth: float
    amplitude: float = 1.0
    kind: str = "rbf"

    def __post_init__(self):
        if self.kind != "rbf":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if not (self.bandwidth > 0 and math.isfinite(self.bandwidth)):
            raise ValueError("bandwidth must be positive and finite")
        if not (self.amplitude > 0 and math.isfinite(self.amplitude)):
            raise ValueError("amplitude must be positive and finite")


def kernel_eval(kernel: Kernel, x: Sequence[float], y: Sequence[float]) -> float:
    """Kernel value at a single pair of points of equal dimension."""
    xa = np.asarray(x, dtype=float).reshape(1, -1)
    ya = np.asarray(y, dtype=float).reshape(1, -1)
    if xa.shape[1] != ya.shape[1]:
        raise ValueError(f"dimension mismatch: {xa.shape[1]} vs {ya.shape[1]}")
    return float(kernel_matrix(kernel, xa, ya)[0, 0])


def kernel_matrix(kernel: Kernel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Cross Gram matrix, shape (len(x), len(y))."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"incompatible input shapes {x.shape} and {y.shape}")
    sq = (
        np.sum(x * x, axis=1)[:, None]
        + np.sum(y * y, axis=1)[None, :]
        - 2.0 * (x @ y.T)
    )
    np.maximum(sq, 0.0, out=sq)
    return kernel.amplitude * np.exp(-sq / (2.0 * kernel.bandwidth**2))


@dataclass(frozen=True)
class RegressionData:
    """Input/output pairs for one node plus the known noise variance."""

    inputs: np.ndarray
    outputs: np.ndarray
    noise_var: float

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        outputs = np.asarray(self.outputs, dtype=float).ravel()
        if inputs.ndim == 1:
            inputs = inputs.reshape(-1, 1) if inputs.size else inputs.reshape(0, 0)
        if inputs.ndim != 2:
            raise ValueError(f"inputs must be a 2-d array, got shape {inputs.shape}")
        if len(inputs) != len(outputs):
            raise ValueError("inputs and outputs must have equal length")
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(outputs))):
            raise ValueError("regression data must be finite")
        if not (self.noise_var > 0 and math.isfinite(self.noise_var)):
            raise ValueError("noise variance must be positive and finite")
        inputs.setflags(write=False)
        outputs.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)

    @classmethod
    def empty(cls, dim: int, noise_var: float) -> RegressionData:
        return cls(np.empty((0, dim)), np.empty(0), noise_var)

    @property
    def size(self) -> int:
        return len(self.outputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


class NodePosterior:
    """Fitted GP posterior for one node; immutable after construction.

    Use :func:`fit_posterior` to build one. With no data the posterior is
    the prior (zero mean, variance equal to the kernel amplitude).
    """

    def __init__(self, kernel: Kernel, data: RegressionData):
        self.kernel = kernel
        self.data = data
        if data.size == 0:
            self._chol = None
            self._alpha = np.empty(0)
            self.jitter = 0.0
            return
        gram = kernel_matrix(kernel, data.inputs, data.inputs)
        diag = np.arange(data.size)
        gram[diag, diag] += data.noise_var
        jitter = _BASE_JITTER * kernel.amplitude
        while True:
            try:
                trial = gram.copy()
                trial[diag, diag] += jitter
                chol = cholesky(trial, lower=True)
                break
            except np.linalg.LinAlgError:
                jitter *= 2.0
                if jitter > _MAX_JITTER * kernel.amplitude:
                    raise IllConditionedError(
                        f"Gram matrix of {data.size} points failed to factorise"
                    ) from None
        self._chol = chol
        self._alpha = cho_solve((chol, True), data.outputs)
        self.jitter = jitter

    def mean_var(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and pointwise variance at an (m, dim) array.

        The variance is clamped to [0, amplitude] against roundoff.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.data.dim:
            raise ValueError(f"query dimension {x.shape[1]} != data dimension {self.data.dim}")
        if self.data.size == 0:
            return np.zeros(len(x)), np.full(len(x), self.kernel.amplitude)
        kxz = kernel_matrix(self.kernel, self.data.inputs, x)
        mean = kxz.T @ self._alpha
        v = solve_triangular(self._chol, kxz, lower=True)
        var = self.kernel.amplitude - np.sum(v * v, axis=0)
        return mean, np.clip(var, 0.0, self.kernel.amplitude)

    def cov(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Posterior cross-covariance matrix between two query sets."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        prior = kernel_matrix(self.kernel, x, y)
        if self.data.size == 0:
            return prior
        kxa = kernel_matrix(self.kernel, self.data.inputs, x)
        kya = kernel_matrix(self.kernel, self.data.inputs, y)
        return prior - kxa.T @ cho_solve((self._chol, True), kya)

    def solve_gram(self, rhs: np.ndarray) -> np.ndarray:
        """Apply (K + noise I)^-1 to columns of ``rhs``."""
        if self.data.size == 0:
            return np.zeros_like(rhs)
        return cho_solve((self._chol, True), rhs)


def fit_posterior(kernel: Kernel, data: RegressionData) -> NodePosterior:
    """Condition the GP prior on ``data``; deterministic for fixed inputs."""
    return NodePosterior(kernel, data)


def posterior_mean_var(posterior: NodePosterior, x: Sequence[float]) -> tuple[float, float]:
    """Posterior mean and variance at a single input point."""
    arr = np.asarray(x, dtype=float).reshape(1, -1)
    mean, var = posterior.mean_var(arr)
    return float(mean[0]), float(var[0])


def constant_posterior(
    prior_var: float, noise_var: float, observations: Sequence[float]
) -> tuple[float, float]:
    """Conjugate update for an unknown constant with a zero-mean Gaussian prior.

    Each observation is the constant plus independent Gaussian noise of known
    variance. Returns the posterior (mean, variance); with no observations
    this is the prior (0, prior_var).
    """
    if not (prior_var > 0 and noise_var > 0):
        raise ValueError("prior and noise variances must be positive")
    obs = np.asarray(observations, dtype=float)
    if obs.size == 0:
        return 0.0, float(prior_var)
    var = 1.0 / (1.0 / prior_var + obs.size / noise_var)
    mean = var * float(np.sum(obs)) / noise_var
    return mean, var


@dataclass(frozen=True)
class ConstantPosterior:
    """Posterior over a parentless node's constant, with its provenance.

    The posterior variance depends only on the observation count, so the
    effect of one more observation is available without knowing its value.
    """

    prior_var: float
    noise_var: float
    count: int
    mean: float
    var: float

    @classmethod
    def fit(cls, prior_var: float, noise_var: float, observations: Sequence[float]):
        mean, var = constant_posterior(prior_var, noise_var, observations)
        return cls(prior_var, noise_var, len(np.asarray(observations).ravel()), mean, var)

    def var_after_more(self, extra: int = 1) -> float:
        return 1.0 / (1.0 / self.prior_var + (self.count + extra) / self.noise_var)
