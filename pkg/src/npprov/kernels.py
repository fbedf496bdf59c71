"""Fixed covariance kernels, exact GP sampling and the GP posterior oracle."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import rng as _rng

JITTER = 1e-8
MAX_JITTER = 1e-6
LOG_2PI = float(np.log(2 * np.pi))


class DegenerateInputError(ValueError):
    """A covariance matrix stayed non-positive-definite after jitter escalation."""


class KernelSpec(enum.Enum):
    EQ = "eq"
    MATERN52 = "matern"
    WEAKLY_PERIODIC = "weakly-periodic"

    @classmethod
    def parse(cls, name: str) -> "KernelSpec":
        key = name.strip().lower().replace("_", "-")
        aliases = {"matern52": "matern", "matern-52": "matern", "weaklyperiodic": "weakly-periodic"}
        return cls(aliases.get(key, key))


def _eq(x, xp):
    return np.exp(-0.5 * ((x - xp) / 0.25) ** 2)


def _matern52(x, xp):
    d = 4.0 * np.abs(x - xp)
    r = np.sqrt(5.0) * d
    return (1.0 + r + 5.0 / 3.0 * d**2) * np.exp(-r)


def _weakly_periodic(x, xp):
    w = 8 * np.pi
    f1 = np.cos(w * x) - np.cos(w * xp)
    f2 = np.sin(w * x) - np.sin(w * xp)
    return np.exp(-0.5 * f1**2 - 0.5 * f2**2) * np.exp(-0.125 * (x - xp) ** 2)


_KERNELS = {
    KernelSpec.EQ: _eq,
    KernelSpec.MATERN52: _matern52,
    KernelSpec.WEAKLY_PERIODIC: _weakly_periodic,
}


def kernel_eval(spec: KernelSpec, x, xp):
    """Kernel value(s); broadcasts over array arguments."""
    return _KERNELS[spec](np.asarray(x, dtype=np.float64), np.asarray(xp, dtype=np.float64))


def gram(spec: KernelSpec, x, xp) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    xp = np.asarray(xp, dtype=np.float64).reshape(-1)
    if x.size == 0 or xp.size == 0:
        raise ValueError("gram needs nonempty inputs")
    return kernel_eval(spec, x[:, None], xp[None, :])


def _cholesky(k: np.ndarray) -> np.ndarray:
    eye = np.eye(k.shape[0])
    jitter = JITTER
    while jitter <= MAX_JITTER * (1 + 1e-9):
        try:
            return np.linalg.cholesky(k + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10
    raise DegenerateInputError(
        f"covariance of size {k.shape[0]} is not positive definite even with jitter {MAX_JITTER:g}"
    )


def gp_sample(spec: KernelSpec, x, seed) -> np.ndarray:
    """One zero-mean GP draw at ``x``.

    ``seed`` is an integer or a tuple of integers keying a counter-based
    stream; equal seeds give bit-identical draws.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("gp_sample needs at least one position")
    chol = _cholesky(gram(spec, x, x))
    key = seed if isinstance(seed, tuple) else (seed,)
    z = _rng.stream(*key, _rng.GP_VALUES).standard_normal(x.size)
    return chol @ z


@dataclass(frozen=True)
class GaussianPrediction:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape:
            raise ValueError(f"mean {self.mean.shape} and std {self.std.shape} differ in shape")


def gp_posterior(spec: KernelSpec, xc, yc, xt) -> GaussianPrediction:
    """Exact noiseless posterior marginals at ``xt`` given context ``(xc, yc)``."""
    xc = np.asarray(xc, dtype=np.float64).reshape(-1)
    yc = np.asarray(yc, dtype=np.float64).reshape(-1)
    xt = np.asarray(xt, dtype=np.float64).reshape(-1)
    if xt.size == 0:
        raise ValueError("gp_posterior needs at least one target")
    prior_var = kernel_eval(spec, xt, xt)
    if xc.size == 0:
        return GaussianPrediction(np.zeros_like(xt), np.sqrt(prior_var + JITTER))
    chol = _cholesky(gram(spec, xc, xc))
    k_star = gram(spec, xc, xt)
    alpha = linalg.cho_solve((chol, True), yc)
    mean = k_star.T @ alpha
    v = linalg.solve_triangular(chol, k_star, lower=True)
    var = prior_var - np.sum(v * v, axis=0)
    return GaussianPrediction(mean, np.sqrt(np.maximum(var, 0.0) + JITTER))


def gaussian_loglik(y, pred: GaussianPrediction) -> float:
    """Per-point average Gaussian log-density of ``y`` under ``pred``."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    mean = np.asarray(pred.mean, dtype=np.float64).reshape(-1)
    std = np.asarray(pred.std, dtype=np.float64).reshape(-1)
    if y.shape != mean.shape:
        raise ValueError(f"targets {y.shape} and prediction {mean.shape} differ in shape")
    if np.any(std <= 0):
        raise ValueError("standard deviations must be strictly positive")
    z = (y - mean) / std
    return float(np.mean(-0.5 * LOG_2PI - np.log(std) - 0.5 * z * z))
