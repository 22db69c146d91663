"""Continuous-state process models.

A Gaussian process over ``T`` stages of dimension ``D`` is stored as one
stacked mean vector and covariance matrix; entry ``t*D + d`` belongs to
stage ``t+1``, coordinate ``d``.  The lognormal model is the elementwise
exponential of a Gaussian one and does all its conditioning in log space.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri

from .errors import BetaOutOfRange, ShapeMismatch, SingularSubCovariance

log = logging.getLogger(__name__)

SQRT_2PI = np.sqrt(2.0 * np.pi)
PSD_FLOOR = 1e-6


def norm_pdf(z):
    return np.exp(-0.5 * np.square(z)) / SQRT_2PI


def _check_beta(beta):
    if not 0.0 < beta < 1.0:
        raise BetaOutOfRange(f"beta must lie in (0, 1), got {beta}")


# --- scalar distributions ---------------------------------------------------


@dataclass(frozen=True)
class ScalarGaussian:
    mu: float
    sigma: float

    @property
    def mean(self) -> float:
        return self.mu

    def cdf(self, x):
        if self.sigma == 0:
            return (np.asarray(x) >= self.mu).astype(float)
        return ndtr((np.asarray(x) - self.mu) / self.sigma)

    def ppf(self, q):
        return self.mu + self.sigma * ndtri(q)

    def cdf_integral(self, x):
        """Antiderivative of the CDF vanishing at minus infinity."""
        x = np.asarray(x, dtype=float)
        if self.sigma == 0:
            return np.maximum(x - self.mu, 0.0)
        z = (x - self.mu) / self.sigma
        return (x - self.mu) * ndtr(z) + self.sigma * norm_pdf(z)

    def partial_expectation(self, q):
        """Integral of the quantile function over (0, q)."""
        return q * self.mu - self.sigma * norm_pdf(ndtri(q))

    def var_quantile(self, beta):
        _check_beta(beta)
        return float(self.ppf(beta))

    def avar(self, beta):
        _check_beta(beta)
        return float(self.mu - self.sigma / beta * norm_pdf(ndtri(beta)))

    def transform(self, z):
        return self.mu + self.sigma * np.asarray(z)


@dataclass(frozen=True)
class ScalarLognormal:
    """exp(N(mu, sigma^2))."""

    mu: float
    sigma: float

    @property
    def mean(self) -> float:
        return float(np.exp(self.mu + 0.5 * self.sigma**2))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            lx = np.log(np.maximum(x, 0.0))
        if self.sigma == 0:
            return (lx >= self.mu).astype(float)
        return ndtr((lx - self.mu) / self.sigma)

    def ppf(self, q):
        return np.exp(self.mu + self.sigma * ndtri(q))

    def cdf_integral(self, x):
        x = np.asarray(x, dtype=float)
        pos = np.maximum(x, 1e-300)
        if self.sigma == 0:
            return np.maximum(x - np.exp(self.mu), 0.0)
        z = (np.log(pos) - self.mu) / self.sigma
        out = pos * ndtr(z) - self.mean * ndtr(z - self.sigma)
        return np.where(x > 0, out, 0.0)

    def partial_expectation(self, q):
        return self.mean * ndtr(ndtri(q) - self.sigma)

    def var_quantile(self, beta):
        _check_beta(beta)
        return float(self.ppf(beta))

    def avar(self, beta):
        _check_beta(beta)
        return float(self.partial_expectation(beta) / beta)

    def transform(self, z):
        return np.exp(self.mu + self.sigma * np.asarray(z))


def var_quantile(dist, beta: float) -> float:
    return dist.var_quantile(beta)


def avar(dist, beta: float) -> float:
    return dist.avar(beta)


# --- conditional distributions ---------------------------------------------


@dataclass(frozen=True)
class ConditionalGaussian:
    """Gaussian (or exp-Gaussian when ``lognormal``) over ``dim`` coordinates."""

    mean: np.ndarray
    cov: np.ndarray
    lognormal: bool = False

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def chol(self) -> np.ndarray:
        return _psd_sqrt(self.cov)

    def transform(self, z) -> np.ndarray:
        """Map standard normal draws of shape (n, dim) into this distribution."""
        x = self.mean + np.asarray(z) @ self.chol.T
        return np.exp(x) if self.lognormal else x

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.transform(rng.standard_normal((n, self.dim)))

    def scalar(self, k: int = 0):
        """Marginal of coordinate ``k`` as a scalar distribution."""
        sigma = float(np.sqrt(max(self.cov[k, k], 0.0)))
        cls = ScalarLognormal if self.lognormal else ScalarGaussian
        return cls(float(self.mean[k]), sigma)

    @property
    def expectation(self) -> np.ndarray:
        if self.lognormal:
            return np.exp(self.mean + 0.5 * np.diag(self.cov))
        return self.mean


def _psd_sqrt(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(cov)
        return V * np.sqrt(np.maximum(w, 0.0))


def clip_to_psd(cov, floor: float = PSD_FLOOR) -> tuple[np.ndarray, bool]:
    """Nearest symmetric matrix with eigenvalues at least ``floor``."""
    cov = 0.5 * (np.asarray(cov, dtype=float) + np.asarray(cov, dtype=float).T)
    w, V = np.linalg.eigh(cov)
    if w.min() >= floor:
        return cov, False
    fixed = (V * np.maximum(w, floor)) @ V.T
    return 0.5 * (fixed + fixed.T), True


# --- process models --------------------------------------------------------


class GaussianProcessModel:
    """Gaussian process with stacked mean (T*D,) and covariance (T*D, T*D)."""

    lognormal = False
    kind = "gaussian"

    def __init__(self, mean, cov, D: int = 1):
        mean = np.asarray(mean, dtype=float).ravel()
        cov = np.asarray(cov, dtype=float)
        if len(mean) % D:
            raise ShapeMismatch(f"mean length {len(mean)} is not a multiple of D={D}")
        if cov.shape != (len(mean), len(mean)):
            raise ShapeMismatch(f"covariance {cov.shape} does not match mean length {len(mean)}")
        if not np.allclose(cov, cov.T, atol=1e-12, rtol=0):
            raise ShapeMismatch("covariance must be symmetric")
        self.D = int(D)
        self.T = len(mean) // self.D
        self.mean = mean
        self.cov = cov
        self.mean.setflags(write=False)
        self.cov.setflags(write=False)
        self._regression = lru_cache(maxsize=None)(self._regression_uncached)

    @classmethod
    def shared_time(cls, mean, time_cov, D: int | None = None):
        """Coordinates share one T x T time covariance and are mutually independent."""
        mean = np.asarray(mean, dtype=float)
        if mean.ndim == 1:
            mean = mean[:, None] if D in (None, 1) else np.repeat(mean[:, None], D, axis=1)
        D = mean.shape[1]
        cov = np.kron(np.asarray(time_cov, dtype=float), np.eye(D))
        return cls(mean.ravel(), cov, D)

    def _block(self, t0: int, t1: int) -> slice:
        """Stacked indices of stages t0..t1 (1-based, inclusive)."""
        return slice((t0 - 1) * self.D, t1 * self.D)

    def _regression_uncached(self, t0: int, t1: int):
        """Regression of stages t0..t1 on stages 1..t0-1: (B, Schur complement)."""
        head = self._block(1, t0 - 1)
        tail = self._block(t0, t1)
        C_tt = self.cov[tail, tail]
        if t0 == 1:
            return np.zeros((0, C_tt.shape[0])), C_tt
        C_hh = self.cov[head, head]
        C_ht = self.cov[head, tail]
        try:
            factor = linalg.cho_factor(C_hh)
        except linalg.LinAlgError as exc:
            raise SingularSubCovariance(f"covariance of stages 1..{t0 - 1} is singular") from exc
        B = linalg.cho_solve(factor, C_ht)
        schur = C_tt - C_ht.T @ B
        return B, 0.5 * (schur + schur.T)

    def _condition(self, t0: int, t1: int, history) -> ConditionalGaussian:
        if not 1 <= t0 <= t1 <= self.T:
            raise ValueError(f"stages {t0}..{t1} outside 1..{self.T}")
        history = np.asarray(history, dtype=float).ravel()
        if len(history) != (t0 - 1) * self.D:
            raise ShapeMismatch(f"history for stage {t0} needs {(t0 - 1) * self.D} values, got {len(history)}")
        if self.lognormal:
            history = np.log(history)
        B, schur = self._regression(t0, t1)
        mean = self.mean[self._block(t0, t1)] + (history - self.mean[self._block(1, t0 - 1)]) @ B
        return ConditionalGaussian(mean, schur, self.lognormal)

    def conditional(self, t: int, history=()) -> ConditionalGaussian:
        """Distribution of stage ``t`` given the values of stages 1..t-1."""
        return self._condition(t, t, history)

    def joint_tail_conditional(self, t: int, history=()) -> ConditionalGaussian:
        """Joint distribution of stages t..T given stages 1..t-1 (stacked)."""
        return self._condition(t, self.T, history)

    def conditional_batch(self, t: int, histories) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized stage-t conditioning (in log space for lognormal models).

        ``histories`` has shape (n, t-1, D); returns means (n, D) and the
        shared conditional covariance (D, D).
        """
        histories = np.asarray(histories, dtype=float)
        n = histories.shape[0]
        flat = histories.reshape(n, (t - 1) * self.D)
        if self.lognormal:
            flat = np.log(flat)
        B, schur = self._regression(t, t)
        means = self.mean[self._block(t, t)] + (flat - self.mean[self._block(1, t - 1)]) @ B
        return means, schur

    def sample_paths(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Joint draws, shape (n, T, D)."""
        z = rng.standard_normal((n, len(self.mean)))
        x = self.mean + z @ _psd_sqrt(self.cov).T
        if self.lognormal:
            x = np.exp(x)
        return x.reshape(n, self.T, self.D)

    def sample_path(self, rng: np.random.Generator) -> np.ndarray:
        return self.sample_paths(rng, 1)[0]

    def lipschitz_constants(self) -> np.ndarray:
        """K_t for t = 2..T: spectral norm of the one-stage regression matrix."""
        return np.array([np.linalg.norm(self._regression(t, t)[0], 2) for t in range(2, self.T + 1)])

    def tail_lipschitz_constants(self) -> np.ndarray:
        """Same for the joint tail t..T, t = 2..T."""
        return np.array([np.linalg.norm(self._regression(t, self.T)[0], 2) for t in range(2, self.T + 1)])

    def conditional_variances(self) -> np.ndarray:
        """Diagonal of the one-stage Schur complements, shape (T, D)."""
        return np.array([np.diag(self._regression(t, t)[1]) for t in range(1, self.T + 1)])

    def stage_mean(self) -> np.ndarray:
        return self.mean.reshape(self.T, self.D)

    def marginal_variances(self) -> np.ndarray:
        return np.diag(self.cov).reshape(self.T, self.D)

    def gaussian(self) -> "GaussianProcessModel":
        return self

    def to_dict(self) -> dict:
        return {"kind": self.kind, "D": self.D, "T": self.T, "mean": self.mean.tolist(), "cov": self.cov.tolist()}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def __repr__(self):
        return f"{type(self).__name__}(T={self.T}, D={self.D})"


class LognormalProcessModel(GaussianProcessModel):
    """exp of a Gaussian process; ``mean`` and ``cov`` are log-space parameters."""

    lognormal = True
    kind = "lognormal"

    def gaussian(self) -> GaussianProcessModel:
        return GaussianProcessModel(self.mean, self.cov, self.D)


def model_from_dict(data: dict) -> GaussianProcessModel:
    kind = data.get("kind", "gaussian")
    cls = {"gaussian": GaussianProcessModel, "lognormal": LognormalProcessModel}[kind]
    D = int(data.get("D", 1))
    cov = np.asarray(data["cov"], dtype=float)
    mean = np.asarray(data["mean"], dtype=float).ravel()
    if cov.shape[0] * D == len(mean) and D > 1:
        # A T x T time covariance shared across coordinates.
        cov = np.kron(cov, np.eye(D))
    model = cls(mean, cov, D)
    if "T" in data and int(data["T"]) != model.T:
        raise ShapeMismatch(f"declared T={data['T']} but parameters describe {model.T} stages")
    return model


def load_model(path) -> GaussianProcessModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


# --- experiment generators -------------------------------------------------


@dataclass
class SampledInstance:
    model: GaussianProcessModel
    branching: int
    params: dict = field(default_factory=dict)
    clipped: bool = False


def sample_bound_instance(
    rng: np.random.Generator,
    lam: float | None = None,
    D: int | None = None,
    T: int | None = None,
    b: int | None = None,
    lognormal: bool = False,
) -> SampledInstance:
    """Random Gaussian instance with the dependency-multiplier parametrization.

    Means are lam*U^D per stage; every entry of the T x T time covariance is
    lam*U (symmetrized) and repaired by eigenvalue clipping when needed.
    """
    D = int(rng.integers(1, 11)) if D is None else D
    lam = float(rng.choice([10, 20, 30])) if lam is None else lam
    T = int(rng.integers(2, 5)) if T is None else T
    b = int(rng.integers(2, 6)) if b is None else b
    mean = lam * rng.random((T, D))
    upper = np.triu(lam * rng.random((T, T)))
    time_cov = upper + np.triu(upper, 1).T
    time_cov, clipped = clip_to_psd(time_cov)
    if clipped:
        log.info("clipped a sampled covariance to the PSD cone (floor %g)", PSD_FLOOR)
    cls = LognormalProcessModel if lognormal else GaussianProcessModel
    model = cls(mean.ravel(), np.kron(time_cov, np.eye(D)), D)
    return SampledInstance(model, b, {"D": D, "lam": lam, "T": T, "b": b}, clipped)


def stationary_time_cov(T: int, variance: float, offdiag) -> np.ndarray:
    cov = np.full((T, T), 0.0)
    iu = np.triu_indices(T, 1)
    cov[iu] = offdiag
    cov = cov + cov.T
    np.fill_diagonal(cov, variance)
    return cov


def sample_inventory_params(rng: np.random.Generator, T: int | None = None, b: int | None = None) -> dict:
    """Stationary inventory instance: mean 100, variance 100, random covariances and prices."""
    T = int(rng.integers(2, 4)) if T is None else T
    b = int(rng.integers(1, 31)) if b is None else b
    off = 10.0 * rng.random(T * (T - 1) // 2)
    cov = stationary_time_cov(T, 100.0, off)
    return {
        "T": T,
        "b": b,
        "mean": np.full(T, 100.0),
        "cov": cov,
        "l": 0.1 * (1.0 - rng.random(T)),
        "h": 1.0 + rng.random(T),
    }
