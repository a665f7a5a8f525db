"""Tree-structured Parzen Estimator over a bounded box, plus a uniform baseline.

Parameters are rescaled to the unit cube.  The good/bad densities are
mixtures of product Gaussians truncated to the cube, with one shared
bandwidth per dimension (Scott's rule) and a broad prior component, so a
suggestion can never leave the bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.special import log_ndtr, logsumexp
from scipy.stats import truncnorm

DEFAULT_DIMS = (("x_mm", 113.0, 127.0), ("y_mm", 148.0, 160.0),
                ("z_mm", 0.0, 2.0), ("voltage_v", 150.0, 500.0))


@dataclass(frozen=True)
class ParamSpace:
    dims: tuple[tuple[str, float, float], ...] = DEFAULT_DIMS

    def __post_init__(self):
        if not self.dims:
            raise ValueError("parameter space needs at least one dimension")
        names = [d[0] for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError("duplicate dimension names")
        for name, lo, hi in self.dims:
            if not (math.isfinite(lo) and math.isfinite(hi)) or not lo < hi:
                raise ValueError(f"dimension {name}: need finite lower < upper, got [{lo}, {hi}]")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(d[0] for d in self.dims)

    @property
    def lows(self) -> np.ndarray:
        return np.array([d[1] for d in self.dims])

    @property
    def highs(self) -> np.ndarray:
        return np.array([d[2] for d in self.dims])

    def to_unit(self, params: Mapping[str, float]) -> np.ndarray:
        x = np.array([params[n] for n in self.names], dtype=float)
        return (x - self.lows) / (self.highs - self.lows)

    def from_unit(self, u: np.ndarray) -> dict[str, float]:
        x = self.lows + np.clip(u, 0.0, 1.0) * (self.highs - self.lows)
        x = np.clip(x, self.lows, self.highs)
        return {n: float(v) for n, v in zip(self.names, x)}

    def contains(self, params: Mapping[str, float]) -> bool:
        return all(lo <= params[n] <= hi for n, lo, hi in self.dims)


@dataclass(frozen=True)
class Observation:
    params: Mapping[str, float]
    objective: float
    failed: bool = False


class ObservationHistory:
    """Append-only record of evaluated points."""

    def __init__(self, observations: Sequence[Observation] = ()):
        self._obs: list[Observation] = list(observations)

    def append(self, params: Mapping[str, float], objective: float, failed: bool = False) -> None:
        if not math.isfinite(objective):
            raise ValueError("objective must be finite")
        self._obs.append(Observation(dict(params), float(objective), bool(failed)))

    def snapshot(self) -> tuple[Observation, ...]:
        return tuple(self._obs)

    def __len__(self) -> int:
        return len(self._obs)

    def __iter__(self) -> Iterator[Observation]:
        return iter(tuple(self._obs))


def uniform_suggest(space: ParamSpace, rng: np.random.Generator) -> dict[str, float]:
    return space.from_unit(rng.random(len(space.dims)))


class UniformSampler:
    def suggest(self, space: ParamSpace, history: ObservationHistory,
                rng: np.random.Generator) -> dict[str, float]:
        return uniform_suggest(space, rng)


class _Parzen:
    """Truncated product-Gaussian mixture on the unit cube."""

    def __init__(self, points: np.ndarray, prior_weight: float, scale: float, min_bandwidth: float):
        n, d = points.shape
        # Scott's n^(-1/(d+4)) factor on a fixed reference spread rather than
        # the sample spread, which collapses once the good set clusters
        bw = np.full(d, max(scale * n ** (-1.0 / (d + 4)), min_bandwidth))
        self.mu = np.vstack([points, np.full((1, d), 0.5)])
        self.sigma = np.vstack([np.tile(bw, (n, 1)), np.ones((1, d))])
        w = np.append(np.ones(n), prior_weight)
        self.logw = np.log(w / w.sum())
        a = (0.0 - self.mu) / self.sigma
        b = (1.0 - self.mu) / self.sigma
        # log of the mass each component keeps inside [0, 1]
        self.lognorm = np.log(np.maximum(np.exp(log_ndtr(b)) - np.exp(log_ndtr(a)), 1e-300))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.choice(self.mu.shape[0], size=size, p=np.exp(self.logw))
        mu, sigma = self.mu[comp], self.sigma[comp]
        a, b = (0.0 - mu) / sigma, (1.0 - mu) / sigma
        out = truncnorm.rvs(a, b, loc=mu, scale=sigma, random_state=rng)
        return np.clip(out, 0.0, 1.0)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        z = (x[:, None, :] - self.mu[None]) / self.sigma[None]
        per_dim = -0.5 * z * z - 0.5 * math.log(2 * math.pi) - np.log(self.sigma)[None] - self.lognorm[None]
        return logsumexp(per_dim.sum(axis=2) + self.logw[None], axis=1)


@dataclass(frozen=True)
class TPESampler:
    gamma: float = 0.25
    n_startup: int = 20
    n_candidates: int = 24
    prior_weight: float = 1.0
    bandwidth_scale: float = 0.2  # in unit-cube coordinates
    min_bandwidth: float = 0.02
    max_good: int = 25

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.n_startup < 0 or self.n_candidates < 1:
            raise ValueError("n_startup >= 0 and n_candidates >= 1 required")
        if min(self.min_bandwidth, self.bandwidth_scale, self.prior_weight) <= 0:
            raise ValueError("bandwidths and prior_weight must be positive")
        if self.max_good < 1:
            raise ValueError("max_good must be >= 1")

    def suggest(self, space: ParamSpace, history: ObservationHistory,
                rng: np.random.Generator) -> dict[str, float]:
        obs = history.snapshot() if isinstance(history, ObservationHistory) else tuple(history)
        if len(obs) < max(self.n_startup, 2):
            return uniform_suggest(space, rng)
        y = np.array([o.objective for o in obs])
        if np.ptp(y) == 0.0:
            return uniform_suggest(space, rng)
        X = np.array([space.to_unit(o.params) for o in obs])
        order = np.argsort(-y, kind="stable")
        n_good = min(max(1, math.ceil(self.gamma * len(obs))), self.max_good)
        # observations tied at the worst value carry no ranking information
        n_good = min(n_good, int(np.count_nonzero(y > y.min())))
        good = _Parzen(X[order[:n_good]], self.prior_weight, self.bandwidth_scale, self.min_bandwidth)
        bad = _Parzen(X[order[n_good:]], self.prior_weight, self.bandwidth_scale, self.min_bandwidth)
        cand = good.sample(rng, self.n_candidates)
        score = good.logpdf(cand) - bad.logpdf(cand)
        return space.from_unit(cand[int(np.argmax(score))])
