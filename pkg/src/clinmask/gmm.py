"""One-dimensional Gaussian mixtures fit by EM, used to place answer options
at a controlled distance from the truth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

LOGGER = logging.getLogger(__name__)

DEFAULT_COMPONENTS = 3
DEFAULT_MAX_ITER = 200
DEFAULT_TOL = 1e-6


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood_trace: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.weights)

    def validate(self) -> None:
        if abs(self.weights.sum() - 1.0) > 1e-9 or (self.weights < 0).any():
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if (self.variances <= 0).any():
            raise ValueError("variances must be positive")
        diffs = np.diff(self.log_likelihood_trace)
        if len(diffs) and (diffs < -1e-7).any():
            raise ValueError("log-likelihood trace decreased")

    def responsibilities(self, x: float) -> np.ndarray:
        """Posterior component probabilities for a single observation."""
        log_p = (
            np.log(self.weights)
            - 0.5 * np.log(2.0 * np.pi * self.variances)
            - (x - self.means) ** 2 / (2.0 * self.variances)
        )
        log_p -= log_p.max()
        p = np.exp(log_p)
        return p / p.sum()


def _log_likelihoods(x, weights, means, variances):
    log_p = (
        np.log(weights)[None, :]
        - 0.5 * np.log(2.0 * np.pi * variances)[None, :]
        - (x[:, None] - means[None, :]) ** 2 / (2.0 * variances)[None, :]
    )
    m = log_p.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(log_p - m).sum(axis=1))
    return log_p, lse


def fit_gmm(
    values,
    k: int = DEFAULT_COMPONENTS,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
) -> GmmModel:
    """EM fit with quantile-spaced initial means.

    Initial means sit at the (2i+1)/(2k) quantiles, weights start equal and
    variances at the sample variance; variances are floored at
    max(1e-6, 1e-4 * sample variance). If the data carry fewer than ``k``
    distinct values, ``k`` is reduced to that count with a warning. ``seed``
    is accepted for interface stability; the quantile initialization makes
    the fit deterministic without it.
    """
    del seed
    x = np.asarray([v for v in values if v is not None], dtype=float)
    if x.size == 0:
        raise ValueError("cannot fit a mixture to empty input")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_distinct = len(np.unique(x))
    if n_distinct < k:
        LOGGER.warning(
            "only %d distinct values; reducing mixture components from %d", n_distinct, k
        )
        k = max(n_distinct, 1)
    sample_var = float(np.var(x))
    floor = max(1e-6, 1e-4 * sample_var)
    means = np.quantile(x, [(2 * i + 1) / (2 * k) for i in range(k)]).astype(float)
    variances = np.full(k, max(sample_var, floor))
    weights = np.full(k, 1.0 / k)
    trace: list[float] = []
    last_params = (weights, means, variances)
    for _ in range(max_iter):
        log_p, lse = _log_likelihoods(x, weights, means, variances)
        ll = float(lse.sum())
        if trace and ll < trace[-1]:
            # variance flooring can undo EM's guarantee; keep the last good fit
            weights, means, variances = last_params
            break
        trace.append(ll)
        if len(trace) > 1 and ll - trace[-2] < tol:
            break
        last_params = (weights, means, variances)
        resp = np.exp(log_p - lse[:, None])
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        weights = nk / x.size
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk
        variances = np.maximum(variances, floor)
    weights = weights / weights.sum()
    return GmmModel(
        weights=weights, means=means, variances=variances, log_likelihood_trace=trace
    )


def sample_component(
    model: GmmModel, true_value: float, rng: np.random.Generator
) -> int:
    """Draw a component index from the posterior given the true value."""
    return int(rng.choice(model.k, p=model.responsibilities(true_value)))
