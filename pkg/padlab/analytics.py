"""Closed-form dummy-count law and optimal-classifier accuracy, with brute-force oracles."""

import itertools
import math
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import geom

from .errors import ValidationError

ORACLE_TAIL = 1e-9
FIT_TAIL = 1e-6
MIN_FIT_SAMPLES = 10_000


class PcpParams(BaseModel):
    phi: float = Field(ge=0)
    c: float = Field(default=0.5, ge=0, le=1)

    model_config = ConfigDict(frozen=True)

    @property
    def p(self) -> float:
        return 1.0 / (1.0 + self.phi)


def _check(phi: float, c: float = 0.5):
    if phi < 0 or not math.isfinite(phi):
        raise ValidationError(f"phi must be finite and non-negative, got {phi}")
    if not 0 <= c <= 1:
        raise ValidationError(f"c must be in [0, 1], got {c}")


def dummy_count_pmf(k: int, phi: float) -> float:
    """Pr[D = k]: dummy triplets fired before the connection arrives."""
    _check(phi)
    if k < 0:
        raise ValidationError(f"k must be non-negative, got {k}")
    return float(geom.pmf(k, PcpParams(phi=phi).p, loc=-1))


def optimal_accuracy(phi: float, c: float) -> float:
    _check(phi, c)
    return max(c, 1 - c * phi / (phi + 1))


def leakage(phi: float, c: float) -> float:
    """Optimal accuracy over the random-guessing baseline max(c, 1 - c)."""
    return optimal_accuracy(phi, c) - max(c, 1 - c)


def tail_mass(phi: float, k_max: int) -> float:
    """Pr[D > k_max]."""
    return (phi / (1 + phi)) ** (k_max + 1)


def required_k_max(phi: float, tail: float = ORACLE_TAIL) -> int:
    _check(phi)
    if phi == 0:
        return 0
    q = phi / (1 + phi)
    return max(0, math.ceil(math.log(tail) / math.log(q)))


def joint_masses(phi: float, c: float, k_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Pr[S, N = k] for k = 0..k_max+1; clearnet has N = D, onion N = D + 1."""
    pmf = geom.pmf(np.arange(k_max + 2), PcpParams(phi=phi).p, loc=-1)
    return c * pmf, np.concatenate(([0.0], (1 - c) * pmf[:-1]))


def accuracy_oracle(phi: float, c: float, k_max: int) -> float:
    """Bayes accuracy summed over the truncated joint distribution."""
    _check(phi, c)
    if tail_mass(phi, k_max) >= ORACLE_TAIL:
        raise ValidationError(
            f"k_max={k_max} leaves a tail of {tail_mass(phi, k_max):.2e}",
            context=f"need k_max >= {required_k_max(phi)} for phi={phi}",
        )
    clear, onion = joint_masses(phi, c, k_max)
    return float(np.maximum(clear, onion).sum())


def bayes_accuracy_bruteforce(phi: float, c: float, k_max: int) -> float:
    """Best accuracy of any deterministic labelling of N in 0..k_max.

    Counts above k_max share one label, so 2^(k_max + 2) labellings are tried.
    """
    _check(phi, c)
    clear, onion = joint_masses(phi, c, k_max)
    clear[-1] = c * tail_mass(phi, k_max)
    onion[-1] = (1 - c) * tail_mass(phi, k_max - 1)
    best = 0.0
    for labels in itertools.product((False, True), repeat=k_max + 2):
        best = max(best, float(np.where(labels, onion, clear).sum()))
    return best


def fit_geometric(samples: Sequence[int], phi: float) -> float:
    """Total-variation distance between sampled dummy counts and the geometric law."""
    _check(phi)
    counts = np.asarray(samples, dtype=int)
    if len(counts) < MIN_FIT_SAMPLES:
        raise ValidationError(
            f"need at least {MIN_FIT_SAMPLES} samples, got {len(counts)}"
        )
    p = PcpParams(phi=phi).p
    k_max = max(required_k_max(phi, FIT_TAIL), 0)
    empirical = np.bincount(np.minimum(counts, k_max + 1), minlength=k_max + 2) / len(counts)
    expected = np.append(geom.pmf(np.arange(k_max + 1), p, loc=-1), geom.sf(k_max, p, loc=-1))
    return float(0.5 * np.abs(empirical - expected).sum())


def curve_grid(phis: Sequence[float], cs: Sequence[float]) -> list[dict]:
    return [
        {"phi": phi, "c": c, "accuracy": optimal_accuracy(phi, c), "leakage": leakage(phi, c)}
        for phi in phis
        for c in cs
    ]


def monte_carlo_dummy_counts(
    phi: float, lambda_u: float, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Independent sampler: T ~ Exp(lambda_u), then D ~ Poisson(phi * lambda_u * T)."""
    _check(phi)
    think = rng.exponential(1.0 / lambda_u, n)
    return rng.poisson(phi * lambda_u * think)
