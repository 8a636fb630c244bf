"""Lognormal and half-Cauchy primitives.

Lognormals are carried as (log-scale location, log-scale precision). Natural
scale moments are only produced at the API boundary through
:func:`mm_transform` and :func:`mm_inverse`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Argument outside the support of a distribution or transform."""


@dataclass(frozen=True)
class LogNormalParams:
    mu_star: float
    prec_star: float

    def __post_init__(self):
        if not math.isfinite(self.mu_star):
            raise DomainError(f"mu_star must be finite, got {self.mu_star}")
        if not self.prec_star > 0:
            raise DomainError(f"prec_star must be positive, got {self.prec_star}")

    @property
    def log_variance(self) -> float:
        return 1.0 / self.prec_star

    @classmethod
    def from_log_variance(cls, mu_star: float, log_variance: float) -> "LogNormalParams":
        if not log_variance > 0:
            raise DomainError(f"log-variance must be positive, got {log_variance}")
        return cls(mu_star, 1.0 / log_variance)


@dataclass(frozen=True)
class MomentPair:
    mean: float
    variance: float

    def __post_init__(self):
        if not self.mean > 0:
            raise DomainError(f"mean must be positive, got {self.mean}")
        if not self.variance > 0:
            raise DomainError(f"variance must be positive, got {self.variance}")


@dataclass(frozen=True)
class HalfCauchyParams:
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DomainError(f"half-Cauchy scale must be positive, got {self.scale}")


def mm_transform(m: MomentPair) -> LogNormalParams:
    """Lognormal parameters whose natural-scale mean and variance equal ``m``."""
    # log1p keeps precision when variance/mean^2 is tiny
    log_var = math.log1p(m.variance / (m.mean * m.mean))
    mu_star = math.log(m.mean) - 0.5 * log_var
    return LogNormalParams(mu_star, 1.0 / log_var)


def mm_inverse(p: LogNormalParams) -> MomentPair:
    s2 = 1.0 / p.prec_star
    mean = math.exp(p.mu_star + 0.5 * s2)
    variance = math.expm1(s2) * math.exp(2.0 * p.mu_star + s2)
    return MomentPair(mean, variance)


def lognormal_logpdf(x: float, p: LogNormalParams) -> float:
    if not x > 0:
        raise DomainError(f"lognormal density requires x > 0, got {x}")
    lx = math.log(x)
    z2 = (lx - p.mu_star) ** 2 * p.prec_star
    return -lx - 0.5 * LOG_2PI + 0.5 * math.log(p.prec_star) - 0.5 * z2


def lognormal_sample(p: LogNormalParams, rng: np.random.Generator, size=None):
    z = rng.standard_normal(size)
    return np.exp(p.mu_star + z / math.sqrt(p.prec_star))


def halfcauchy_logpdf(x: float, h: HalfCauchyParams) -> float:
    if not x > 0:
        raise DomainError(f"half-Cauchy density requires x > 0, got {x}")
    g = h.scale
    return math.log(2.0 / (math.pi * g)) - math.log1p((x / g) ** 2)


def halfcauchy_sample(h: HalfCauchyParams, rng: np.random.Generator, size=None):
    return h.scale * np.abs(rng.standard_cauchy(size))


def biased_class_moments(f_star: float, prec: float) -> tuple[float, float, float]:
    """Mean, variance and median of ``f_star * exp(eps)``, eps ~ N(0, 1/prec)."""
    if not f_star > 0:
        raise DomainError(f"f_star must be positive, got {f_star}")
    if not prec > 0:
        raise DomainError(f"precision must be positive, got {prec}")
    s2 = 1.0 / prec
    mean = f_star * math.exp(0.5 * s2)
    variance = f_star * f_star * math.exp(s2) * math.expm1(s2)
    return mean, variance, f_star
