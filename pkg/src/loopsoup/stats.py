"""Mergeable Monte Carlo estimates and confidence intervals."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .errors import DomainError

LEVEL = 0.99


def wilson_interval(successes: float, n: int, level: float = LEVEL) -> tuple:
    if n == 0:
        return 0.0, 1.0
    z = norm.ppf(0.5 + level / 2)
    p = successes / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return float(max(0.0, mid - half)), float(min(1.0, mid + half))


def normal_interval(mean: float, var: float, n: int, level: float = LEVEL) -> tuple:
    if n < 2:
        return -np.inf, np.inf
    z = norm.ppf(0.5 + level / 2)
    h = z * np.sqrt(var / n)
    return float(mean - h), float(mean + h)


@dataclass(frozen=True)
class EstimateRecord:
    """Running count, mean and centred second moment of i.i.d. replicates.

    ``kind`` is "bernoulli" (Wilson interval) or "mean" (normal interval);
    ``streams`` lists the RNG stream keys that produced the data.
    """

    name: str
    kind: str = "mean"
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0
    streams: tuple = field(default_factory=tuple)
    level: float = LEVEL

    @classmethod
    def from_values(cls, name: str, values, kind: str = "mean", streams=(), level: float = LEVEL):
        v = np.asarray(values, dtype=float).ravel()
        if v.size == 0:
            return cls(name, kind, streams=tuple(streams), level=level)
        m = float(v.mean())
        return cls(name, kind, int(v.size), m, float(((v - m) ** 2).sum()), tuple(streams), level)

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def stderr(self) -> float:
        return float(np.sqrt(self.variance / self.n)) if self.n > 1 else float("inf")

    @property
    def ci(self) -> tuple:
        if self.kind == "bernoulli":
            return wilson_interval(self.mean * self.n, self.n, self.level)
        return normal_interval(self.mean, self.variance, self.n, self.level)

    def as_dict(self) -> dict:
        lo, hi = self.ci
        return {"name": self.name, "kind": self.kind, "n": self.n, "mean": self.mean,
                "variance": self.variance, "ci_low": lo, "ci_high": hi, "level": self.level,
                "streams": [list(s) if isinstance(s, tuple) else s for s in self.streams]}


def _merge2(a: EstimateRecord, b: EstimateRecord) -> EstimateRecord:
    if (a.name, a.kind, a.level) != (b.name, b.kind, b.level):
        raise DomainError("estimates describe different experiments")
    if set(a.streams) & set(b.streams):
        raise DomainError("estimates share RNG streams")
    if b.n == 0:
        return replace(a, streams=a.streams + b.streams)
    if a.n == 0:
        return replace(b, streams=a.streams + b.streams)
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = (a.n * a.mean + b.n * b.mean) / n
    m2 = a.m2 + b.m2 + delta * delta * a.n * b.n / n
    return replace(a, n=n, mean=mean, m2=m2, streams=tuple(sorted(a.streams + b.streams, key=repr)))


def merge_estimates(records) -> EstimateRecord:
    """Pool records; the result does not depend on their order."""
    records = sorted(records, key=lambda r: repr(sorted(r.streams, key=repr)))
    if not records:
        raise DomainError("nothing to merge")
    out = records[0]
    for r in records[1:]:
        out = _merge2(out, r)
    return out
