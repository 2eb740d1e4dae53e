"""Finitely supported probability measures and how we build them.

This module carries the data model used everywhere else:

* ``DiscreteMeasure`` -- support points with nonnegative weights summing to 1,
* ``DomainSpec`` -- a description of a population (uniform box or an explicit
  measure) that experiments can sample from and discretize,
* ``quadrature_grid`` -- midpoint-rule discretization of a uniform box,
* ``sample_empirical`` -- i.i.d. sampling with a deterministic seed contract,
* CSV reading/writing in the ``x1,...,xd,w`` format.

Randomness policy: every random draw goes through a Philox counter-based
generator keyed by a ``SeedSequence`` built from an integer tuple.  Two helper
functions implement the splitting rule used by the Monte Carlo harness:
``rng_stream(*key)`` returns the generator for a key, and ``derive_seed(*key)``
folds a key into a single 64-bit seed (used when an interface contractually
takes one integer seed).  Identical keys give bit-identical streams; distinct
keys give statistically independent ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    InputError,
    NegativeWeightError,
    TooLargeError,
    WeightSumMismatchError,
)

WEIGHT_SUM_TOL = 1e-12
GRID_CAP = 1_000_000


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2:
        raise DimensionMismatchError(
            f"points must be a (k, d) array or a flat list, got ndim={pts.ndim}"
        )
    return np.ascontiguousarray(pts)


@dataclass(frozen=True)
class DiscreteMeasure:
    """A finitely supported probability measure.

    Parameters
    ----------
    points : array-like, shape (k, d) (a flat list is read as d = 1)
    weights : array-like, shape (k,)
        Nonnegative, summing to 1 within 1e-12.
    """

    points: np.ndarray
    weights: np.ndarray

    def __init__(self, points, weights, _validate=True):
        pts = _as_points(points)
        w = np.ascontiguousarray(np.asarray(weights, dtype=np.float64))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if _validate:
            validate_measure(self)
        pts.setflags(write=False)
        w.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @classmethod
    def _unchecked(cls, points, weights):
        """Construct without the weight-sum check.

        Needed for coupling marginals, whose totals match the solver's
        feasibility tolerance rather than the strict 1e-12 of a fresh measure.
        """
        return cls(points, weights, _validate=False)

    def drop_zero_weights(self) -> "DiscreteMeasure":
        keep = self.weights > 0.0
        if keep.all():
            return self
        return DiscreteMeasure(self.points[keep], self.weights[keep])


def validate_measure(m: DiscreteMeasure) -> DiscreteMeasure:
    """Check the measure invariants; return ``m`` unchanged if they hold."""
    pts, w = m.points, m.weights
    if w.ndim != 1:
        raise DimensionMismatchError(f"weights must be 1-d, got ndim={w.ndim}")
    if pts.shape[0] != w.shape[0]:
        raise DimensionMismatchError(
            f"{pts.shape[0]} points but {w.shape[0]} weights"
        )
    if pts.shape[0] < 1:
        raise InputError("a measure needs at least one atom")
    if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
        raise InputError("points and weights must be finite")
    if np.any(w < 0.0):
        raise NegativeWeightError(f"min weight {w.min()!r} < 0")
    total = float(w.sum())
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise WeightSumMismatchError(f"weights sum to {total!r}, not 1")
    return m


@dataclass(frozen=True)
class DomainSpec:
    """Population description: a uniform box or an explicit discrete measure."""

    kind: str
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    measure: DiscreteMeasure | None = field(default=None, repr=False)

    @classmethod
    def uniform_box(cls, lower, upper) -> "DomainSpec":
        lo = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionMismatchError("lower and upper must be equal-length vectors")
        if not np.all(lo < hi):
            raise InputError("uniform_box needs lower < upper componentwise")
        return cls(kind="uniform_box", lower=lo, upper=hi)

    @classmethod
    def explicit(cls, measure: DiscreteMeasure) -> "DomainSpec":
        return cls(kind="explicit", measure=validate_measure(measure))

    @property
    def dim(self) -> int:
        if self.kind == "uniform_box":
            return int(self.lower.shape[0])
        return self.measure.dim


def quadrature_grid(spec: DomainSpec, m_per_axis: int, cap: int = GRID_CAP) -> DiscreteMeasure:
    """Midpoint-rule grid on a uniform box: ``m_per_axis**d`` equal-weight atoms.

    Points sit at cell centers, ordered lexicographically by axis (the first
    coordinate varies slowest).  Raises TooLargeError beyond ``cap`` atoms.
    """
    if spec.kind != "uniform_box":
        raise InputError("quadrature_grid requires a uniform_box DomainSpec")
    if m_per_axis < 1:
        raise InputError("m_per_axis must be >= 1")
    d = spec.dim
    count = m_per_axis ** d
    if count > cap:
        raise TooLargeError(f"{m_per_axis}^{d} = {count} atoms exceeds cap {cap}")
    axes = [
        spec.lower[k]
        + (spec.upper[k] - spec.lower[k]) * (np.arange(m_per_axis) + 0.5) / m_per_axis
        for k in range(d)
    ]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    w = np.full(count, 1.0 / count)
    return DiscreteMeasure(pts, w)


def rng_stream(*key: int) -> np.random.Generator:
    """Philox generator for an integer key tuple (the documented splitting rule)."""
    ss = np.random.SeedSequence(entropy=[int(k) & 0xFFFFFFFFFFFFFFFF for k in key])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(*key: int) -> int:
    """Fold an integer key tuple into one 64-bit seed, deterministically."""
    ss = np.random.SeedSequence(entropy=[int(k) & 0xFFFFFFFFFFFFFFFF for k in key])
    lo, hi = ss.generate_state(2, np.uint32)
    return (int(hi) << 32) | int(lo)


def sample_empirical(source, n: int, seed: int) -> DiscreteMeasure:
    """n i.i.d. draws from ``source`` with weights 1/n each.

    ``source`` may be a DomainSpec (uniform box, or explicit measure) or a
    DiscreteMeasure (multinomial resampling).  Pure in (source, n, seed):
    identical triples give bit-identical outputs.
    """
    if n < 1:
        raise InputError("n must be >= 1")
    rng = rng_stream(seed)
    if isinstance(source, DomainSpec):
        if source.kind == "uniform_box":
            pts = rng.uniform(source.lower, source.upper, size=(n, source.dim))
            return DiscreteMeasure(pts, np.full(n, 1.0 / n))
        source = source.measure
    if not isinstance(source, DiscreteMeasure):
        raise InputError(f"cannot sample from {type(source).__name__}")
    idx = rng.choice(source.size, size=n, p=source.weights)
    return DiscreteMeasure(source.points[idx], np.full(n, 1.0 / n))


# ---------------------------------------------------------------------------
# CSV I/O  (header: x1,...,xd,w)
# ---------------------------------------------------------------------------

def write_measure_csv(path, m: DiscreteMeasure) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{k + 1}" for k in range(m.dim)] + ["w"])
        for pt, w in zip(m.points, m.weights):
            writer.writerow([repr(float(c)) for c in pt] + [repr(float(w))])


def read_measure_csv(path) -> DiscreteMeasure:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = [
            row
            for row in csv.reader(fh)
            if row and not row[0].lstrip().startswith("#")
        ]
    if not rows:
        raise InputError(f"{path}: empty measure file")
    header = [c.strip() for c in rows[0]]
    if len(header) < 2 or header[-1] != "w":
        raise InputError(f"{path}: header must be x1,...,xd,w")
    d = len(header) - 1
    if header[:-1] != [f"x{k + 1}" for k in range(d)]:
        raise InputError(f"{path}: header must be x1,...,xd,w")
    pts = np.empty((len(rows) - 1, d))
    w = np.empty(len(rows) - 1)
    for r, row in enumerate(rows[1:]):
        if len(row) != d + 1:
            raise InputError(f"{path}: row {r + 2} has {len(row)} fields, expected {d + 1}")
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise InputError(f"{path}: row {r + 2}: {exc}") from exc
        pts[r] = vals[:-1]
        w[r] = vals[-1]
    return validate_measure(DiscreteMeasure(pts, w))
