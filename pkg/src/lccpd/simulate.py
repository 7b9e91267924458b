"""Synthetic change / no-change pixels with controlled missingness.

Two year sources are supported: a generative one that samples each year from
the marginal class distributions of a :class:`ClassLibrary`, and an exemplar
pool of labeled background and change years that are resampled one year at a
time. All randomness comes from numpy's PCG64 generator seeded through a
``SeedSequence([seed, replication])``, so replications can be generated in
any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import (
    BACKGROUND,
    Background,
    ChangeClass,
    ChangeConfig,
    ClassLibrary,
    Hyperparams,
    PixelSeries,
    effective_cov,
)

__all__ = [
    "RNG_ALGORITHM",
    "ExemplarPool",
    "GenerativeSource",
    "LabeledPixel",
    "SimSpec",
    "demo_library",
    "induce_missing",
    "make_batch",
    "random_config",
    "replication_rng",
    "synthesize_pixel",
]

RNG_ALGORITHM = f"numpy.random.PCG64 via SeedSequence([seed, replication]); numpy {np.__version__}"

#: Minimum missing fractions of the four-batch experiment grid.
MISSING_GRID = (0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True)
class SimSpec:
    """Simulation settings.

    ``piR_sim`` is the probability that a change pixel recovers (two change
    points). ``class_weights`` are the generative-mode probabilities of each
    change class (uniform if None). ``missing_mode`` is ``"uniform"`` (cells
    masked uniformly at random) or ``"clustered"`` (runs of whole time points
    at the end of a year).
    """

    J: int = 11
    n_change: int = 60
    n_nochange: int = 60
    replications: int = 100
    min_missing_fraction: float = 0.0
    seed: int = 0
    piR_sim: float = 0.5
    class_weights: tuple[float, ...] | None = None
    missing_mode: str = "uniform"

    def __post_init__(self):
        if self.J < 2:
            raise ValueError("J must be at least 2")
        if self.n_change < 0 or self.n_nochange < 0 or self.n_change + self.n_nochange == 0:
            raise ValueError("pixel counts must be nonnegative and not both zero")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if not 0.0 <= self.min_missing_fraction < 1.0:
            raise ValueError("min_missing_fraction must lie in [0, 1)")
        if not 0.0 <= self.piR_sim <= 1.0:
            raise ValueError("piR_sim must lie in [0, 1]")
        if self.missing_mode not in ("uniform", "clustered"):
            raise ValueError(f"unknown missing_mode {self.missing_mode!r}")


@dataclass(frozen=True, eq=False)
class LabeledPixel:
    series: PixelSeries
    truth: ChangeConfig
    class_id: int | None = None


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(replication)])))


def random_config(J: int, rng: np.random.Generator, pi0_sim: float, piR_sim: float) -> ChangeConfig:
    """Draw a configuration: no change w.p. ``1 - pi0_sim``, else recovery w.p. ``piR_sim``.

    Within the one-change and two-change strata all configurations are equally likely.
    """
    if J < 2:
        raise ValueError("J must be at least 2")
    if rng.random() >= pi0_sim:
        return ChangeConfig(J, J)
    if J >= 3 and rng.random() < piR_sim:
        pairs = [(r1, r2) for r1 in range(1, J - 1) for r2 in range(r1 + 1, J)]
        r1, r2 = pairs[int(rng.integers(len(pairs)))]
        return ChangeConfig(r1, r2)
    return ChangeConfig(int(rng.integers(1, J)), J)


class GenerativeSource:
    """Draw independent years from the marginal class distributions of a library."""

    def __init__(self, library: ClassLibrary, h: Hyperparams | None = None):
        h = h or Hyperparams()
        self.library = library
        self.shape = (library.B, library.T)
        self._chol = {}
        self._mean = {}
        for key in [BACKGROUND] + library.class_ids:
            spec = effective_cov(library, key, h)
            self._chol[key] = np.linalg.cholesky(spec.covariance)
            self._mean[key] = spec.mean

    def draw(self, key, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self._mean[key].size)
        return (self._mean[key] + self._chol[key] @ z).reshape(self.shape)

    def background_year(self, rng):
        return self.draw(BACKGROUND, rng)

    def pick_class(self, rng, weights=None) -> int:
        ids = self.library.class_ids
        if weights is None:
            return ids[int(rng.integers(len(ids)))]
        weights = np.asarray(weights, dtype=float)
        if weights.size != len(ids) or np.any(weights < 0) or weights.sum() <= 0:
            raise ValueError("class_weights must be nonnegative, one per change class")
        return ids[int(rng.choice(len(ids), p=weights / weights.sum()))]

    def change_year(self, rng, class_id) -> np.ndarray:
        return self.draw(class_id, rng)


class ExemplarPool:
    """Labeled exemplar years; NaN entries are treated as already missing.

    ``background`` has shape (n, B, T); ``change`` has shape (m, B, T) with
    ``change_class`` giving each change year's class id.
    """

    def __init__(self, background, change, change_class=None):
        self.background = np.asarray(background, dtype=float)
        self.change = np.asarray(change, dtype=float)
        if self.background.ndim != 3 or self.change.ndim != 3:
            raise ValueError("exemplar arrays must have shape (n, B, T)")
        if self.background.shape[1:] != self.change.shape[1:]:
            raise ValueError("background and change exemplars differ in (B, T)")
        if change_class is None:
            change_class = np.full(self.change.shape[0], -1)
        self.change_class = np.asarray(change_class, dtype=int)
        if self.change_class.shape != (self.change.shape[0],):
            raise ValueError("change_class needs one id per change exemplar")
        self.shape = self.background.shape[1:]

    @classmethod
    def load(cls, path) -> "ExemplarPool":
        """Read an ``.npz`` file with arrays ``background``, ``change`` and optionally ``change_class``."""
        with np.load(path) as data:
            return cls(data["background"], data["change"], data["change_class"] if "change_class" in data else None)

    def background_year(self, rng):
        if self.background.shape[0] == 0:
            raise ValueError("exemplar pool has no background years")
        return self.background[int(rng.integers(self.background.shape[0]))].copy()

    def pick_class(self, rng, weights=None):
        return None

    def change_year(self, rng, class_id=None):
        if self.change.shape[0] == 0:
            raise ValueError("exemplar pool has no change years")
        k = int(rng.integers(self.change.shape[0]))
        return self.change[k].copy(), int(self.change_class[k])


def induce_missing(mask: np.ndarray, fraction: float, rng: np.random.Generator, mode: str = "uniform") -> np.ndarray:
    """Extend ``mask`` (J, B, T) until at least ``ceil(fraction * size)`` cells are missing."""
    mask = mask.copy()
    target = math.ceil(round(fraction * mask.size, 9))
    need = target - int(mask.sum())
    if need <= 0:
        return mask
    if mode == "uniform":
        flat = mask.reshape(-1)
        free = np.flatnonzero(~flat)
        flat[rng.choice(free, size=need, replace=False)] = True
        return mask
    J, B, T = mask.shape
    runs = np.zeros(J, dtype=int)
    while int(mask.sum()) < target:
        open_years = np.flatnonzero(runs < T)
        i = int(open_years[int(rng.integers(open_years.size))])
        runs[i] += 1
        mask[i, :, T - runs[i]] = True
    return mask


def synthesize_pixel(spec: SimSpec, truth: ChangeConfig, rng: np.random.Generator, source,
                     pixel_id: str = "pixel") -> LabeledPixel:
    """Stitch J years from the source according to ``truth`` and mask cells."""
    truth.validate(spec.J)
    change_years = truth.change_years(spec.J)
    class_id = source.pick_class(rng, spec.class_weights) if truth.is_change() else None
    years = []
    for i in range(spec.J):
        if change_years[i]:
            drawn = source.change_year(rng, class_id)
            if isinstance(drawn, tuple):
                drawn, cid = drawn
                class_id = cid if class_id is None else class_id
            years.append(drawn)
        else:
            years.append(source.background_year(rng))
    values = np.stack(years)
    mask = induce_missing(np.isnan(values), spec.min_missing_fraction, rng, spec.missing_mode)
    values = np.where(mask, np.nan, values)
    return LabeledPixel(PixelSeries(pixel_id, values, mask), truth, class_id)


def make_replication(spec: SimSpec, source, replication: int) -> list[LabeledPixel]:
    rng = replication_rng(spec.seed, replication)
    pixels = []
    for k in range(spec.n_nochange):
        truth = ChangeConfig.no_change(spec.J)
        pixels.append(synthesize_pixel(spec, truth, rng, source, f"r{replication:03d}-n{k:03d}"))
    for k in range(spec.n_change):
        truth = random_config(spec.J, rng, 1.0, spec.piR_sim)
        pixels.append(synthesize_pixel(spec, truth, rng, source, f"r{replication:03d}-c{k:03d}"))
    return pixels


def make_batch(spec: SimSpec, source) -> list[list[LabeledPixel]]:
    """All replications of a batch; replication ``r`` depends only on ``(seed, r)``."""
    return [make_replication(spec, source, r) for r in range(spec.replications)]


def _ar1(T, corr, var):
    lags = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    return var * corr**lags


def demo_library(
    B: int = 7,
    T: int = 19,
    n_classes: int = 2,
    seed: int = 0,
    separation: float = 2.0,
    variance: float = 2.5e5,
) -> ClassLibrary:
    """A synthetic library on the reflectance-times-10000 scale.

    The background has smooth seasonal band profiles. Each change class shifts
    every band by a random multiple of the per-cell standard deviation with
    root-mean-square size ``separation``, and gets its own temporal
    covariance. ``variance`` is the per-cell class variance before the
    variance-scale ridge.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 7919])))
    t = np.linspace(0.0, 1.0, T)
    level = rng.uniform(300.0, 3500.0, size=B)
    amp = rng.uniform(0.05, 0.2, size=B) * level
    phase = rng.uniform(0.0, 2 * np.pi, size=B)
    mu_f = level[:, None] + amp[:, None] * np.sin(2 * np.pi * t[None, :] + phase[:, None])

    loadings = rng.normal(size=(B, B))
    sigma_s = loadings @ loadings.T + B * np.eye(B)
    sigma_s *= B / np.trace(sigma_s)
    sd = np.sqrt(variance)

    classes = []
    for g in range(n_classes):
        pattern = rng.normal(size=(B, 1)) + 0.5 * rng.normal(size=(B, T))
        pattern *= separation / np.sqrt(np.mean(pattern**2))
        mean = mu_f + sd * pattern
        sigma_t = _ar1(T, rng.uniform(0.3, 0.7), variance * rng.uniform(0.7, 1.3))
        classes.append(ChangeClass(100 + g, f"change-{g + 1}", mean.ravel(), sigma_t))
    background = Background(2, "EBF", mu_f.ravel(), temporal_cov=_ar1(T, 0.5, variance))
    return ClassLibrary(sigma_s, background, tuple(classes))


def batch_pixels(replication: Sequence[LabeledPixel]) -> list[PixelSeries]:
    return [lp.series for lp in replication]
