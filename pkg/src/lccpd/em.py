"""Block expectation-conditional-maximization for per-pixel change configurations.

Each outer iteration computes class posteriors from the current class
proportions ``alpha``, updates ``alpha`` from the posteriors of the pixels
currently flagged as changed, then re-selects every pixel's configuration by
minimizing its expected deviance over all enumerated configurations.

Class parameters are fixed during a fit, so the per-(pixel, year, class)
S-statistics and observed log-likelihoods are computed once up front; the
iterations only touch small arrays.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .gaussian import GaussianSpec, SpectroTemporalSample, conditional_moments, s_and_loglik, spectral_projection
from .model import (
    BACKGROUND,
    ChangeConfig,
    ClassLibrary,
    Hyperparams,
    PixelSeries,
    check_region_dims,
    config_matrix,
    effective_cov,
    log_prior_vector,
)

__all__ = [
    "FitResult",
    "PixelCache",
    "build_cache",
    "class_posterior",
    "class_posteriors",
    "compress_region",
    "compute_q",
    "config_posteriors",
    "fit_region",
    "impute_pixel",
    "rho_objective",
    "update_alpha",
    "update_rho",
]

logger = logging.getLogger(__name__)

#: Floor applied to ``log(alpha)`` so that a zero proportion times a zero posterior stays finite.
LOG_ALPHA_FLOOR = -700.0


class PosteriorError(ValueError):
    """All class posteriors of a pixel vanished numerically."""


@dataclass(frozen=True, eq=False)
class PixelCache:
    """Per-year statistics of one pixel.

    Column 0 of both tables is the background class, columns ``1..|C|`` follow
    the library's class order.
    """

    s_table: np.ndarray
    loglik_years: np.ndarray

    @property
    def loglik_table(self) -> np.ndarray:
        """Observed-data log-likelihood of the whole series under each change class."""
        return self.loglik_years[:, 1:].sum(axis=0)


def _specs(library: ClassLibrary, h: Hyperparams) -> list[GaussianSpec]:
    specs = [effective_cov(library, BACKGROUND, h)]
    specs += [effective_cov(library, cid, h) for cid in library.class_ids]
    for spec in specs:
        spec.cholesky, spec.logdet  # factorize once, before any worker threads read them
    return specs


def build_cache(pixel: PixelSeries, specs: Sequence[GaussianSpec]) -> PixelCache:
    """S-statistics and observed log-likelihoods for every year and class of a pixel."""
    J = pixel.J
    s_table = np.empty((J, len(specs)))
    loglik = np.empty((J, len(specs)))
    for i in range(J):
        sample = SpectroTemporalSample(pixel.values[i], pixel.mask[i], f"pixel {pixel.pixel_id}, year {i + 1}")
        for g, spec in enumerate(specs):
            s_table[i, g], loglik[i, g] = s_and_loglik(sample, spec)
    if not (np.all(np.isfinite(s_table)) and np.all(np.isfinite(loglik))):
        raise FloatingPointError(f"non-finite statistics for pixel {pixel.pixel_id}")
    return PixelCache(s_table, loglik)


def class_posterior(loglik_table, alpha) -> np.ndarray:
    """``Pr(W = k | Y)`` proportional to ``alpha_k exp(loglik_k)``."""
    return class_posteriors(np.asarray(loglik_table, dtype=float)[None, :], alpha)[0]


def class_posteriors(loglik_tables, alpha, pixel_ids=None) -> np.ndarray:
    """Row-wise :func:`class_posterior` for an ``(N, |C|)`` table."""
    loglik_tables = np.asarray(loglik_tables, dtype=float)
    with np.errstate(divide="ignore"):
        logits = loglik_tables + np.log(np.asarray(alpha, dtype=float))
    top = logits.max(axis=1, keepdims=True)
    bad = ~np.isfinite(top[:, 0])
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        name = pixel_ids[idx] if pixel_ids is not None else idx
        raise PosteriorError(f"all class posteriors vanish for pixel {name}; library and data disagree")
    weights = np.exp(logits - top)
    return weights / weights.sum(axis=1, keepdims=True)


def update_alpha(changed_posteriors, dirichlet) -> np.ndarray:
    """MAP class proportions given the posteriors of the changed pixels.

    ``alpha_k = (sum_v p_vk + pi_k - 1) / (N + sum(pi) - |C|)``; with no changed
    pixels and all ``pi_k = 1`` this is 0/0 and the prior proportions are used.
    """
    dirichlet = np.asarray(dirichlet, dtype=float)
    changed_posteriors = np.asarray(changed_posteriors, dtype=float).reshape(-1, dirichlet.size)
    numer = changed_posteriors.sum(axis=0) + dirichlet - 1.0
    if np.any(numer < 0):
        raise AssertionError(f"negative alpha numerator {numer}; Dirichlet weights must be >= 1")
    denom = changed_posteriors.shape[0] + dirichlet.sum() - dirichlet.size
    if denom <= 0:
        return dirichlet / dirichlet.sum()
    return numer / denom


def _log_alpha(alpha, floor=LOG_ALPHA_FLOOR):
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(np.asarray(alpha, dtype=float)), floor)


def _objectives(s_tables, posteriors, log_alpha, log_prior, J):
    """Objective of every configuration for every pixel, shape ``(N, n_configs)``.

    Uses prefix sums of the per-year gain ``S_mix - S_F`` so each
    configuration costs O(1) after an O(J) pass.
    """
    _, kinds, bounds = config_matrix(J)
    s_bg = s_tables[:, :, 0]
    s_mix = np.einsum("njc,nc->nj", s_tables[:, :, 1:], posteriors)
    prefix = np.zeros((s_tables.shape[0], J + 1))
    np.cumsum(s_mix - s_bg, axis=1, out=prefix[:, 1:])
    total_bg = s_bg.sum(axis=1)
    change_cost = prefix[:, bounds[:, 1]] - prefix[:, bounds[:, 0]]
    class_term = -2.0 * (posteriors @ log_alpha)
    return total_bg[:, None] + change_cost + np.where(kinds > 0, 1.0, 0.0) * class_term[:, None] - 2.0 * log_prior


def rho_objective(s_table, posterior, alpha, h: Hyperparams, J: int, log_alpha_floor=LOG_ALPHA_FLOOR) -> np.ndarray:
    """Per-configuration objective for a single pixel (enumeration order)."""
    s_table = np.asarray(s_table, dtype=float)
    posterior = np.asarray(posterior, dtype=float)
    return _objectives(
        s_table[None], posterior[None], _log_alpha(alpha, log_alpha_floor), log_prior_vector(h, J), J
    )[0]


def update_rho(cache, posterior, alpha, h: Hyperparams, J: int, log_alpha_floor=LOG_ALPHA_FLOOR) -> ChangeConfig:
    """Configuration minimizing the expected deviance; ties go to the earliest enumerated."""
    s_table = cache.s_table if isinstance(cache, PixelCache) else cache
    obj = rho_objective(s_table, posterior, alpha, h, J, log_alpha_floor)
    r1, r2 = config_matrix(J)[2][int(np.argmin(obj))]
    return ChangeConfig(int(r1), int(r2))


def _dirichlet_term(alpha, dirichlet, floor=LOG_ALPHA_FLOOR):
    return float(np.sum((np.asarray(dirichlet) - 1.0) * _log_alpha(alpha, floor)))


def compute_q(rhos, posteriors, alpha, s_tables, h: Hyperparams, log_alpha_floor=LOG_ALPHA_FLOOR) -> float:
    """Expected complete-data log posterior, up to additive constants.

    Omitted constants: ``-BT/2 log(2 pi)`` per pixel-year and the Dirichlet
    normalizer. ``rhos`` is a sequence of :class:`ChangeConfig`.
    """
    s_tables = np.asarray(s_tables, dtype=float)
    posteriors = np.asarray(posteriors, dtype=float)
    J = s_tables.shape[1]
    dirichlet = h.dirichlet_weights(posteriors.shape[1])
    obj = _objectives(s_tables, posteriors, _log_alpha(alpha, log_alpha_floor), log_prior_vector(h, J), J)
    index = {(int(a), int(b)): k for k, (a, b) in enumerate(config_matrix(J)[2])}
    chosen = np.array([index[(r.rho1, r.rho2)] for r in rhos])
    picked = obj[np.arange(len(chosen)), chosen]
    return -0.5 * float(picked.sum()) + _dirichlet_term(alpha, dirichlet, log_alpha_floor)


def config_posteriors(loglik_years, alpha, h: Hyperparams) -> np.ndarray:
    """``Pr(rho | Y; alpha)`` over enumerated configurations, shape ``(N, n_configs)``.

    Uses the observed-data likelihood with the change class summed out.
    """
    loglik_years = np.asarray(loglik_years, dtype=float)
    J = loglik_years.shape[1]
    change, kinds, _ = config_matrix(J)
    cf = change.astype(float)
    bg = loglik_years[:, :, 0]
    bg_part = bg.sum(axis=1)[:, None] - bg @ cf.T
    cls_part = np.einsum("njc,kj->nkc", loglik_years[:, :, 1:], cf)
    with np.errstate(divide="ignore"):
        log_alpha = np.log(np.asarray(alpha, dtype=float))
    mix = logsumexp(cls_part + log_alpha, axis=2)
    mix = np.where(kinds > 0, mix, 0.0)
    logits = bg_part + mix + log_prior_vector(h, J)
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def compress_region(pixels: Sequence[PixelSeries], library: ClassLibrary, K: int, whiten: bool = False):
    """Compress pixels and library to K spectral rows with the library's spectral factor.

    A time point missing in any band is dropped from every compressed row, so
    compression suits data whose gaps cover whole time points. A warning is
    issued when it discards more than half of the observed time points.
    """
    A, _ = spectral_projection(library.spectral_cov, K, whiten)
    out = []
    partial = total_observed = 0
    for p in pixels:
        time_missing = p.mask.any(axis=1, keepdims=True)
        partial += int((time_missing[:, 0] & ~p.mask.all(axis=1)).sum())
        total_observed += int((~p.mask.all(axis=1)).sum())
        values = np.einsum("kb,jbt->jkt", A, np.where(p.mask, 0.0, p.values))
        mask = np.broadcast_to(time_missing, values.shape).copy()
        values[mask] = np.nan
        out.append(PixelSeries(p.pixel_id, values, mask))
    if total_observed and partial > 0.5 * total_observed:
        warnings.warn(
            f"spectral compression drops {partial} of {total_observed} observed time points that miss some bands",
            RuntimeWarning,
            stacklevel=3,
        )
    return out, library.compress(K, whiten)


@dataclass(eq=False)
class FitResult:
    """Output of :func:`fit_region`.

    ``posteriors`` are the class posteriors used in the final update
    (rows follow ``pixel_ids``, columns follow ``class_ids``). ``rho`` holds
    ``(rho1, rho2)`` per pixel. ``s_table`` and ``loglik_years`` have shape
    ``(N, J, |C| + 1)`` with the background in column 0.

    ``q_trace[t]`` is Q at the parameters produced by iteration ``t``, weighted
    by that iteration's class posteriors; ``q_start[t]`` is Q at the parameters
    the iteration started from, under the same posteriors. Their difference
    (:attr:`q_gains`) is never negative. Successive ``q_trace`` entries use
    different posteriors, so that sequence can dip while the posteriors settle.
    """

    pixel_ids: list[str]
    class_ids: list[int]
    background_id: int
    rho: np.ndarray
    posteriors: np.ndarray
    no_change_prob: np.ndarray
    alpha: np.ndarray
    q_trace: list[float]
    iterations: int
    converged: bool
    s_table: np.ndarray
    loglik_years: np.ndarray
    compression: dict | None = None
    imputed: list[np.ndarray] | None = field(default=None, repr=False)
    q_start: list[float] = field(default_factory=list)

    @property
    def q_gains(self) -> np.ndarray:
        return np.asarray(self.q_trace) - np.asarray(self.q_start)

    @property
    def J(self) -> int:
        return self.s_table.shape[1]

    @property
    def modal_class(self) -> np.ndarray:
        """Most probable change class per pixel (lowest id on ties)."""
        return np.asarray(self.class_ids)[np.argmax(self.posteriors, axis=1)]

    def config(self, index: int) -> ChangeConfig:
        return ChangeConfig(int(self.rho[index, 0]), int(self.rho[index, 1]))

    def configs(self) -> list[ChangeConfig]:
        return [self.config(i) for i in range(len(self.pixel_ids))]

    def index_of(self, pixel_id: str) -> int:
        return self.pixel_ids.index(str(pixel_id))


def fit_region(
    pixels: Sequence[PixelSeries],
    library: ClassLibrary,
    h: Hyperparams | None = None,
    max_iter: int = 200,
    threads: int = 1,
    raw_delta: bool = False,
    log_alpha_floor: float = LOG_ALPHA_FLOOR,
    impute: bool = False,
) -> FitResult:
    """Jointly estimate change configurations and class proportions for a region.

    Parameters
    ----------
    pixels : sequence of PixelSeries
        All pixels must share ``(B, T, J)`` with the library.
    library : ClassLibrary
    h : Hyperparams, optional
        If ``h.K`` is set, pixels and library are first compressed to K
        spectral components.
    max_iter : int
        Iteration cap; hitting it emits a ``RuntimeWarning`` and leaves
        ``converged=False``.
    threads : int
        Worker threads for the per-pixel statistics. Results do not depend on it.
    raw_delta : bool
        Compare the raw change in Q with ``epsilon`` instead of the change per pixel.
    impute : bool
        Also store EM-imputed series for every pixel.

    Notes
    -----
    Stops once the change in Q is below ``epsilon`` and no configuration
    changed in the last sweep.
    """
    h = h or Hyperparams()
    check_region_dims(pixels, library)
    compression = None
    if h.K is not None:
        pixels, library = compress_region(pixels, library, h.K, h.whiten)
        compression = {k: library.compression[k] for k in ("K", "whiten", "eigenvalues")}
    J = pixels[0].J
    specs = _specs(library, h)

    if threads > 1 and len(pixels) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            caches = list(pool.map(lambda p: build_cache(p, specs), pixels))
    else:
        caches = [build_cache(p, specs) for p in pixels]
    s_tables = np.stack([c.s_table for c in caches])
    loglik_years = np.stack([c.loglik_years for c in caches])
    loglik_tot = loglik_years[:, :, 1:].sum(axis=1)
    pixel_ids = [p.pixel_id for p in pixels]

    N = len(pixels)
    dirichlet = h.dirichlet_weights(len(library.classes))
    log_prior = log_prior_vector(h, J)
    _, kinds, bounds = config_matrix(J)

    alpha = dirichlet / dirichlet.sum()
    rho_idx = np.zeros(N, dtype=int)
    q_trace: list[float] = []
    q_start: list[float] = []
    converged = False
    posteriors = class_posteriors(loglik_tot, alpha, pixel_ids)
    iteration = 0
    for iteration in range(1, max_iter + 1):
        posteriors = class_posteriors(loglik_tot, alpha, pixel_ids)
        old = _objectives(s_tables, posteriors, _log_alpha(alpha, log_alpha_floor), log_prior, J)
        q_start.append(-0.5 * float(old[np.arange(N), rho_idx].sum()) + _dirichlet_term(alpha, dirichlet, log_alpha_floor))
        changed = kinds[rho_idx] > 0
        alpha_new = update_alpha(posteriors[changed], dirichlet)
        log_alpha = _log_alpha(alpha_new, log_alpha_floor)
        obj = _objectives(s_tables, posteriors, log_alpha, log_prior, J)
        new_idx = np.argmin(obj, axis=1)
        q = -0.5 * float(obj[np.arange(N), new_idx].sum()) + _dirichlet_term(alpha_new, dirichlet, log_alpha_floor)
        stable = np.array_equal(new_idx, rho_idx)
        delta = abs(q - q_trace[-1]) if q_trace else np.inf
        q_trace.append(q)
        alpha, rho_idx = alpha_new, new_idx
        logger.debug("iteration %d: Q=%.10g, changed=%d", iteration, q, int((kinds[new_idx] > 0).sum()))
        if stable and (delta if raw_delta else delta / N) < h.epsilon:
            converged = True
            break
    if not converged:
        warnings.warn(f"EM stopped after {max_iter} iterations without converging", RuntimeWarning, stacklevel=2)

    no_change = config_posteriors(loglik_years, alpha, h)[:, 0]
    result = FitResult(
        pixel_ids=pixel_ids,
        class_ids=library.class_ids,
        background_id=library.background.class_id,
        rho=bounds[rho_idx].copy(),
        posteriors=posteriors,
        no_change_prob=no_change,
        alpha=alpha,
        q_trace=q_trace,
        q_start=q_start,
        iterations=iteration,
        converged=converged,
        s_table=s_tables,
        loglik_years=loglik_years,
        compression=compression,
    )
    if impute:
        result.imputed = [impute_pixel(p, result, library, h, specs=specs) for p in pixels]
    return result


def impute_pixel(pixel: PixelSeries, fit: FitResult, library: ClassLibrary, h: Hyperparams | None = None,
                 specs=None) -> np.ndarray:
    """EM-imputed ``(J, B, T)`` series of a fitted pixel.

    Background years are imputed under the background class, change years
    under the pixel's modal change class. Observed cells pass through.
    ``pixel`` and ``library`` must live in the same (possibly compressed)
    space as the fit.
    """
    h = h or Hyperparams()
    specs = specs or _specs(library, h)
    idx = fit.index_of(pixel.pixel_id)
    rho = fit.config(idx)
    modal = 1 + fit.class_ids.index(int(fit.modal_class[idx]))
    background = rho.background_years(pixel.J)
    out = np.empty_like(pixel.values)
    for i in range(pixel.J):
        spec = specs[0] if background[i] else specs[modal]
        sample = SpectroTemporalSample(pixel.values[i], pixel.mask[i], f"pixel {pixel.pixel_id}, year {i + 1}")
        out[i] = conditional_moments(sample, spec).imputed.reshape(pixel.values.shape[1:])
    return out
