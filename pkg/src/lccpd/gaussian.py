"""Missing-data Gaussian machinery for spectro-temporal samples.

A sample is a ``B x T`` matrix (bands by within-year time points) together
with a boolean mask marking missing cells. All covariance algebra works on the
flattened vector ``values.ravel()`` (C order), so cell ``(b, t)`` sits at index
``b * T + t``. With that layout the covariance of a matrix-normal sample with
spectral factor ``sigma_s`` (B x B) and temporal factor ``sigma_t`` (T x T) is
``np.kron(sigma_s, sigma_t)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

__all__ = [
    "DEFAULT_JITTER",
    "ConditionalMoments",
    "DegenerateCovarianceError",
    "GaussianSpec",
    "SpectroTemporalSample",
    "conditional_moments",
    "densify_kronecker",
    "observed_loglik",
    "pca_compress",
    "s_and_loglik",
    "s_statistic",
    "spectral_projection",
]

LOG_2PI = np.log(2.0 * np.pi)

#: Relative diagonal jitter (times the mean diagonal) added before factorizing.
DEFAULT_JITTER = 1e-8


class DegenerateCovarianceError(np.linalg.LinAlgError):
    """A covariance (or one of its observed blocks) is not positive definite."""


@dataclass(frozen=True, eq=False)
class SpectroTemporalSample:
    """One year of one pixel: ``values`` is B x T, ``mask`` is True where missing.

    Entries of ``values`` under the mask are ignored (they may be NaN).
    ``tag`` only decorates error messages, e.g. ``"pixel p17, year 4"``.
    """

    values: np.ndarray
    mask: np.ndarray
    tag: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"sample values must be 2-d (B, T), got shape {values.shape}")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.shape != values.shape:
            raise ValueError(f"mask shape {mask.shape} does not match values shape {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def observed(cls, values, tag: str = "") -> "SpectroTemporalSample":
        """Build a sample from an array where NaN marks missing cells."""
        values = np.asarray(values, dtype=float)
        return cls(values, np.isnan(values), tag)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def vector(self) -> np.ndarray:
        return self.values.ravel()

    @property
    def missing(self) -> np.ndarray:
        return self.mask.ravel()


@dataclass(frozen=True, eq=False)
class GaussianSpec:
    """Multivariate normal over flattened samples.

    The covariance is either ``cov`` (dense, BT x BT) or the Kronecker pair
    ``kron = (sigma_s, sigma_t)``. ``ridge`` adds ``ridge * I`` (the model's
    variance scale). ``jitter`` adds a further ``jitter * mean(diag)`` to the
    diagonal purely for numerical safety; set it to 0 for exact algebra.
    """

    mean: np.ndarray
    cov: np.ndarray | None = None
    kron: tuple[np.ndarray, np.ndarray] | None = None
    ridge: float = 0.0
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if (self.cov is None) == (self.kron is None):
            raise ValueError("exactly one of `cov` or `kron` must be given")
        mean = np.asarray(self.mean, dtype=float).ravel()
        object.__setattr__(self, "mean", mean)
        if self.ridge < 0 or self.jitter < 0:
            raise ValueError("ridge and jitter must be nonnegative")
        if self.cov is not None:
            cov = np.asarray(self.cov, dtype=float)
            if cov.shape != (mean.size, mean.size):
                raise ValueError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
            if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12 * np.abs(cov).max()):
                raise ValueError("covariance is not symmetric")
            object.__setattr__(self, "cov", cov)
        else:
            sigma_s, sigma_t = (np.asarray(f, dtype=float) for f in self.kron)
            for name, f in (("spectral", sigma_s), ("temporal", sigma_t)):
                if f.ndim != 2 or f.shape[0] != f.shape[1]:
                    raise ValueError(f"{name} factor must be square, got {f.shape}")
                if not np.allclose(f, f.T, rtol=1e-10, atol=1e-12 * np.abs(f).max()):
                    raise ValueError(f"{name} factor is not symmetric")
            if sigma_s.shape[0] * sigma_t.shape[0] != mean.size:
                raise ValueError(
                    f"Kronecker factors {sigma_s.shape} x {sigma_t.shape} do not match mean length {mean.size}"
                )
            object.__setattr__(self, "kron", (sigma_s, sigma_t))

    @property
    def dim(self) -> int:
        return self.mean.size

    @cached_property
    def diagonal_shift(self) -> float:
        """Total amount added to the base covariance diagonal (ridge + jitter)."""
        if self.cov is not None:
            base = float(np.mean(np.diag(self.cov)))
        else:
            sigma_s, sigma_t = self.kron
            base = float(np.mean(np.diag(sigma_s)) * np.mean(np.diag(sigma_t)))
        return self.ridge + self.jitter * (base + self.ridge)

    @cached_property
    def covariance(self) -> np.ndarray:
        """Dense effective covariance, ridge and jitter included."""
        base = self.cov if self.cov is not None else densify_kronecker(*self.kron)
        out = base.copy()
        out[np.diag_indices_from(out)] += self.diagonal_shift
        out.setflags(write=False)
        return out

    @cached_property
    def cholesky(self):
        return _cho_factor(self.covariance, "full covariance")

    @cached_property
    def logdet(self) -> float:
        if self.kron is not None:
            return self._kron_eigen[2]
        return _cho_logdet(self.cholesky)

    @cached_property
    def _kron_eigen(self):
        sigma_s, sigma_t = self.kron
        a, u_s = np.linalg.eigh(sigma_s)
        b, u_t = np.linalg.eigh(sigma_t)
        spectrum = np.outer(a, b) + self.diagonal_shift
        if np.any(spectrum <= 0):
            raise DegenerateCovarianceError("Kronecker covariance is not positive definite")
        return u_s, u_t, float(np.sum(np.log(spectrum))), spectrum

    def kron_logpdf(self, x) -> float:
        """Log-density of a fully observed flattened sample, using the factors only.

        Never forms the BT x BT matrix: with ``sigma_s = U a U'`` and
        ``sigma_t = V b V'`` the effective covariance is diagonal in the
        ``U (x) V`` basis with eigenvalues ``a_i b_j + shift``.
        """
        if self.kron is None:
            raise ValueError("spec has no Kronecker factors")
        u_s, u_t, logdet, spectrum = self._kron_eigen
        resid = (np.asarray(x, dtype=float).ravel() - self.mean).reshape(spectrum.shape)
        rotated = u_s.T @ resid @ u_t
        maha = float(np.sum(rotated**2 / spectrum))
        return -0.5 * (self.dim * LOG_2PI + logdet + maha)

    def dense_logpdf(self, x) -> float:
        """Log-density of a fully observed flattened sample via dense Cholesky."""
        resid = np.asarray(x, dtype=float).ravel() - self.mean
        z = linalg.solve_triangular(self.cholesky[0], resid, lower=self.cholesky[1])
        return -0.5 * (self.dim * LOG_2PI + self.logdet + float(z @ z))


@dataclass(frozen=True, eq=False)
class ConditionalMoments:
    """Imputed sample and conditional covariance of its missing entries.

    ``imputed`` is the flattened sample with missing entries replaced by their
    conditional expectation; ``cond_var`` is BT x BT and zero outside the
    missing-by-missing block.
    """

    imputed: np.ndarray
    cond_var: np.ndarray


def _cho_factor(mat, tag=""):
    try:
        return linalg.cho_factor(mat, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        where = f" ({tag})" if tag else ""
        raise DegenerateCovarianceError(f"covariance block is not positive definite{where}") from exc


def _cho_logdet(factor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))


def _check_dims(sample: SpectroTemporalSample, spec: GaussianSpec):
    if sample.values.size != spec.dim:
        raise ValueError(f"sample has {sample.values.size} cells but spec has dimension {spec.dim}")


def conditional_moments(sample: SpectroTemporalSample, spec: GaussianSpec) -> ConditionalMoments:
    """Conditional mean and covariance of the missing cells given the observed ones."""
    _check_dims(sample, spec)
    x = sample.vector
    miss = sample.missing
    obs = ~miss
    mu = spec.mean
    cov = spec.covariance
    n = spec.dim

    if not miss.any():
        return ConditionalMoments(x.copy(), np.zeros((n, n)))
    if not obs.any():
        return ConditionalMoments(mu.copy(), np.array(cov))

    factor = _cho_factor(cov[np.ix_(obs, obs)], sample.tag)
    cross = cov[np.ix_(obs, miss)]
    coef = linalg.cho_solve(factor, cross, check_finite=False)

    imputed = x.copy()
    imputed[miss] = mu[miss] + coef.T @ (x[obs] - mu[obs])
    block = cov[np.ix_(miss, miss)] - cross.T @ coef
    cond_var = np.zeros((n, n))
    cond_var[np.ix_(miss, miss)] = 0.5 * (block + block.T)
    return ConditionalMoments(imputed, cond_var)


def s_statistic(sample: SpectroTemporalSample, spec: GaussianSpec) -> float:
    """Expected complete-data deviance of a partially observed sample.

    ``log|Sigma| + (x~ - mu)' Sigma^-1 (x~ - mu) + sum_{j,k in miss} (Sigma^-1)_jk V_jk``
    with ``x~`` and ``V`` from :func:`conditional_moments`. This evaluates the
    definition term by term; the fit engine uses the equivalent
    :func:`s_and_loglik`.
    """
    moments = conditional_moments(sample, spec)
    factor = spec.cholesky
    resid = moments.imputed - spec.mean
    maha = float(resid @ linalg.cho_solve(factor, resid, check_finite=False))
    miss = sample.missing
    trace = 0.0
    if miss.any():
        precision = linalg.cho_solve(factor, np.eye(spec.dim), check_finite=False)
        trace = float(np.sum(precision[np.ix_(miss, miss)] * moments.cond_var[np.ix_(miss, miss)]))
    return _cho_logdet(factor) + maha + trace


def s_and_loglik(sample: SpectroTemporalSample, spec: GaussianSpec) -> tuple[float, float]:
    """S-statistic and observed-data log-likelihood from one observed-block Cholesky.

    Uses two identities: the imputed vector's Mahalanobis distance equals the
    observed block's, and ``(Sigma^-1)_mm`` is the inverse of the conditional
    covariance, so the trace term equals the number of missing cells.
    """
    _check_dims(sample, spec)
    miss = sample.missing
    n_miss = int(miss.sum())
    if n_miss == spec.dim:
        return spec.logdet + spec.dim, 0.0
    obs = ~miss
    if n_miss == 0:
        factor = spec.cholesky
        resid = sample.vector - spec.mean
        logdet_obs = spec.logdet
    else:
        cov = spec.covariance
        factor = _cho_factor(cov[np.ix_(obs, obs)], sample.tag)
        resid = sample.vector[obs] - spec.mean[obs]
        logdet_obs = _cho_logdet(factor)
    z = linalg.solve_triangular(factor[0], resid, lower=True, check_finite=False)
    maha = float(z @ z)
    n_obs = spec.dim - n_miss
    s_value = spec.logdet + maha + n_miss
    loglik = -0.5 * (n_obs * LOG_2PI + logdet_obs + maha)
    return s_value, loglik


def observed_loglik(sample: SpectroTemporalSample, spec: GaussianSpec) -> float:
    """Log-density of the observed cells under their marginal normal; 0 if none observed."""
    return s_and_loglik(sample, spec)[1]


def densify_kronecker(sigma_s, sigma_t) -> np.ndarray:
    """Dense ``sigma_s (x) sigma_t`` matching the band-major flattening."""
    sigma_s = np.asarray(sigma_s, dtype=float)
    sigma_t = np.asarray(sigma_t, dtype=float)
    if sigma_s.ndim != 2 or sigma_t.ndim != 2:
        raise ValueError("Kronecker factors must be 2-d")
    return np.kron(sigma_s, sigma_t)


def spectral_projection(sigma_s, K: int, whiten: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Projection matrix for PCA compression of the band axis.

    Returns ``(A, eigenvalues)`` where ``A = Diag(lambda_1:K)^-1 P_1:K'`` (or
    ``^-1/2`` with ``whiten=True``) and ``eigenvalues`` are all B eigenvalues
    of ``sigma_s`` in descending order. Eigenvector signs are fixed so the
    largest-magnitude entry of each is positive.
    """
    sigma_s = np.asarray(sigma_s, dtype=float)
    B = sigma_s.shape[0]
    if sigma_s.shape != (B, B) or not np.allclose(sigma_s, sigma_s.T):
        raise ValueError("spectral covariance must be square and symmetric")
    if not 1 <= K <= B:
        raise ValueError(f"compression rank K must be in [1, {B}], got {K}")
    lam, vecs = np.linalg.eigh(sigma_s)
    order = np.argsort(-lam, kind="stable")
    lam, vecs = lam[order], vecs[:, order]
    if lam[-1] <= 0:
        raise DegenerateCovarianceError("spectral covariance is not positive definite")
    pivots = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[pivots, np.arange(B)])
    power = 0.5 if whiten else 1.0
    A = vecs[:, :K].T / lam[:K, None] ** power
    return A, lam


def pca_compress(sample: SpectroTemporalSample, sigma_s, K: int, whiten: bool = False) -> SpectroTemporalSample:
    """Compress the band axis of a sample to K rows.

    ``X* = Diag(lambda_1:K)^-1 P_1:K' X`` (``^-1/2`` if ``whiten``). Every
    compressed row mixes all bands, so a time point missing in any band is
    missing in all K compressed rows.
    """
    A, _ = spectral_projection(sigma_s, K, whiten)
    if sample.shape[0] != A.shape[1]:
        raise ValueError(f"sample has {sample.shape[0]} bands, spectral covariance has {A.shape[1]}")
    time_missing = sample.mask.any(axis=0)
    filled = np.where(sample.mask, 0.0, sample.values)
    compressed = A @ filled
    mask = np.broadcast_to(time_missing, compressed.shape).copy()
    compressed[mask] = np.nan
    return SpectroTemporalSample(compressed, mask, sample.tag)
