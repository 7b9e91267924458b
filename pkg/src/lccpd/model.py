"""Land-cover class library, hyperparameters and change configurations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np

from .gaussian import (
    DEFAULT_JITTER,
    DegenerateCovarianceError,
    GaussianSpec,
    SpectroTemporalSample,
    densify_kronecker,
    spectral_projection,
)

__all__ = [
    "BACKGROUND",
    "Background",
    "ChangeClass",
    "ChangeConfig",
    "ClassLibrary",
    "ConvergenceError",
    "Hyperparams",
    "PixelSeries",
    "config_log_prior",
    "config_matrix",
    "effective_cov",
    "enumerate_configs",
    "estimate_class_params",
    "log_prior_vector",
    "n_configs",
]

#: Sentinel accepted by :func:`effective_cov` for the background class.
BACKGROUND = "background"


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class ChangeConfig:
    """Segmentation ``(rho1, rho2)`` of years ``1..J``.

    Years ``rho1 + 1 .. rho2`` are in the change state, the rest are
    background. ``(J, J)`` is the only configuration with ``rho1 == rho2``.
    """

    rho1: int
    rho2: int

    def validate(self, J: int) -> "ChangeConfig":
        r1, r2 = self.rho1, self.rho2
        ok = 1 <= r1 <= r2 <= J and (r1 < r2 or r1 == J)
        if not ok:
            raise ValueError(f"invalid change configuration {(r1, r2)} for J={J}")
        return self

    def is_change(self) -> bool:
        return self.rho1 < self.rho2

    def n_change_points(self, J: int) -> int:
        if not self.is_change():
            return 0
        return 1 if self.rho2 == J else 2

    def background_years(self, J: int) -> np.ndarray:
        """Boolean array over years 1..J (index i-1), True for background years."""
        years = np.arange(1, J + 1)
        return (years <= self.rho1) | (years > self.rho2)

    def change_years(self, J: int) -> np.ndarray:
        return ~self.background_years(J)

    @classmethod
    def no_change(cls, J: int) -> "ChangeConfig":
        return cls(J, J)


def n_configs(J: int) -> int:
    return 1 + (J - 1) + math.comb(J - 1, 2)


def enumerate_configs(J: int) -> list[ChangeConfig]:
    """All configurations for J years in the fixed order used for tie-breaking.

    No-change first, then one-change ``(r, J)`` for ascending r, then
    two-change ``(r1, r2)`` in lexicographic order.
    """
    if J < 2:
        raise ValueError(f"need at least 2 years, got J={J}")
    configs = [ChangeConfig(J, J)]
    configs += [ChangeConfig(r, J) for r in range(1, J)]
    configs += [ChangeConfig(r1, r2) for r1 in range(1, J - 1) for r2 in range(r1 + 1, J)]
    return configs


@lru_cache(maxsize=64)
def _config_arrays(J: int):
    configs = enumerate_configs(J)
    change = np.array([c.change_years(J) for c in configs], dtype=bool)
    kinds = np.array([c.n_change_points(J) for c in configs], dtype=int)
    bounds = np.array([(c.rho1, c.rho2) for c in configs], dtype=int)
    for arr in (change, kinds, bounds):
        arr.setflags(write=False)
    return change, kinds, bounds


def config_matrix(J: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Enumeration-ordered arrays ``(change_years, n_change_points, (rho1, rho2))``.

    ``change_years`` has shape ``(n_configs, J)``.
    """
    return _config_arrays(J)


@dataclass(frozen=True)
class Hyperparams:
    """Prior and algorithm settings.

    Defaults are the case-study values: ``pi0=1e-10``, ``piR=0.01`` and
    ``kappa0=kappac=5e4`` (reflectance scaled by 10000, squared). ``dirichlet``
    defaults to ``1 + 1/|C|`` for every change class. ``K=None`` disables
    spectral compression.
    """

    pi0: float = 1e-10
    piR: float = 0.01
    kappa0: float = 5e4
    kappac: float = 5e4
    dirichlet: tuple[float, ...] | None = None
    epsilon: float = 1e-6
    K: int | None = None
    whiten: bool = False
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        if not 0.0 < self.pi0 < 1.0:
            raise ValueError(f"pi0 must lie in (0, 1), got {self.pi0}")
        if not 0.0 < self.piR < 1.0:
            raise ValueError(f"piR must lie in (0, 1), got {self.piR}")
        if self.kappa0 < 0 or self.kappac < 0:
            raise ValueError("variance scales kappa0 and kappac must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.K is not None and self.K < 1:
            raise ValueError("compression rank K must be >= 1")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if self.dirichlet is not None:
            weights = tuple(float(w) for w in self.dirichlet)
            if any(not w >= 1.0 for w in weights):
                raise ValueError("Dirichlet weights must all be >= 1")
            object.__setattr__(self, "dirichlet", weights)

    def dirichlet_weights(self, n_classes: int) -> np.ndarray:
        if self.dirichlet is None:
            return np.full(n_classes, 1.0 + 1.0 / n_classes)
        if len(self.dirichlet) != n_classes:
            raise ValueError(f"{len(self.dirichlet)} Dirichlet weights given for {n_classes} change classes")
        return np.array(self.dirichlet)


def _log_no_recovery(h: Hyperparams, J: int) -> float:
    # with J = 2 no recovery configuration exists, so every change is a one-change
    return 0.0 if J == 2 else math.log1p(-h.piR)


def config_log_prior(rho: ChangeConfig, h: Hyperparams, J: int) -> float:
    rho.validate(J)
    kind = rho.n_change_points(J)
    if kind == 0:
        return math.log1p(-h.pi0)
    if kind == 1:
        return math.log(h.pi0) + _log_no_recovery(h, J) - math.log(J - 1)
    return math.log(h.pi0) + math.log(h.piR) - math.log(math.comb(J - 1, 2))


def log_prior_vector(h: Hyperparams, J: int) -> np.ndarray:
    """Log prior of every configuration, in enumeration order."""
    _, kinds, _ = config_matrix(J)
    per_kind = np.array(
        [
            math.log1p(-h.pi0),
            math.log(h.pi0) + _log_no_recovery(h, J) - math.log(J - 1),
            math.log(h.pi0) + math.log(h.piR) - math.log(math.comb(J - 1, 2)) if J >= 3 else -np.inf,
        ]
    )
    return per_kind[kinds]


@dataclass(frozen=True, eq=False)
class PixelSeries:
    """All J years of one pixel: ``values`` and ``mask`` have shape (J, B, T)."""

    pixel_id: str
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if values.ndim != 3:
            raise ValueError(f"pixel {self.pixel_id}: values must have shape (J, B, T), got {values.shape}")
        if mask.shape != values.shape:
            raise ValueError(f"pixel {self.pixel_id}: mask shape {mask.shape} != values shape {values.shape}")
        object.__setattr__(self, "pixel_id", str(self.pixel_id))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_nan(cls, pixel_id, values) -> "PixelSeries":
        values = np.asarray(values, dtype=float)
        return cls(pixel_id, values, np.isnan(values))

    @property
    def dims(self) -> tuple[int, int, int]:
        """``(B, T, J)``."""
        J, B, T = self.values.shape
        return B, T, J

    @property
    def J(self) -> int:
        return self.values.shape[0]

    def year(self, i: int) -> SpectroTemporalSample:
        """Sample for 1-based year ``i``."""
        return SpectroTemporalSample(self.values[i - 1], self.mask[i - 1], f"pixel {self.pixel_id}, year {i}")

    def missing_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True, eq=False)
class ChangeClass:
    class_id: int
    label: str
    mean: np.ndarray
    temporal_cov: np.ndarray


@dataclass(frozen=True, eq=False)
class Background:
    """Background class: dense ``cov`` (BT x BT) or a temporal factor paired with the shared spectral one."""

    class_id: int
    label: str
    mean: np.ndarray
    cov: np.ndarray | None = None
    temporal_cov: np.ndarray | None = None


def _check_spd(mat, what):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{what} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, rtol=1e-8, atol=1e-12 * max(np.abs(mat).max(), 1.0)):
        raise ValueError(f"{what} is not symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(f"{what} is not positive definite") from exc
    return mat


@dataclass(frozen=True, eq=False)
class ClassLibrary:
    """Class parameters of the matrix-normal land-cover model.

    Change classes share the spectral covariance ``spectral_cov`` and carry
    their own mean (length B*T, band-major) and temporal covariance. Classes
    are kept sorted by id. ``ridge_spectral`` is None for raw data; after
    spectral compression it holds ``A A'`` so that the variance-scale ridge
    becomes ``kappa * (A A' (x) I_T)``.
    """

    spectral_cov: np.ndarray
    background: Background
    classes: tuple[ChangeClass, ...]
    ridge_spectral: np.ndarray | None = None
    compression: dict | None = field(default=None)

    def __post_init__(self):
        sigma_s = _check_spd(self.spectral_cov, "spectral covariance")
        B = sigma_s.shape[0]
        classes = tuple(sorted(self.classes, key=lambda c: c.class_id))
        if not classes:
            raise ValueError("class library needs at least one change class")
        ids = [c.class_id for c in classes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class ids in {ids}")
        if self.background.class_id in ids:
            raise ValueError(f"background id {self.background.class_id} is also a change class")
        T = np.asarray(classes[0].temporal_cov).shape[0]
        fixed = []
        for c in classes:
            mean = np.asarray(c.mean, dtype=float).ravel()
            if mean.size != B * T:
                raise ValueError(f"class {c.class_id}: mean has length {mean.size}, expected {B * T}")
            sigma_t = _check_spd(c.temporal_cov, f"class {c.class_id} temporal covariance")
            if sigma_t.shape != (T, T):
                raise ValueError(f"class {c.class_id}: temporal covariance must be {T}x{T}")
            fixed.append(replace(c, class_id=int(c.class_id), mean=mean, temporal_cov=sigma_t))
        bg = self.background
        mean = np.asarray(bg.mean, dtype=float).ravel()
        if mean.size != B * T:
            raise ValueError(f"background mean has length {mean.size}, expected {B * T}")
        if (bg.cov is None) == (bg.temporal_cov is None):
            raise ValueError("background needs exactly one of a dense covariance or a temporal factor")
        if bg.cov is not None:
            cov = _check_spd(bg.cov, "background covariance")
            if cov.shape != (B * T, B * T):
                raise ValueError(f"background covariance must be {B * T}x{B * T}")
            bg = replace(bg, class_id=int(bg.class_id), mean=mean, cov=cov)
        else:
            sigma_t = _check_spd(bg.temporal_cov, "background temporal covariance")
            if sigma_t.shape != (T, T):
                raise ValueError(f"background temporal covariance must be {T}x{T}")
            bg = replace(bg, class_id=int(bg.class_id), mean=mean, temporal_cov=sigma_t)
        object.__setattr__(self, "spectral_cov", sigma_s)
        object.__setattr__(self, "classes", tuple(fixed))
        object.__setattr__(self, "background", bg)

    @property
    def B(self) -> int:
        return self.spectral_cov.shape[0]

    @property
    def T(self) -> int:
        return self.classes[0].temporal_cov.shape[0]

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    def get(self, class_id: int) -> ChangeClass:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(f"unknown change class id {class_id!r}")

    def background_cov(self) -> np.ndarray:
        """Dense background covariance ``Sigma_F`` (without variance scale)."""
        bg = self.background
        if bg.cov is not None:
            return bg.cov
        return densify_kronecker(self.spectral_cov, bg.temporal_cov)

    def compress(self, K: int, whiten: bool = False) -> "ClassLibrary":
        """Library expressed in the K-row compressed band space of :func:`pca_compress`."""
        if self.compression is not None:
            raise ValueError("library is already compressed")
        A, lam = spectral_projection(self.spectral_cov, K, whiten)
        T = self.T
        lift = np.kron(A, np.eye(T))

        def mean_of(m):
            return (A @ m.reshape(self.B, T)).ravel()

        ridge = A @ (np.eye(self.B) if self.ridge_spectral is None else self.ridge_spectral) @ A.T
        bg = self.background
        if bg.cov is not None:
            new_bg = replace(bg, mean=mean_of(bg.mean), cov=_sym(lift @ bg.cov @ lift.T))
        else:
            new_bg = replace(bg, mean=mean_of(bg.mean))
        classes = tuple(replace(c, mean=mean_of(c.mean)) for c in self.classes)
        return ClassLibrary(
            spectral_cov=_sym(A @ self.spectral_cov @ A.T),
            background=new_bg,
            classes=classes,
            ridge_spectral=_sym(ridge),
            compression={"K": K, "whiten": whiten, "eigenvalues": lam.tolist(), "projection": A.tolist()},
        )


def _sym(mat):
    return 0.5 * (mat + mat.T)


def effective_cov(library: ClassLibrary, which, h: Hyperparams) -> GaussianSpec:
    """Marginal year distribution: ``(mu_F, Sigma_F + kappa0 I)`` or ``(mu_g, Sigma_s (x) Sigma_tg + kappac I)``.

    ``which`` is :data:`BACKGROUND`, the background id, or a change-class id.
    """
    bg = library.background
    if which == BACKGROUND or which == bg.class_id:
        mean, kappa = bg.mean, h.kappa0
        if bg.cov is not None:
            base, kron = bg.cov, None
        else:
            base, kron = None, (library.spectral_cov, bg.temporal_cov)
    else:
        cls = library.get(which)
        mean, kappa = cls.mean, h.kappac
        base, kron = None, (library.spectral_cov, cls.temporal_cov)
    if library.ridge_spectral is not None:
        dense = base if base is not None else densify_kronecker(*kron)
        dense = dense + kappa * np.kron(library.ridge_spectral, np.eye(library.T))
        return GaussianSpec(mean, cov=dense, jitter=h.jitter)
    return GaussianSpec(mean, cov=base, kron=kron, ridge=kappa, jitter=h.jitter)


def estimate_class_params(
    samples: Mapping[int, np.ndarray],
    background_id: int,
    labels: Mapping[int, str] | None = None,
    fixed_spectral: np.ndarray | None = None,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> ClassLibrary:
    """Fit a class library from complete training samples by flip-flop maximum likelihood.

    Parameters
    ----------
    samples : mapping of class id to array of shape (n, B, T)
        Fully observed training years per class; must include ``background_id``.
    background_id : int
        Which class plays the background role.
    labels : mapping, optional
        Human-readable class labels.
    fixed_spectral : array, optional
        Hold the spectral covariance at this value instead of estimating it.
    tol, max_iter
        Stop when the largest relative Frobenius change of any covariance
        factor drops below ``tol``; raise :class:`ConvergenceError` otherwise.

    Notes
    -----
    The spectral factor is pooled over all classes and normalized to
    ``trace = B``; each temporal factor absorbs the scale.
    """
    labels = dict(labels or {})
    if background_id not in samples:
        raise ValueError(f"no training samples for background class {background_id}")
    data = {}
    for cid, arr in samples.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 3:
            raise ValueError(f"class {cid}: samples must have shape (n, B, T)")
        if arr.shape[0] < 2:
            raise ValueError(f"class {cid}: need at least 2 samples, got {arr.shape[0]}")
        if np.isnan(arr).any():
            raise ValueError(f"class {cid}: training samples must be complete")
        data[int(cid)] = arr
    shapes = {a.shape[1:] for a in data.values()}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent sample shapes {shapes}")
    (B, T), = shapes

    means = {cid: arr.mean(axis=0) for cid, arr in data.items()}
    resid = {cid: arr - means[cid] for cid, arr in data.items()}
    n_total = sum(a.shape[0] for a in data.values())

    sigma_s = np.eye(B) if fixed_spectral is None else np.asarray(fixed_spectral, dtype=float)
    sigma_t = {cid: np.eye(T) for cid in data}
    for _ in range(max_iter):
        s_inv = _spd_inverse(sigma_s, "spectral covariance")
        new_t = {}
        for cid, R in resid.items():
            acc = np.einsum("nbt,bc,ncu->tu", R, s_inv, R)
            new_t[cid] = _sym(acc / (R.shape[0] * B))
        if fixed_spectral is None:
            acc = np.zeros((B, B))
            for cid, R in resid.items():
                t_inv = _spd_inverse(new_t[cid], f"class {cid} temporal covariance")
                acc += np.einsum("nbt,tu,ncu->bc", R, t_inv, R)
            new_s = _sym(acc / (n_total * T))
            scale = np.trace(new_s) / B
            new_s = new_s / scale
            new_t = {cid: m * scale for cid, m in new_t.items()}
        else:
            new_s = sigma_s
        change = max(
            [_rel_change(new_s, sigma_s)] + [_rel_change(new_t[c], sigma_t[c]) for c in data]
        )
        sigma_s, sigma_t = new_s, new_t
        if change < tol:
            break
    else:
        raise ConvergenceError(f"flip-flop estimator did not converge in {max_iter} iterations")

    for cid, m in sigma_t.items():
        _spd_inverse(m, f"class {cid} temporal covariance")
    classes = tuple(
        ChangeClass(cid, labels.get(cid, str(cid)), means[cid].ravel(), sigma_t[cid])
        for cid in sorted(data)
        if cid != background_id
    )
    background = Background(
        background_id,
        labels.get(background_id, str(background_id)),
        means[background_id].ravel(),
        temporal_cov=sigma_t[background_id],
    )
    return ClassLibrary(sigma_s, background, classes)


def _spd_inverse(mat, what):
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(f"{what} is not positive definite") from exc
    if np.min(np.diag(chol)) <= 1e-12 * np.sqrt(max(np.max(np.diag(mat)), 1e-300)):
        raise DegenerateCovarianceError(f"{what} is numerically singular")
    inv_chol = np.linalg.inv(chol)
    return inv_chol.T @ inv_chol


def _rel_change(new, old):
    return float(np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-300))


def check_region_dims(pixels: Sequence[PixelSeries], library: ClassLibrary) -> tuple[int, int, int]:
    """Common ``(B, T, J)`` of a region, checked against the library."""
    if not pixels:
        raise ValueError("region is empty")
    dims = {p.dims for p in pixels}
    if len(dims) != 1:
        raise ValueError(f"pixels disagree on (B, T, J): {sorted(dims)}")
    (B, T, J), = dims
    if (B, T) != (library.B, library.T):
        raise ValueError(f"region has (B, T) = {(B, T)} but library has {(library.B, library.T)}")
    if J < 2:
        raise ValueError("need at least 2 years per pixel")
    return B, T, J
