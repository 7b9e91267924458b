"""Accuracy and concordance of estimated change configurations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .gaussian import SpectroTemporalSample, s_and_loglik
from .model import BACKGROUND, ChangeConfig, ClassLibrary, Hyperparams, PixelSeries, effective_cov

__all__ = [
    "BASELINE_CAVEAT",
    "AccuracyTriple",
    "BatchSummary",
    "accuracy",
    "concordance",
    "quantile_summary",
    "summarize_batch",
    "threshold_baseline",
]

BASELINE_CAVEAT = (
    "threshold_baseline is a simple per-year outlier stub, not a reproduction of any published comparator"
)

#: Published overall-accuracy batch means of this change point method at 20/30/40/50% missing data.
PUBLISHED_ACCURACY = {0.2: 0.920, 0.3: 0.916, 0.4: 0.913, 0.5: 0.909}


@dataclass(frozen=True)
class AccuracyTriple:
    producer: float
    user: float
    overall: float


def accuracy(rho: ChangeConfig, truth: ChangeConfig, J: int) -> AccuracyTriple:
    """Producer's, user's and overall accuracy of ``rho`` against ``truth`` over years 1..J.

    Producer's (user's) accuracy is 0 when the truth (estimate) has no change years.
    """
    est = rho.validate(J).change_years(J)
    ref = truth.validate(J).change_years(J)
    hits = int(np.sum(est & ref))
    n_ref, n_est = int(ref.sum()), int(est.sum())
    producer = hits / n_ref if n_ref else 0.0
    user = hits / n_est if n_est else 0.0
    overall = float(np.mean(est == ref))
    return AccuracyTriple(producer, user, overall)


def concordance(rho: ChangeConfig, fractions, J: int) -> float:
    """Expected overall accuracy when year i changed with probability ``fractions[i-1]``."""
    f = np.asarray(fractions, dtype=float)
    if f.shape != (J,):
        raise ValueError(f"need {J} yearly fractions, got shape {f.shape}")
    if np.any((f < 0) | (f > 1)):
        raise ValueError("reference fractions must lie in [0, 1]")
    change = rho.validate(J).change_years(J)
    return float(np.mean(np.where(change, f, 1.0 - f)))


def quantile_summary(values) -> dict:
    """Boxplot statistics with 1.5 IQR whiskers."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ValueError("no values to summarize")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
    iqr = q3 - q1
    lo = x[x >= q1 - 1.5 * iqr].min()
    hi = x[x <= q3 + 1.5 * iqr].max()
    return {
        "min": float(x[0]),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(x[-1]),
        "whisker_low": float(lo),
        "whisker_high": float(hi),
        "n": int(x.size),
    }


@dataclass
class BatchSummary:
    """Per-replication mean accuracies and their batch-level aggregates."""

    replications: list[dict]
    mean: dict
    quantiles: dict

    def rows(self) -> list[dict]:
        return list(self.replications)


def summarize_batch(
    estimates: Sequence[Mapping[str, ChangeConfig]],
    truths: Sequence[Mapping[str, ChangeConfig]],
    J: int,
) -> BatchSummary:
    """Average P/U/A per replication, then over replications.

    ``estimates[r]`` and ``truths[r]`` map pixel ids to configurations and
    must cover the same ids.
    """
    if len(estimates) != len(truths):
        raise ValueError(f"{len(estimates)} estimated replications vs {len(truths)} truth replications")
    reps = []
    for r, (est, ref) in enumerate(zip(estimates, truths)):
        if set(est) != set(ref):
            missing = sorted(set(ref) ^ set(est))[:5]
            raise KeyError(f"replication {r}: pixel ids differ between estimates and truth, e.g. {missing}")
        triples = [accuracy(est[pid], ref[pid], J) for pid in sorted(ref)]
        reps.append(
            {
                "replication": r,
                "n_pixels": len(triples),
                "producer": float(np.mean([t.producer for t in triples])),
                "user": float(np.mean([t.user for t in triples])),
                "overall": float(np.mean([t.overall for t in triples])),
            }
        )
    keys = ("producer", "user", "overall")
    mean = {k: float(np.mean([row[k] for row in reps])) for k in keys}
    quantiles = {k: quantile_summary([row[k] for row in reps]) for k in keys}
    return BatchSummary(reps, mean, quantiles)


def threshold_baseline(pixel: PixelSeries, library: ClassLibrary, quantile: float,
                       h: Hyperparams | None = None) -> ChangeConfig:
    """Flag outlying years under the background class and report the longest flagged run.

    A year is flagged when its observed-data log-likelihood under the
    background class falls below the ``quantile``-quantile of that
    likelihood for genuine background years with the same missingness
    pattern (equivalently, its Mahalanobis distance has chi-square upper tail
    probability below ``quantile``). Year 1 is always background. Ties between
    runs go to the earliest. See :data:`BASELINE_CAVEAT`.
    """
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must lie in [0, 1]")
    h = h or Hyperparams()
    spec = effective_cov(library, BACKGROUND, h)
    J = pixel.J
    flagged = np.zeros(J, dtype=bool)
    for i in range(1, J):
        sample = SpectroTemporalSample(pixel.values[i], pixel.mask[i])
        n_obs = int((~sample.mask).sum())
        if n_obs == 0:
            continue
        s_value, _ = s_and_loglik(sample, spec)
        maha = s_value - spec.logdet - (spec.dim - n_obs)
        flagged[i] = stats.chi2.sf(maha, n_obs) < quantile
    best_start, best_len, start = -1, 0, None
    for i in range(J + 1):
        on = i < J and flagged[i]
        if on and start is None:
            start = i
        elif not on and start is not None:
            if i - start > best_len:
                best_start, best_len = start, i - start
            start = None
    if best_len == 0:
        return ChangeConfig(J, J)
    # 0-based run [best_start, best_start + best_len) -> years best_start+1 .. best_start+best_len
    return ChangeConfig(best_start, best_start + best_len)
