"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import math
import time
import warnings

import numpy as np
import pytest

from lccpd.cli import main
from lccpd.em import fit_region
from lccpd.gaussian import GaussianSpec, SpectroTemporalSample, conditional_moments, s_statistic
from lccpd.metrics import accuracy, concordance, summarize_batch
from lccpd.model import (
    BACKGROUND,
    Background,
    ChangeClass,
    ChangeConfig,
    ClassLibrary,
    Hyperparams,
    PixelSeries,
    effective_cov,
    enumerate_configs,
    log_prior_vector,
)
from lccpd.simulate import MISSING_GRID, GenerativeSource, SimSpec, demo_library, make_replication

import oracles
from conftest import random_spd, report

FITS = []


def _fit(pixels, library, h, **kw):
    fit = fit_region(pixels, library, h, **kw)
    FITS.append(fit)
    return fit


# ---- 1: simulation-study analog -----------------------------------------------------------------

@pytest.fixture(scope="module")
def simulation_study():
    library = demo_library(B=7, T=19, n_classes=2, seed=0)
    h = Hyperparams(kappa0=5e4, kappac=5e4)
    source = GenerativeSource(library, h)
    start = time.perf_counter()
    means, fits = {}, {}
    for level in MISSING_GRID:
        spec = SimSpec(J=11, n_change=60, n_nochange=60, replications=10, min_missing_fraction=level, seed=2024)
        estimates, truths = [], []
        for r in range(spec.replications):
            labeled = make_replication(spec, source, r)
            fit = _fit([lp.series for lp in labeled], library, h)
            fits[(level, r)] = (fit, labeled)
            estimates.append(dict(zip(fit.pixel_ids, fit.configs())))
            truths.append({lp.series.pixel_id: lp.truth for lp in labeled})
        means[level] = summarize_batch(estimates, truths, spec.J).mean["overall"]
    return {"means": means, "fits": fits, "elapsed": time.perf_counter() - start, "library": library, "h": h}


def test_criterion_1_simulation_study(simulation_study):
    means = simulation_study["means"]
    levels = sorted(means)
    high_enough = all(means[l] >= 0.90 for l in levels)
    monotone = all(means[b] <= means[a] + 0.02 for a, b in zip(levels, levels[1:]))
    fast = simulation_study["elapsed"] <= 600
    ok = high_enough and monotone and fast
    table = ", ".join(f"{l:.0%}: {means[l]:.4f}" for l in levels)
    report(1, ok, f"mean overall accuracy {table}; {simulation_study['elapsed']:.1f} s")
    assert high_enough, table
    assert monotone, table
    assert fast


# ---- 2: oracle equivalence on tiny instances --------------------------------------------------

def _tiny_instance(rng):
    J = int(rng.integers(2, 5))
    C = int(rng.integers(1, 3))
    B, T = [(1, 1), (1, 2), (2, 1), (2, 2), (1, 3), (1, 4), (4, 1), (3, 1)][int(rng.integers(8))]
    sigma_s = random_spd(rng, B, 4.0)
    bg_mean = rng.normal(size=B * T)
    classes = tuple(ChangeClass(20 + g, f"c{g}", bg_mean + 2.5 * rng.normal(size=B * T), random_spd(rng, T, 4.0))
                    for g in range(C))
    lib = ClassLibrary(sigma_s, Background(1, "bg", bg_mean, temporal_cov=random_spd(rng, T, 4.0)), classes)
    h = Hyperparams(pi0=float(rng.uniform(0.05, 0.95)), piR=float(rng.uniform(0.05, 0.95)),
                    kappa0=float(rng.uniform(0.0, 0.5)), kappac=float(rng.uniform(0.0, 0.5)),
                    dirichlet=tuple(1.0 + rng.uniform(0, 2, size=C)))
    specs = [effective_cov(lib, BACKGROUND, h)] + [effective_cov(lib, c, h) for c in lib.class_ids]
    pixels = []
    for v in range(int(rng.integers(1, 4))):
        truth = enumerate_configs(J)[int(rng.integers(len(enumerate_configs(J))))]
        g = 1 + int(rng.integers(C))
        years = [rng.multivariate_normal(specs[g if c else 0].mean, specs[g if c else 0].covariance)
                 for c in truth.change_years(J)]
        values = np.stack(years).reshape(J, B, T)
        mask = rng.random(values.shape) < 0.3
        pixels.append(PixelSeries(f"v{v}", np.where(mask, np.nan, values), mask))
    return lib, h, specs, pixels


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(77)
    rho_mismatch, worst_alpha = 0, 0.0
    for _ in range(100):
        lib, h, specs, pixels = _tiny_instance(rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = _fit(pixels, lib, h)
        J = pixels[0].J
        for k, px in enumerate(pixels):
            s_table = np.array([[oracles.s_direct(sp.mean, sp.covariance, px.values[i].ravel(), px.mask[i].ravel())
                                 for sp in specs] for i in range(J)])
            best, _ = oracles.brute_force_rho(s_table, fit.posteriors[k], fit.alpha, h.pi0, h.piR)
            if best != (fit.config(k).rho1, fit.config(k).rho2):
                rho_mismatch += 1
        expected = oracles.alpha_update([(int(a), int(b)) for a, b in fit.rho], fit.posteriors,
                                        h.dirichlet_weights(len(lib.classes)))
        worst_alpha = max(worst_alpha, float(np.max(np.abs(expected - fit.alpha))))
    ok = rho_mismatch == 0 and worst_alpha <= 1e-10
    report(2, ok, f"100 tiny instances: {rho_mismatch} rho mismatches vs brute force, max alpha error {worst_alpha:.2e}")
    assert rho_mismatch == 0
    assert worst_alpha <= 1e-10


# ---- 4: conditional moments -----------------------------------------------------------------

def test_criterion_4_conditional_moments():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 7))
        cov = random_spd(rng, n, 20.0)
        mu = rng.normal(size=n)
        x = rng.normal(size=n)
        miss = rng.random(n) < 0.5
        if miss.all() or not miss.any():
            miss[:] = False
            miss[int(rng.integers(n))] = True
        got = conditional_moments(SpectroTemporalSample(x[None, :], miss[None, :]), GaussianSpec(mu, cov=cov, jitter=0.0))
        mean, var = oracles.direct_conditional(mu, cov, x, miss)
        worst = max(worst, np.max(np.abs(got.imputed[miss] - mean)), np.max(np.abs(got.cond_var[np.ix_(miss, miss)] - var)))

    outside = 0
    for _ in range(50):
        n = int(rng.integers(2, 7))
        cov = random_spd(rng, n, 10.0)
        mu = rng.normal(size=n)
        x = rng.normal(size=n)
        miss = np.zeros(n, bool)
        miss[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = True
        spec = GaussianSpec(mu, cov=cov, jitter=0.0)
        sample = SpectroTemporalSample(np.where(miss, np.nan, x)[None, :], miss[None, :])
        target = s_statistic(sample, spec)
        m = conditional_moments(sample, spec)
        draws = rng.multivariate_normal(m.imputed[miss], m.cond_var[np.ix_(miss, miss)], size=100_000)
        full = np.tile(x, (draws.shape[0], 1))
        full[:, miss] = draws
        r = full - mu
        vals = np.linalg.slogdet(cov)[1] + np.einsum("ni,ij,nj->n", r, np.linalg.inv(cov), r)
        if abs(vals.mean() - target) > 3 * vals.std(ddof=1) / math.sqrt(vals.size):
            outside += 1
    # 3-SE bands hold with probability 0.997 each; allow the one miss expected in 50 draws by chance
    ok = worst <= 1e-10 and outside <= 1
    report(4, ok, f"max moment error {worst:.2e}; {outside}/50 Monte-Carlo cases outside 3 SE")
    assert worst <= 1e-10
    assert outside <= 1


# ---- 5: prior normalization -------------------------------------------------------------------

def test_criterion_5_prior_normalization():
    grid = [(1e-10, 0.01), (0.5, 0.5), (1e-3, 0.9), (0.9, 1e-3), (0.25, 0.75), (0.999, 0.999)]
    worst = 0.0
    for J in range(2, 31):
        for pi0, piR in grid:
            worst = max(worst, abs(float(np.exp(log_prior_vector(Hyperparams(pi0=pi0, piR=piR), J)).sum()) - 1.0))
    ok = worst <= 1e-12
    report(5, ok, f"max |sum of priors - 1| = {worst:.2e} over J=2..30 and {len(grid)} (pi0, piR) pairs")
    assert ok


# ---- 6: metric identities ------------------------------------------------------------------

def test_criterion_6_metric_identities():
    t = accuracy(ChangeConfig(3, 7), ChangeConfig(4, 8), 10)
    example = (t.producer, t.user) == (0.75, 0.75) and abs(t.overall - 0.8) < 1e-15
    z = accuracy(ChangeConfig(10, 10), ChangeConfig(10, 10), 10)
    zero_rule = z.producer == 0.0 and z.user == 0.0 and z.overall == 1.0
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(10_000):
        J = int(rng.integers(2, 20))
        configs = enumerate_configs(J)
        rho, truth = (configs[int(rng.integers(len(configs)))] for _ in range(2))
        if concordance(rho, truth.change_years(J).astype(float), J) != accuracy(rho, truth, J).overall:
            mismatches += 1
    ok = example and zero_rule and mismatches == 0
    report(6, ok, f"worked example {example}, zero-denominator rule {zero_rule}, {mismatches}/10000 fuzz mismatches")
    assert ok


# ---- 7: Kronecker consistency ------------------------------------------------------------------

def test_criterion_7_kronecker_consistency():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        B, T = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        spec = GaussianSpec(rng.normal(size=B * T), kron=(random_spd(rng, B, 50.0), random_spd(rng, T, 50.0)),
                            ridge=float(rng.uniform(0, 1)))
        dense = GaussianSpec(spec.mean, cov=spec.covariance, jitter=0.0)
        x = spec.mean + rng.normal(size=B * T) * 2
        a, b = spec.kron_logpdf(x), dense.dense_logpdf(x)
        worst = max(worst, abs(a - b) / abs(b))
    ok = worst <= 1e-9
    report(7, ok, f"max relative log-density gap {worst:.2e} over 100 factor pairs")
    assert ok


# ---- 8: determinism ----------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path, simulation_study):
    args = ["simulate", "--replications", "2", "--missing", "0.3", "--n-change", "5", "--n-nochange", "5", "--seed", "11"]
    main(args + ["--output", str(tmp_path / "a")])
    main(args + ["--output", str(tmp_path / "b")])
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same_files = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    _, labeled = simulation_study["fits"][(0.5, 0)]
    pixels = [lp.series for lp in labeled]
    one = _fit(pixels, simulation_study["library"], simulation_study["h"], threads=1)
    many = _fit(pixels, simulation_study["library"], simulation_study["h"], threads=4)
    gap = max(
        float(np.max(np.abs(one.posteriors - many.posteriors))),
        float(np.max(np.abs(one.alpha - many.alpha))),
        float(np.max(np.abs(one.no_change_prob - many.no_change_prob))),
        float(np.max(np.abs(np.array(one.q_trace) - np.array(many.q_trace)))) / max(1.0, abs(one.q_trace[-1])),
    )
    same_rho = np.array_equal(one.rho, many.rho)
    ok = same_files and same_rho and gap <= 1e-12
    report(8, ok, f"simulate files byte-identical: {same_files} ({len(files)} files); 1 vs 4 threads: rho equal {same_rho}, max gap {gap:.1e}")
    assert ok


# ---- 9: robustness to a single outlying year ------------------------------------------------

def test_criterion_9_robustness():
    library = demo_library(B=7, T=19, n_classes=2, seed=0)
    h = Hyperparams(pi0=1e-10, piR=0.01)
    rng = np.random.default_rng(9)
    J = 11
    bg = effective_cov(library, BACKGROUND, h)
    chol = np.linalg.cholesky(bg.covariance)

    def background_year():
        return bg.mean + chol @ rng.normal(size=bg.dim)

    pixels, kinds = [], []
    for k in range(10):
        years = [background_year() for _ in range(J)]
        year = [5, J - 1][k % 2]  # an interior year and the final year
        years[year] = bg.mean + 2.0 * (years[year] - bg.mean)  # Mahalanobis distance doubled
        pixels.append(np.stack(years))
        kinds.append("outlier")
    target = library.get(100).mean
    for k in range(10):
        years = [background_year() for _ in range(J)]
        for i in range(J - 3, J):
            years[i] = years[i] - bg.mean + target
        pixels.append(np.stack(years))
        kinds.append("conversion")
    series = []
    for k, values in enumerate(pixels):
        values = values.reshape(J, library.B, library.T)
        mask = rng.random(values.shape) < 0.2
        series.append(PixelSeries(f"{kinds[k]}-{k}", np.where(mask, np.nan, values), mask))
    fit = _fit(series, library, h)
    configs = fit.configs()
    outliers_quiet = sum(not c.is_change() for c, kind in zip(configs, kinds) if kind == "outlier")
    conversions_found = sum(c == ChangeConfig(J - 3, J) for c, kind in zip(configs, kinds) if kind == "conversion")
    ok = outliers_quiet == 10 and conversions_found == 10
    report(9, ok, f"single doubled-distance year left unflagged in {outliers_quiet}/10 pixels; "
                  f"3-year conversion found at (8, 11) in {conversions_found}/10 pixels")
    assert ok


# ---- 3: monotone Q (runs last so it sees every fit above) ------------------------------------

def test_criterion_3_monotone_q(simulation_study):
    # Within an iteration Q(theta_new; theta_old) >= Q(theta_old; theta_old): the alpha and rho
    # updates are exact conditional maximizers under fixed class posteriors.
    worst_gain = min(float(np.min(f.q_gains)) for f in FITS)
    # Across iterations the posteriors move with alpha, so consecutive q_trace values are not
    # comparable; the drift is reported, not asserted.
    drift = min([float(np.min(np.diff(f.q_trace))) for f in FITS if len(f.q_trace) > 1] + [0.0])
    dipping = sum(1 for f in FITS if len(f.q_trace) > 1 and np.min(np.diff(f.q_trace)) < -1e-8)
    ok = worst_gain >= -1e-8
    report(3, ok, f"{len(FITS)} fits; smallest per-iteration Q gain {worst_gain:.2e}; "
                  f"between iterations q_trace dipped in {dipping} fits (largest dip {-drift:.3g})")
    assert ok
