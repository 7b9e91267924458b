import numpy as np
import pytest

from lccpd.model import Background, ChangeClass, ClassLibrary


def random_spd(rng, n, cond=10.0):
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.exp(rng.uniform(0.0, np.log(cond), size=n))
    return (q * eig) @ q.T


def tiny_library(rng, B=2, T=2, n_classes=2, shift=3.0, scale=1.0):
    """Small library with well-separated class means (unit-ish variances)."""
    sigma_s = random_spd(rng, B, 3.0)
    sigma_s *= B / np.trace(sigma_s)
    bg_mean = rng.normal(size=B * T)
    classes = []
    for g in range(n_classes):
        mean = bg_mean + shift * rng.normal(size=B * T)
        classes.append(ChangeClass(10 + g, f"c{g}", mean, scale * random_spd(rng, T, 3.0)))
    background = Background(1, "bg", bg_mean, temporal_cov=scale * random_spd(rng, T, 3.0))
    return ClassLibrary(sigma_s, background, tuple(classes))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS: list[str] = []


def report(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
