import numpy as np
import pytest

from splatforensics.splat_model import RawScene, sh_rest_width


def random_raw(rng, n, sh_degree=3, spread=1.0):
    k = sh_rest_width(sh_degree)
    return RawScene(
        position=rng.normal(0, spread, (n, 3)),
        normal=rng.normal(0, 1, (n, 3)),
        f_dc=rng.normal(0, 0.5, (n, 3)),
        f_rest=rng.normal(0, 0.1, (n, k)),
        opacity_logit=rng.normal(0, 2, n),
        log_scale=rng.normal(-3, 0.7, (n, 3)),
        quat=rng.normal(0, 1, (n, 4)),
        sh_degree=sh_degree,
    )


def coherent_raw(rng, n, sh_degree=3):
    """Attributes vary smoothly along a curve through space."""
    t = np.sort(rng.random(n))
    pos = np.stack([np.cos(6 * t), np.sin(6 * t), 2 * t], axis=1) + rng.normal(0, 0.005, (n, 3))
    k = sh_rest_width(sh_degree)
    return RawScene(
        position=pos,
        f_dc=np.stack([np.sin(3 * t), np.cos(5 * t), t], axis=1),
        f_rest=0.1 * np.sin(np.outer(t, np.arange(1, k + 1))) if k else np.zeros((n, 0)),
        opacity_logit=3 * np.cos(4 * t),
        log_scale=np.stack([-4 + t, -3 - t, -3.5 + 0.5 * np.sin(9 * t)], axis=1),
        quat=np.stack([np.cos(t), np.sin(t), 0.5 * t, 0.2 + 0 * t], axis=1),
        sh_degree=sh_degree,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
