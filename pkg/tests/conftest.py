import numpy as np
import pytest

from fedsched.core import DeviceProfile, FrequencyVector, JobSpec
from fedsched.schedulers import SchedulerContext


def fleet(times, data=100, n_jobs=1):
    """Devices whose expected time for a 1-epoch job is exactly ``times[k]`` (mu large)."""
    return [DeviceProfile(k, t / data, 1e12, (data,) * n_jobs) for k, t in enumerate(times)]


def random_fleet(rng, K, n_jobs=1):
    return [
        DeviceProfile(k, rng.uniform(0.001, 0.02), rng.uniform(10, 500), tuple(rng.integers(20, 120, n_jobs)))
        for k in range(K)
    ]


def make_ctx(devices, fraction=None, size=None, free=None, counts=None, seed=0, job=None, round=1, **kw):
    K = len(devices)
    if job is None:
        if fraction is None:
            fraction = size / K
        job = JobSpec(0, fraction, **kw)
    return SchedulerContext(
        job=job,
        round=round,
        devices=devices,
        free=list(range(K)) if free is None else free,
        freqs=FrequencyVector(K if counts is None else counts),
        rng=np.random.default_rng(seed),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def report(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
