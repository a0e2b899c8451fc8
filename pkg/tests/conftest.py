import time

import numpy as np
import pytest

from facediff import autograd as ag
from facediff import pipeline as pl
from facediff.data import SyntheticSpec, generate_dataset
from facediff.profiles import get_profile
from facediff.types import AUVocabulary

_CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, detail)`` records and prints one pass/fail line."""
    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)
        return ok
    return record


class Desk:
    """Desk-profile dataset, vocabulary and split shared by the end-to-end tests."""

    def __init__(self):
        self.profile = get_profile("desk")
        self.vocab = AUVocabulary.default()
        self.ds = generate_dataset(SyntheticSpec(**self.profile["data"], seed=0), self.vocab)
        self.train_idx, self.val_idx = self.ds.split()
        self.train = self.ds.training_data(self.train_idx)
        self.val = self.ds.training_data(self.val_idx)


@pytest.fixture(scope="session")
def desk():
    return Desk()


@pytest.fixture(scope="session")
def stage1(desk):
    """Base model trained with the desk profile; returns ``(generator, seconds)``."""
    with ag.dtype_scope(np.float32):
        t0 = time.perf_counter()
        gen, _ = pl.train_stage1(desk.ds, desk.vocab, pl.train_config(desk.profile, 1),
                                 model_overrides=desk.profile["model"], indices=desk.train_idx)
        return gen, time.perf_counter() - t0


def _stage2(desk, base, p_swap):
    with ag.dtype_scope(np.float32):
        t0 = time.perf_counter()
        gen, _ = pl.train_stage2(base, desk.ds, desk.vocab, pl.train_config(desk.profile, 2, p_swap=p_swap),
                                 indices=desk.train_idx)
        return gen, time.perf_counter() - t0


@pytest.fixture(scope="session")
def stage2(desk, stage1):
    return _stage2(desk, stage1[0], desk.profile["stage2"]["p_swap"])


@pytest.fixture(scope="session")
def stage2_no_swap(desk, stage1):
    return _stage2(desk, stage1[0], 0.0)
