from __future__ import annotations

import time

import pytest
import torch

from refseg.core import synth_bench_config, toy_config, toy_train_config
from refseg.data import synthetic_splits
from refseg.harness import train
from refseg.model import build_model

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config()


@pytest.fixture(scope="session")
def toy_model(toy_cfg):
    return build_model(toy_cfg).eval()


@pytest.fixture(scope="session")
def synth_small():
    tr, va = synthetic_splits(8, 4, seed=3)
    return tr, va


@pytest.fixture(scope="session")
def bench_splits():
    return synthetic_splits(256, 64, seed=0)


@pytest.fixture(scope="session")
def overfit8():
    """Bench-preset model trained until it memorises 8 synthetic samples."""
    samples, _ = synthetic_splits(8, 1, seed=0)
    res = train(synth_bench_config(), toy_train_config(batch_size=8, max_steps=600), samples)
    return res.model.eval(), samples


@pytest.fixture(scope="session")
def bench_run(bench_splits):
    """The synthetic end-to-end run shared by the benchmark and ablation checks."""
    tr, _ = bench_splits
    t0 = time.perf_counter()
    res = train(synth_bench_config(), toy_train_config(), tr)
    return res, time.perf_counter() - t0
