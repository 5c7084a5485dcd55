"""Shared test setup: pin thread counts before numpy loads (determinism and
to keep BLAS worker spin-wait from fighting the numba kernels on small boxes).
"""

import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("NUMBA_NUM_THREADS", str(min(os.cpu_count() or 1, 4)))

import warnings

warnings.filterwarnings("ignore", message=".*TBB.*")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_rng(seed):
    return np.random.default_rng(np.random.SeedSequence((seed, 0xABCDE)))
