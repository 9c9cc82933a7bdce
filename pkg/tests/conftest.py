import warnings

import numpy as np
import pytest
import torch

from kiim.core import ExperimentConfig, Sample, write_samples
from kiim.synthgen import default_state_specs, generate_patches

torch.set_num_threads(1)


def random_sample(rng, size=16, patch_id="p0", state_id="T", n_bands=6):
    return Sample(
        rng.uniform(0.0, 1.0, (size, size, n_bands)).astype(np.float32),
        rng.integers(0, 21, (size, size)),
        rng.integers(0, 2, (size, size)),
        rng.integers(0, 4, (size, size)),
        patch_id=patch_id,
        state_id=state_id,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Small enough that a training step takes milliseconds."""
    return ExperimentConfig(
        embed_dim=8,
        depths=(1, 1),
        num_heads=(1, 2),
        window_size=4,
        patch_size=2,
        attn_hidden=4,
        batch_size=2,
        epochs=2,
        lr=1e-3,
    )


@pytest.fixture(scope="session")
def small_specs():
    return default_state_specs(patch_size=16)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory, small_specs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        samples = generate_patches(small_specs[0], 8, seed=3)
    return write_samples(samples, tmp_path_factory.mktemp("s1"))


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)
