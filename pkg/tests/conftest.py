import numpy as np
import pytest
import torch

from stmae.data import SynthSpec, synth_generate
from stmae.model import ModelConfig


def small_config(**kw):
    base = dict(feature_channels=3, feature_size=8, patch_size=2, variant="custom",
                dim=16, enc_depth=1, dec_depth=1, heads=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def cfg_small():
    return small_config()


@pytest.fixture
def pfdf_small():
    g = torch.Generator().manual_seed(0)
    return torch.rand(2, 3, 8, 8, generator=g)


@pytest.fixture(scope="session")
def tiny_synth():
    # 32x32 textures keep backbone passes cheap
    return synth_generate(SynthSpec(resolution=32, n_train=6, n_test_normal=3, n_test_anomalous=3,
                                    defect_radius=(3, 6), seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
