import sys

import numpy as np
import pytest

from zoomstack.cdm import CdmNet
from zoomstack.codec import OrthogonalLinearCodec
from zoomstack.denoiser import DenoiserNet
from zoomstack.pyramid import build_dataset, toy_world
from zoomstack.summarizer import SummarizerNet


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two 64-pixel toy images, 16-pixel patches, three scales."""
    return build_dataset([toy_world(s, 64) for s in range(2)], patch_size=16, levels=3, cap_side=4)


@pytest.fixture
def tiny_models(tiny_dataset):
    codec = OrthogonalLinearCodec(4, latent_channels=4, seed=0)
    summ = SummarizerNet(hidden=16, heads=2, layers=1, n_scales=3, seed=0)
    den = DenoiserNet(latent_channels=4, channels=(8, 8), ctx_dim=16, n_tokens=17, temb_dim=16, heads=2, seed=0)
    cdm = CdmNet(n_tokens=17, token_dim=16, hidden=16, layers=1, heads=2, n_scales=3, seed=0)
    return codec, summ, den, cdm


def seeded(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    lines = getattr(sys.modules.get("test_acceptance"), "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split("criterion")[1].split(":")[0].split()[0])):
            terminalreporter.write_line(line)
