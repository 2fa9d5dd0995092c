import sys

import pytest
import torch
from hypothesis import settings

from jointflow.model import TowerConfig

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")


@pytest.fixture
def tiny_cfg() -> TowerConfig:
    """One layer, E=16, 2 latent frames on a 4x4 grid, 8 audio frames."""
    return TowerConfig(
        layers=1, e_v=16, e_a=16, heads=2, latent_channels=12, latent_frames=2,
        latent_height=4, latent_width=4, audio_dim=16, audio_len=8, freq_dim=16,
    )


def randomize(model: torch.nn.Module, seed: int = 0, std: float = 0.2) -> torch.nn.Module:
    """Replace the zero-initialized outputs with random values so probes see signal."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * std)
    return model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
