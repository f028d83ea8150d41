import pytest
import torch

from pairsynth.data import RunConfig
from pairsynth.scenes import disc_scene


@pytest.fixture
def tiny_config():
    """Smallest config that still emits 4 image scales: 48x80, eighth widths."""
    return RunConfig(resolution=(48, 80), base_grid=(3, 5), channel_scale=0.125, n_lowlevel_blocks=3,
                     p0_epochs=2, total_epochs=4, checkpoint_every=2, ema_decay=0.9)


@pytest.fixture
def tiny_pair():
    return disc_scene(48, 80)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
