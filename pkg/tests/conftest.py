import pytest
import torch

from dmsd import config as config_mod
from dmsd import synthgen


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def micro_config(**over) -> config_mod.Config:
    """Smallest configuration the pipeline accepts; for plumbing tests only."""
    cfg = config_mod.preset("tiny")
    cfg.data.frame_size = 16
    cfg.model.widths = [4, 8, 8, 8]
    cfg.model.feature_dim = 8
    cfg.model.expand_factor = 2
    cfg.optim.batch_size = 8
    cfg.optim.epochs = 1
    for key, value in over.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    return cfg


@pytest.fixture(scope="session")
def micro_data(tmp_path_factory):
    """A 2-per-class multiple-scenario dataset plus one 15 s long video."""
    root = tmp_path_factory.mktemp("micro_data")
    synthgen.build_dataset("multiple", {"train": 4, "val": 1, "test": 2}, 3, root)
    synthgen.build_long_videos("multiple", 1, 15.0, 3, root)
    return root


def pytest_terminal_summary(terminalreporter):
    from _verdict import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
