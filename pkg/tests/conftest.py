import numpy as np
import pytest
import torch

from selfcollab.config import ExperimentConfig
from selfcollab.datapipe import DegradationSpec, build_toy_dataset

torch.set_num_threads(1)


def tiny_config(root, val_root, out, **overrides):
    """Smallest config that exercises every code path quickly."""
    d = dict(
        seed=0, output_dir=str(out),
        data=dict(root=str(root), val_root=str(val_root) if val_root else None,
                  batch_size=2, patch_size=32, steps_per_epoch=2),
        networks=dict(generator_blocks=2, generator_channels=8, discriminator_channels=8,
                      discriminator_layers=1, restorer=dict(backbone="tiny_cnn", depth=2, width=8)),
        schedule=dict(s1=1, s2=3, s3=5, sc_iterations=2, rebsc_folds=[2, 4]),
        optimizer=dict(lr=1e-3),
    )
    cfg = ExperimentConfig.from_dict(d)
    return cfg.replace(**overrides) if overrides else cfg


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    train, val = build_toy_dataset(root, DegradationSpec(stddev=25 / 255, seed=3),
                                   n_train=8, n_val=3, size=48, seed=1)
    return train, val


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
