import numpy as np
import pytest
import torch

from mbsense.channel import (
    ImpairmentConfig,
    default_subcarrier_grid,
    generate_dataset,
    make_scenes,
    synthesize_beam_patterns,
)
from mbsense.calib import fit_calib_stats
from mbsense.train import prepare_data


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def warm_up(model, n=8, batches=3, seed=0):
    """A few train-mode passes so batchnorm running statistics are nontrivial."""
    g = torch.Generator().manual_seed(seed)
    d = model.arch.dims
    dtype = next(model.parameters()).dtype
    model.train()
    with torch.no_grad():
        for _ in range(batches):
            csi = torch.randn(n, 2 * d.num_streams, d.csi_width, generator=g, dtype=dtype)
            bsnr = torch.randn(n, d.bsnr_width, generator=g, dtype=dtype)
            model.latent(csi, bsnr)
    model.eval()
    return model


def random_inputs(dims, n, seed, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    csi = torch.randn(n, 2 * dims.num_streams, dims.csi_width, generator=g, dtype=dtype)
    bsnr = torch.randn(n, dims.bsnr_width, generator=g, dtype=dtype)
    labels = torch.randint(0, dims.num_classes, (n,), generator=g)
    return csi, bsnr, labels


@pytest.fixture(scope="session")
def small_raw():
    """A small 4-class train/test pair on the default grid."""
    scenes = make_scenes(4, seed=3)
    patterns = synthesize_beam_patterns(36, seed=3)
    freqs, mask = default_subcarrier_grid()
    kw = dict(patterns=patterns, subcarrier_freqs_hz=freqs, guard_mask=mask, num_classes=4)
    train = generate_dataset(scenes, 12, ImpairmentConfig(), seed=5, split_tag="train", **kw)
    test = generate_dataset(scenes, 6, ImpairmentConfig(), seed=6, split_tag="test", **kw)
    return train, test


@pytest.fixture(scope="session")
def small_data(small_raw):
    train, test = small_raw
    stats = fit_calib_stats(train)
    return prepare_data(train, stats), prepare_data(test, stats), stats


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
