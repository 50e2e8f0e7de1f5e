import numpy as np
import pytest
import torch

from pathfinder.core import TransmitterSpec, make_sample
from pathfinder.dataset import SynthConfig, load_manifest, load_map_samples, synth_generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_generate(SynthConfig(H=32, W=32, seed=3), n_maps=7, tx_per_map=6, root=root)
    return root


@pytest.fixture(scope="session")
def synth_manifest(synth_root):
    return load_manifest(synth_root)


@pytest.fixture(scope="session")
def synth_by_map(synth_manifest):
    return load_map_samples(synth_manifest, synth_manifest.map_ids)


def random_sample(rng, H=16, W=16, n_tx=1, p_building=0.3):
    heights = np.where(rng.random((H, W)) < p_building, rng.uniform(0.2, 1.0, (H, W)), 0.0)
    cells = rng.choice(H * W, size=n_tx, replace=False)
    txs = [TransmitterSpec(int(c // W), int(c % W), 1.0) for c in cells]
    target = rng.random((H, W))
    return make_sample(heights, txs, target, [1.0 / n_tx] * n_tx)


# acceptance bookkeeping: one summary line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[str, str, str, float]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, name, detail, secs = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{status}] {name} ({secs:.1f} s) {detail}")
