import sys
from pathlib import Path

import numpy as np
import pytest

from physiocl import autodiff as ad
from physiocl.dataset import load_manifest
from physiocl.synth import SynthConfig, generate

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run in 64-bit mode unless they opt into float32 themselves."""
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(np.float64)


@pytest.fixture(scope="session")
def small_container(tmp_path_factory):
    """A small synthetic container: 4 subjects, 8 stimuli, 20 s trials."""
    out = tmp_path_factory.mktemp("synth_small")
    cfg = SynthConfig(n_subjects=4, n_stimuli=8, trial_seconds=20.0, sample_rate_hz=128,
                      eeg_channels=4, pps_channels=2, latent_dim=3, seed=11)
    return generate(cfg, out)


@pytest.fixture(scope="session")
def small_manifest(small_container):
    return load_manifest(small_container)
