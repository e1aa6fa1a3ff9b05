import numpy as np
import pytest

from sttm.datamodel import SynthSpec, write_synth


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Small two-subject benchmark shared by IO, datamodel, and CLI tests."""
    spec = SynthSpec(
        n_subjects=2,
        latent_dim=8,
        voxels_per_subject=40,
        n_train=64,
        n_test=24,
        n_tokens=8,
        embed_dim=16,
        latent_channels=2,
        latent_size=8,
        seed=3,
    )
    out = tmp_path_factory.mktemp("tiny_synth")
    return write_synth(spec, out)


@pytest.fixture()
def gen():
    return np.random.default_rng(0)
