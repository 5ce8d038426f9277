import numpy as np
import pytest

from sos_oic.synth import SynthSpec, generate


TINY = dict(n_videos=32, frame_size=64, patch_size=32, frames_per_video=6, n_participants=6,
            n_unseen_participants=1)


@pytest.fixture(scope="session")
def tiny_synth():
    return generate(SynthSpec(**TINY))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_synth):
    return tiny_synth.to_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)
