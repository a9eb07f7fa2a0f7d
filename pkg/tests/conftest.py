import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("wsloc", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("wsloc")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_dataset(**kw):
    from wsloc.data import SynthConfig, synth_dataset

    base = dict(C=2, D=4, videos=4, T_range=(16, 24), snr=4.0, seed=3, min_segment=4)
    base.update(kw)
    return synth_dataset(SynthConfig(**base))
