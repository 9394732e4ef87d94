import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hitpr.descriptor import HiTPRConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**kw):
    """Widths used by the synthetic training runs."""
    base = dict(tau=4, k=16, d_i=16, d_a=32, d_s=16, d_k=16, d_v=32, d_b=32, m_blocks=2,
                d_g=64, pos_hidden=16, lr_init=3e-4, lr_final=5e-5)
    base.update(kw)
    return HiTPRConfig(**base)
