import numpy as np
import pytest

from lle import diffusion as dif
from lle.numerics import RngStream


@pytest.fixture(scope="session")
def schedule():
    return dif.linear_beta_schedule()


def random_spd(stream: RngStream, d: int, scale: float = 0.3) -> np.ndarray:
    W = stream.standard_normal((d, d))
    return scale * (W @ W.T) / d + 0.1 * np.eye(d)


def random_mixture(seed: int, d: int, K: int) -> dif.GaussianMixturePrior:
    stream = RngStream(seed, stream_id=5)
    means = 2.0 * stream.standard_normal((K, d))
    covs = np.stack([random_spd(stream, d) for _ in range(K)])
    w = stream.uniform(K) + 0.5
    return dif.GaussianMixturePrior(w / w.sum(), means, covs)


@pytest.fixture
def small_prior():
    return random_mixture(3, 6, 2)
