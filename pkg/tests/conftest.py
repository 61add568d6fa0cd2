import numpy as np
import pytest

from femba import model as fm


TINY = fm.ModelConfig(d_model=8, d_inner=16, d_state=4, d_conv=4, n_blocks=2,
                      n_tokens=8, n_channels=4, n_samples=32, patch_size=4,
                      n_classes=3, dt_rank=2)

# grouped-tokenizer variant (two feature groups per patch, like the full model)
# with awkward sizes: odd channel counts and a single block
TINY_GROUPED = fm.ModelConfig(d_model=6, d_inner=12, d_state=3, d_conv=4,
                              n_blocks=1, n_tokens=12, n_channels=3,
                              n_samples=24, patch_size=4, n_classes=2, dt_rank=3)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_weights(tiny_cfg):
    return fm.init_weights(tiny_cfg, seed=11)


def make_windows(cfg, count, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return [scale * rng.normal(0.0, 1.0, (cfg.n_channels, cfg.n_samples))
            for _ in range(count)]


@pytest.fixture(scope="session")
def tiny_windows(tiny_cfg):
    return make_windows(tiny_cfg, 6, seed=3)
