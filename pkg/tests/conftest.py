import numpy as np
import pytest

from ggvit.data import SynthConfig, synth_generate
from ggvit.vit import PRESETS, ViTConfig

# test-scale encoder: one block, 12-dim, 16px side (3*2*2 guidance grid)
PRESETS.setdefault("micro", ViTConfig(side=16, patch=8, dim=12, depth=1,
                                      heads=2, mlp_ratio=2.0))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Shared seeded corpus: 40/6/6 base pairs -> 312 images."""
    root = tmp_path_factory.mktemp("shared_corpus")
    cfg = SynthConfig(n_train=40, n_val=6, n_test=6, side=96, seed=5)
    samples = synth_generate(cfg, root)
    return root, samples, cfg
