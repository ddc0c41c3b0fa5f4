import numpy as np
import pytest

from microtog.data import SceneSpec, generate_scene
from microtog.rng import derive_seed_sequence


def make_scenes(count, split="train", split_id=0, seed=7, **spec_kwargs):
    """In-memory scenes drawn the same way generate_dataset derives them."""
    spec = SceneSpec(seed=seed, **spec_kwargs)
    out = []
    for i in range(count):
        rng = np.random.default_rng(
            derive_seed_sequence(spec.seed, f"scene-{split}", split_id, i))
        out.append(generate_scene(spec, rng))
    return out


@pytest.fixture(scope="session")
def tiny_scenes():
    return make_scenes(12)
