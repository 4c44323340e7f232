"""
Shared fixtures: a tiny task world, a random tiny model over its vocabulary,
and the slow-test switch (ICL_LAB_SLOW=1).
"""
import numpy as np
import pytest

from icl_lab.config import get_settings
from icl_lab.model import ModelBundle, ModelConfig, init_params
from icl_lab.tasks import SyntheticTaskSpec, TaskWorld


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end reproductions on pretrained toy models")


def pytest_collection_modifyitems(config, items):
    if get_settings().slow_tests:
        return
    skip = pytest.mark.skip(reason="set ICL_LAB_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def tiny_world():
    # 2 attributes x 2 values x 3 surface words: 36 possible items, 16 used (12 train / 4 test)
    spec = SyntheticTaskSpec(kind="ambiguous_attributes", n_attributes=2, values_per_attribute=2,
                             words_per_value=3, n_items=16, test_fraction=0.25, seed=0)
    return TaskWorld.from_specs([spec], preset="tiny")


@pytest.fixture(scope="session")
def tiny_model(tiny_world):
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, vocab_size=len(tiny_world.tokenizer), max_seq=96)
    params = init_params(cfg, np.random.default_rng(0), std=0.3, dtype=np.float64)
    return ModelBundle(cfg, params, tiny_world.tokenizer.vocab, meta={"world": tiny_world.to_meta()})


@pytest.fixture(scope="session")
def tiny_prompts(tiny_world):
    rng = np.random.default_rng(1)
    test = tiny_world.task("color").test
    return tiny_world.prompts("color", test, 2, "gold", rng, per_query=2)


@pytest.fixture
def model_file(tiny_model, tmp_path):
    from icl_lab.model import save_model
    return save_model(tiny_model.astype(np.float32), tmp_path / "tiny.twb")
