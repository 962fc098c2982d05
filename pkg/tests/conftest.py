import pytest

from stclip.dataset import load_dataset
from stclip.synth import SynthConfig, generate_dataset, write_dataset

SMALL = SynthConfig(seed=0, grid=5, per_class=20)


@pytest.fixture(scope="session")
def small_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("small")
    write_dataset(path, generate_dataset(SMALL), SMALL)
    return path


@pytest.fixture(scope="session")
def small(small_dir):
    """(SceneDataset, FeatureVocab) for a 100-sample synthetic world."""
    ds, vocab, _ = load_dataset(small_dir, 1)
    return ds, vocab
