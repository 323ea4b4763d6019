import os

import pytest
import torch

from dataset import DatasetSpec, synthesize_dataset
from inversionnet import ModelConfig
from utils import SeismicDataset, dataset_name

# Small enough for 1-epoch CLI runs, large enough that 10% of the 20-sample training split is 2 samples
CLI_DATASET_SIZE = 25


@pytest.fixture(scope="session")
def make_dataset_file(tmp_path_factory):
    """ Factory writing (and caching) a tiny-preset dataset file named after its family and difficulty. """
    cache = {}

    def _make(family="flat-vel", difficulty="A", n_samples=CLI_DATASET_SIZE, seed=0):
        key = (family, difficulty, n_samples, seed)
        if key not in cache:
            out_dir = tmp_path_factory.mktemp("datasets")
            path = os.path.join(str(out_dir), f"{dataset_name(family, difficulty)}.fwds")
            spec = DatasetSpec.for_preset(family, difficulty, n_samples=n_samples, seed=seed)
            synthesize_dataset(spec, path=path, show_progress=False)
            cache[key] = path
        return cache[key]

    return _make


@pytest.fixture(scope="session")
def dataset_paths(make_dataset_file):
    """ Four datasets of different families, keyed by name. """
    paths = [make_dataset_file("flat-vel", "A", seed=1),
             make_dataset_file("curve-vel", "A", seed=2),
             make_dataset_file("flat-fault", "B", seed=3),
             make_dataset_file("curve-fault", "A", seed=4)]
    return {os.path.splitext(os.path.basename(path))[0]: path for path in paths}


@pytest.fixture(scope="session")
def pfm_path(tmp_path_factory, dataset_paths):
    """ Checkpoint of a 1-epoch pretraining run on the flat-vel and curve-vel datasets. """
    from experiments import main
    out_dir = str(tmp_path_factory.mktemp("pfm"))
    code = main(["pretrain", "--datasets", f"{dataset_paths['fva']},{dataset_paths['cva']}", "--out", out_dir,
                 "--epochs", "1", "--batch_size", "4"])
    assert code == 0
    return os.path.join(out_dir, "model.fwck")


@pytest.fixture
def tiny_config():
    return ModelConfig.from_preset("tiny")


def random_dataset(num_examples, seed=0, config=None):
    """ In-memory dataset of random normalized pairs with the dims of `config` (tiny preset by default). """
    config = config if config is not None else ModelConfig.from_preset("tiny")
    generator = torch.Generator().manual_seed(seed)
    seismic = 0.1 * torch.randn((num_examples, config.in_channels, config.in_time, config.in_receivers),
                                generator=generator)
    velocity = 2.0 * torch.rand((num_examples, config.out_size, config.out_size), generator=generator) - 1.0
    return SeismicDataset(seismic=seismic, velocity=velocity, name=f"random{seed}")
