import os

import torch
from torch.utils.data import Dataset

V_MIN, V_MAX = 1500.0, 4500.0  # velocity range of every generated map, m/s

FAMILIES = ["flat-vel", "curve-vel", "flat-fault", "curve-fault", "style"]
DIFFICULTIES = ["A", "B"]
# Short names used for dataset files, e.g. "flat-vel" + "B" -> "fvb"
FAMILY_ABBREVIATIONS = {
    "flat-vel": "fv",
    "curve-vel": "cv",
    "flat-fault": "ff",
    "curve-fault": "cf",
    "style": "st"
}

DATA_FRACTIONS = [10, 25, 50, 75, 100]

# Every dataset file is split the same way, so its normalization constant only ever sees training samples
DEFAULT_TRAIN_FRACTION = 0.8
DEFAULT_SPLIT_SEED = 0

DEFAULT_MODEL_DIR = "models"


class ShapeMismatchError(ValueError):
    pass


class GraphError(RuntimeError):
    """ Backward was requested on something that is not a scalar on a live autograd graph. """
    pass


class LayerAlgebraError(ValueError):
    pass


class CorruptFileError(ValueError):
    pass


class FingerprintMismatchError(ValueError):
    pass


class CflViolationError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


class ReportError(ValueError):
    pass


def dataset_name(family, difficulty):
    return f"{FAMILY_ABBREVIATIONS[family]}{difficulty.lower()}"


def read_config_file(path):
    """ Reads a `key=value` file into a dict of strings. Blank lines and lines starting with '#' are skipped. """
    config = {}
    with open(path, "r", encoding="utf-8") as f_config:
        for idx_line, line in enumerate(f_config, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue

            if "=" not in line:
                raise ValueError(f"{path}:{idx_line}: expected 'key=value', got '{line}'")
            key, value = line.split("=", maxsplit=1)
            config[key.strip().replace("-", "_")] = value.strip()

    return config


class SeismicDataset(Dataset):
    def __init__(self, seismic, velocity, name=None, stats=None):
        """ Normalized (input, label) pairs of one dataset file.

            `seismic` is [N, S, T, R], `velocity` is [N, 1, V, V] (a channel axis is added if missing), both already
            mapped to [-1, 1]. `stats` are the NormalizationStats the seismic data was normalized with. """
        if velocity.dim() == 3:
            velocity = velocity.unsqueeze(1)
        if seismic.shape[0] != velocity.shape[0]:
            raise ShapeMismatchError(f"seismic has {seismic.shape[0]} samples, velocity has {velocity.shape[0]}")

        self.seismic = seismic
        self.velocity = velocity
        self.name = name
        self.stats = stats

    @property
    def dims(self):
        """ (S, T, R, V) of the samples. """
        _, num_sources, num_time, num_receivers = self.seismic.shape
        return num_sources, num_time, num_receivers, self.velocity.shape[-1]

    def __getitem__(self, index):
        return {
            "seismic": self.seismic[index],
            "velocity": self.velocity[index]
        }

    def __len__(self):
        return self.seismic.shape[0]


def dataset_dims(dataset):
    """ (S, T, R, V) of a SeismicDataset or of a Subset/ConcatDataset built on top of SeismicDatasets. """
    while not isinstance(dataset, SeismicDataset):
        if hasattr(dataset, "datasets"):
            dataset = dataset.datasets[0]
        else:
            dataset = dataset.dataset
    return dataset.dims


def name_from_path(path):
    return os.path.splitext(os.path.basename(path))[0]


if __name__ == "__main__":
    dummy = SeismicDataset(seismic=torch.zeros((4, 3, 256, 32)), velocity=torch.zeros((4, 32, 32)), name="dummy")
    print(f"{len(dummy)} samples of dims {dummy.dims}")
