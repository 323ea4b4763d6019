import logging
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch
from torch.utils.data import Subset
from tqdm import tqdm

from families import generate_velocity, sample_rng
from utils import SeismicDataset, CorruptFileError, CflViolationError, SimulationError, V_MIN, V_MAX, FAMILIES, \
    DIFFICULTIES, DATA_FRACTIONS, DEFAULT_TRAIN_FRACTION, DEFAULT_SPLIT_SEED, name_from_path
from wave_sim import SimConfig, default_sim_config, forward_model, cfl_check

log_to_stdout = logging.info

DATASET_MAGIC = b"FWDS"
DATASET_VERSION = 1
# train-mode batch norm needs two values per channel at the 1x1 bottleneck
MIN_TRAIN_SAMPLES = 2
DTYPE_F32 = 1
PRESET_DIMS = {
    "tiny": (3, 256, 32, 32),
    "full": (5, 1000, 70, 70)
}


@dataclass
class DatasetSpec:
    family: str
    difficulty: str
    n_samples: int
    seed: int
    sim: SimConfig
    model_dims: tuple  # (S, T, R, V)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"Unknown family '{self.family}', expected one of {FAMILIES}")
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"Unknown difficulty '{self.difficulty}', expected one of {DIFFICULTIES}")
        if self.n_samples < 2:
            raise ValueError(f"a dataset needs at least 2 samples to be split, got {self.n_samples}")
        self.model_dims = tuple(self.model_dims)
        num_sources, num_time, num_receivers, _ = self.model_dims
        if (self.sim.num_sources, self.sim.nt, self.sim.num_receivers) != (num_sources, num_time, num_receivers):
            raise ValueError(f"simulation geometry ({self.sim.num_sources} sources, {self.sim.nt} steps, "
                             f"{self.sim.num_receivers} receivers) does not produce gathers of dims {self.model_dims}")

    @staticmethod
    def for_preset(family, difficulty, n_samples, seed, preset="tiny"):
        dims = PRESET_DIMS[preset]
        return DatasetSpec(family=family, difficulty=difficulty, n_samples=n_samples, seed=seed,
                           sim=default_sim_config(*dims), model_dims=dims)


@dataclass
class NormalizationStats:
    seismic_max_abs_log: float
    v_min: float = V_MIN
    v_max: float = V_MAX

    def __post_init__(self):
        if not self.seismic_max_abs_log > 0:
            raise ValueError(f"seismic normalization constant must be positive, got {self.seismic_max_abs_log}")
        if not self.v_min < self.v_max:
            raise ValueError(f"invalid velocity range [{self.v_min}, {self.v_max}]")


def sign_log(x):
    return np.sign(x) * np.log1p(np.abs(x))


def normalize_seismic(gather, stats):
    return np.clip(sign_log(gather) / stats.seismic_max_abs_log, -1.0, 1.0)


def denormalize_seismic(normalized, stats):
    scaled = np.asarray(normalized, dtype=np.float64) * stats.seismic_max_abs_log
    return np.sign(scaled) * np.expm1(np.abs(scaled))


def normalize_velocity(vel, v_min=V_MIN, v_max=V_MAX):
    vel = np.asarray(vel, dtype=np.float64)
    if np.min(vel) < v_min or np.max(vel) > v_max:
        raise ValueError(f"velocities must lie in [{v_min}, {v_max}], got [{np.min(vel)}, {np.max(vel)}]")
    return 2.0 * (vel - v_min) / (v_max - v_min) - 1.0


def denormalize_velocity(normalized, v_min=V_MIN, v_max=V_MAX):
    return (np.asarray(normalized, dtype=np.float64) + 1.0) / 2.0 * (v_max - v_min) + v_min


def split_indices(num_examples, train_fraction=DEFAULT_TRAIN_FRACTION, seed=DEFAULT_SPLIT_SEED):
    """ Disjoint, sorted (train, test) index arrays drawn from a seeded permutation. """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must lie in (0, 1), got {train_fraction}")
    num_train = int(train_fraction * num_examples)
    if num_train == 0 or num_train == num_examples:
        raise ValueError(f"splitting {num_examples} examples with train fraction {train_fraction} leaves an empty "
                         f"split")
    indices = np.random.default_rng(seed).permutation(num_examples)
    return np.sort(indices[:num_train]), np.sort(indices[num_train:])


def split(dataset, train_fraction=DEFAULT_TRAIN_FRACTION, seed=DEFAULT_SPLIT_SEED):
    train_indices, test_indices = split_indices(len(dataset), train_fraction, seed)
    return Subset(dataset, train_indices.tolist()), Subset(dataset, test_indices.tolist())


def subsample_indices(num_examples, percent, seed=0):
    """ First floor(percent / 100 * num_examples) entries of a seeded permutation, sorted, at least two of them.
        Smaller fractions are subsets of larger ones for the same seed. """
    if percent not in DATA_FRACTIONS:
        raise ValueError(f"Unsupported data fraction {percent}, expected one of {DATA_FRACTIONS}")
    num_kept = (percent * num_examples) // 100
    if num_kept < MIN_TRAIN_SAMPLES:
        raise ValueError(f"data fraction {percent}% keeps {num_kept} of {num_examples} training examples, batch norm "
                         f"needs at least {MIN_TRAIN_SAMPLES}; use a larger fraction or dataset")
    return np.sort(np.random.default_rng(seed).permutation(num_examples)[:num_kept])


def subsample(train_dataset, percent, seed=0):
    if percent == 100:
        if len(train_dataset) == 0:
            raise ValueError("cannot subsample an empty training set")
        return train_dataset
    return Subset(train_dataset, subsample_indices(len(train_dataset), percent, seed).tolist())


def _pack_record(array):
    array = np.ascontiguousarray(array, dtype="<f4")
    header = struct.pack("<BB", DTYPE_F32, array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + array.tobytes()


def save_dataset(path, seismic, velocity, stats):
    """ Writes normalized pairs ([N, S, T, R] seismic, [N, V, V] velocity) and their stats as an FWDS file. """
    seismic, velocity = np.asarray(seismic), np.asarray(velocity)
    if velocity.ndim == 4:
        velocity = velocity[:, 0]
    chunks = [DATASET_MAGIC, struct.pack("<IQ", DATASET_VERSION, seismic.shape[0])]
    for idx_example in range(seismic.shape[0]):
        chunks.append(_pack_record(velocity[idx_example]))
        chunks.append(_pack_record(seismic[idx_example]))
    chunks.append(struct.pack("<ddd", stats.seismic_max_abs_log, stats.v_min, stats.v_max))

    content = b"".join(chunks)
    with open(path, "wb") as f_data:
        f_data.write(content)
        f_data.write(struct.pack("<I", zlib.crc32(content)))


def _read_record(content, pos, path, what):
    if pos + 2 > len(content):
        raise CorruptFileError(f"{path}: file ends inside the {what} header")
    dtype_code, ndim = struct.unpack_from("<BB", content, pos)
    pos += 2
    if dtype_code != DTYPE_F32:
        raise CorruptFileError(f"{path}: {what} has unknown dtype code {dtype_code}")
    if pos + 8 * ndim > len(content):
        raise CorruptFileError(f"{path}: file ends inside the {what} dims")
    dims = struct.unpack_from(f"<{ndim}Q", content, pos)
    pos += 8 * ndim
    num_bytes = 4 * int(np.prod(dims, dtype=np.int64))
    if pos + num_bytes > len(content):
        raise CorruptFileError(f"{path}: file ends inside the {what} payload")
    array = np.frombuffer(content, dtype="<f4", count=num_bytes // 4, offset=pos).reshape(dims)
    return array, pos + num_bytes


def read_dataset_arrays(path):
    """ Returns (seismic [N, S, T, R], velocity [N, V, V], NormalizationStats) of a validated FWDS file. """
    with open(path, "rb") as f_data:
        raw = f_data.read()

    if len(raw) < 4 + 12 + 24 + 4:
        raise CorruptFileError(f"{path}: file too short to be a dataset")
    content, (stored_crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if content[:4] != DATASET_MAGIC:
        raise CorruptFileError(f"{path}: bad magic {content[:4]!r}, expected {DATASET_MAGIC!r}")
    if zlib.crc32(content) != stored_crc:
        raise CorruptFileError(f"{path}: CRC32 mismatch (stored {stored_crc:08x}, computed "
                               f"{zlib.crc32(content):08x})")
    version, num_examples = struct.unpack_from("<IQ", content, 4)
    if version != DATASET_VERSION:
        raise CorruptFileError(f"{path}: unsupported dataset version {version}")

    pos, velocities, gathers = 16, [], []
    for idx_example in range(num_examples):
        vel, pos = _read_record(content, pos, path, f"velocity of sample {idx_example}")
        gather, pos = _read_record(content, pos, path, f"gather of sample {idx_example}")
        if velocities and (vel.shape != velocities[0].shape or gather.shape != gathers[0].shape):
            raise CorruptFileError(f"{path}: sample {idx_example} has dims {gather.shape}/{vel.shape}, sample 0 has "
                                   f"{gathers[0].shape}/{velocities[0].shape}")
        velocities.append(vel)
        gathers.append(gather)

    if pos + 24 != len(content):
        raise CorruptFileError(f"{path}: expected a 24-byte stats block after {num_examples} samples, "
                               f"found {len(content) - pos} bytes")
    try:
        stats = NormalizationStats(*struct.unpack_from("<ddd", content, pos))
    except ValueError as err:
        raise CorruptFileError(f"{path}: invalid normalization stats") from err

    return np.stack(gathers), np.stack(velocities), stats


def load_dataset(path, name=None):
    seismic, velocity, stats = read_dataset_arrays(path)
    return SeismicDataset(seismic=torch.from_numpy(seismic.copy()), velocity=torch.from_numpy(velocity.copy()),
                          name=name if name is not None else name_from_path(path), stats=stats)


def synthesize_dataset(spec, path=None, show_progress=True):
    """ Generates `spec.n_samples` (velocity, gather) pairs, normalizes them and optionally writes them to `path`.

        The seismic normalization constant is taken over the canonical training split only. """
    report = cfl_check(np.array([V_MAX]), spec.sim)
    if not report.ok:
        raise CflViolationError(f"dt={spec.sim.dt} is unstable for v_max={V_MAX} (max(c) * dt / dx = "
                                f"{report.courant:.4f}); use dt <= {report.max_stable_dt:.4e} s")

    size = spec.model_dims[3]
    velocities, gathers = [], []
    for idx_example in tqdm(range(spec.n_samples), disable=not show_progress):
        vel = generate_velocity(spec.family, spec.difficulty, sample_rng(spec.seed, idx_example), size=size)
        try:
            gather = forward_model(vel, spec.sim)
        except SimulationError as err:
            raise SimulationError(f"sample {idx_example}: {err}") from err
        velocities.append(vel)
        gathers.append(gather.data)

    velocities, gathers = np.stack(velocities), np.stack(gathers)
    train_indices, _ = split_indices(spec.n_samples)
    stats = NormalizationStats(seismic_max_abs_log=float(np.max(np.abs(sign_log(gathers[train_indices])))))

    seismic = normalize_seismic(gathers, stats).astype(np.float32)
    velocity = normalize_velocity(velocities).astype(np.float32)
    if path is not None:
        save_dataset(path, seismic, velocity, stats)
        log_to_stdout(f"Wrote {spec.n_samples} {spec.family}-{spec.difficulty} samples to '{path}'")

    return SeismicDataset(seismic=torch.from_numpy(seismic), velocity=torch.from_numpy(velocity),
                          name=None if path is None else name_from_path(path), stats=stats)


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    demo = synthesize_dataset(DatasetSpec.for_preset("flat-vel", "A", n_samples=4, seed=0))
    log_to_stdout(f"{len(demo)} samples, dims {demo.dims}, stats {demo.stats}")
