import os

import numpy as np
import pytest
import torch

from dataset import DatasetSpec, NormalizationStats, synthesize_dataset, load_dataset, read_dataset_arrays, \
    sign_log, normalize_seismic, denormalize_seismic, normalize_velocity, denormalize_velocity, split_indices, split, \
    subsample_indices, subsample
from families import generate_velocity, apply_fault, sample_rng
from metrics import spatial_information
from utils import FAMILIES, DIFFICULTIES, V_MIN, V_MAX, CorruptFileError, CflViolationError, dataset_name

from conftest import random_dataset


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("difficulty", DIFFICULTIES)
def test_generated_maps_in_range(family, difficulty):
    vel = generate_velocity(family, difficulty, np.random.default_rng(0))
    assert vel.shape == (32, 32)
    assert vel.dtype == np.float64
    assert V_MIN <= np.min(vel) and np.max(vel) <= V_MAX


def test_flat_layers_have_constant_rows():
    for seed in range(10):
        vel = generate_velocity("flat-vel", "B", np.random.default_rng(seed))
        assert np.all(vel == vel[:, :1])
        # velocity increases with depth
        assert np.all(np.diff(vel[:, 0]) >= 0)


def test_faults_break_layers():
    num_broken = 0
    for seed in range(10):
        vel = generate_velocity("flat-fault", "A", np.random.default_rng(seed))
        num_broken += int(not np.all(vel == vel[:, :1]))
    assert num_broken >= 6


def test_apply_fault():
    grid = np.repeat(np.arange(8, dtype=np.float64)[:, None], 8, axis=1)
    faulted = apply_fault(grid, x0=3.5, slope=0.0, throw=2)
    assert np.array_equal(faulted[:, :4], grid[:, :4])
    assert np.array_equal(faulted[:, 4:], np.repeat(np.array([0, 0, 0, 1, 2, 3, 4, 5.0])[:, None], 4, axis=1))


def test_generator_errors():
    with pytest.raises(ValueError, match="Unknown family"):
        generate_velocity("salt-dome", "A", np.random.default_rng(0))
    with pytest.raises(ValueError, match="Unknown difficulty"):
        generate_velocity("style", "C", np.random.default_rng(0))


def test_sample_generators_are_independent_of_order():
    first = generate_velocity("curve-fault", "B", sample_rng(7, 3))
    generate_velocity("curve-fault", "B", sample_rng(7, 2))
    assert np.array_equal(first, generate_velocity("curve-fault", "B", sample_rng(7, 3)))


def test_style_maps_are_more_complex_than_flat_layers():
    flat = [spatial_information(generate_velocity("flat-vel", "A", sample_rng(0, idx))) for idx in range(20)]
    style = [spatial_information(generate_velocity("style", "B", sample_rng(0, idx))) for idx in range(20)]
    assert np.mean(flat) < np.mean(style)


def test_style_b_is_rougher_than_style_a():
    smooth = [spatial_information(generate_velocity("style", "A", sample_rng(1, idx))) for idx in range(20)]
    rough = [spatial_information(generate_velocity("style", "B", sample_rng(1, idx))) for idx in range(20)]
    assert np.mean(smooth) < np.mean(rough)


def test_style_maps_are_smooth_random_fields():
    vel = generate_velocity("style", "A", np.random.default_rng(3))
    assert np.min(vel) == pytest.approx(V_MIN) and np.max(vel) == pytest.approx(V_MAX)
    # sigma of 4 cells: neighbouring cells differ by a small part of the full range
    assert np.max(np.abs(np.diff(vel, axis=1))) < 0.5 * (V_MAX - V_MIN)


def test_velocity_normalization():
    assert normalize_velocity(np.array([V_MIN, 3000.0, V_MAX])).tolist() == [-1.0, 0.0, 1.0]
    vel = generate_velocity("curve-vel", "A", np.random.default_rng(1))
    assert np.allclose(denormalize_velocity(normalize_velocity(vel)), vel, rtol=0.0, atol=1e-9)
    with pytest.raises(ValueError, match="must lie in"):
        normalize_velocity(np.array([1000.0]))


def test_seismic_normalization():
    assert sign_log(np.array([0.0]))[0] == 0.0
    assert np.allclose(sign_log(np.array([-2.0, 2.0])), [-np.log1p(2.0), np.log1p(2.0)])

    stats = NormalizationStats(seismic_max_abs_log=float(np.log1p(10.0)))
    gather = np.array([-10.0, -0.5, 0.0, 3.0, 10.0])
    normalized = normalize_seismic(gather, stats)
    assert normalized[0] == pytest.approx(-1.0) and normalized[-1] == pytest.approx(1.0)
    assert np.allclose(denormalize_seismic(normalized, stats), gather, rtol=0.0, atol=1e-9)
    # values beyond the training maximum are clipped
    assert normalize_seismic(np.array([1e6]), stats)[0] == 1.0

    with pytest.raises(ValueError):
        NormalizationStats(seismic_max_abs_log=0.0)
    with pytest.raises(ValueError):
        NormalizationStats(seismic_max_abs_log=1.0, v_min=5.0, v_max=1.0)


def test_split_indices():
    train_indices, test_indices = split_indices(100)
    assert len(train_indices) == 80 and len(test_indices) == 20
    assert sorted(train_indices.tolist() + test_indices.tolist()) == list(range(100))
    assert np.array_equal(train_indices, split_indices(100)[0])
    assert not np.array_equal(train_indices, split_indices(100, seed=1)[0])

    with pytest.raises(ValueError):
        split_indices(100, train_fraction=1.0)
    with pytest.raises(ValueError, match="empty split"):
        split_indices(1)


def test_split_dataset():
    train_split, test_split = split(random_dataset(25))
    assert (len(train_split), len(test_split)) == (20, 5)


def test_subsample_indices():
    assert len(subsample_indices(24000, 25)) == 6000
    smaller, larger = set(subsample_indices(1000, 10).tolist()), set(subsample_indices(1000, 50).tolist())
    assert len(smaller) == 100 and smaller < larger
    assert not np.array_equal(subsample_indices(1000, 10), subsample_indices(1000, 10, seed=1))

    with pytest.raises(ValueError, match="Unsupported data fraction"):
        subsample_indices(1000, 30)
    with pytest.raises(ValueError, match="data fraction 10% keeps 0 of 5"):
        subsample_indices(5, 10)
    with pytest.raises(ValueError, match="keeps 1 of 15 training examples"):
        subsample_indices(15, 10)
    assert len(subsample_indices(20, 10)) == 2


def test_subsample_dataset():
    train_split, _ = split(random_dataset(25))
    assert subsample(train_split, 100) is train_split
    assert len(subsample(train_split, 10)) == 2
    assert len(subsample(train_split, 75)) == 15


@pytest.fixture
def small_spec():
    return DatasetSpec.for_preset("flat-vel", "A", n_samples=5, seed=11)


def test_synthesize_and_reload(tmp_path, small_spec):
    path = os.path.join(str(tmp_path), "fva.fwds")
    dataset = synthesize_dataset(small_spec, path=path, show_progress=False)
    assert len(dataset) == 5
    assert dataset.dims == (3, 256, 32, 32)
    assert dataset.name == "fva"
    assert float(dataset.velocity.abs().max()) <= 1.0 and float(dataset.seismic.abs().max()) <= 1.0

    reloaded = load_dataset(path)
    assert torch.equal(reloaded.seismic, dataset.seismic)
    assert torch.equal(reloaded.velocity, dataset.velocity)
    assert reloaded.stats == dataset.stats
    assert load_dataset(path, name="custom").name == "custom"


def test_normalization_constant_comes_from_train_split(small_spec):
    dataset = synthesize_dataset(small_spec, show_progress=False)
    train_indices, _ = split_indices(len(dataset))
    assert float(dataset.seismic[train_indices.tolist()].abs().max()) == 1.0


def test_synthesis_is_deterministic(tmp_path, small_spec):
    paths = [os.path.join(str(tmp_path), f"run{idx}.fwds") for idx in range(2)]
    for path in paths:
        synthesize_dataset(small_spec, path=path, show_progress=False)
    with open(paths[0], "rb") as f_first, open(paths[1], "rb") as f_second:
        assert f_first.read() == f_second.read()


def test_families_give_different_maps():
    flat = synthesize_dataset(DatasetSpec.for_preset("flat-vel", "A", n_samples=2, seed=0), show_progress=False)
    style = synthesize_dataset(DatasetSpec.for_preset("style", "A", n_samples=2, seed=0), show_progress=False)
    assert not torch.equal(flat.velocity, style.velocity)


def _write_corrupted(src, dst, transform):
    with open(src, "rb") as f_data:
        data = f_data.read()
    with open(dst, "wb") as f_data:
        f_data.write(transform(data))
    return dst


def test_corrupted_files(tmp_path, make_dataset_file):
    src = make_dataset_file("flat-vel", "A", n_samples=4, seed=5)
    tmp_dir = str(tmp_path)

    def flip_byte(data):
        return data[:100] + bytes([data[100] ^ 0xFF]) + data[101:]

    with pytest.raises(CorruptFileError, match="CRC32 mismatch"):
        read_dataset_arrays(_write_corrupted(src, os.path.join(tmp_dir, "flipped.fwds"), flip_byte))
    with pytest.raises(CorruptFileError):
        read_dataset_arrays(_write_corrupted(src, os.path.join(tmp_dir, "truncated.fwds"), lambda data: data[:-10]))
    with pytest.raises(CorruptFileError, match="bad magic"):
        read_dataset_arrays(_write_corrupted(src, os.path.join(tmp_dir, "magic.fwds"),
                                             lambda data: b"XXXX" + data[4:]))
    with pytest.raises(CorruptFileError, match="too short"):
        read_dataset_arrays(_write_corrupted(src, os.path.join(tmp_dir, "short.fwds"), lambda data: data[:20]))


def test_dataset_spec_errors():
    with pytest.raises(ValueError, match="Unknown family"):
        DatasetSpec.for_preset("salt-dome", "A", n_samples=4, seed=0)
    with pytest.raises(ValueError, match="at least 2 samples"):
        DatasetSpec.for_preset("style", "A", n_samples=1, seed=0)

    spec = DatasetSpec.for_preset("style", "A", n_samples=4, seed=0)
    with pytest.raises(ValueError, match="does not produce gathers"):
        DatasetSpec(family="style", difficulty="A", n_samples=4, seed=0, sim=spec.sim, model_dims=(5, 1000, 70, 70))


def test_unstable_time_step(small_spec):
    small_spec.sim.dt = 5e-3
    with pytest.raises(CflViolationError, match="unstable"):
        synthesize_dataset(small_spec, show_progress=False)


def test_dataset_names():
    assert dataset_name("flat-vel", "A") == "fva"
    assert dataset_name("curve-fault", "B") == "cfb"
    assert dataset_name("style", "A") == "sta"
