""" Velocity-map generators for the five structural families (layered, curved, faulted and random-field "style"
    maps), each in an easier (A) and a harder (B) variant. All maps are clipped to [V_MIN, V_MAX]. """
import numpy as np
from scipy.ndimage import gaussian_filter

from utils import V_MIN, V_MAX, FAMILIES, DIFFICULTIES

# Generator constants per difficulty; B maps are thinner-layered, more curved, more faulted and rougher.
MIN_LAYER_THICKNESS = {"A": 1 / 8, "B": 1 / 32}  # fraction of the map size
CURVE_AMPLITUDE = {"A": (1 / 32, 1 / 12), "B": (1 / 12, 1 / 6)}
CURVE_WAVENUMBER = {"A": (0.5, 1.5), "B": (1.0, 3.0)}  # periods across the map
FAULT_THROW = {"A": (0.05, 0.15), "B": (0.10, 0.25)}
FAULT_MAX_SLOPE = {"A": 0.15, "B": 0.25}  # horizontal shift of the fault trace per row
STYLE_SMOOTHING = {"A": 1 / 8, "B": 1 / 16}  # Gaussian sigma as a fraction of the map size


def _layer_boundaries(num_layers, size, min_thickness, rng):
    """ Sorted depths (rows) of the `num_layers - 1` interfaces, with every layer at least `min_thickness` thick. """
    slack = size - num_layers * min_thickness
    offsets = np.sort(rng.integers(0, slack + 1, size=num_layers - 1))
    return offsets + min_thickness * np.arange(1, num_layers)


def _layer_velocities(num_layers, rng):
    return np.sort(rng.uniform(V_MIN, V_MAX, size=num_layers))


def _fill_layers(interface_depths, velocities, size):
    """ `interface_depths` is [num_interfaces, size] (one depth per column); returns a [size, size] map whose cell
        (row, col) takes the velocity of the number of interfaces at or above it. """
    rows = np.arange(size)[:, None, None]  # [size, 1, 1]
    layer_idx = np.sum(rows >= interface_depths.T[None, :, :], axis=2)  # [size, size]
    return velocities[layer_idx]


def flat_layers(difficulty, size, rng):
    num_layers = int(rng.integers(2, 6))
    min_thickness = max(1, int(size * MIN_LAYER_THICKNESS[difficulty]))
    min_thickness = min(min_thickness, size // num_layers)
    boundaries = _layer_boundaries(num_layers, size, min_thickness, rng)
    depths = np.repeat(boundaries[:, None], size, axis=1).astype(np.float64)
    return _fill_layers(depths, _layer_velocities(num_layers, rng), size)


def curved_layers(difficulty, size, rng):
    num_layers = int(rng.integers(2, 6))
    min_thickness = max(1, int(size * MIN_LAYER_THICKNESS[difficulty]))
    min_thickness = min(min_thickness, size // num_layers)
    boundaries = _layer_boundaries(num_layers, size, min_thickness, rng)

    # One shared undulation keeps interfaces from crossing
    amplitude = size * rng.uniform(*CURVE_AMPLITUDE[difficulty])
    wavenumber = rng.uniform(*CURVE_WAVENUMBER[difficulty])
    phase = rng.uniform(0, 2 * np.pi)
    undulation = amplitude * np.sin(2 * np.pi * wavenumber * np.arange(size) / size + phase)

    depths = np.round(boundaries[:, None] + undulation[None, :])
    return _fill_layers(depths, _layer_velocities(num_layers, rng), size)


def apply_fault(grid, x0, slope, throw):
    """ Shifts the hanging wall (cells right of the fault trace col = x0 + slope * (row - center)) down by `throw`
        rows. Rows exposed at the top of the hanging wall take the velocity of the shallowest row. """
    size_rows, size_cols = grid.shape
    rows = np.arange(size_rows)
    trace = x0 + slope * (rows - (size_rows - 1) / 2)
    hanging = np.arange(size_cols)[None, :] > trace[:, None]  # [rows, cols]

    shifted = np.empty_like(grid)
    shifted[throw:] = grid[:size_rows - throw]
    shifted[:throw] = grid[0]
    return np.where(hanging, shifted, grid)


def faulted(base_generator, difficulty, size, rng):
    grid = base_generator(difficulty, size, rng)
    x0 = rng.uniform(size / 4, 3 * size / 4)
    slope = rng.uniform(-FAULT_MAX_SLOPE[difficulty], FAULT_MAX_SLOPE[difficulty])
    throw = max(1, int(round(size * rng.uniform(*FAULT_THROW[difficulty]))))
    return apply_fault(grid, x0, slope, throw)


def style_field(difficulty, size, rng):
    smoothed = gaussian_filter(rng.standard_normal((size, size)), sigma=size * STYLE_SMOOTHING[difficulty],
                               mode="reflect")
    lo, hi = np.min(smoothed), np.max(smoothed)
    if hi - lo <= 0:
        return np.full((size, size), (V_MIN + V_MAX) / 2)
    return V_MIN + (smoothed - lo) / (hi - lo) * (V_MAX - V_MIN)


def generate_velocity(family, difficulty, rng, size=32):
    """ Returns a [size, size] float64 velocity map (m/s) of the given family and difficulty. """
    if family not in FAMILIES:
        raise ValueError(f"Unknown family '{family}', expected one of {FAMILIES}")
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"Unknown difficulty '{difficulty}', expected one of {DIFFICULTIES}")

    if family == "flat-vel":
        grid = flat_layers(difficulty, size, rng)
    elif family == "curve-vel":
        grid = curved_layers(difficulty, size, rng)
    elif family == "flat-fault":
        grid = faulted(flat_layers, difficulty, size, rng)
    elif family == "curve-fault":
        grid = faulted(curved_layers, difficulty, size, rng)
    else:
        grid = style_field(difficulty, size, rng)

    return np.clip(grid.astype(np.float64), V_MIN, V_MAX)


def sample_rng(seed, index):
    """ Independent generator for sample `index` of a dataset seeded with `seed`. """
    return np.random.default_rng([seed, index])


if __name__ == "__main__":
    for curr_family in FAMILIES:
        for curr_difficulty in DIFFICULTIES:
            vel = generate_velocity(curr_family, curr_difficulty, sample_rng(0, 0))
            print(f"{curr_family}-{curr_difficulty}: [{vel.min():.1f}, {vel.max():.1f}] m/s")
