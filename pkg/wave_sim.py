""" 2D constant-density acoustic forward modelling: second-order explicit finite differences in time and space with a
    sponge layer around the model. Generates the seismic gathers the networks learn to invert. """
import hashlib
import json
import logging
from dataclasses import dataclass, asdict

import numpy as np

from utils import CflViolationError, SimulationError, V_MIN, V_MAX

CFL_LIMIT = 1.0 / np.sqrt(2.0)


def ricker(t, f0, t0):
    """ Ricker wavelet (second derivative of a Gaussian, negated) with peak frequency `f0`, centered at `t0`. """
    if f0 <= 0:
        raise ValueError(f"peak frequency must be positive, got {f0}")
    arg = (np.pi * f0 * (np.asarray(t, dtype=np.float64) - t0)) ** 2
    return (1.0 - 2.0 * arg) * np.exp(-arg)


@dataclass
class SimConfig:
    nt: int
    sources: list  # (row, col) grid points, one simulation per source
    receiver_cols: list
    receiver_row: int = 0
    dx: float = 10.0
    dt: float = 1e-3
    f0: float = 15.0
    t0: float = None  # wavelet delay, defaults to 1 / f0
    amplitude: float = 1.0
    sponge_width: int = 10
    sponge_coefficient: float = 0.015

    def __post_init__(self):
        if self.nt < 1 or self.dt <= 0 or self.dx <= 0:
            raise ValueError(f"invalid discretization: nt={self.nt}, dt={self.dt}, dx={self.dx}")
        if len(self.sources) == 0 or len(self.receiver_cols) == 0:
            raise ValueError("at least one source and one receiver are required")
        if self.sponge_width < 0:
            raise ValueError(f"sponge width must be non-negative, got {self.sponge_width}")
        self.sources = [tuple(int(coord) for coord in src) for src in self.sources]
        self.receiver_cols = [int(col) for col in self.receiver_cols]
        if self.t0 is None:
            self.t0 = 1.0 / self.f0

    @property
    def num_sources(self):
        return len(self.sources)

    @property
    def num_receivers(self):
        return len(self.receiver_cols)

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return SimConfig(**d)

    def fingerprint(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()

    def check_geometry(self, grid_shape):
        height, width = grid_shape
        for row, col in self.sources:
            if not (0 <= row < height and 0 <= col < width):
                raise ValueError(f"source ({row}, {col}) lies outside the {height}x{width} grid")
        if not 0 <= self.receiver_row < height or any(not 0 <= col < width for col in self.receiver_cols):
            raise ValueError(f"receivers (row {self.receiver_row}, cols {min(self.receiver_cols)}.."
                             f"{max(self.receiver_cols)}) lie outside the {height}x{width} grid")


def default_sim_config(num_sources, num_time, num_receivers, size, **overrides):
    """ Surface acquisition: sources evenly spaced on the top row, receivers evenly spaced over the top row
        (every column when `num_receivers == size`). """
    source_cols = np.round(np.linspace(0, size - 1, num_sources)).astype(int)
    receiver_cols = np.round(np.linspace(0, size - 1, num_receivers)).astype(int)
    return SimConfig(nt=num_time, sources=[(0, int(col)) for col in source_cols],
                     receiver_cols=receiver_cols.tolist(), **overrides)


@dataclass
class CflReport:
    ok: bool
    courant: float  # max(c) * dt / dx
    max_stable_dt: float


def cfl_check(vel, config):
    v_max = float(np.max(vel))
    courant = v_max * config.dt / config.dx
    return CflReport(ok=bool(courant <= CFL_LIMIT), courant=courant,
                     max_stable_dt=config.dx / (v_max * np.sqrt(2.0)))


def sponge_profile(length, width, coefficient):
    """ Damping factors along one axis of the padded grid: exp(-(coefficient * d)^2) for a cell `d` cells deep into
        the sponge, 1 elsewhere. """
    profile = np.ones(length, dtype=np.float64)
    depth = coefficient * np.arange(width, 0, -1)
    profile[:width] = np.exp(-depth ** 2)
    profile[length - width:] = np.exp(-depth[::-1] ** 2)
    return profile


def laplacian(p, dx):
    """ 5-point Laplacian over the last two axes with zero (Dirichlet) values outside the grid. """
    padded = np.pad(p, [(0, 0)] * (p.ndim - 2) + [(1, 1), (1, 1)])
    return (padded[..., :-2, 1:-1] + padded[..., 2:, 1:-1] + padded[..., 1:-1, :-2] + padded[..., 1:-1, 2:]
            - 4.0 * p) / (dx * dx)


def step(p_prev, p_curr, vel, source_term, config, damping=None):
    """ p_next = D * (2 p_curr - p_prev + c^2 dt^2 (lap(p_curr) + s)), with sponge factors D (1 if not given). """
    c2dt2 = (vel * config.dt) ** 2
    p_next = 2.0 * p_curr - p_prev + c2dt2 * (laplacian(p_curr, config.dx) + source_term)
    if damping is not None:
        p_next *= damping
    return p_next


@dataclass
class SeismicGather:
    data: np.ndarray  # [S, T, R]
    velocity_hash: str = ""
    config_hash: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.data)):
            raise SimulationError("seismic gather contains non-finite values")


def forward_model(vel, config):
    """ Simulates every source of `config` over the velocity grid `vel` ([H, W], m/s) and records the pressure at the
        receivers before each time step. Returns a SeismicGather with data of shape [S, nt, R]. """
    vel = np.asarray(vel, dtype=np.float64)
    if vel.ndim != 2:
        raise ValueError(f"velocity map must be 2D, got shape {vel.shape}")
    if np.min(vel) < V_MIN or np.max(vel) > V_MAX:
        raise ValueError(f"velocities must lie in [{V_MIN}, {V_MAX}] m/s, got [{np.min(vel)}, {np.max(vel)}]")
    config.check_geometry(vel.shape)

    report = cfl_check(vel, config)
    if not report.ok:
        raise CflViolationError(f"max(c) * dt / dx = {report.courant:.4f} exceeds {CFL_LIMIT:.4f}; "
                                f"use dt <= {report.max_stable_dt:.4e} s")

    w = config.sponge_width
    padded_vel = np.pad(vel, w, mode="edge")
    height, width = padded_vel.shape
    damping = np.outer(sponge_profile(height, w, config.sponge_coefficient),
                       sponge_profile(width, w, config.sponge_coefficient))

    num_sources = config.num_sources
    src_idx = np.arange(num_sources)
    src_rows = np.array([row + w for row, _ in config.sources])
    src_cols = np.array([col + w for _, col in config.sources])
    rec_row, rec_cols = config.receiver_row + w, np.array(config.receiver_cols) + w

    wavelet = config.amplitude * ricker(np.arange(config.nt) * config.dt, config.f0, config.t0)
    gather = np.zeros((num_sources, config.nt, config.num_receivers), dtype=np.float64)
    p_prev = np.zeros((num_sources, height, width), dtype=np.float64)
    p_curr = np.zeros_like(p_prev)
    source_term = np.zeros_like(p_prev)

    for idx_step in range(config.nt):
        gather[:, idx_step, :] = p_curr[:, rec_row, rec_cols]

        source_term[src_idx, src_rows, src_cols] = wavelet[idx_step]
        p_next = step(p_prev, p_curr, padded_vel, source_term, config, damping=damping)
        source_term[src_idx, src_rows, src_cols] = 0.0

        if not np.all(np.isfinite(p_next)):
            raise SimulationError(f"non-finite pressure at time step {idx_step} (unstable simulation)")
        p_prev, p_curr = p_curr, p_next

    return SeismicGather(data=gather, velocity_hash=hashlib.sha256(vel.tobytes()).hexdigest(),
                         config_hash=config.fingerprint())


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    demo_config = default_sim_config(num_sources=3, num_time=256, num_receivers=32, size=32)
    demo_gather = forward_model(np.full((32, 32), 2500.0), demo_config)
    logging.info(f"Gather of shape {demo_gather.data.shape}, max |p| = {np.max(np.abs(demo_gather.data)):.4e}")
