"""Baseline-differential damage detection and imaging.

All algorithms consume a pair of pairwise record matrices (baseline vs
current): correlation-drop damage indices feed the elliptical RAPID
tomography, residual envelopes feed delay-and-sum (DAS) backprojection,
and an angle-resolved group-velocity profile turns DAS into its
compensated variant for anisotropic plates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sig

from . import _kernels
from .waveform import Waveform


@dataclass(frozen=True)
class DamageMap:
    """Scalar field over the plate pixel grid.

    ``values`` are the raw accumulator outputs (they scale linearly
    with the input residuals); ``normalized_values`` rescale the peak
    to 1 for display. ``argmax`` is the peak pixel center.
    """

    grid: np.ndarray        # (n, 2) pixel centers
    values: np.ndarray      # (n,)
    clipped: int = 0        # delay lookups beyond the record length

    def __post_init__(self):
        if len(self.grid) != len(self.values):
            raise ValueError("grid and values must have equal length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("map values must be finite")

    @property
    def peak_value(self) -> float:
        return float(np.max(self.values)) if len(self.values) else 0.0

    @property
    def argmax(self) -> tuple[float, float]:
        k = int(np.argmax(self.values))
        return (float(self.grid[k, 0]), float(self.grid[k, 1]))

    @property
    def normalized_values(self) -> np.ndarray:
        peak = np.max(np.abs(self.values)) if len(self.values) else 0.0
        if peak == 0.0:
            return np.zeros_like(self.values)
        out = self.values / peak
        return np.clip(out, 0.0, 1.0)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("x,y,value\n")
            for (x, y), v in zip(self.grid, self.values):
                fh.write(f"{x!r},{y!r},{v!r}\n")

    def write_pgm(self, path, shape: tuple[int, int]) -> None:
        """Plain-text PGM preview; ``shape`` is (ny, nx) of the grid."""
        ny, nx = shape
        if ny * nx != len(self.values):
            raise ValueError("shape does not match the pixel count")
        img = np.round(self.normalized_values.reshape(ny, nx) * 255).astype(int)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"P2\n{nx} {ny}\n255\n")
            for row in img[::-1]:  # y axis upward
                fh.write(" ".join(str(v) for v in row) + "\n")


@dataclass(frozen=True)
class VelocityProfile:
    """Even Fourier model of the angular group velocity v_g(theta).

    v(theta) = c0 + a2 cos 2t + b2 sin 2t + a4 cos 4t + b4 sin 4t,
    which is automatically pi-periodic (propagation is direction
    symmetric).
    """

    c0: float
    a2: float = 0.0
    b2: float = 0.0
    a4: float = 0.0
    b4: float = 0.0

    def __post_init__(self):
        th = np.linspace(0, 2 * np.pi, 720, endpoint=False)
        if np.any(self.velocity(th) <= 0):
            raise ValueError("profile must be positive for all angles")

    @classmethod
    def isotropic(cls, v: float) -> "VelocityProfile":
        return cls(c0=v)

    def velocity(self, theta):
        theta = np.asarray(theta, dtype=float)
        v = (self.c0 + self.a2 * np.cos(2 * theta) + self.b2 * np.sin(2 * theta)
             + self.a4 * np.cos(4 * theta) + self.b4 * np.sin(4 * theta))
        return v if v.ndim else float(v)

    @property
    def is_isotropic(self) -> bool:
        return self.a2 == self.b2 == self.a4 == self.b4 == 0.0


@dataclass(frozen=True)
class BaselinePair:
    """A baseline and a current record matrix over the same nodes.

    Both operands must expose ``node_ids`` and a ``records`` dict keyed
    by (tx_id, rx_id) (see ``protocol.DataMatrix``).
    """

    baseline: object
    current: object

    def __post_init__(self):
        if tuple(self.baseline.node_ids) != tuple(self.current.node_ids):
            raise ValueError("baseline and current matrices cover different nodes")

    @property
    def node_ids(self):
        return tuple(self.baseline.node_ids)

    def damage_indices(self) -> np.ndarray:
        return damage_index_matrix(self.baseline.records,
                                   self.current.records, self.node_ids)

    def residual_envelopes(self) -> tuple[dict, float]:
        return residual_envelopes_from_records(self.baseline.records,
                                               self.current.records)


# --------------------------------------------------------------------------
# Damage index
# --------------------------------------------------------------------------

def damage_index(baseline: Waveform, current: Waveform) -> float:
    """1 - Pearson correlation between the two records, in [0, 2]."""
    if len(baseline) != len(current) or baseline.sample_rate != current.sample_rate:
        raise ValueError("records must share length and sample rate")
    b = baseline.samples - np.mean(baseline.samples)
    c = current.samples - np.mean(current.samples)
    nb, nc = np.linalg.norm(b), np.linalg.norm(c)
    if nb == 0.0 or nc == 0.0:
        raise ValueError("zero-variance record")
    rho = float(np.dot(b, c) / (nb * nc))
    return 1.0 - max(-1.0, min(1.0, rho))


def damage_index_matrix(baseline_records: dict, current_records: dict,
                        node_ids) -> np.ndarray:
    """DI for every ordered pair with records; diagonal stays 0."""
    n = len(node_ids)
    di = np.zeros((n, n))
    for i, tx in enumerate(node_ids):
        for j, rx in enumerate(node_ids):
            if i == j:
                continue
            key = (tx, rx)
            if key in baseline_records and key in current_records:
                di[i, j] = damage_index(baseline_records[key],
                                        current_records[key])
    return di


# --------------------------------------------------------------------------
# RAPID
# --------------------------------------------------------------------------

def rapid_map(di: np.ndarray, positions, grid: np.ndarray,
              beta: float = 1.05) -> DamageMap:
    """Elliptical-weight tomography from the damage index matrix.

    Each unordered pair spreads its DI over the ellipse R < beta, where
    R(x, y) = (|x - p_i| + |x - p_j|) / |p_i - p_j| (clipped below at
    1); the weight falls linearly from 1 on the direct segment to 0 on
    the ellipse boundary.
    """
    if beta <= 1.0:
        raise ValueError("beta must exceed 1")
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    if di.shape != (n, n):
        raise ValueError("DI matrix shape does not match positions")
    out = np.zeros(len(grid))
    for i in range(n):
        for j in range(i + 1, n):
            d_ij = float(np.hypot(*(pos[i] - pos[j])))
            if d_ij == 0.0:
                raise ValueError(f"coincident node pair ({i}, {j})")
            weight_di = di[i, j] + di[j, i]
            if weight_di == 0.0:
                continue
            d_i = np.hypot(grid[:, 0] - pos[i, 0], grid[:, 1] - pos[i, 1])
            d_j = np.hypot(grid[:, 0] - pos[j, 0], grid[:, 1] - pos[j, 1])
            r = np.maximum((d_i + d_j) / d_ij, 1.0)
            out += 0.5 * weight_di * np.maximum(0.0, (beta - r) / (beta - 1.0))
    return DamageMap(grid, out)


def rapid_pair_weight(pixel, p_i, p_j, beta: float = 1.05) -> float:
    """Weight of one pair at one pixel (the RAPID kernel, for checks)."""
    d_ij = math.hypot(p_i[0] - p_j[0], p_i[1] - p_j[1])
    if d_ij == 0.0:
        raise ValueError("coincident node pair")
    r = (math.hypot(pixel[0] - p_i[0], pixel[1] - p_i[1])
         + math.hypot(pixel[0] - p_j[0], pixel[1] - p_j[1])) / d_ij
    r = max(r, 1.0)
    return max(0.0, (beta - r) / (beta - 1.0))


# --------------------------------------------------------------------------
# Delay and sum
# --------------------------------------------------------------------------

def residual_envelope(baseline: Waveform, current: Waveform) -> Waveform:
    """Analytic-signal magnitude of (current - baseline)."""
    if len(baseline) != len(current) or baseline.sample_rate != current.sample_rate:
        raise ValueError("records must share length and sample rate")
    r = current.samples - baseline.samples
    return Waveform(np.abs(sig.hilbert(r)), baseline.sample_rate, baseline.t0)


def _das_accumulate(envelopes: list[np.ndarray], taus: list[np.ndarray],
                    fs: float, grid: np.ndarray) -> DamageMap:
    n_t = max(len(e) for e in envelopes)
    env = np.zeros((len(envelopes), n_t))
    for k, e in enumerate(envelopes):
        env[k, :len(e)] = e
    tau_samples = np.asarray(taus) * fs
    out = np.zeros(len(grid))
    clipped = _kernels.das_accumulate(
        np.ascontiguousarray(env),
        np.ascontiguousarray(tau_samples, dtype=np.float64), out)
    return DamageMap(grid, out, clipped=clipped)


def _pair_delays(pos_i, pos_j, grid, profile: VelocityProfile) -> np.ndarray:
    dx_i = grid[:, 0] - pos_i[0]
    dy_i = grid[:, 1] - pos_i[1]
    dx_j = pos_j[0] - grid[:, 0]
    dy_j = pos_j[1] - grid[:, 1]
    d_i = np.hypot(dx_i, dy_i)
    d_j = np.hypot(dx_j, dy_j)
    if profile.is_isotropic:
        return (d_i + d_j) / profile.c0
    v_i = profile.velocity(np.arctan2(dy_i, dx_i))
    v_j = profile.velocity(np.arctan2(dy_j, dx_j))
    return d_i / v_i + d_j / v_j


def das_map_profiled(residual_envelopes: dict, positions: dict,
                     grid: np.ndarray, profile: VelocityProfile, fs: float,
                     excitation_delay: float = 0.0) -> DamageMap:
    """Backproject residual envelopes along travel-time ellipses.

    ``residual_envelopes`` maps (tx_id, rx_id) to envelope arrays
    sampled at ``fs`` starting at the excitation instant;
    ``excitation_delay`` (e.g. the burst center) is added to the
    geometric delays before lookup. Pairs are accumulated in sorted key
    order so the sum is deterministic.
    """
    keys = sorted(residual_envelopes.keys())
    envs, taus = [], []
    for tx, rx in keys:
        envs.append(np.asarray(residual_envelopes[(tx, rx)], dtype=np.float64))
        tau = _pair_delays(positions[tx], positions[rx], grid, profile)
        taus.append(tau + excitation_delay)
    if not envs:
        raise ValueError("no residual records supplied")
    return _das_accumulate(envs, taus, fs, grid)


def das_map(residual_envelopes: dict, positions: dict, grid: np.ndarray,
            v_g: float, fs: float, excitation_delay: float = 0.0) -> DamageMap:
    """DAS with a single scalar group velocity."""
    if v_g <= 0:
        raise ValueError("group velocity must be positive")
    return das_map_profiled(residual_envelopes, positions, grid,
                            VelocityProfile.isotropic(v_g), fs,
                            excitation_delay)


def das_map_compensated(residual_envelopes: dict, positions: dict,
                        grid: np.ndarray, profile: VelocityProfile, fs: float,
                        excitation_delay: float = 0.0) -> DamageMap:
    """DAS with direction-dependent delays from the velocity profile."""
    return das_map_profiled(residual_envelopes, positions, grid, profile, fs,
                            excitation_delay)


def residual_envelopes_from_records(baseline_records: dict,
                                    current_records: dict) -> tuple[dict, float]:
    """Envelope arrays for every pair present in both matrices."""
    out = {}
    fs = None
    for key in sorted(baseline_records.keys()):
        if key not in current_records or key[0] == key[1]:
            continue
        env = residual_envelope(baseline_records[key], current_records[key])
        out[key] = env.samples
        fs = env.sample_rate
    if fs is None:
        raise ValueError("no common pair records between the matrices")
    return out, fs


# --------------------------------------------------------------------------
# Velocity calibration
# --------------------------------------------------------------------------

def excitation_peak_delay(drive: Waveform) -> float:
    """Time of the transmit envelope peak relative to the record start.

    The resonant load builds up over several cycles, so the radiated
    envelope peaks late in the burst rather than at its center; arrival
    times must be referenced to this instant.
    """
    env = np.abs(sig.hilbert(drive.samples))
    return float(np.argmax(env) / drive.sample_rate)


def excitation_lead_delay(drive: Waveform, lead_fraction: float = 0.25) -> float:
    """Leading-edge instant of the transmit envelope.

    Counterpart of the leading-edge arrival detector in
    :func:`time_of_flight`: referencing both ends of the link to the
    same envelope fraction cancels the burst's own rise time.
    """
    env = np.abs(sig.hilbert(drive.samples))
    k = int(np.argmax(env))
    target = lead_fraction * env[k]
    i = k
    while i > 0 and env[i - 1] >= target:
        i -= 1
    if i == 0 or env[i] <= env[i - 1]:
        return float(i / drive.sample_rate)
    frac = (env[i] - target) / (env[i] - env[i - 1])
    return float((i - frac) / drive.sample_rate)


def time_of_flight(record: Waveform, distance: float, v_nominal: float,
                   excitation_delay: float = 0.0,
                   window: tuple[float, float] = (0.8, 1.5),
                   lead_fraction: float = 0.25) -> float:
    """First-arrival time inside a travel-time window.

    The search window [0.8, 1.5] x (distance / v_nominal) rejects later
    edge reflections; ``excitation_delay`` accounts for the burst
    envelope peaking late in the burst rather than at t = 0. The
    arrival instant is the leading-edge crossing at ``lead_fraction``
    of the windowed envelope peak, which is far less sensitive to
    trailing multipath than the peak itself; set ``lead_fraction=None``
    to use the raw peak.
    """
    env = np.abs(sig.hilbert(record.samples))
    t = record.times() - excitation_delay
    t_exp = distance / v_nominal
    mask = (t >= window[0] * t_exp) & (t <= window[1] * t_exp)
    if not np.any(mask):
        raise ValueError("arrival window falls outside the record")
    idx = np.flatnonzero(mask)
    k = idx[int(np.argmax(env[idx]))]
    if lead_fraction is None:
        return float(t[k])
    target = lead_fraction * env[k]
    i = k
    while i > 0 and env[i - 1] >= target:
        i -= 1
    if i == 0 or env[i] <= env[i - 1]:
        return float(t[i])
    frac = (env[i] - target) / (env[i] - env[i - 1])
    return float(t[i] - frac * (t[i] - t[i - 1]))


def calibrate_group_velocity(records: dict, positions: dict, f0: float,
                             v_nominal: float,
                             excitation_delay: float = 0.0) -> VelocityProfile:
    """Fit v_g(theta) from pairwise first arrivals.

    Needs records spanning at least three distinct propagation angles
    (mod pi). Least squares over the even Fourier basis (orders 0, 2,
    4).
    """
    angles, velocities = [], []
    for (tx, rx), rec in sorted(records.items()):
        if tx == rx:
            continue
        p_t, p_r = positions[tx], positions[rx]
        d = math.hypot(p_r[0] - p_t[0], p_r[1] - p_t[1])
        tof = time_of_flight(rec, d, v_nominal, excitation_delay)
        if tof <= 0:
            continue
        angles.append(math.atan2(p_r[1] - p_t[1], p_r[0] - p_t[0]))
        velocities.append(d / tof)
    if len(velocities) < 4:
        raise ValueError("need at least 4 usable pair records")
    th = np.asarray(angles)
    distinct = np.unique(np.round(np.mod(th, np.pi), 6))
    merged = [distinct[0]] if len(distinct) else []
    for a in distinct[1:]:
        if a - merged[-1] > 1e-3:
            merged.append(a)
    if len(merged) < 3:
        raise ValueError("insufficient angular diversity: need >= 3 distinct "
                         "propagation angles")
    basis = np.column_stack([np.ones_like(th), np.cos(2 * th), np.sin(2 * th),
                             np.cos(4 * th), np.sin(4 * th)])
    coef, *_ = np.linalg.lstsq(basis, np.asarray(velocities), rcond=None)
    return VelocityProfile(*coef)


# --------------------------------------------------------------------------
# Peak extraction
# --------------------------------------------------------------------------

def localize(damage_map: DamageMap,
             truth: tuple[float, float] | None = None) -> dict:
    """Argmax pixel center, plus the distance to truth when known."""
    if damage_map.peak_value <= 0.0:
        raise ValueError("cannot localize an all-zero map")
    x, y = damage_map.argmax
    result = {"argmax": (x, y), "error_m": None}
    if truth is not None:
        result["error_m"] = float(math.hypot(x - truth[0], y - truth[1]))
    return result
