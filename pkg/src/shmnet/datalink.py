"""Acoustic data links: BFSK downlink with envelope-detector CDR, OOK
uplink with per-symbol energy detection, and BER measurement.

The downlink rides on the power carrier: the hub switches between two
nearby tones and the frequency-selective channel turns that into
amplitude keying at the node, which a rectifier + envelope detector +
hysteretic slicer recovers. Bit '1' is assigned to the tone with the
stronger channel gain. The uplink transmits a single-cycle pulse per
'1' symbol and nothing per '0'.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sig
from scipy import stats

from .waveform import Waveform


class LinkError(RuntimeError):
    """Demodulation cannot proceed (dead or degenerate channel)."""


@dataclass(frozen=True)
class DownlinkConfig:
    f_bit0: float
    f_bit1: float
    bit_rate: float = 200.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.f_bit0 == self.f_bit1:
            raise ValueError("BFSK tones must differ")
        if not 10.0 <= self.bit_rate <= 200.0:
            raise ValueError("downlink bit rate must be within 10..200 bit/s")
        if self.bit_rate * 50 > min(self.f_bit0, self.f_bit1):
            raise ValueError("bit period must be much longer than the carrier")


@dataclass(frozen=True)
class CdrConfig:
    """Envelope detector + slow averager + hysteretic slicer.

    The hysteresis is a fraction of the running average, which makes
    the recovered bits invariant to overall amplitude scaling.
    """

    ed_time_constant: float
    avg_time_constant: float
    hysteresis_ratio: float = 0.05

    def __post_init__(self):
        if not 0 < self.ed_time_constant < self.avg_time_constant:
            raise ValueError("need 0 < ed_time_constant < avg_time_constant")
        if not 0 <= self.hysteresis_ratio < 1:
            raise ValueError("hysteresis_ratio must be in [0, 1)")

    @classmethod
    def for_rate(cls, bit_rate: float, f_carrier: float) -> "CdrConfig":
        """Detector fast vs the bit, averager slow vs the bit."""
        ed = max(2.0 / f_carrier, 0.02 / bit_rate)
        return cls(ed_time_constant=ed, avg_time_constant=4.0 / bit_rate)


@dataclass(frozen=True)
class UplinkConfig:
    f0: float
    bit_rate: float = 10e3
    amplitude: float = 3.3

    def __post_init__(self):
        if self.bit_rate > 10e3:
            raise ValueError("uplink bit rate is limited to 10 kbit/s")
        if self.symbol_period <= 1.0 / self.f0:
            raise ValueError("symbol period must exceed one carrier cycle")

    @property
    def symbol_period(self) -> float:
        return 1.0 / self.bit_rate


def _as_bits(bits) -> np.ndarray:
    b = np.asarray(bits, dtype=np.int64)
    if b.ndim != 1 or np.any((b != 0) & (b != 1)):
        raise ValueError("bits must be a 1-D array of 0/1")
    return b


# --------------------------------------------------------------------------
# BFSK downlink
# --------------------------------------------------------------------------

def bfsk_modulate(bits, cfg: DownlinkConfig, sample_rate: float) -> Waveform:
    """Continuous-phase FSK: the instantaneous frequency switches per
    bit while the phase accumulates without jumps."""
    b = _as_bits(bits)
    f_max = max(cfg.f_bit0, cfg.f_bit1)
    if sample_rate < 2.5 * f_max:
        raise ValueError("sample rate below Nyquist for the FSK tones")
    n_sps = sample_rate / cfg.bit_rate
    n = int(round(len(b) * n_sps))
    k = np.arange(n)
    bit_idx = np.minimum((k / n_sps).astype(np.int64), len(b) - 1)
    f_inst = np.where(b[bit_idx] == 1, cfg.f_bit1, cfg.f_bit0)
    phase = 2 * np.pi * np.cumsum(f_inst) / sample_rate
    return Waveform(cfg.amplitude * np.cos(phase), sample_rate)


def _one_pole(x: np.ndarray, tau: float, fs: float, init: float) -> np.ndarray:
    a = math.exp(-1.0 / (tau * fs))
    y, _ = sig.lfilter([1.0 - a], [1.0, -a], x, zi=[a * init])
    return y


def _forward_fill(values: np.ndarray, initial: int) -> np.ndarray:
    """Hold the last nonzero entry; zeros inherit their predecessor."""
    idx = np.where(values != 0, np.arange(len(values)), -1)
    idx = np.maximum.accumulate(idx)
    out = np.where(idx >= 0, values[np.maximum(idx, 0)], initial)
    return out


def cdr_demodulate(w: Waveform, cfg: CdrConfig, bit_rate: float,
                   n_bits: int | None = None) -> np.ndarray:
    """Recover amplitude-keyed bits: rectify, envelope-detect, slice
    against a slow average with ratio hysteresis, then sample at bit
    centers on a clock recovered from the slicer transitions.
    """
    fs = w.sample_rate
    # the diode detector tracks the carrier envelope; at a handful of
    # samples per carrier cycle a sampled rectifier beats against the
    # sample clock, so take the analytic envelope before the ED pole
    rectified = np.abs(sig.hilbert(w.samples))
    env = _one_pole(rectified, cfg.ed_time_constant, fs, 0.0)
    # seed the averager at the record mean: the protocol's preamble
    # performs this training in hardware
    mean_env = float(np.mean(env))
    if mean_env <= 0:
        raise LinkError("dead channel: no signal energy")
    avg = _one_pole(env, cfg.avg_time_constant, fs, mean_env)

    h = cfg.hysteresis_ratio
    # zero AM depth: equal gains at both tones leave nothing to slice
    settled = env[min(len(env) - 1, int(2 * cfg.avg_time_constant * fs)):]
    lo_q, hi_q = np.percentile(settled, [5.0, 95.0])
    if hi_q - lo_q < 2.0 * h * mean_env:
        raise LinkError("zero AM depth: channel gains equal at both tones")
    raw = np.zeros(len(env), dtype=np.int8)
    raw[env > avg * (1.0 + h)] = 1
    raw[env < avg * (1.0 - h)] = -1
    slicer = _forward_fill(raw, initial=-1)

    edges = np.flatnonzero(np.diff(slicer) != 0) + 1
    if len(edges) == 0:
        raise LinkError("no threshold crossings: zero AM depth or dead channel")

    n_sps = fs / bit_rate
    # circular mean of edge phases within the bit period
    ph = np.exp(2j * np.pi * (edges % n_sps) / n_sps)
    phi = float(np.angle(np.mean(ph)) / (2 * np.pi) * n_sps)
    if phi > n_sps / 2:
        phi -= n_sps
    if n_bits is None:
        n_bits = int(round(len(w.samples) / n_sps))
    centers = phi + (np.arange(n_bits) + 0.5) * n_sps
    centers = np.clip(np.round(centers).astype(np.int64), 0, len(slicer) - 1)
    return (slicer[centers] > 0).astype(np.int64)


# --------------------------------------------------------------------------
# OOK uplink
# --------------------------------------------------------------------------

def single_cycle_pulse_samples(f0: float, sample_rate: float,
                               amplitude: float) -> np.ndarray:
    """One sine cycle at f0: the transmitter output for a '1' symbol
    (the resonant load smooths the bridge drive to near-sinusoidal)."""
    n = max(int(round(sample_rate / f0)), 2)
    t = (np.arange(n) + 0.5) / sample_rate
    return amplitude * np.sin(2 * np.pi * f0 * t)


def ook_modulate(bits, cfg: UplinkConfig, sample_rate: float) -> Waveform:
    b = _as_bits(bits)
    if sample_rate < 2.5 * cfg.f0:
        raise ValueError("sample rate below Nyquist for the pulse")
    n_sps = int(round(cfg.symbol_period * sample_rate))
    pulse = single_cycle_pulse_samples(cfg.f0, sample_rate, cfg.amplitude)
    out = np.zeros(len(b) * n_sps)
    for k in np.flatnonzero(b):
        out[k * n_sps:k * n_sps + len(pulse)] = pulse
    return Waveform(out, sample_rate)


def _symbol_energies(x: np.ndarray, n_sps: int, offset: int,
                     n_bits: int, gate: float = 1.0) -> np.ndarray:
    seg = x[max(offset, 0):]
    if offset < 0:
        seg = np.concatenate([np.zeros(-offset), seg])
    need = n_bits * n_sps
    if len(seg) < need:
        seg = np.concatenate([seg, np.zeros(need - len(seg))])
    sym = seg[:need].reshape(n_bits, n_sps)
    n_gate = max(int(round(gate * n_sps)), 1)
    return np.sum(sym[:, :n_gate] ** 2, axis=1)


def ook_demodulate(w: Waveform, cfg: UplinkConfig,
                   threshold_policy: str = "adaptive",
                   n_bits: int | None = None,
                   fixed_threshold: float | None = None,
                   trailing_window: int = 64,
                   gate: float = 0.4) -> np.ndarray:
    """Per-symbol energy detection.

    Symbol timing must be correct to within a quarter period; the exact
    offset is refined by maximizing the spread between adjacent symbol
    energies (this is what the alternating preamble is for). The
    adaptive threshold is the midpoint of the trailing max/min window
    of symbol energies. ``gate`` restricts each symbol's energy sum to
    its leading fraction, which rejects reverberation spilling over
    from earlier symbols.
    """
    fs = w.sample_rate
    n_sps = int(round(cfg.symbol_period * fs))
    if n_bits is None:
        n_bits = int(round(len(w.samples) / n_sps))
    if n_bits < 1:
        raise LinkError("record shorter than one symbol")

    search = np.arange(-(n_sps // 4), n_sps // 4 + 1)
    if len(search) > 33:
        search = np.unique(np.round(np.linspace(search[0], search[-1], 33))
                           .astype(np.int64))
    best_off, best_metric = 0, -1.0
    for off in search:
        e = _symbol_energies(w.samples, n_sps, int(off), n_bits, gate)
        metric = float(np.sum(np.abs(np.diff(e))))
        if metric > best_metric:
            best_metric, best_off = metric, int(off)
    energies = _symbol_energies(w.samples, n_sps, best_off, n_bits, gate)

    if threshold_policy == "fixed":
        if fixed_threshold is None:
            raise ValueError("fixed policy needs fixed_threshold")
        thr = np.full(n_bits, fixed_threshold)
    elif threshold_policy == "adaptive":
        if energies.max() <= 0:
            raise LinkError("dead channel: no symbol energy")
        win = max(trailing_window, 2)
        g_spread = float(energies.max() - energies.min())
        g_mid = 0.5 * float(energies.max() + energies.min())
        thr = np.empty(n_bits)
        for k in range(n_bits):
            # lead-in symbols share the first full window; a window that
            # saw only one symbol class falls back to the global midpoint
            seg = energies[:win] if k < win else energies[k - win + 1:k + 1]
            spread = float(seg.max() - seg.min())
            if spread < 0.25 * g_spread:
                thr[k] = g_mid
            else:
                thr[k] = 0.5 * float(seg.max() + seg.min())
    else:
        raise ValueError(f"unknown threshold policy {threshold_policy!r}")
    return (energies > thr).astype(np.int64)


# --------------------------------------------------------------------------
# BER bookkeeping
# --------------------------------------------------------------------------

def measure_ber(tx_bits, rx_bits) -> dict:
    """Error count with a Clopper-Pearson 95% confidence interval."""
    tx = _as_bits(tx_bits)
    rx = _as_bits(rx_bits)
    if len(tx) != len(rx):
        raise ValueError(f"length mismatch: {len(tx)} vs {len(rx)}")
    n = len(tx)
    errors = int(np.count_nonzero(tx != rx))
    ci_low = 0.0 if errors == 0 else float(stats.beta.ppf(0.025, errors, n - errors + 1))
    ci_high = 1.0 if errors == n else float(stats.beta.ppf(0.975, errors + 1, n - errors))
    return {"n": n, "errors": errors, "ber": errors / n,
            "ci_low": ci_low, "ci_high": ci_high}


def write_bits(bits, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in _as_bits(bits):
            fh.write(f"{int(b)}\n")


def read_bits(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    return _as_bits([int(ln) for ln in lines])
