"""Transmit burst synthesis, resonant load, duplexer, and receive chain.

The transmitter drives an H-bridge whose high side switches between
five supply rails, so the output is a square-ish tone burst whose
half-cycle amplitudes follow a raised-cosine envelope. A series LRC
formed with the transducer capacitance suppresses harmonics and boosts
the transducer voltage by up to Q. The receiver chain is a homodyne
quadrature downconverter with a programmable biquad low-pass in each
arm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal as sig

from .waveform import Waveform

HAMMING_A0 = 25.0 / 46.0
LEVEL_GRID = 1.0 / 1024.0  # resolution of the level optimizer

#: Supply rails of the reference design, volts.
DEFAULT_LEVELS = (0.36, 0.89, 1.9, 2.87, 3.3)


@dataclass(frozen=True)
class PulseSpec:
    """Five-level windowed tone burst description."""

    f0: float
    n_cycles: int = 5
    a0: float = HAMMING_A0
    levels: tuple[float, ...] = DEFAULT_LEVELS
    vdd: float = 3.3

    def __post_init__(self):
        if self.f0 <= 0:
            raise ValueError("f0 must be > 0")
        if self.n_cycles < 1:
            raise ValueError("n_cycles must be >= 1")
        if not 0.5 < self.a0 < 1.0:
            raise ValueError("a0 must be in (0.5, 1)")
        lv = self.levels
        if len(lv) < 1 or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("levels must be strictly ascending")
        if lv[0] <= 0 or lv[-1] > self.vdd * (1 + 1e-12):
            raise ValueError("levels must lie in (0, vdd]")

    @property
    def duration(self) -> float:
        return self.n_cycles / self.f0

    def normalized_levels(self) -> np.ndarray:
        return np.asarray(self.levels) / self.levels[-1]


@dataclass(frozen=True)
class LrcLoad:
    """Series LRC formed by the bridge inductors and the transducer C_P."""

    L_series: float
    C_P: float
    R_eff: float

    def __post_init__(self):
        if min(self.L_series, self.C_P, self.R_eff) <= 0:
            raise ValueError("LRC elements must be positive")

    @property
    def resonance_hz(self) -> float:
        return 1.0 / (2 * math.pi * math.sqrt(self.L_series * self.C_P))

    @property
    def q(self) -> float:
        return 2 * math.pi * self.resonance_hz * self.L_series / self.R_eff

    @classmethod
    def for_resonance(cls, f0: float, c_p: float = 100e-12,
                      q: float = 5.0) -> "LrcLoad":
        """Pick L and R so the load resonates at f0 with the given Q."""
        w0 = 2 * math.pi * f0
        L = 1.0 / (w0**2 * c_p)
        return cls(L, c_p, w0 * L / q)


@dataclass(frozen=True)
class DuplexerSpec:
    """Passive transmit/receive switch: series caps plus diode clamps."""

    C_DUP: float = 10e-12
    diode_drop: float = 0.7
    C_in: float = 2e-12
    C_f: float = 0.2e-12

    def __post_init__(self):
        if self.C_DUP < 5 * self.C_in:
            raise ValueError("need C_DUP >= 5 * C_in for the duplexer to work")
        if min(self.C_DUP, self.C_in, self.C_f) <= 0 or self.diode_drop <= 0:
            raise ValueError("duplexer elements must be positive")

    def check_transducer(self, c_p: float) -> None:
        if c_p < 5 * self.C_DUP:
            raise ValueError("need C_P >= 5 * C_DUP for the duplexer to work")

    @property
    def effective_input_capacitance(self) -> float:
        return self.C_in * self.C_DUP / (self.C_in + self.C_DUP)

    @property
    def division_gain(self) -> float:
        """Receive-mode gain factor relative to a direct connection."""
        return self.C_DUP / (self.C_DUP + self.C_in)


@dataclass(frozen=True)
class ReceiverConfig:
    """Gain and biquad settings for one receive chain.

    The 4-bit gain code spans exactly 20 dB. The biquad is a low-pass
    with a transmission notch: H(s) = k (s^2 + wn^2) / (s^2 + wc/q s +
    wc^2) with k = (wc/wn)^2 so the DC gain is 1; the stop-band floor
    H(inf) = k follows from the cutoff/notch ratio.
    """

    gain_code: int = 0
    f_c: float = 100e3
    f_n: float = 250e3
    pga_gain: float = 1.0
    pole_q: float = 0.95

    GAIN_SPAN_DB = 20.0
    BW_SPAN = 4.0
    N_CODES = 16

    def __post_init__(self):
        if not 0 <= self.gain_code < self.N_CODES:
            raise ValueError("gain_code must be a 4-bit value")
        if not 0 < self.f_c < self.f_n:
            raise ValueError("need 0 < f_c < f_n")

    @classmethod
    def from_codes(cls, gain_code: int, bw_code: int,
                   f_c_base: float = 25e3, notch_ratio: float = 2.5,
                   pga_gain: float = 1.0) -> "ReceiverConfig":
        if not 0 <= bw_code < cls.N_CODES:
            raise ValueError("bw_code must be a 4-bit value")
        f_c = f_c_base * cls.BW_SPAN ** (bw_code / (cls.N_CODES - 1))
        return cls(gain_code, f_c, notch_ratio * f_c, pga_gain)

    @property
    def gain(self) -> float:
        db = self.GAIN_SPAN_DB * self.gain_code / (self.N_CODES - 1)
        return 10.0 ** (db / 20.0)

    @property
    def h_inf(self) -> float:
        return (self.f_c / self.f_n) ** 2

    def biquad_coeffs(self) -> tuple[list[float], list[float]]:
        wc = 2 * math.pi * self.f_c
        wn = 2 * math.pi * self.f_n
        k = (wc / wn) ** 2
        return [k, 0.0, k * wn**2], [1.0, wc / self.pole_q, wc**2]

    def biquad_response(self, f) -> np.ndarray:
        """Continuous-time biquad transfer function at frequencies f."""
        b, a = self.biquad_coeffs()
        s = 2j * np.pi * np.asarray(f, dtype=float)
        return ((b[0] * s**2 + b[1] * s + b[2])
                / (s**2 + a[1] * s + a[2]))


# --------------------------------------------------------------------------
# Envelope and level assignment
# --------------------------------------------------------------------------

def window_envelope(n_cycles: int, a0: float, t, f0: float):
    """Raised-cosine burst envelope, peak 1 at the burst center.

    e(t) = a0 - (1 - a0) cos(2 pi t f0 / n_cycles) for t in [0, T] with
    T = n_cycles / f0.
    """
    t = np.asarray(t, dtype=float)
    T = n_cycles / f0
    if np.any(t < -1e-12 * T) or np.any(t > T * (1 + 1e-12)):
        raise ValueError("t outside the pulse support [0, n_cycles/f0]")
    e = a0 - (1.0 - a0) * np.cos(2 * np.pi * t * f0 / n_cycles)
    return e if e.ndim else float(e)


def half_cycle_envelope(n_cycles: int, a0: float = HAMMING_A0) -> np.ndarray:
    """Envelope sampled at the 2 n_cycles half-cycle peak instants."""
    k = np.arange(2 * n_cycles)
    t_rel = (k + 0.5) / (2.0 * n_cycles)  # fraction of the burst
    return a0 - (1.0 - a0) * np.cos(2 * np.pi * t_rel)


def quantize_levels(spec: PulseSpec) -> np.ndarray:
    """Level index (into spec.levels) for each half-cycle.

    The envelope samples are normalized so the tallest half-cycle rides
    the top rail, then each half-cycle takes the nearest level. The
    assignment is symmetric about the burst center by construction.
    """
    env = half_cycle_envelope(spec.n_cycles, spec.a0)
    env = env / env.max()
    norm = spec.normalized_levels()
    return np.argmin(np.abs(env[:, None] - norm[None, :]), axis=1)


# --------------------------------------------------------------------------
# Burst synthesis
# --------------------------------------------------------------------------

def synthesize_burst(spec: PulseSpec, sample_rate: float) -> Waveform:
    """H-bridge output: level-valued rectangles with alternating sign."""
    if sample_rate < 20 * spec.f0:
        raise ValueError("sample_rate must be at least 20 * f0")
    assign = quantize_levels(spec)
    levels = np.asarray(spec.levels)
    n = int(round(spec.duration * sample_rate))
    t = (np.arange(n) + 0.5) / sample_rate
    k = np.minimum((t * 2 * spec.f0).astype(int), 2 * spec.n_cycles - 1)
    samples = levels[assign[k]] * np.where(k % 2 == 0, 1.0, -1.0)
    return Waveform(samples, sample_rate)


def synthesize_reference_burst(spec: PulseSpec, sample_rate: float) -> Waveform:
    """Ideal continuously-windowed tone burst (no level quantization)."""
    if sample_rate < 4 * spec.f0:
        raise ValueError("sample_rate must be at least 4 * f0")
    n = int(round(spec.duration * sample_rate))
    t = (np.arange(n) + 0.5) / sample_rate
    env = window_envelope(spec.n_cycles, spec.a0, t, spec.f0)
    return Waveform(spec.vdd * env * np.sin(2 * np.pi * spec.f0 * t),
                    sample_rate)


def single_cycle_pulse(f0: float, sample_rate: float,
                       amplitude: float = DEFAULT_LEVELS[-1]) -> Waveform:
    """Single-cycle top-rail burst (the uplink OOK symbol)."""
    spec = PulseSpec(f0, n_cycles=1, levels=(amplitude,), vdd=amplitude)
    return synthesize_burst(spec, sample_rate)


# --------------------------------------------------------------------------
# Level optimization
# --------------------------------------------------------------------------

def _l2_objective(levels: np.ndarray, env: np.ndarray) -> float:
    nearest = levels[np.argmin(np.abs(env[:, None] - levels[None, :]), axis=1)]
    return float(np.sum((nearest - env) ** 2))


def _psl_objective(levels: np.ndarray, n_cycles: int, a0: float) -> float:
    spec = PulseSpec(1.0, n_cycles, a0, tuple(levels), vdd=1.0)
    return envelope_metrics(spec, 64.0)["psl_db"]


def optimize_levels(n_levels: int = 5, n_cycles: int = 5,
                    a0: float = HAMMING_A0,
                    objective: str = "psl") -> tuple[float, ...]:
    """Numerically optimize the supply rail set on a 1/1024 grid.

    ``objective="waveform_l2"`` minimizes the squared error between the
    quantized half-cycle amplitudes and the ideal envelope samples;
    ``objective="psl"`` minimizes the peak sidelobe level of the
    synthesized burst spectrum. Coordinate descent from the
    sampled-envelope initialization, converged when no single
    coordinate move of 1/1024 improves the objective. Levels are
    normalized to (0, 1] with the top level pinned at 1.
    """
    if objective not in ("psl", "waveform_l2"):
        raise ValueError(f"unknown objective {objective!r}")
    env = half_cycle_envelope(n_cycles, a0)
    env = env / env.max()
    distinct = np.unique(np.round(env * 1024) / 1024.0)
    if len(distinct) >= n_levels:
        # seed with the largest envelope samples (always includes 1.0)
        init = distinct[-n_levels:]
    else:
        init = np.linspace(distinct[0], 1.0, n_levels)
    levels = np.round(init * 1024) / 1024.0
    levels[-1] = 1.0

    if objective == "waveform_l2":
        def cost(lv):
            return _l2_objective(lv, env)
    else:
        def cost(lv):
            return _psl_objective(lv, n_cycles, a0)

    best = cost(levels)
    for step_units in (64, 16, 4, 1):
        step = step_units * LEVEL_GRID
        improved = True
        while improved:
            improved = False
            for i in range(len(levels) - 1):  # top level stays at 1.0
                for direction in (+1, -1):
                    cand = levels.copy()
                    cand[i] = round((cand[i] + direction * step) / LEVEL_GRID) \
                        * LEVEL_GRID
                    lo = cand[i - 1] if i > 0 else 0.0
                    if not lo < cand[i] < cand[i + 1]:
                        continue
                    c = cost(cand)
                    if c < best - 1e-12:
                        levels, best = cand, c
                        improved = True
                        break
    return tuple(float(x) for x in levels)


# --------------------------------------------------------------------------
# Analog paths
# --------------------------------------------------------------------------

def apply_lrc(w: Waveform, load: LrcLoad) -> Waveform:
    """Voltage across the transducer for a series LRC driven by w."""
    n = len(w.samples)
    nfft = 1 << (4 * n - 1).bit_length()
    f = np.fft.rfftfreq(nfft, d=1.0 / w.sample_rate)
    x = f / load.resonance_hz
    H = 1.0 / (1.0 - x**2 + 1j * x / load.q)
    out = np.fft.irfft(np.fft.rfft(w.samples, nfft) * H, nfft)
    return Waveform(out, w.sample_rate, w.t0)


def duplexer(w: Waveform, spec: DuplexerSpec, mode: str) -> Waveform:
    """Receiver-side voltage through the transmit/receive switch.

    Transmit mode clips to one diode drop; receive mode applies the
    capacitive division C_DUP / (C_DUP + C_in).
    """
    if mode == "tx":
        out = np.clip(w.samples, -spec.diode_drop, spec.diode_drop)
    elif mode == "rx":
        out = w.samples * spec.division_gain
    else:
        raise ValueError(f"duplexer mode must be 'tx' or 'rx', got {mode!r}")
    return Waveform(out, w.sample_rate, w.t0)


def receive_chain(w: Waveform, cfg: ReceiverConfig,
                  f_lo: float) -> tuple[Waveform, Waveform]:
    """Amplify, quadrature-downconvert at f_lo, and biquad-filter.

    Returns the (I, Q) baseband pair scaled so a tone at f_lo with
    amplitude A yields sqrt(I^2 + Q^2) = gain * A after settling.
    """
    if f_lo <= 0 or f_lo >= 0.5 * w.sample_rate:
        raise ValueError("f_lo must be positive and below Nyquist")
    g = cfg.gain * cfg.pga_gain
    t = w.times()
    b, a = cfg.biquad_coeffs()
    bz, az = sig.bilinear(b, a, fs=w.sample_rate)
    i_arm = sig.lfilter(bz, az, 2.0 * w.samples * np.cos(2 * np.pi * f_lo * t))
    q_arm = sig.lfilter(bz, az, -2.0 * w.samples * np.sin(2 * np.pi * f_lo * t))
    return (Waveform(g * i_arm, w.sample_rate, w.t0),
            Waveform(g * q_arm, w.sample_rate, w.t0))


# --------------------------------------------------------------------------
# Spectral metrics
# --------------------------------------------------------------------------

def _first_null(mag: np.ndarray, start: int, step: int) -> int:
    i = start
    while 0 < i + step < len(mag) and mag[i + step] < mag[i]:
        i += step
    return i


def _cross_3db(mag: np.ndarray, peak: int, step: int, target: float,
               df: float) -> float:
    i = peak
    while 0 <= i + step < len(mag) and mag[i + step] >= target:
        i += step
    j = i + step
    if j < 0 or j >= len(mag):
        return i * df
    # linear interpolation between the last in-band and first below-target bin
    frac = (mag[i] - target) / (mag[i] - mag[j])
    return (i + step * frac) * df


def _psl_and_bw(mag: np.ndarray, lo: int, hi: int, df: float) -> tuple[float, float]:
    """Peak sidelobe (dB re mainlobe) and -3 dB width within a band."""
    band = slice(lo, hi + 1)
    p = lo + int(np.argmax(mag[band]))
    peak = mag[p]
    null_l = _first_null(mag, p, -1)
    null_r = _first_null(mag, p, +1)
    side = np.concatenate([mag[lo:null_l], mag[null_r + 1:hi + 1]])
    psl_db = 20 * math.log10(side.max() / peak) if len(side) else -math.inf
    target = peak * 10.0 ** (-3.0 / 20.0)
    f_left = _cross_3db(mag, p, -1, target, df)
    f_right = _cross_3db(mag, p, +1, target, df)
    return float(psl_db), float(f_right - f_left)


def spectral_metrics(w: Waveform, f0: float) -> dict:
    """PSL, third-harmonic level, and -3 dB bandwidth of a tone burst.

    Measured on the magnitude spectrum of the real record. The peak
    sidelobe is the largest spectral local maximum outside the
    mainlobe's first nulls within (0, 2 f0); the third harmonic is the
    peak in a +/-5 % band around 3 f0 relative to the carrier peak
    (``None`` when the sample rate does not cover 3 f0). Note that for
    bursts only a few cycles long the negative-frequency image of the
    real signal raises the near-in sidelobes above the window's own
    level; :func:`envelope_metrics` measures the window behavior
    without that bias.
    """
    fs = w.sample_rate
    if f0 <= 0 or f0 >= 0.5 * fs:
        raise ValueError("f0 must be positive and below Nyquist")
    n = len(w.samples)
    nfft = 1 << max(16 * n - 1, 4095).bit_length()
    mag = np.abs(np.fft.rfft(w.samples, nfft))
    if float(mag.max()) <= 0 or w.power() < 1e-30:
        raise ValueError("no burst found: signal energy below threshold")
    df = fs / nfft

    lo = max(int(np.ceil(1e-6 * f0 / df)), 1)
    hi = min(int(2 * f0 / df), len(mag) - 1)
    psl_db, bw = _psl_and_bw(mag, lo, hi, df)

    third = None
    h_lo, h_hi = int(2.85 * f0 / df), int(3.15 * f0 / df)
    if h_hi < len(mag):
        ref = mag[max(int(0.5 * f0 / df), 1):int(1.5 * f0 / df)].max()
        third = float(20 * math.log10(mag[h_lo:h_hi + 1].max() / ref))

    return {"psl_db": psl_db, "third_harmonic_dbc": third, "bw3db_hz": bw}


def envelope_metrics(spec: PulseSpec, sample_rate: float | None = None,
                     quantized: bool = True) -> dict:
    """Window-math PSL and bandwidth of the burst's complex envelope.

    Synthesizes the modulated envelope as a complex signal (staircase
    per half cycle when ``quantized``, the ideal raised cosine
    otherwise), so the measurement sees the window's own sidelobes with
    no negative-frequency image and no drive harmonics. Sidelobes are
    local maxima within +/- f0 of the carrier.
    """
    fs = 64.0 * spec.f0 if sample_rate is None else sample_rate
    if fs < 8 * spec.f0:
        raise ValueError("sample_rate must be at least 8 * f0")
    n = int(round(spec.duration * fs))
    t = (np.arange(n) + 0.5) / fs
    if quantized:
        assign = quantize_levels(spec)
        k = np.minimum((t * 2 * spec.f0).astype(int), 2 * spec.n_cycles - 1)
        env = np.asarray(spec.levels)[assign[k]]
    else:
        env = spec.vdd * window_envelope(spec.n_cycles, spec.a0, t, spec.f0)
    z = env * np.exp(2j * np.pi * spec.f0 * t)

    nfft = 1 << max(16 * n - 1, 4095).bit_length()
    mag = np.abs(np.fft.fftshift(np.fft.fft(z, nfft)))
    df = fs / nfft
    center = nfft // 2
    span = int((1.0 - 1e-6) * spec.f0 / df)
    psl_db, bw = _psl_and_bw(mag, center + int(spec.f0 / df) - span,
                             center + int(spec.f0 / df) + span, df)
    return {"psl_db": psl_db, "bw3db_hz": bw}
