"""Uniformly sampled real signals and their on-disk formats.

A :class:`Waveform` is the signal currency passed between every part of
the simulator: synthesized bursts, channel outputs, receiver records.
Two export formats are supported:

* CSV with two columns ``time_s, amplitude``.
* A compact binary format: 16-byte header (4-byte magic ``SHMW``,
  ``uint32`` sample count, ``float64`` sample rate, little-endian)
  followed by the samples as ``float64``. The start time ``t0`` is not
  stored; readers get ``t0 = 0``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

BINARY_MAGIC = b"SHMW"
_HEADER = struct.Struct("<4sId")  # magic, n_samples, sample_rate


@dataclass(frozen=True)
class Waveform:
    """Uniformly sampled real signal.

    Attributes
    ----------
    samples : np.ndarray
        Real amplitude samples.
    sample_rate : float
        Samples per second, > 0.
    t0 : float
        Time of the first sample in seconds.
    """

    samples: np.ndarray
    sample_rate: float
    t0: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be > 0, got {self.sample_rate}")
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self.samples)) / self.sample_rate

    def energy(self) -> float:
        """Sum of squared samples times the sample period."""
        return float(np.sum(self.samples**2) / self.sample_rate)

    def power(self, active_threshold: float = 0.0) -> float:
        """Mean squared amplitude.

        With ``active_threshold`` in (0, 1), the mean is taken only over
        samples whose magnitude exceeds that fraction of the peak, which
        measures power over the active part of a pulsed record.
        """
        s = self.samples
        if active_threshold > 0.0:
            peak = np.max(np.abs(s))
            if peak == 0.0:
                return 0.0
            s = s[np.abs(s) >= active_threshold * peak]
        if len(s) == 0:
            return 0.0
        return float(np.mean(s**2))

    def shifted(self, dt: float) -> "Waveform":
        return Waveform(self.samples, self.sample_rate, self.t0 + dt)


def write_csv(w: Waveform, path) -> None:
    t = w.times()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time_s,amplitude\n")
        for ti, xi in zip(t, w.samples):
            fh.write(f"{ti!r},{xi!r}\n")


def read_csv(path) -> Waveform:
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    t, x = data[:, 0], data[:, 1]
    if len(t) < 2:
        raise ValueError("waveform CSV needs at least two samples")
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError("waveform CSV is not uniformly sampled")
    return Waveform(x, 1.0 / dt[0], t0=float(t[0]))


def write_binary(w: Waveform, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BINARY_MAGIC, len(w.samples), w.sample_rate))
        fh.write(np.ascontiguousarray(w.samples, dtype="<f8").tobytes())


def read_binary(path) -> Waveform:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise ValueError("truncated waveform file")
        magic, n, rate = _HEADER.unpack(header)
        if magic != BINARY_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {BINARY_MAGIC!r}")
        payload = fh.read(8 * n)
        if len(payload) != 8 * n:
            raise ValueError("truncated waveform payload")
    samples = np.frombuffer(payload, dtype="<f8")
    return Waveform(samples.copy(), rate)
