"""Radar data types, SFCW frequency/time transforms, SCNR and grid utilities.

Conventions
-----------
Time-domain synthesis uses the plain DFT pair of numpy: a band value ``S_k``
placed at bin ``k`` of a length-``N`` conjugate-symmetric spectrum ``X`` is
turned into samples ``x = ifft(X)`` (real by construction), and the forward
direction reads ``S_k = fft(x)[k]``.  A unit sample impulse at ``t = 0``
therefore has a flat unit spectrum, and Parseval reads
``sum(x**2) == band_energy(...)`` where the band energy is the two-sided
spectral energy ``sum(|X|**2) / N``.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

C0 = 299_792_458.0

ALLOWED_OVERSAMPLE = (1, 2, 4, 8)
DEFAULT_OVERSAMPLE = 4

# relative tolerance when snapping band edges onto the DFT bin lattice
_LATTICE_RTOL = 1e-9


class GridError(ValueError):
    """Frequency grid and time axis are not mutually compatible."""


class DegenerateRegionError(ValueError):
    """A measurement region has zero power."""


@dataclass(frozen=True)
class FrequencyGrid:
    """Equally spaced frequency sweep with inclusive endpoints (Hz)."""

    f_lo: float = 0.5e9
    f_hi: float = 4.0e9
    n_points: int = 701

    def __post_init__(self):
        if not self.f_lo > 0:
            raise ValueError(f"f_lo must be positive, got {self.f_lo}")
        if not self.f_hi > self.f_lo:
            raise ValueError("f_hi must exceed f_lo")
        if int(self.n_points) != self.n_points or self.n_points < 2:
            raise ValueError("n_points must be an integer >= 2")

    @property
    def df(self) -> float:
        return (self.f_hi - self.f_lo) / (self.n_points - 1)

    @property
    def bandwidth(self) -> float:
        return self.f_hi - self.f_lo

    @property
    def freqs(self) -> np.ndarray:
        return self.f_lo + self.df * np.arange(self.n_points)

    @property
    def window(self) -> float:
        """Unambiguous time window 1/df in seconds."""
        return 1.0 / self.df


@dataclass(frozen=True)
class Spectrum:
    """Complex frequency response of one trace."""

    grid: FrequencyGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        if values.shape != (self.grid.n_points,):
            raise ValueError(
                f"spectrum has {values.shape} values, grid has {self.grid.n_points} points")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class TimeAxis:
    dt: float
    n_samples: int
    t0: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ValueError("n_samples must be an integer >= 1")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_samples)

    @property
    def duration(self) -> float:
        return self.n_samples * self.dt

    def to_index(self, t):
        """Convert time(s) in seconds to fractional sample indices."""
        return (np.asarray(t, dtype=float) - self.t0) / self.dt


@dataclass(frozen=True)
class BScan:
    """Real-valued radargram, rows are time samples and columns traces."""

    axis: TimeAxis
    data: np.ndarray
    dx: float = 0.02
    stage: str = "raw"
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] != self.axis.n_samples:
            raise ValueError(
                f"data shape {data.shape} does not match {self.axis.n_samples} samples")
        if not np.all(np.isfinite(data)):
            raise ValueError("B-scan amplitudes must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_traces(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def with_data(self, data, stage: str | None = None, **extra) -> "BScan":
        merged = dict(self.extra)
        merged.update(extra)
        return BScan(self.axis, data, self.dx, stage or self.stage, merged)

    def energy(self) -> float:
        return float(np.sum(self.data ** 2))


def _band_bins(grid: FrequencyGrid, bin_spacing: float) -> tuple[int, int]:
    """Return (first bin, bin stride) of the grid on a DFT lattice."""
    k_lo = grid.f_lo / bin_spacing
    stride = grid.df / bin_spacing
    k_lo_i, stride_i = round(k_lo), round(stride)
    if stride_i < 1 or abs(stride - stride_i) > _LATTICE_RTOL * max(stride, 1):
        raise GridError(
            f"grid spacing {grid.df:g} Hz is not an integer multiple of the DFT bin "
            f"spacing {bin_spacing:g} Hz")
    if abs(k_lo - k_lo_i) > _LATTICE_RTOL * max(k_lo, 1):
        raise GridError(f"f_lo = {grid.f_lo:g} Hz does not fall on the DFT bin lattice")
    return k_lo_i, stride_i


def n_samples_for(grid: FrequencyGrid, oversample: int = DEFAULT_OVERSAMPLE) -> int:
    return int(round(2.0 * grid.f_hi * oversample / grid.df))


def time_axis_for(grid: FrequencyGrid, oversample: int = DEFAULT_OVERSAMPLE) -> TimeAxis:
    if oversample not in ALLOWED_OVERSAMPLE:
        raise ValueError(f"oversample must be one of {ALLOWED_OVERSAMPLE}")
    return TimeAxis(dt=1.0 / (2.0 * grid.f_hi * oversample),
                    n_samples=n_samples_for(grid, oversample))


def _full_spectrum(values: np.ndarray, grid: FrequencyGrid, n: int) -> np.ndarray:
    """Embed band values (n_points, n_traces) into a conjugate-symmetric spectrum."""
    k_lo, stride = _band_bins(grid, grid.df)
    bins = k_lo + stride * np.arange(grid.n_points)
    if bins[-1] > n // 2:
        raise GridError("band extends beyond the Nyquist bin")
    full = np.zeros((n,) + values.shape[1:], dtype=complex)
    full[bins] = values
    # DC and Nyquist bins are their own mirrors, so only the real part survives
    self_mirror = (bins == 0) | ((n % 2 == 0) & (bins == n // 2))
    full[bins[self_mirror]] = full[bins[self_mirror]].real
    mirrored = bins[~self_mirror]
    full[n - mirrored] = np.conj(full[mirrored])
    return full


def synthesize(values, grid: FrequencyGrid, oversample: int = DEFAULT_OVERSAMPLE) -> np.ndarray:
    """Array form of :func:`band_to_time`: band values (n_points[, n_traces]) -> samples."""
    values = np.asarray(values, dtype=complex)
    if values.shape[0] != grid.n_points:
        raise ValueError("first axis must run over the frequency grid")
    if not np.all(np.isfinite(values)):
        raise ValueError("spectrum values must be finite")
    axis = time_axis_for(grid, oversample)
    full = _full_spectrum(values, grid, axis.n_samples)
    # symmetric input: the real part is the exact inverse, imag is rounding noise
    return np.fft.ifft(full, axis=0).real


def band_energy(values, grid: FrequencyGrid, oversample: int = DEFAULT_OVERSAMPLE) -> float:
    """Two-sided spectral energy matching ``sum(x**2)`` of the synthesized samples."""
    values = np.asarray(values, dtype=complex)
    n = n_samples_for(grid, oversample)
    full = _full_spectrum(values, grid, n)
    return float(np.sum(np.abs(full) ** 2) / n)


def band_to_time(spectra: Spectrum | Sequence[Spectrum], oversample: int = DEFAULT_OVERSAMPLE,
                 dx: float = 0.02, stage: str = "raw") -> BScan:
    """Synthesize a real B-scan from per-trace SFCW spectra.

    The band samples are placed at their bins of a zero-filled spectrum
    covering ``[0, f_hi * oversample]``, negative frequencies are filled
    with complex conjugates and an inverse DFT yields one real trace each.

    Args:
        spectra: one spectrum per trace, all on the same grid.
        oversample: factor applied to the ``1 / (2 f_hi)`` sampling period.
        dx: trace spacing in meters.
        stage: provenance tag stored on the result.
    """
    if isinstance(spectra, Spectrum):
        spectra = [spectra]
    if len(spectra) == 0:
        raise ValueError("need at least one spectrum")
    grid = spectra[0].grid
    for s in spectra[1:]:
        if s.grid != grid:
            raise GridError("all spectra must share one frequency grid")
    values = np.stack([s.values for s in spectra], axis=1)
    data = synthesize(values, grid, oversample)
    return BScan(time_axis_for(grid, oversample), data, dx=dx, stage=stage)


def analyze(data, axis: TimeAxis, grid: FrequencyGrid) -> np.ndarray:
    """Array form of :func:`time_to_band`: samples (n_samples[, n_traces]) -> band values."""
    data = np.asarray(data, dtype=float)
    n = axis.n_samples
    k_lo, stride = _band_bins(grid, 1.0 / (n * axis.dt))
    bins = k_lo + stride * np.arange(grid.n_points)
    if bins[-1] > n // 2:
        raise GridError("grid extends beyond the Nyquist frequency of the time axis")
    values = np.fft.fft(data, axis=0)[bins]
    if axis.t0 != 0.0:
        phase = np.exp(-2j * np.pi * grid.freqs * axis.t0)
        values = values * phase.reshape((-1,) + (1,) * (values.ndim - 1))
    return values


def time_to_band(bscan: BScan, grid: FrequencyGrid) -> list[Spectrum]:
    """Forward DFT of every trace sampled on the SFCW grid."""
    values = analyze(bscan.data, bscan.axis, grid)
    return [Spectrum(grid, values[:, j]) for j in range(values.shape[1])]


def oversample_of(axis: TimeAxis, grid: FrequencyGrid) -> int:
    """Recover the oversampling factor a B-scan was synthesized with."""
    for os_ in ALLOWED_OVERSAMPLE:
        if n_samples_for(grid, os_) == axis.n_samples and math.isclose(
                axis.dt, 1.0 / (2.0 * grid.f_hi * os_), rel_tol=1e-9):
            return os_
    raise GridError("time axis was not produced by band_to_time for this grid")


def _as_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match B-scan {shape}")
    return mask


def mask_from_pixels(shape, members) -> np.ndarray:
    """Build a boolean mask from (row, col) pairs."""
    mask = np.zeros(shape, dtype=bool)
    for r, c in members:
        if not (0 <= r < shape[0] and 0 <= c < shape[1]):
            raise ValueError(f"pixel {(r, c)} outside shape {shape}")
        mask[r, c] = True
    return mask


def scnr(bscan: BScan | np.ndarray, signal_mask, cn_mask) -> float:
    """Signal-to-clutter-and-noise ratio in dB over two disjoint pixel masks."""
    data = bscan.data if isinstance(bscan, BScan) else np.asarray(bscan, dtype=float)
    sig = _as_mask(signal_mask, data.shape)
    cn = _as_mask(cn_mask, data.shape)
    if not sig.any() or not cn.any():
        raise ValueError("SCNR masks must be non-empty")
    if (sig & cn).any():
        raise ValueError("signal and clutter/noise masks overlap")
    p_cn = float(np.mean(data[cn] ** 2))
    if p_cn == 0.0:
        raise DegenerateRegionError("degenerate noise region: zero clutter+noise power")
    p_sig = float(np.mean(data[sig] ** 2))
    if p_sig == 0.0:
        return -math.inf
    return 10.0 * math.log10(p_sig / p_cn)


def shift_trace(trace, delta_t: float, axis: TimeAxis) -> np.ndarray:
    """Delay a trace by ``delta_t`` seconds using linear interpolation.

    ``out[i] = trace(i - delta_t / dt)``; positive values move content later.
    Samples pulled from outside the record are zero.
    """
    trace = np.asarray(trace, dtype=float)
    if abs(delta_t) >= axis.n_samples * axis.dt:
        raise ValueError("shift exceeds the record length")
    if delta_t == 0.0:
        return trace.copy()
    src = np.arange(trace.shape[0]) - delta_t / axis.dt
    return np.interp(src, np.arange(trace.shape[0]), trace, left=0.0, right=0.0)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation operator of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    if n_in == n_out:
        return np.eye(n_in)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def resize_bilinear(image, out_h: int, out_w: int) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim != 2 or min(image.shape) < 2:
        raise ValueError("resize_bilinear needs a 2-D grid of at least 2x2")
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be positive")
    if image.shape == (out_h, out_w):
        return image.copy()
    return bilinear_matrix(image.shape[0], out_h) @ image @ bilinear_matrix(image.shape[1], out_w).T


# --- BSCN file format ------------------------------------------------------

BSCN_MAGIC = b"BSCN1\n"


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def atomic_write(path, payload: bytes) -> None:
    """Write bytes to ``path`` through a temporary file and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_bscan(bscan: BScan) -> bytes:
    header = {
        "n_samples": bscan.axis.n_samples,
        "n_traces": bscan.n_traces,
        "dt_s": bscan.axis.dt,
        "t0_s": bscan.axis.t0,
        "dx_m": bscan.dx,
        "stage": bscan.stage,
        "extra": bscan.extra,
    }
    head = _json_bytes(header)
    payload = np.ascontiguousarray(bscan.data, dtype="<f4").tobytes()
    return BSCN_MAGIC + struct.pack("<Q", len(head)) + head + payload


def decode_bscan(blob: bytes) -> BScan:
    if not blob.startswith(BSCN_MAGIC):
        raise FormatError("not a BSCN file (bad magic)")
    pos = len(BSCN_MAGIC)
    if len(blob) < pos + 8:
        raise FormatError("truncated BSCN header")
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + hlen:
        raise FormatError("truncated BSCN header")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
        ns, nt = int(header["n_samples"]), int(header["n_traces"])
        axis = TimeAxis(float(header["dt_s"]), ns, float(header["t0_s"]))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed BSCN header: {exc}") from exc
    pos += hlen
    need = ns * nt * 4
    if len(blob) - pos != need:
        raise FormatError(f"BSCN payload has {len(blob) - pos} bytes, expected {need}")
    data = np.frombuffer(blob, dtype="<f4", count=ns * nt, offset=pos).reshape(ns, nt)
    return BScan(axis, data.astype(float), dx=float(header["dx_m"]),
                 stage=str(header.get("stage", "")), extra=header.get("extra") or {})


def write_bscan(path, bscan: BScan) -> None:
    atomic_write(path, encode_bscan(bscan))


def read_bscan(path) -> BScan:
    return decode_bscan(Path(path).read_bytes())
