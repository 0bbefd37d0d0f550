"""Free-space removal, Kaiser frequency weighting and the three-stage pipeline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from treeradar.core import (BScan, FrequencyGrid, analyze, oversample_of, scnr, synthesize)
from treeradar.gating import (GateCurve, GatingConfig, NoBoundariesError, NonHyperbolicClusterError,
                              NoSurfaceClutterError, apply_zero_gate, zero_gating)

STAGES = ("fsr", "gate", "fir")


@dataclass(frozen=True)
class FirSpec:
    """Kaiser taper peaking at ``f_peak``.

    ``placement="asymmetric"`` stretches the left half of the window over
    ``[f_lo, f_peak]`` and the right half over ``[f_peak, f_hi]``;
    ``"symmetric"`` centers one window of half-width ``f_peak - f_lo`` on
    ``f_peak`` and zeroes the rest of the band.
    """

    f_peak: float = 1.0e9
    beta: float = 6.0
    placement: str = "asymmetric"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.placement not in ("asymmetric", "symmetric"):
            raise ValueError(f"unknown placement {self.placement!r}")


def free_space_removal(raw: BScan, reference) -> BScan:
    """Subtract the free-space calibration trace from every trace."""
    ref = np.asarray(reference, dtype=float).reshape(-1)
    if ref.shape[0] != raw.axis.n_samples:
        raise ValueError(f"reference has {ref.shape[0]} samples, B-scan {raw.axis.n_samples}")
    return raw.with_data(raw.data - ref[:, None], stage="fsr")


def _kaiser(u, beta):
    """Continuous Kaiser shape on u in [-1, 1], 1 at u = 0."""
    u = np.clip(np.asarray(u, dtype=float), -1.0, 1.0)
    return np.i0(beta * np.sqrt(1.0 - u ** 2)) / np.i0(beta)


def kaiser_weights(grid: FrequencyGrid, spec: FirSpec = FirSpec()) -> np.ndarray:
    if not grid.f_lo <= spec.f_peak <= grid.f_hi:
        raise ValueError("f_peak must lie inside the band")
    f = grid.freqs
    if spec.placement == "symmetric":
        half = spec.f_peak - grid.f_lo
        if half <= 0:
            return (f == spec.f_peak).astype(float)
        u = (f - spec.f_peak) / half
        return np.where(np.abs(u) <= 1.0, _kaiser(u, spec.beta), 0.0)
    w = np.ones_like(f)
    left = f < spec.f_peak
    right = f > spec.f_peak
    if spec.f_peak > grid.f_lo:
        w[left] = _kaiser((f[left] - spec.f_peak) / (spec.f_peak - grid.f_lo), spec.beta)
    if spec.f_peak < grid.f_hi:
        w[right] = _kaiser((f[right] - spec.f_peak) / (grid.f_hi - spec.f_peak), spec.beta)
    return w


def apply_fir(bscan: BScan, weights, grid: FrequencyGrid) -> BScan:
    """Weight the band samples of every trace and resynthesize."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (grid.n_points,):
        raise ValueError("one weight per grid point required")
    os_ = oversample_of(bscan.axis, grid)
    values = analyze(bscan.data, bscan.axis, grid) * weights[:, None]
    if bscan.axis.t0 != 0.0:
        values = values * np.exp(2j * np.pi * grid.freqs * bscan.axis.t0)[:, None]
    return bscan.with_data(synthesize(values, grid, os_), stage="fir")


@dataclass(frozen=True)
class PipelineConfig:
    grid: FrequencyGrid = FrequencyGrid()
    gating: GatingConfig = GatingConfig()
    fir: FirSpec = FirSpec()
    skip_fsr: bool = False
    skip_gate: bool = False
    skip_fir: bool = False
    order: tuple = STAGES
    keep_stages: bool = False

    def __post_init__(self):
        if tuple(self.order) != STAGES:
            raise ValueError(f"stage order must be {STAGES}; gating has to precede FIR")


@dataclass
class PipelineReport:
    scnr_raw: Optional[float] = None
    scnr_freespace: Optional[float] = None
    scnr_gated: Optional[float] = None
    scnr_fir: Optional[float] = None
    gate: Optional[GateCurve] = None
    gate_fallback: bool = False
    fallback_reason: str = ""
    threshold: Optional[float] = None
    stages: dict = field(default_factory=dict, repr=False)

    def scnr_trajectory(self) -> list[float]:
        vals = [self.scnr_raw, self.scnr_freespace, self.scnr_gated, self.scnr_fir]
        return [v for v in vals if v is not None]

    def to_dict(self) -> dict:
        return {
            "scnr_raw": self.scnr_raw,
            "scnr_freespace": self.scnr_freespace,
            "scnr_gated": self.scnr_gated,
            "scnr_fir": self.scnr_fir,
            "gate": None if self.gate is None else self.gate.to_dict(),
            "gate_fallback": self.gate_fallback,
            "fallback_reason": self.fallback_reason,
            "threshold": self.threshold,
        }


def process(raw: BScan, reference, config: PipelineConfig = PipelineConfig(), masks=None):
    """Run free-space removal, zero-gating and FIR filtering in order.

    ``masks`` is an optional ``(signal, clutter_noise)`` pair; when given,
    the SCNR after each stage that runs is recorded.  Gating failures do
    not abort: the report flags the fallback and the scan passes through
    ungated.
    """
    report = PipelineReport()

    def measure(scan):
        return None if masks is None else scnr(scan, *masks)

    def keep(name, scan):
        if config.keep_stages:
            report.stages[name] = scan

    out = raw
    report.scnr_raw = measure(out)
    keep("raw", out)
    if not config.skip_fsr:
        out = free_space_removal(out, reference)
        report.scnr_freespace = measure(out)
        keep("fsr", out)
    if not config.skip_gate:
        try:
            res = zero_gating(out, config.grid.bandwidth, config.gating)
        except (NoSurfaceClutterError, NonHyperbolicClusterError, NoBoundariesError) as exc:
            report.gate_fallback = True
            report.fallback_reason = str(exc)
        else:
            report.gate = res.gate
            report.threshold = res.threshold
            out = apply_zero_gate(out, res.gate)
            report.scnr_gated = measure(out)
            keep("gated", out)
    if not config.skip_fir:
        out = apply_fir(out, kaiser_weights(config.grid, config.fir), config.grid)
        report.scnr_fir = measure(out)
        keep("fir", out)
    return out, report


def synthetic_masks(truth, axis, shape, pulse_width: float, tail: float = 2.0e-9):
    """Ground-truth SCNR masks for a simulated scan.

    Signal: ``+-pulse_width`` around every internal echo (layers, far end,
    defect) of each trace.  Clutter+noise: every other pixel from time zero
    to ``tail`` seconds past the latest echo, which includes the antenna
    ringing and the air-bark echo.
    """
    n_samples, n_traces = shape
    t = axis.times[:, None]
    internal = [v for v in truth.echo_delays.values()]
    if truth.defect_delay is not None:
        internal.append(truth.defect_delay)
    signal = np.zeros(shape, dtype=bool)
    for delays in internal:
        signal |= np.abs(t - np.asarray(delays)[None, :]) <= pulse_width
    latest = max([np.max(truth.bark_delay)] + [float(np.max(d)) for d in internal])
    scene = np.broadcast_to(t <= latest + tail, shape)
    return signal, scene & ~signal
