"""Column-connection clustering (C3) zero-gating of the air-bark echo.

Steps: Sobel boundaries -> adaptive threshold -> per-column runs
(segments) -> clustering of runs that overlap in adjacent columns ->
selection of the bark cluster -> hyperbola fit through the segment
midpoints -> gate curve -> zeroing of everything earlier than the gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage, optimize

from treeradar.core import BScan, TimeAxis


class NoBoundariesError(ValueError):
    pass


class NoSurfaceClutterError(RuntimeError):
    """No cluster qualifies as the air-bark echo."""


class NonHyperbolicClusterError(RuntimeError):
    pass


@dataclass(frozen=True)
class Segment:
    col: int
    row_start: int
    row_end: int

    def __post_init__(self):
        if self.row_start > self.row_end:
            raise ValueError("row_start must not exceed row_end")

    @property
    def length(self) -> int:
        return self.row_end - self.row_start + 1

    @property
    def mid_row(self) -> float:
        return 0.5 * (self.row_start + self.row_end)

    def touches(self, other: "Segment") -> bool:
        return (abs(self.col - other.col) == 1
                and self.row_start <= other.row_end and other.row_start <= self.row_end)


@dataclass
class Cluster:
    segments: list

    @property
    def columns(self) -> list[int]:
        return sorted({s.col for s in self.segments})

    @property
    def col_span(self) -> int:
        return len(self.columns)

    @property
    def mean_mid_row(self) -> float:
        return float(np.mean([s.mid_row for s in self.segments]))

    def key(self) -> frozenset:
        return frozenset((s.col, s.row_start, s.row_end) for s in self.segments)

    def midpoints(self, image=None) -> tuple[np.ndarray, np.ndarray]:
        """One (column, mid_row) pair per column.

        With several segments in a column the one carrying the most
        ``|image|`` wins (the earliest when no image is given).
        """
        best: dict[int, Segment] = {}
        score: dict[int, float] = {}
        for s in sorted(self.segments, key=lambda s: (s.col, s.row_start)):
            val = 0.0 if image is None else float(
                np.abs(image[s.row_start:s.row_end + 1, s.col]).sum())
            if s.col not in best or val > score[s.col]:
                best[s.col], score[s.col] = s, val
        cols = np.array(sorted(best), dtype=float)
        return cols, np.array([best[int(c)].mid_row for c in cols])

    def intensity(self, image) -> float:
        """Mean |amplitude| over the cluster's pixels."""
        total, count = 0.0, 0
        for s in self.segments:
            total += float(np.abs(image[s.row_start:s.row_end + 1, s.col]).sum())
            count += s.length
        return total / count


@dataclass(frozen=True)
class HyperbolaParams:
    """Curve ``t^2 = b^2 (1 + sign * (n - d)^2 / a^2)`` with ``c`` normalized to 1.

    ``branch="hyperbola"`` (sign +1) is the diffraction curve whose delay
    grows away from the apex; ``branch="ellipse"`` (sign -1) is the literal
    ``(n-d)^2/a^2 + t^2/b^2 = 1`` form.
    """

    a: float
    b: float
    d: float
    branch: str = "hyperbola"
    residual: float = 0.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("a and b must be positive")
        if self.branch not in ("hyperbola", "ellipse"):
            raise ValueError(f"unknown branch {self.branch!r}")

    @property
    def sign(self) -> int:
        return 1 if self.branch == "hyperbola" else -1

    def evaluate(self, n) -> np.ndarray:
        """Model t at columns n; NaN where the ellipse branch is undefined."""
        n = np.asarray(n, dtype=float)
        inner = 1.0 + self.sign * (n - self.d) ** 2 / self.a ** 2
        out = np.full(n.shape, np.nan)
        ok = inner >= 0
        out[ok] = self.b * np.sqrt(inner[ok])
        return out

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "d": self.d, "branch": self.branch}


@dataclass
class GateCurve:
    t_gate: np.ndarray  # fractional sample index per trace
    params: Optional[HyperbolaParams]
    w: float  # seconds
    dt: float = 0.0

    def __post_init__(self):
        self.t_gate = np.asarray(self.t_gate, dtype=float)
        if np.any(self.t_gate < 0):
            raise ValueError("gate indices must be non-negative")

    def shifted(self, extra_w: float) -> "GateCurve":
        """Same curve with ``extra_w`` seconds added to the compensation term."""
        return GateCurve(self.t_gate + extra_w / self.dt, self.params, self.w + extra_w, self.dt)

    def to_dict(self) -> dict:
        return {
            "params": None if self.params is None else self.params.to_dict(),
            "w_s": self.w,
            "dt_s": self.dt,
            "t_gate": [float(v) for v in self.t_gate],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GateCurve":
        p = d.get("params")
        params = None if p is None else HyperbolaParams(p["a"], p["b"], p["d"],
                                                        p.get("branch", "hyperbola"))
        return cls(np.asarray(d["t_gate"], dtype=float), params, float(d["w_s"]),
                   float(d.get("dt_s", 0.0)))


@dataclass(frozen=True)
class GatingConfig:
    """Zero-gating knobs.

    ``apex_window`` defaults to the middle third of the traces and ``w`` to
    1.5 / bandwidth (seconds).
    """

    s_min: int = 5
    apex_window: Optional[tuple] = None
    w: Optional[float] = None
    branch: str = "hyperbola"
    d_step: float = 0.1
    refine: bool = True
    span_ratio: float = 0.8
    min_r2: float = 0.5
    boundary_rule: str = "rms"

    def window_for(self, n_traces: int) -> tuple[float, float]:
        if self.apex_window is not None:
            return tuple(float(v) for v in self.apex_window)
        return n_traces / 3.0, 2.0 * n_traces / 3.0

    def w_for(self, bandwidth: float) -> float:
        return 1.5 / bandwidth if self.w is None else float(self.w)


def sobel_magnitude(image) -> np.ndarray:
    """Sobel gradient magnitude of ``|image|`` with replicated borders."""
    img = np.abs(np.asarray(image, dtype=float))
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValueError("sobel_magnitude needs a 2-D grid of at least 3x3")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def adaptive_threshold(image, rule: str = "rms") -> float:
    """Mean ``|image|`` over boundary pixels.

    Boundary pixels are those whose Sobel magnitude exceeds a cutoff:
    twice the RMS magnitude (``rule="rms"``, the usual Sobel edge-detector
    default) or the mean magnitude (``rule="mean"``).  In a sparse radargram
    the mean cutoff admits almost every non-zero pixel.  When no pixel
    clears the RMS cutoff (edge-free texture) the mean cutoff is used.
    """
    img = np.asarray(image, dtype=float)
    mag = sobel_magnitude(img)
    if rule == "rms":
        cutoff = 2.0 * float(np.sqrt(np.mean(mag ** 2)))
    elif rule == "mean":
        cutoff = float(mag.mean())
    else:
        raise ValueError(f"unknown boundary rule {rule!r}")
    boundary = mag > cutoff
    if rule == "rms" and not boundary.any():
        boundary = mag > mag.mean()
    if not boundary.any():
        raise NoBoundariesError("no boundaries: image is uniform")
    return float(np.abs(img)[boundary].mean())


def binarize(image, threshold: float) -> np.ndarray:
    return np.abs(np.asarray(image, dtype=float)) > threshold


def extract_segments(binary, s_min: int = 5) -> list[Segment]:
    """Maximal vertical runs of true pixels, at least ``s_min`` long."""
    if s_min < 1:
        raise ValueError("s_min must be >= 1")
    binary = np.asarray(binary, dtype=bool)
    padded = np.zeros((binary.shape[0] + 2, binary.shape[1]), dtype=np.int8)
    padded[1:-1] = binary
    edges = np.diff(padded, axis=0)
    segments = []
    for col in range(binary.shape[1]):
        starts = np.flatnonzero(edges[:, col] == 1)
        ends = np.flatnonzero(edges[:, col] == -1) - 1
        for r0, r1 in zip(starts, ends):
            if r1 - r0 + 1 >= s_min:
                segments.append(Segment(col, int(r0), int(r1)))
    return segments


def c3_cluster(segments: Sequence[Segment]) -> list[Cluster]:
    """Group segments into clusters by sweeping columns left to right.

    Each segment inherits the label of every overlapping segment in the
    previous column; when it overlaps several, their labels are merged.
    """
    by_col: dict[int, list[Segment]] = {}
    for s in segments:
        by_col.setdefault(s.col, []).append(s)
    for col in by_col:
        by_col[col].sort(key=lambda s: s.row_start)

    alias: list[int] = []

    def root(lbl):
        while alias[lbl] != lbl:
            alias[lbl] = alias[alias[lbl]]
            lbl = alias[lbl]
        return lbl

    labels: dict[Segment, int] = {}
    prev: list[Segment] = []
    prev_col = None
    for col in sorted(by_col):
        cur = by_col[col]
        if prev_col is None or col != prev_col + 1:
            prev = []
        j = 0
        for s in cur:
            # both columns are sorted, so the overlap candidates form a window
            while j < len(prev) and prev[j].row_end < s.row_start:
                j += 1
            lbl = None
            k = j
            while k < len(prev) and prev[k].row_start <= s.row_end:
                if prev[k].row_end < s.row_start:
                    # only possible when segments of one column overlap each other
                    k += 1
                    continue
                other = root(labels[prev[k]])
                if lbl is None:
                    lbl = other
                elif other != lbl:
                    keep, drop = min(lbl, other), max(lbl, other)
                    alias[drop] = keep
                    lbl = keep
                k += 1
            if lbl is None:
                lbl = len(alias)
                alias.append(lbl)
            labels[s] = lbl
        prev, prev_col = cur, col

    groups: dict[int, list[Segment]] = {}
    for col in sorted(by_col):
        for s in by_col[col]:
            groups.setdefault(root(labels[s]), []).append(s)
    return [Cluster(groups[k]) for k in sorted(groups)]


def hyperbolic_prior(cluster: Cluster, min_r2: float = 0.5) -> bool:
    """Quadratic fit of mid_row vs column opens toward later time with R^2 >= min_r2."""
    cols, mids = cluster.midpoints()
    if len(cols) < 3:
        return False
    coef = np.polyfit(cols, mids, 2)
    ss_tot = float(np.sum((mids - mids.mean()) ** 2))
    if coef[0] <= 0 or ss_tot == 0.0:
        return False
    ss_res = float(np.sum((np.polyval(coef, cols) - mids) ** 2))
    return 1.0 - ss_res / ss_tot >= min_r2


def select_target_cluster(clusters: Sequence[Cluster], n_traces: int, image=None,
                          span_ratio: float = 0.8, min_r2: float = 0.5) -> Cluster:
    """Pick the cluster most likely to be the air-bark echo.

    Candidates are the clusters spanning at least ``span_ratio`` of the
    widest one; those passing the hyperbolic-shape prior are preferred.
    Among candidates the strongest (mean ``|image|``) wins when an image is
    supplied, then the shallowest.
    """
    if not clusters:
        raise NoSurfaceClutterError("no surface clutter found")
    widest = max(c.col_span for c in clusters)
    wide = [c for c in clusters if c.col_span >= span_ratio * widest]
    shaped = [c for c in wide if hyperbolic_prior(c, min_r2)]
    pool = shaped or wide

    def rank(c):
        strength = c.intensity(image) if image is not None else 0.0
        return (-strength, c.mean_mid_row)

    return min(pool, key=rank)


def _weighted_lsq(n, t, d, sign):
    """Solve t^2 = u + sign*v*(n-d)^2 weighted by 1/(2t); returns (u, v, rss)."""
    wts = np.where(t > 0, 1.0 / (2.0 * np.maximum(t, 1e-12)), 1.0)
    design = np.column_stack([np.ones_like(n), sign * (n - d) ** 2]) * wts[:, None]
    rhs = t ** 2 * wts
    sol, *_ = np.linalg.lstsq(design, rhs, rcond=None)
    rss = float(np.sum((design @ sol - rhs) ** 2))
    return float(sol[0]), float(sol[1]), rss


def fit_hyperbola(cols, rows, apex_window: tuple[float, float], branch: str = "hyperbola",
                  d_step: float = 0.1, refine: bool = True) -> HyperbolaParams:
    """Fit the normalized curve of :class:`HyperbolaParams` to midpoints.

    For every apex candidate on a ``d_step`` grid over ``apex_window`` the
    two remaining parameters follow from a linear least-squares solve in
    ``t^2`` (weighted by ``1/(2t)`` so the residual approximates the error
    in ``t``); the best admissible grid point is polished by a bounded 1-D
    search.
    """
    n = np.asarray(cols, dtype=float)
    t = np.asarray(rows, dtype=float)
    if n.shape != t.shape:
        raise ValueError("cols and rows differ in length")
    if len(np.unique(n)) < 3:
        raise ValueError("need at least 3 distinct columns")
    d_lo, d_hi = apex_window
    if not d_lo < d_hi:
        raise ValueError("apex window must satisfy d_lo < d_hi")
    sign = 1 if branch == "hyperbola" else -1

    def score(d):
        u, v, rss = _weighted_lsq(n, t, d, sign)
        return rss if (u > 0 and v > 0) else math.inf

    grid = np.arange(d_lo, d_hi + 0.5 * d_step, d_step)
    grid = grid[grid <= d_hi + 1e-12]
    scores = np.array([score(d) for d in grid])
    if not np.isfinite(scores).any():
        raise NonHyperbolicClusterError("non-hyperbolic cluster: no admissible apex")
    i = int(np.argmin(scores))
    d_best = float(grid[i])
    if refine:
        lo, hi = max(d_lo, d_best - d_step), min(d_hi, d_best + d_step)
        res = optimize.minimize_scalar(score, bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-9})
        if res.success and np.isfinite(res.fun) and res.fun <= scores[i]:
            d_best = float(res.x)
    u, v, rss = _weighted_lsq(n, t, d_best, sign)
    return HyperbolaParams(a=math.sqrt(u / v), b=math.sqrt(u), d=d_best, branch=branch,
                           residual=math.sqrt(rss / len(n)))


def gate_curve(params: HyperbolaParams, w: float, n_traces: int, axis: TimeAxis) -> GateCurve:
    """Per-trace gate index: fitted clutter time plus ``w`` seconds."""
    if w < 0:
        raise ValueError("w must be non-negative")
    cols = np.arange(n_traces, dtype=float)
    t = params.evaluate(cols)
    defined = np.flatnonzero(np.isfinite(t))
    if defined.size == 0:
        raise NonHyperbolicClusterError("fitted curve undefined on every trace")
    # hold the nearest defined value outside the ellipse support
    nearest = defined[np.abs(cols[:, None] - defined[None, :]).argmin(axis=1)]
    t = t[nearest]
    return GateCurve(np.maximum(t + w / axis.dt, 0.0), params, w, axis.dt)


def apply_zero_gate(bscan: BScan, gate: GateCurve) -> BScan:
    """Zero every sample whose index is earlier than the trace's gate."""
    if len(gate.t_gate) != bscan.n_traces:
        raise ValueError("gate length differs from the number of traces")
    data = bscan.data.copy()
    stop = np.minimum(np.ceil(gate.t_gate).astype(int), bscan.axis.n_samples)
    rows = np.arange(bscan.axis.n_samples)[:, None]
    data[rows < stop[None, :]] = 0.0
    return bscan.with_data(data, stage="gated")


@dataclass
class GatingResult:
    gate: GateCurve
    threshold: float
    segments: list = field(repr=False)
    clusters: list = field(repr=False)
    target: Cluster = field(repr=False)


def zero_gating(bscan: BScan, bandwidth: float, config: GatingConfig = GatingConfig()) -> GatingResult:
    """Locate the air-bark echo of ``bscan`` and build its gate curve."""
    img = bscan.data
    thr = adaptive_threshold(img, config.boundary_rule)
    segs = extract_segments(binarize(img, thr), config.s_min)
    clusters = c3_cluster(segs)
    target = select_target_cluster(clusters, bscan.n_traces, image=img,
                                   span_ratio=config.span_ratio, min_r2=config.min_r2)
    cols, mids = target.midpoints(img)
    if len(np.unique(cols)) < 3:
        raise NoSurfaceClutterError("surface clutter cluster spans fewer than 3 traces")
    params = fit_hyperbola(cols, mids, config.window_for(bscan.n_traces), config.branch,
                           config.d_step, config.refine)
    gate = gate_curve(params, config.w_for(bandwidth), bscan.n_traces, bscan.axis)
    return GatingResult(gate, thr, segs, clusters, target)
