"""Straight-ray forward model of a stand-off SFCW scan over a tree trunk.

The trunk is a disk centered at the origin; the antenna moves along the
line ``y = radius + standoff_mid`` and always looks at the trunk center.
Every echo is a delayed, scaled copy of the transmitted band, so the
simulated B-scans come with exact per-trace delays for the bark and defect
reflections.

Dielectric defaults (wood eps 9, 2 Np/(m GHz) loss, decay eps 30) are
placeholders, not measured values.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from treeradar.core import (C0, DEFAULT_OVERSAMPLE, BScan, FrequencyGrid, Spectrum,
                            band_to_time, synthesize, time_axis_for)

F_REF = 1.0e9  # reference frequency for the bulk-loss term
MIN_BARK_GAP = 0.04
DIAMETER_RANGE = (0.20, 0.45)
DEFECT_DIAMETER_RANGE = (0.02, 0.06)
DECAY_EPS = 30.0
DECAY_BOOST = 3.0
MAX_REDRAWS = 1000
BENCHMARK_NOISE = 0.02
BENCHMARK_CLUTTER = 0.10

# free-space ringing of the antenna feed: (delay in s, amplitude)
DEFAULT_SELF_REFLECTION = (
    (0.10e-9, 12.0),
    (0.35e-9, -9.0),
    (0.70e-9, 6.0),
    (1.10e-9, -4.0),
    (1.60e-9, 2.5),
    (2.20e-9, -1.5),
    (3.00e-9, 0.8),
)


class GeometryError(ValueError):
    """Antenna position or trajectory incompatible with the trunk."""


class InfeasibleSceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class AcquisitionSpec:
    """Scan geometry, sweep and noise settings.

    ``noise_sigma`` scales white complex noise and ``hf_clutter`` scales a
    second noise term whose std grows linearly from 0 at ``f_lo`` to its
    full value at ``f_hi``; both are relative to the strongest echo of the
    trace.
    """

    traj_length: float = 1.0
    n_traces: int = 51
    standoff_mid: float = 0.10
    grid: FrequencyGrid = FrequencyGrid()
    noise_sigma: float = 0.0
    hf_clutter: float = 0.0
    self_reflection: tuple = DEFAULT_SELF_REFLECTION
    oversample: int = DEFAULT_OVERSAMPLE
    seed: int = 0

    def __post_init__(self):
        if self.n_traces < 3:
            raise ValueError("need at least 3 traces")
        if not self.standoff_mid > 0:
            raise ValueError("standoff_mid must be positive")
        if self.noise_sigma < 0 or self.hf_clutter < 0:
            raise ValueError("noise levels must be non-negative")
        object.__setattr__(self, "self_reflection",
                           tuple((float(t), float(a)) for t, a in self.self_reflection))

    @property
    def dx(self) -> float:
        return self.traj_length / (self.n_traces - 1)

    def antenna_x(self) -> np.ndarray:
        return -0.5 * self.traj_length + self.dx * np.arange(self.n_traces)

    def self_reflection_spectrum(self) -> np.ndarray:
        f = self.grid.freqs
        out = np.zeros(f.shape, dtype=complex)
        for delay, amp in self.self_reflection:
            out += amp * np.exp(-2j * np.pi * f * delay)
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["self_reflection"] = [list(p) for p in self.self_reflection]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionSpec":
        d = dict(d)
        if "grid" in d:
            d["grid"] = FrequencyGrid(**d["grid"])
        if "self_reflection" in d:
            d["self_reflection"] = tuple(tuple(p) for p in d["self_reflection"])
        return cls(**d)


@dataclass(frozen=True)
class DefectSpec:
    center_offset: tuple[float, float]
    radius: float
    kind: str = "cavity"
    eps_inclusion: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("cavity", "decay"):
            raise ValueError(f"unknown defect kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("defect radius must be positive")
        if self.eps_inclusion is None:
            object.__setattr__(self, "eps_inclusion", 1.0 if self.kind == "cavity" else DECAY_EPS)
        object.__setattr__(self, "center_offset", tuple(float(v) for v in self.center_offset))

    @property
    def boost(self) -> float:
        return DECAY_BOOST if self.kind == "decay" else 1.0


@dataclass(frozen=True)
class TrunkScene:
    """Circular trunk with concentric internal interfaces and an optional defect.

    ``layer_radii`` defaults to a single interface at 0.8 radius; each
    interface reflects with ``layer_reflectivity`` regardless of direction.
    """

    radius: float
    eps_wood: float = 9.0
    alpha: float = 2.0
    layer_radii: Optional[tuple] = None
    layer_reflectivity: float = 0.15
    defect: Optional[DefectSpec] = None

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.eps_wood < 1:
            raise ValueError("eps_wood must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.layer_radii is None:
            object.__setattr__(self, "layer_radii", (0.8 * self.radius,))
        radii = tuple(sorted((float(r) for r in self.layer_radii), reverse=True))
        if any(not 0 < r < self.radius for r in radii):
            raise ValueError("layer radii must lie strictly inside the trunk")
        object.__setattr__(self, "layer_radii", radii)
        if self.defect is not None:
            ox, oy = self.defect.center_offset
            if math.hypot(ox, oy) + self.defect.radius >= self.radius:
                raise ValueError("defect must lie fully inside the trunk")

    @property
    def label(self) -> str:
        return "healthy" if self.defect is None else "defective"

    def bark_gap(self) -> float:
        """Shortest bark-to-defect distance (inf for healthy trunks)."""
        if self.defect is None:
            return math.inf
        return self.radius - math.hypot(*self.defect.center_offset) - self.defect.radius

    def without_defect(self) -> "TrunkScene":
        return replace(self, defect=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_radii"] = list(self.layer_radii)
        if self.defect is not None:
            d["defect"]["center_offset"] = list(self.defect.center_offset)
        d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrunkScene":
        d = dict(d)
        d.pop("label", None)
        if d.get("defect") is not None:
            d["defect"] = DefectSpec(**d["defect"])
        if d.get("layer_radii") is not None:
            d["layer_radii"] = tuple(d["layer_radii"])
        return cls(**d)


@dataclass(frozen=True)
class EchoEvent:
    delay: float
    amplitude: float
    polarity: int
    origin: str


@dataclass
class GroundTruth:
    """Exact per-trace echo delays implied by a scene (seconds)."""

    bark_delay: np.ndarray
    label: str
    scene: TrunkScene
    defect_delay: Optional[np.ndarray] = None
    echo_delays: dict = field(default_factory=dict)
    trunk_id: str = ""
    rotation_deg: float = 0.0

    def to_dict(self) -> dict:
        return {
            "bark_delay": [float(v) for v in self.bark_delay],
            "defect_delay": None if self.defect_delay is None
            else [float(v) for v in self.defect_delay],
            "echo_delays": {k: [float(v) for v in arr] for k, arr in self.echo_delays.items()},
            "label": self.label,
            "scene": self.scene.to_dict(),
            "trunk_id": self.trunk_id,
            "rotation_deg": self.rotation_deg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            bark_delay=np.asarray(d["bark_delay"], dtype=float),
            label=d["label"],
            scene=TrunkScene.from_dict(d["scene"]),
            defect_delay=None if d.get("defect_delay") is None
            else np.asarray(d["defect_delay"], dtype=float),
            echo_delays={k: np.asarray(v, dtype=float)
                         for k, v in d.get("echo_delays", {}).items()},
            trunk_id=d.get("trunk_id", ""),
            rotation_deg=float(d.get("rotation_deg", 0.0)),
        )


def fresnel_gamma(eps_from: float, eps_to: float) -> float:
    """Normal-incidence reflection coefficient for a wave going eps_from -> eps_to."""
    if eps_from < 1 or eps_to < 1:
        raise ValueError("relative permittivities must be >= 1")
    n1, n2 = math.sqrt(eps_from), math.sqrt(eps_to)
    return (n1 - n2) / (n1 + n2)


def _ray_circle(p: np.ndarray, u: np.ndarray, radius: float) -> list[float]:
    """Ray parameters s >= 0 where p + s*u crosses the circle |q| = radius."""
    b = float(p @ u)
    disc = b * b - (float(p @ p) - radius * radius)
    if disc <= 0:
        return []
    root = math.sqrt(disc)
    return [s for s in (-b - root, -b + root) if s >= 0]


def antenna_position(spec: AcquisitionSpec, scene: TrunkScene, trace_index: int) -> np.ndarray:
    if not 0 <= trace_index < spec.n_traces:
        raise IndexError(f"trace index {trace_index} outside 0..{spec.n_traces - 1}")
    return np.array([spec.antenna_x()[trace_index], scene.radius + spec.standoff_mid])


def trace_events(scene: TrunkScene, spec: AcquisitionSpec, trace_index: int) -> list[EchoEvent]:
    """All echoes seen at one antenna position, ordered bark, layers, far end, defect."""
    p = antenna_position(spec, scene, trace_index)
    dist = float(np.hypot(*p))
    if dist <= scene.radius:
        raise GeometryError("antenna inside the trunk")
    # the trajectory is the line y = radius + standoff; it misses the trunk iff standoff > 0
    if spec.standoff_mid <= 0:
        raise GeometryError("trajectory intersects the trunk")

    R = scene.radius
    v_wood = C0 / math.sqrt(scene.eps_wood)
    loss = scene.alpha * F_REF / 1e9
    g_bark = fresnel_gamma(1.0, scene.eps_wood)
    t_bark = 1.0 - g_bark ** 2  # in and out through the bark
    layer_t = [1.0 - scene.layer_reflectivity ** 2 for _ in scene.layer_radii]

    air = dist - R
    bark_delay = 2 * air / C0
    events = [EchoEvent(bark_delay, abs(g_bark) / (2 * air), int(np.sign(g_bark)) or 1, "bark")]

    for i, r_l in enumerate(scene.layer_radii):
        wood = 2 * (R - r_l)
        # every interface outside this one is crossed once each way
        trans = t_bark * math.prod(layer_t[:i])
        amp = trans * abs(scene.layer_reflectivity) * math.exp(-loss * wood) / (2 * air + wood)
        events.append(EchoEvent(bark_delay + wood / v_wood, amp,
                                1 if scene.layer_reflectivity >= 0 else -1, "layer"))

    g_far = fresnel_gamma(scene.eps_wood, 1.0)
    wood = 4 * R
    trans = t_bark * math.prod(t ** 2 for t in layer_t)
    amp = trans * abs(g_far) * math.exp(-loss * wood) / (2 * air + wood)
    events.append(EchoEvent(bark_delay + wood / v_wood, amp, int(np.sign(g_far)) or 1, "far_end"))

    if scene.defect is not None:
        events.append(_defect_event(scene, p, v_wood, loss, t_bark, layer_t))
    return events


def _defect_event(scene, p, v_wood, loss, t_bark, layer_t) -> EchoEvent:
    d = scene.defect
    center = np.asarray(d.center_offset, dtype=float)
    to_center = center - p
    length = float(np.hypot(*to_center))
    u = to_center / length
    hits = _ray_circle(p, u, scene.radius)
    if not hits:
        raise GeometryError("ray to the defect misses the trunk")
    s_entry = hits[0]
    s_surface = length - d.radius
    wood_leg = s_surface - s_entry
    if wood_leg <= 0:
        raise GeometryError("defect breaks through the bark")
    trans = t_bark
    for t_l, r_l in zip(layer_t, scene.layer_radii):
        crossings = sum(s_entry < s < s_surface for s in _ray_circle(p, u, r_l))
        trans *= t_l ** crossings
    gamma = fresnel_gamma(scene.eps_wood, d.eps_inclusion)
    total = 2 * (s_entry + wood_leg)
    amp = trans * abs(gamma) * d.boost * math.exp(-loss * 2 * wood_leg) / total
    delay = 2 * s_entry / C0 + 2 * wood_leg / v_wood
    return EchoEvent(delay, amp, 1 if gamma >= 0 else -1, "defect")


def synth_spectrum(events, spec: AcquisitionSpec, rng: np.random.Generator | None = None,
                   include_self_reflection: bool = True) -> Spectrum:
    """Sum of delayed echoes plus antenna self-reflection and frequency-domain noise."""
    f = spec.grid.freqs
    values = spec.self_reflection_spectrum() if include_self_reflection \
        else np.zeros(f.shape, dtype=complex)
    for ev in events:
        values = values + ev.polarity * ev.amplitude * np.exp(-2j * np.pi * f * ev.delay)
    peak = max((ev.amplitude for ev in events), default=0.0)
    if (spec.noise_sigma > 0 or spec.hf_clutter > 0) and peak > 0:
        if rng is None:
            raise ValueError("noise requested but no random generator supplied")
        std = peak * (spec.noise_sigma
                      + spec.hf_clutter * (f - spec.grid.f_lo) / spec.grid.bandwidth)
        values = values + std * (rng.standard_normal(f.shape) + 1j * rng.standard_normal(f.shape))
    return Spectrum(spec.grid, values)


def free_space_reference(spec: AcquisitionSpec) -> np.ndarray:
    """Calibration trace: the antenna's self-reflection with nothing in front of it."""
    return synthesize(spec.self_reflection_spectrum(), spec.grid, spec.oversample)


def ground_truth(scene: TrunkScene, spec: AcquisitionSpec) -> GroundTruth:
    per_trace = [trace_events(scene, spec, n) for n in range(spec.n_traces)]
    return _truth_from_events(scene, per_trace)


def _truth_from_events(scene, per_trace) -> GroundTruth:
    delays: dict[str, list] = {}
    for events in per_trace:
        counts: dict[str, int] = {}
        for ev in events:
            key = ev.origin
            if ev.origin == "layer":
                key = f"layer{counts.get('layer', 0)}"
                counts["layer"] = counts.get("layer", 0) + 1
            delays.setdefault(key, []).append(ev.delay)
    arrays = {k: np.asarray(v) for k, v in delays.items()}
    return GroundTruth(
        bark_delay=arrays.pop("bark"),
        defect_delay=arrays.pop("defect", None),
        echo_delays=arrays,
        label=scene.label,
        scene=scene,
    )


def simulate(scene: TrunkScene, spec: AcquisitionSpec):
    """Raw B-scan, free-space reference trace and ground truth for one scan."""
    rng = np.random.default_rng(spec.seed)
    per_trace = [trace_events(scene, spec, n) for n in range(spec.n_traces)]
    spectra = [synth_spectrum(ev, spec, rng) for ev in per_trace]
    raw = band_to_time(spectra, oversample=spec.oversample, dx=spec.dx, stage="raw")
    return raw, free_space_reference(spec), _truth_from_events(scene, per_trace)


def echo_field(scene: TrunkScene, spec: AcquisitionSpec, origins=None) -> BScan:
    """Noise-free B-scan of selected echo origins only (all when ``origins`` is None)."""
    spectra = []
    for n in range(spec.n_traces):
        events = [ev for ev in trace_events(scene, spec, n)
                  if origins is None or ev.origin in origins]
        spectra.append(synth_spectrum(events, replace(spec, noise_sigma=0.0, hf_clutter=0.0),
                                      include_self_reflection=False))
    return band_to_time(spectra, oversample=spec.oversample, dx=spec.dx, stage="echo")


def benchmark_spec(**overrides) -> AcquisitionSpec:
    """Acquisition settings of the synthetic benchmark: mild white noise plus
    clutter that rises with frequency."""
    base = dict(noise_sigma=BENCHMARK_NOISE, hf_clutter=BENCHMARK_CLUTTER)
    base.update(overrides)
    return AcquisitionSpec(**base)


def _draw_defect(rng: np.random.Generator, radius: float):
    for _ in range(MAX_REDRAWS):
        r_d = 0.5 * rng.uniform(*DEFECT_DIAMETER_RANGE)
        rho_max = radius - MIN_BARK_GAP - r_d
        if rho_max <= 0:
            continue
        rho = rho_max * math.sqrt(rng.uniform())
        kind = "cavity" if rng.uniform() < 0.5 else "decay"
        return r_d, rho, kind
    raise InfeasibleSceneError(f"no feasible defect after {MAX_REDRAWS} draws")


def sample_dataset(n_scenes: int, class_balance: float = 0.5, seed: int = 0,
                   spec: AcquisitionSpec | None = None, rotations: int = 1):
    """Draw a labelled set of synthetic trunks.

    Each trunk is scanned ``rotations`` times; successive scans rotate the
    defect offset by ``360 / rotations`` degrees.  Returns a list of
    ``(raw, reference, truth)`` tuples; ``truth.trunk_id`` groups the scans
    of one trunk.
    """
    if n_scenes < 2:
        raise ValueError("need at least 2 scenes")
    if not 0.0 <= class_balance <= 1.0:
        raise ValueError("class_balance must be in [0, 1]")
    if rotations < 1:
        raise ValueError("rotations must be >= 1")
    spec = spec or AcquisitionSpec()
    n_def = int(round(n_scenes * class_balance))
    labels = np.array([0] * (n_scenes - n_def) + [1] * n_def)
    root = np.random.default_rng(seed)
    labels = labels[root.permutation(n_scenes)]
    children = np.random.SeedSequence(seed).spawn(n_scenes)

    records = []
    for i in range(n_scenes):
        rng = np.random.default_rng(children[i])
        radius = 0.5 * rng.uniform(*DIAMETER_RANGE)
        layer = radius * rng.uniform(0.7, 0.85)
        defect_draw = None
        if labels[i]:
            angle0 = rng.uniform(0, 2 * math.pi)
            defect_draw = (*_draw_defect(rng, radius), angle0)
        scan_seeds = rng.integers(0, 2 ** 31, size=rotations)
        for k in range(rotations):
            rot = 360.0 * k / rotations
            defect = None
            if defect_draw is not None:
                r_d, rho, kind, angle0 = defect_draw
                ang = angle0 + math.radians(rot)
                defect = DefectSpec((rho * math.cos(ang), rho * math.sin(ang)), r_d, kind)
            scene = TrunkScene(radius=radius, layer_radii=(layer,), defect=defect)
            raw, ref, truth = simulate(scene, replace(spec, seed=int(scan_seeds[k])))
            truth.trunk_id = f"trunk_{i:03d}"
            truth.rotation_deg = rot
            records.append((raw, ref, truth))
    return records
