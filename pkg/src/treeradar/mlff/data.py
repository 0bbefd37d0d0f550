"""Network inputs from processed scans, and trunk-level fold splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from treeradar.core import BScan, resize_bilinear, shift_trace
from treeradar.gating import GateCurve, apply_zero_gate

N_CHANNELS = 10
W_STEP = 0.03e-9
CROP = 5.0e-9
LABELS = {"healthy": 0, "defective": 1}


@dataclass(frozen=True)
class PrepConfig:
    n_channels: int = N_CHANNELS
    w_step: float = W_STEP
    crop: float = CROP
    out_hw: tuple = (128, 128)

    def offsets(self) -> np.ndarray:
        return self.w_step * np.arange(self.n_channels)


@dataclass
class Sample:
    input: np.ndarray  # (C, H, W)
    label: int
    trunk_id: str
    meta: dict = field(default_factory=dict)


def straighten(bscan: BScan, gate: GateCurve, crop: float) -> tuple[np.ndarray, bool]:
    """Shift each trace so its gate time lands on t = 0, then keep ``crop`` seconds.

    Returns the cropped ``(n_crop, n_traces)`` array and whether any trace
    needed zero padding past the end of the record.
    """
    axis = bscan.axis
    n_crop = int(round(crop / axis.dt))
    if n_crop < 2:
        raise ValueError("crop shorter than two samples")
    if gate.t_gate.shape[0] != bscan.n_traces:
        raise ValueError("gate has a different trace count than the scan")
    out = np.zeros((n_crop, bscan.n_traces))
    padded = False
    for j in range(bscan.n_traces):
        g = float(gate.t_gate[j])
        if g + n_crop > axis.n_samples:
            padded = True
        shifted = shift_trace(bscan.data[:, j], -g * axis.dt, axis)
        take = min(n_crop, axis.n_samples)
        out[:take, j] = shifted[:take]
    return out, padded


def prepare_input(processed: BScan, gate: GateCurve, config: PrepConfig = PrepConfig()):
    """Stack of re-gated, straightened, cropped and resized views.

    Channel n is the scan zero-gated at the base gate plus ``n * w_step``;
    every channel is straightened on the base gate so channels line up.
    The stack is scaled by its largest absolute value into [-1, 1].
    Returns ``(tensor, meta)``.
    """
    h, w = config.out_hw
    chans = []
    padded = False
    for off in config.offsets():
        regated = apply_zero_gate(processed, gate.shifted(float(off)))
        img, pad = straighten(regated, gate, config.crop)
        padded |= pad
        chans.append(resize_bilinear(img, h, w))
    stack = np.stack(chans)
    peak = np.max(np.abs(stack))
    if peak > 0:
        stack = stack / peak
    return stack, {"padded": bool(padded), "scale": float(peak)}


def labels_of(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([s.label for s in samples], dtype=int)


def stack_inputs(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.input for s in samples])


def trunk_labels(samples: Sequence[Sample]) -> dict:
    out: dict = {}
    for s in samples:
        if out.setdefault(s.trunk_id, s.label) != s.label:
            raise ValueError(f"trunk {s.trunk_id} carries both labels")
    return out


def kfold_split(samples: Sequence[Sample], k: int = 5, seed: int = 0) -> list[list[int]]:
    """Partition sample indices into ``k`` folds by trunk.

    Trunks of each class are shuffled and dealt round-robin, so every fold
    gets the same number of trunks per class (up to one when a class count
    is not a multiple of ``k``).
    """
    trunks = trunk_labels(samples)
    if len(trunks) < k:
        raise ValueError(f"need at least {k} trunks, got {len(trunks)}")
    rng = np.random.default_rng(seed)
    fold_of = {}
    start = 0
    for label in sorted(set(trunks.values())):
        ids = sorted(t for t, lab in trunks.items() if lab == label)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        for i, tid in enumerate(ids):
            fold_of[tid] = (start + i) % k
        # continue dealing where the previous class stopped
        start = (start + len(ids)) % k
    folds: list[list[int]] = [[] for _ in range(k)]
    for i, s in enumerate(samples):
        folds[fold_of[s.trunk_id]].append(i)
    return folds


def check_leakage(samples: Sequence[Sample], train_idx, val_idx) -> None:
    a = {samples[i].trunk_id for i in train_idx}
    b = {samples[i].trunk_id for i in val_idx}
    both = sorted(a & b)
    if both:
        raise LeakageError(f"trunks in both train and validation: {both}")


class LeakageError(RuntimeError):
    pass


def build_samples(records, prep: PrepConfig = PrepConfig(), pipeline=None) -> list[Sample]:
    """Process ``(raw, reference, truth)`` records and prepare network inputs.

    Scans whose gating falls back have no gate to straighten on and are
    skipped, so the result can be shorter than ``records``.
    """
    from treeradar.filtering import PipelineConfig, process

    pipeline = pipeline or PipelineConfig()
    out = []
    for raw, ref, truth in records:
        processed, report = process(raw, ref, pipeline)
        if report.gate is None:
            continue
        x, meta = prepare_input(processed, report.gate, prep)
        meta["rotation_deg"] = truth.rotation_deg
        out.append(Sample(x, LABELS[truth.label], truth.trunk_id, meta))
    return out
