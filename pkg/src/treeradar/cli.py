"""Command-line entry point.

Exit codes:
    0  success
    1  invalid configuration, I/O failure or other error
    2  processing finished but zero-gating fell back (no surface clutter found)
    3  malformed BSCN input
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from treeradar.core import (BScan, FormatError, FrequencyGrid, TimeAxis, atomic_write, read_bscan,
                            scnr, write_bscan)
from treeradar.filtering import FirSpec, PipelineConfig, process, synthetic_masks
from treeradar.gating import GatingConfig
from treeradar.mlff.data import LABELS, PrepConfig, Sample, build_samples, prepare_input
from treeradar.mlff.io import load_weights, save_weights
from treeradar.mlff.metrics import ConfusionMatrix, metrics
from treeradar.mlff.net import MLFFNet, NetConfig
from treeradar.mlff.train import TrainConfig, cross_validate, predict, train
from treeradar.synth import (BENCHMARK_CLUTTER, BENCHMARK_NOISE, AcquisitionSpec, GroundTruth,
                             sample_dataset)

EXIT_OK, EXIT_ERROR, EXIT_FALLBACK, EXIT_BAD_BSCN = 0, 1, 2, 3
MASK_PULSE_FACTOR = 1.5  # SCNR signal half-window, in units of 1/bandwidth


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- configs

@dataclass(frozen=True)
class SimulateConfig:
    n_scenes: int = 20
    class_balance: float = 0.5
    seed: int = 0
    rotations: int = 1
    acquisition: AcquisitionSpec = AcquisitionSpec(noise_sigma=BENCHMARK_NOISE,
                                                   hf_clutter=BENCHMARK_CLUTTER)


@dataclass(frozen=True)
class ProcessConfig:
    grid: FrequencyGrid = FrequencyGrid()
    gating: GatingConfig = GatingConfig()
    fir: FirSpec = FirSpec()
    skip_fsr: bool = False
    skip_gate: bool = False
    skip_fir: bool = False

    def pipeline(self, keep_stages=False) -> PipelineConfig:
        return PipelineConfig(grid=self.grid, gating=self.gating, fir=self.fir,
                              skip_fsr=self.skip_fsr, skip_gate=self.skip_gate,
                              skip_fir=self.skip_fir, keep_stages=keep_stages)


@dataclass(frozen=True)
class PrepareConfig:
    process: ProcessConfig = ProcessConfig()
    prep: PrepConfig = PrepConfig()


@dataclass(frozen=True)
class LearnConfig:
    folds: int = 5
    split_seed: int = 0
    width_scale: float = 1.0
    use_fusion: bool = True
    use_cam: bool = True
    cam_reduction: int = 16
    cam_activation: str = "relu"
    train: TrainConfig = TrainConfig()


_NESTED = {
    "acquisition": AcquisitionSpec, "grid": FrequencyGrid, "gating": GatingConfig,
    "fir": FirSpec, "process": ProcessConfig, "prep": PrepConfig, "train": TrainConfig,
}
_TUPLES = {"apex_window", "out_hw", "input_hw", "self_reflection"}


def config_from_dict(cls, d: dict, path: str = ""):
    """Build a config dataclass, rejecting unknown keys at any depth."""
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in d.items():
        sub = f"{path}.{k}" if path else k
        if k in _NESTED:
            kwargs[k] = config_from_dict(_NESTED[k], v, sub)
        elif k in _TUPLES and v is not None:
            kwargs[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from exc


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = config_to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = [list(x) if isinstance(x, tuple) else x for x in v]
        else:
            out[f.name] = v
    return out


def load_config(cls, path: Optional[str]):
    if path is None:
        return cls()
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(cls, raw)


def override(cfg, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(cfg, **changes) if changes else cfg


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True).encode("utf-8") + b"\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------- images

def gray_levels(data) -> np.ndarray:
    """Linear min-max scaling to 0..255; a constant image is mid-gray."""
    a = np.asarray(data, dtype=float)
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def bwr_table() -> np.ndarray:
    """256-entry blue-white-red color table."""
    u = np.arange(256) / 255.0
    r = np.clip(2.0 * u, 0.0, 1.0)
    b = np.clip(2.0 - 2.0 * u, 0.0, 1.0)
    g = 1.0 - np.abs(2.0 * u - 1.0)
    return np.round(np.stack([r, g, b], axis=1) * 255.0).astype(np.uint8)


def color_levels(data) -> np.ndarray:
    """Symmetric scaling so zero maps to the white middle of the table."""
    a = np.asarray(data, dtype=float)
    peak = float(np.max(np.abs(a))) if a.size else 0.0
    if peak == 0.0:
        idx = np.full(a.shape, 128, dtype=np.uint8)
    else:
        idx = np.round((a / peak + 1.0) * 127.5).astype(np.uint8)
    return bwr_table()[idx]


def render_image(data, style: str = "gray", decimate: int = 1) -> bytes:
    if decimate < 1:
        raise ValueError("decimate must be >= 1")
    a = np.asarray(data, dtype=float)[::decimate]
    h, w = a.shape
    if style == "gray":
        return b"P5\n%d %d\n255\n" % (w, h) + gray_levels(a).tobytes()
    if style == "color":
        return b"P6\n%d %d\n255\n" % (w, h) + color_levels(a).tobytes()
    raise ValueError(f"unknown style {style!r}")


# ---------------------------------------------------------------- dataset IO

def reference_scan(ref, axis: TimeAxis, dx: float) -> BScan:
    return BScan(axis, np.asarray(ref, dtype=float).reshape(-1, 1), dx=dx, stage="reference")


def write_dataset(out_dir: Path, cfg: SimulateConfig) -> list[dict]:
    out_dir.mkdir(parents=True, exist_ok=True)
    records = sample_dataset(cfg.n_scenes, cfg.class_balance, cfg.seed, cfg.acquisition,
                             cfg.rotations)
    entries = []
    for i, (raw, ref, truth) in enumerate(records):
        stem = f"scan_{i:04d}"
        write_bscan(out_dir / f"{stem}.bscn", raw)
        write_bscan(out_dir / f"{stem}_ref.bscn", reference_scan(ref, raw.axis, raw.dx))
        write_json(out_dir / f"{stem}_truth.json", truth.to_dict())
        entries.append({"scan": f"{stem}.bscn", "reference": f"{stem}_ref.bscn",
                        "ground_truth": f"{stem}_truth.json", "trunk_id": truth.trunk_id,
                        "label": truth.label})
    write_json(out_dir / "manifest.json", {"entries": entries})
    write_json(out_dir / "config.json", config_to_dict(cfg))
    return entries


def load_records(data_dir: Path):
    manifest = read_json(data_dir / "manifest.json")
    records = []
    for e in manifest["entries"]:
        raw = read_bscan(data_dir / e["scan"])
        ref = read_bscan(data_dir / e["reference"]).data[:, 0]
        truth = GroundTruth.from_dict(read_json(data_dir / e["ground_truth"]))
        if truth.label != e["label"] or truth.trunk_id != e["trunk_id"]:
            raise ConfigError(f"manifest entry {e['scan']} disagrees with its ground truth")
        records.append((raw, ref, truth))
    return records


def write_samples(out_dir: Path, samples: list[Sample]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ConfigError("no samples to write")
    tensors = {"inputs": np.stack([s.input for s in samples]),
               "labels": np.array([s.label for s in samples], dtype=float)}
    save_weights(out_dir / "samples.mlfw", tensors)
    write_json(out_dir / "samples.json", {
        "trunk_ids": [s.trunk_id for s in samples],
        "labels": [s.label for s in samples],
        "meta": [s.meta for s in samples],
    })


def read_samples(prep_dir: Path) -> list[Sample]:
    tensors = load_weights(prep_dir / "samples.mlfw")
    index = read_json(prep_dir / "samples.json")
    x = tensors["inputs"]
    if len(x) != len(index["trunk_ids"]):
        raise ConfigError("samples.mlfw and samples.json disagree on the sample count")
    return [Sample(x[i], int(index["labels"][i]), index["trunk_ids"][i], index["meta"][i])
            for i in range(len(x))]


def net_config_for(samples: list[Sample], cfg: LearnConfig) -> NetConfig:
    c, h, w = samples[0].input.shape
    return NetConfig(in_channels=c, input_hw=(h, w), width_scale=cfg.width_scale,
                     use_fusion=cfg.use_fusion, use_cam=cfg.use_cam,
                     cam_reduction=cfg.cam_reduction, cam_activation=cfg.cam_activation)


def save_model(out_dir: Path, stem: str, params: dict, net_cfg: NetConfig) -> None:
    save_weights(out_dir / f"{stem}.mlfw", params)
    write_json(out_dir / f"{stem}.json", net_cfg.to_dict())


def load_model(weights: Path):
    cfg_path = weights.with_suffix(".json")
    net_cfg = config_from_dict(NetConfig, read_json(cfg_path))
    return MLFFNet(net_cfg), load_weights(weights)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    cfg = load_config(SimulateConfig, args.config)
    cfg = override(cfg, n_scenes=args.n, seed=args.seed, class_balance=args.class_balance,
                   rotations=args.rotations)
    acq = override(cfg.acquisition, noise_sigma=args.noise_sigma, hf_clutter=args.hf_clutter)
    cfg = dataclasses.replace(cfg, acquisition=acq)
    entries = write_dataset(Path(args.out), cfg)
    print(f"wrote {len(entries)} scans to {args.out}")
    return EXIT_OK


def _process_config(args) -> ProcessConfig:
    cfg = load_config(ProcessConfig, args.config)
    return override(cfg, skip_fsr=args.skip_fsr or None, skip_gate=args.skip_gate or None,
                    skip_fir=args.skip_fir or None)


def cmd_process(args) -> int:
    cfg = _process_config(args)
    if args.reference is None and not cfg.skip_fsr:
        raise ConfigError("--reference is required unless --skip-fsr is given")
    raw = read_bscan(args.input)
    ref = read_bscan(args.reference).data[:, 0] if args.reference else np.zeros(raw.axis.n_samples)
    masks = None
    if args.truth:
        truth = GroundTruth.from_dict(read_json(args.truth))
        masks = synthetic_masks(truth, raw.axis, raw.shape,
                                MASK_PULSE_FACTOR / cfg.grid.bandwidth)
    out, report = process(raw, ref, cfg.pipeline(keep_stages=bool(args.plot_dir)), masks)
    write_bscan(args.out, out)
    rep = report.to_dict()
    rep["config"] = config_to_dict(cfg)
    if args.report:
        write_json(args.report, rep)
    if args.gate_json and report.gate is not None:
        write_json(args.gate_json, report.gate.to_dict())
    if args.plot_dir:
        pdir = Path(args.plot_dir)
        pdir.mkdir(parents=True, exist_ok=True)
        for name, scan in report.stages.items():
            atomic_write(pdir / f"{name}.pgm", render_image(scan.data, "gray"))
    if report.gate_fallback:
        print(f"gate fallback: {report.fallback_reason}", file=sys.stderr)
        return EXIT_FALLBACK
    return EXIT_OK


def cmd_plot(args) -> int:
    scan = read_bscan(args.input)
    style = args.style or ("color" if str(args.out).endswith(".ppm") else "gray")
    atomic_write(args.out, render_image(scan.data, style, args.decimate))
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = load_config(PrepareConfig, args.config)
    if args.size:
        cfg = dataclasses.replace(cfg, prep=dataclasses.replace(cfg.prep,
                                                                out_hw=(args.size, args.size)))
    records = load_records(Path(args.dataset))
    samples = build_samples(records, cfg.prep, cfg.process.pipeline())
    write_samples(Path(args.out), samples)
    skipped = len(records) - len(samples)
    print(f"prepared {len(samples)} samples ({skipped} skipped after gate fallback)")
    return EXIT_OK


def _learn_config(args) -> LearnConfig:
    cfg = load_config(LearnConfig, args.config)
    cfg = override(cfg, folds=args.folds, width_scale=args.width_scale,
                   use_fusion=False if args.no_fusion else None,
                   use_cam=False if args.no_cam else None)
    tc = override(cfg.train, epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed)
    return dataclasses.replace(cfg, train=tc)


def cmd_train(args) -> int:
    cfg = _learn_config(args)
    samples = read_samples(Path(args.data))
    net_cfg = net_config_for(samples, cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    hist_lines = {}

    def log(fold, entry):
        hist_lines.setdefault(fold, []).append(json.dumps(entry, sort_keys=True))

    if cfg.folds >= 2:
        reports, pooled, fold_params = cross_validate(samples, net_cfg, cfg.folds, cfg.train,
                                                      cfg.split_seed, log=log)
        for r, params in zip(reports, fold_params):
            save_model(out_dir, f"fold_{r.fold}", params, net_cfg)
        fold_dicts = [r.to_dict() for r in reports]
        per_fold_acc = [d["metrics"]["acc"] for d in fold_dicts]
        summary = {"folds": fold_dicts,
                   "aggregate": metrics(pooled).to_dict(),
                   "confusion": [list(row) for row in pooled.counts],
                   "mean_fold_acc": float(np.mean(per_fold_acc))}
    else:
        x = np.stack([s.input for s in samples])
        y = np.array([s.label for s in samples])
        net = MLFFNet(net_cfg)
        res = train(net, x, y, config=cfg.train, log=lambda e: log(0, e))
        save_model(out_dir, "model", res.params, net_cfg)
        pred, _ = predict(net, res.params, x)
        cm = ConfusionMatrix.from_labels(y, pred)
        summary = {"folds": [], "aggregate": metrics(cm).to_dict(),
                   "confusion": [list(row) for row in cm.counts]}
    for fold, lines in hist_lines.items():
        atomic_write(out_dir / f"history_{fold}.jsonl", ("\n".join(lines) + "\n").encode())
    summary["config"] = config_to_dict(cfg)
    write_json(out_dir / "metrics.json", summary)
    agg = summary["aggregate"]
    print("acc {acc:.4f} prec {prec:.4f} rec {rec:.4f} f1 {f1:.4f}".format(**agg))
    return EXIT_OK


def cmd_eval(args) -> int:
    samples = read_samples(Path(args.data))
    net, params = load_model(Path(args.weights))
    x = np.stack([s.input for s in samples])
    y = np.array([s.label for s in samples])
    pred, _ = predict(net, params, x)
    cm = ConfusionMatrix.from_labels(y, pred)
    out = {"metrics": metrics(cm).to_dict(), "confusion": [list(r) for r in cm.counts]}
    if args.out:
        write_json(args.out, out)
    print(json.dumps(out["metrics"], sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    net, params = load_model(Path(args.weights))
    if args.data:
        samples = read_samples(Path(args.data))
        x = np.stack([s.input for s in samples])
        ids = [s.trunk_id for s in samples]
    else:
        if not args.gate:
            raise ConfigError("predicting from a scan needs --gate")
        from treeradar.gating import GateCurve
        scan = read_bscan(args.scan)
        gate = GateCurve.from_dict(read_json(args.gate))
        prep = PrepConfig(n_channels=net.config.in_channels, out_hw=net.config.input_hw)
        x = prepare_input(scan, gate, prep)[0][None]
        ids = [str(args.scan)]
    labels, probs = predict(net, params, x)
    names = {v: k for k, v in LABELS.items()}
    rows = [{"id": i, "label": names[int(lab)], "probability": float(p)}
            for i, lab, p in zip(ids, labels, probs)]
    if args.out:
        write_json(args.out, rows)
    for r in rows:
        print(f"{r['id']}\t{r['label']}\t{r['probability']:.4f}")
    return EXIT_OK


def _box(spec: str, shape) -> np.ndarray:
    try:
        rows, cols = spec.split(",")
        r0, r1 = (int(v) for v in rows.split(":"))
        c0, c1 = (int(v) for v in cols.split(":"))
    except ValueError as exc:
        raise ConfigError(f"bad region {spec!r}; expected r0:r1,c0:c1") from exc
    m = np.zeros(shape, dtype=bool)
    m[r0:r1, c0:c1] = True
    return m


def cmd_scnr(args) -> int:
    scan = read_bscan(args.input)
    if args.truth:
        truth = GroundTruth.from_dict(read_json(args.truth))
        bandwidth = FrequencyGrid().bandwidth
        sig, cn = synthetic_masks(truth, scan.axis, scan.shape, MASK_PULSE_FACTOR / bandwidth)
    elif args.signal and args.clutter:
        sig, cn = _box(args.signal, scan.shape), _box(args.clutter, scan.shape)
    else:
        raise ConfigError("give --truth, or both --signal and --clutter regions")
    value = scnr(scan, sig, cn)
    print(json.dumps({"scnr_db": value}))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="treeradar", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--n", type=int, help="number of trunks (default 20)")
    s.add_argument("--seed", type=int)
    s.add_argument("--class-balance", type=float)
    s.add_argument("--rotations", type=int, help="scans per trunk (default 1)")
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--hf-clutter", type=float)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("process", help="free-space removal, zero-gating and FIR filtering")
    s.add_argument("input")
    s.add_argument("--reference")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--gate-json")
    s.add_argument("--truth", help="ground-truth JSON; adds SCNR per stage to the report")
    s.add_argument("--plot-dir")
    s.add_argument("--config")
    s.add_argument("--skip-fsr", action="store_true")
    s.add_argument("--skip-gate", action="store_true")
    s.add_argument("--skip-fir", action="store_true")
    s.set_defaults(func=cmd_process)

    s = sub.add_parser("plot", help="render a B-scan as PGM or PPM")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--style", choices=("gray", "color"))
    s.add_argument("--decimate", type=int, default=1, help="keep every k-th time sample")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("prepare", help="turn a simulated dataset into network inputs")
    s.add_argument("dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--size", type=int, help="square input size (default 128)")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train with trunk-level k-fold validation")
    s.add_argument("data")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--folds", type=int, help="k for k-fold (default 5); below 2 trains on everything")
    s.add_argument("--epochs", type=int, help="default 100")
    s.add_argument("--lr", type=float, help="default 5e-4")
    s.add_argument("--batch", type=int, help="default 64")
    s.add_argument("--seed", type=int)
    s.add_argument("--width-scale", type=float, help="channel multiplier in (0, 1]")
    s.add_argument("--no-fusion", action="store_true", help="use only the deepest level")
    s.add_argument("--no-cam", action="store_true", help="bypass coordinate attention")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score saved weights on prepared samples")
    s.add_argument("data")
    s.add_argument("--weights", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="classify prepared samples or one processed scan")
    s.add_argument("--weights", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--data")
    g.add_argument("--scan")
    s.add_argument("--gate")
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("scnr", help="SCNR of a B-scan in dB")
    s.add_argument("input")
    s.add_argument("--truth")
    s.add_argument("--signal", help="rows r0:r1,cols c0:c1")
    s.add_argument("--clutter", help="rows r0:r1,cols c0:c1")
    s.set_defaults(func=cmd_scnr)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: malformed BSCN: {exc}", file=sys.stderr)
        return EXIT_BAD_BSCN
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
