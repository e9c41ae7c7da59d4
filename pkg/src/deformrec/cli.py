"""Command-line driver: ``simulate``, ``run`` and ``eval`` subcommands."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimator import DeformationRecovery
from .export import pool_stats, write_json, write_ply
from .measure import mask_out_instrument
from .rastermap import ParamSet, RasterMap, RtfError, read_rtf, write_rtf
from .recover import ALPHA, STRAIN_GATE, InitializationError, SolverError
from .simcam import (
    SCENARIOS,
    DatasetError,
    SceneConfig,
    StrainLimitError,
    eval_rmse_msd,
    generate,
    load_dataset,
    scenario,
    write_dataset,
)
from .straintrack import strain_rows, write_strain_csv
from .validation import check_alpha, check_strain_gate, check_stride

logger = logging.getLogger("deformrec")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2

RUN_MANIFEST = "run.json"
REGIONS = ("non_occluded", "occluded")


class CliError(Exception):
    """Bad input; reported with exit status 2."""


def parse_frame_range(text: str | None) -> tuple[int, int] | None:
    """``"A..B"`` (inclusive, either end optional) to a pair; ``None`` passes through."""
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        a, b = text
        return int(a), int(b)
    if ".." not in text:
        raise CliError(f"frame range must look like A..B, got {text!r}")
    a, b = text.split("..", 1)
    try:
        lo = int(a) if a.strip() else 0
        hi = int(b) if b.strip() else -1
    except ValueError as exc:
        raise CliError(f"frame range must look like A..B, got {text!r}") from exc
    return lo, hi


@dataclass
class RunConfig:
    """Settings of one ``run`` invocation (also loadable from JSON)."""

    input_dir: str = ""
    output_dir: str = "deformrec_out"
    alpha: float = ALPHA
    strain_gate: float = STRAIN_GATE
    use_pose: bool = True
    downsample: int = 1
    frames: tuple[int, int] | None = None
    ply: bool = True
    strain_csv: bool = True
    metrics_json: bool = True
    strain_mode: str = "accumulative"
    export: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.export:
            for key in ("ply", "strain_csv", "metrics_json"):
                if key in self.export:
                    setattr(self, key, bool(self.export[key]))
            self.export = {}
        self.frames = parse_frame_range(self.frames) if self.frames is not None else None

    def validate(self) -> "RunConfig":
        try:
            check_alpha(self.alpha)
            check_strain_gate(self.strain_gate)
            check_stride(self.downsample)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        if self.strain_mode not in ("accumulative", "inter"):
            raise CliError(f"strain mode must be 'accumulative' or 'inter', got {self.strain_mode!r}")
        if not self.input_dir:
            raise CliError("no input dataset given")
        return self

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise CliError(f"missing file: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"malformed config {path}: {exc}") from exc
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise CliError(f"unknown config keys in {path}: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("export")
        d["frames"] = list(self.frames) if self.frames is not None else None
        return d


# --- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    source = args.scenario
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise CliError(f"missing file: {path}")
        try:
            cfg = SceneConfig.from_dict(json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise CliError(f"malformed scene config {path}: {exc}") from exc
        if args.frames is not None:
            cfg.frames = args.frames
        if args.seed is not None:
            cfg.seed = args.seed
    else:
        if source not in SCENARIOS:
            raise CliError(f"unknown scenario {source!r}; valid names: {', '.join(sorted(SCENARIOS))}")
        cfg = scenario(source, frames=args.frames, seed=args.seed or 0)
    cfg.allow_large_strain = cfg.allow_large_strain or args.allow_large_strain
    try:
        frames = generate(cfg)
    except StrainLimitError as exc:
        raise CliError(str(exc)) from exc
    out = write_dataset(frames, args.out, cfg)
    print(f"wrote {len(frames)} frames of '{cfg.name}' to {out}")
    return EXIT_OK


# --- run ----------------------------------------------------------------------

def _regions(bundle, params: ParamSet) -> dict[str, ParamSet]:
    masked = mask_out_instrument(bundle)
    dom = params.domain
    visible = masked.points.defined.on(dom) & params
    occluded = masked.instrument_mask.on(dom) & params
    return {"non_occluded": visible, "occluded": occluded}


def _region_metrics(points: RasterMap, truth: RasterMap, regions: dict) -> dict:
    out = {}
    for name in REGIONS:
        reg = regions[name]
        if len(reg) == 0:
            out[name] = None
            continue
        try:
            rmse, msd, std = eval_rmse_msd(points, truth, reg)
        except ValueError:
            out[name] = None
            continue
        out[name] = {"n": len(reg), "rmse": rmse, "msd": msd, "std": std}
    return out


def _aggregate(per_frame: list[dict]) -> dict:
    return {name: pool_stats([f.get(name) for f in per_frame]) for name in REGIONS}


def _frame_indices(frames: tuple[int, int] | None, n: int) -> range:
    lo, hi = frames if frames is not None else (0, n - 1)
    if hi < 0:
        hi = n + hi
    if not (0 <= lo <= hi < n):
        raise CliError(f"frame range {lo}..{hi} outside the dataset's 0..{n - 1}")
    return range(lo, hi + 1)


def run(config: RunConfig) -> dict:
    """Process a dataset and write the requested exports; returns the metrics payload."""
    config.validate()
    ds = load_dataset(config.input_dir, stride=config.downsample)
    indices = _frame_indices(config.frames, ds.n_frames)
    ds.check(indices)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    est = DeformationRecovery(ds.intrinsics, alpha=config.alpha, strain_gate=config.strain_gate,
                              use_pose=config.use_pose,
                              track=config.strain_csv and config.strain_mode == "accumulative")
    csv_path = out / "strain.csv"
    if config.strain_csv:
        write_strain_csv(csv_path, [])
    per_frame = []
    iteration_ms = []
    t_start = time.perf_counter()
    for i in indices:
        bundle = ds.bundle(i)
        prev_state = getattr(est, "state_", None)
        t0 = time.perf_counter()
        est.partial_fit(bundle)
        wall = 1e3 * (time.perf_counter() - t0)
        state = est.state_
        entry = {"frame": i, "n_points": len(state)}
        if est.reports_ and prev_state is not None:
            rep = est.reports_[-1]
            entry.update(n_inliers=rep.n_inliers, optimize_ms=rep.optimize_ms, wall_ms=wall)
            iteration_ms.append({"frame": i, "n_points": rep.n_points,
                                 "optimize_ms": rep.optimize_ms, "wall_ms": wall})
            logger.info("frame %d: %d points, %d inliers, optimize %.1f ms, total %.1f ms",
                        i, rep.n_points, rep.n_inliers, rep.optimize_ms, wall)

        fdir = out / f"frame_{i:06d}"
        fdir.mkdir(exist_ok=True)
        write_rtf(state.points, fdir / "canonical.rtf", np.float32)
        if config.ply:
            write_ply(fdir / "mesh.ply", state.points, state.texture)
        if config.strain_csv and prev_state is not None:
            if config.strain_mode == "accumulative":
                disp, local = est.accumulative_deformation()
                start = est._start.points
                pts = RasterMap(disp.domain, start.values + disp.values, disp.mask)
                write_strain_csv(csv_path, strain_rows(i, pts, local), append=True)
            else:
                local = est.deformations_[-1].local
                write_strain_csv(csv_path, strain_rows(i - 1, prev_state.points, local), append=True)

        truth = ds.truth_points(i)
        if truth is not None:
            entry.update(_region_metrics(state.points, truth, _regions(bundle, state.params)))
        per_frame.append(entry)

    total_ms = 1e3 * (time.perf_counter() - t_start)
    opt = [t["optimize_ms"] for t in iteration_ms]
    payload = {
        "per_frame": per_frame,
        "aggregate": _aggregate(per_frame),
        "timing_ms": {
            "per_iteration": iteration_ms,
            "mean_optimize_ms": float(np.mean(opt)) if opt else None,
            "total_ms": total_ms,
        },
        "config": config.to_dict(),
    }
    manifest = {
        "frames": list(indices),
        "downsample": config.downsample,
        "dataset": str(Path(config.input_dir).resolve()),
        "config": config.to_dict(),
    }
    write_json(out / RUN_MANIFEST, manifest)
    if config.metrics_json:
        write_json(out / "metrics.json", payload)
    return payload


def cmd_run(args) -> int:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        "input_dir": args.input,
        "output_dir": args.out,
        "alpha": args.alpha,
        "strain_gate": args.strain_gate,
        "use_pose": args.use_pose,
        "downsample": args.downsample,
        "frames": parse_frame_range(args.frames),
        "strain_mode": args.strain_mode,
    }
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    for key in ("ply", "strain_csv", "metrics_json"):
        if getattr(args, f"no_{key}"):
            setattr(cfg, key, False)
    payload = run(cfg)
    agg = payload["aggregate"]
    if any(agg.values()):
        print(_format_table(payload["per_frame"], agg))
    print(f"processed {len(payload['per_frame'])} frames into {cfg.output_dir}")
    return EXIT_OK


# --- eval ---------------------------------------------------------------------

def _fmt(stats: dict | None) -> str:
    if not stats:
        return f"{'-':>8} {'-':>17}"
    return f"{stats['rmse']:8.4f} {stats['msd']:8.4f}±{stats['std']:<8.4f}"


def _format_table(per_frame: list[dict], aggregate: dict) -> str:
    head = f"{'frame':>6} | {'non-occluded rmse':>17} {'msd±std':>9} | {'occluded rmse':>13} {'msd±std':>9}"
    lines = [head, "-" * len(head)]
    for f in per_frame:
        lines.append(f"{f['frame']:>6} | {_fmt(f.get('non_occluded'))} | {_fmt(f.get('occluded'))}")
    lines.append("-" * len(head))
    lines.append(f"{'all':>6} | {_fmt(aggregate.get('non_occluded'))} | {_fmt(aggregate.get('occluded'))}")
    return "\n".join(lines)


def evaluate(run_dir, dataset_dir) -> dict:
    """Region-split accuracy of a finished run against dataset ground truth."""
    run_dir = Path(run_dir)
    mpath = run_dir / RUN_MANIFEST
    if not mpath.exists():
        raise CliError(f"missing file: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed run manifest {mpath}: {exc}") from exc
    frames = manifest["frames"]
    ds = load_dataset(dataset_dir, stride=int(manifest.get("downsample", 1)))
    have = sorted(p.name for p in run_dir.glob("frame_*") if (p / "canonical.rtf").exists())
    if len(have) != len(frames) or (frames and max(frames) >= ds.n_frames):
        raise CliError(
            f"frame-count mismatch: run has {len(have)} canonical frames for indices "
            f"{frames[0] if frames else '-'}..{frames[-1] if frames else '-'}, "
            f"dataset has {ds.n_frames} frames"
        )
    per_frame = []
    for i in frames:
        truth = ds.truth_points(i)
        if truth is None:
            raise CliError(f"missing file: {ds.root / f'frame_{i:06d}' / 'truth_points.rtf'}")
        points = read_rtf(run_dir / f"frame_{i:06d}" / "canonical.rtf").astype(np.float64)
        entry = {"frame": i}
        entry.update(_region_metrics(points, truth, _regions(ds.bundle(i), points.defined)))
        per_frame.append(entry)
    return {"per_frame": per_frame, "aggregate": _aggregate(per_frame)}


def cmd_eval(args) -> int:
    result = evaluate(args.run, args.dataset)
    print(_format_table(result["per_frame"], result["aggregate"]))
    out = Path(args.out) if args.out else Path(args.run) / "eval.json"
    write_json(out, result)
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deformrec", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("scenario", help=f"scenario name ({', '.join(sorted(SCENARIOS))}) or scene config JSON")
    s.add_argument("--frames", type=int, default=None, help="number of frames")
    s.add_argument("--seed", type=int, default=None, help="noise seed")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--allow-large-strain", action="store_true",
                   help="permit scripts exceeding the inter-frame strain limit")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="recover deformation over a dataset")
    r.add_argument("input", nargs="?", default=None, help="dataset directory")
    r.add_argument("--config", help="RunConfig JSON; flags override its values")
    r.add_argument("--out", default=None, help="output directory")
    r.add_argument("--alpha", type=float, default=None, help=f"local smoothness weight (default {ALPHA:g})")
    r.add_argument("--strain-gate", type=float, default=None,
                   help=f"inlier principal strain bound (default {STRAIN_GATE:g})")
    r.add_argument("--use-pose", action=argparse.BooleanOptionalAction, default=None,
                   help="bound occluded geometry by the instrument depth (default on)")
    r.add_argument("--downsample", type=int, default=None, help="keep every k-th pixel")
    r.add_argument("--frames", default=None, help="inclusive frame range A..B")
    r.add_argument("--seed", type=int, default=None, help="accepted for symmetry; the solver is deterministic")
    r.add_argument("--strain-mode", choices=("accumulative", "inter"), default=None)
    r.add_argument("--no-ply", action="store_true", help="skip mesh export")
    r.add_argument("--no-strain-csv", action="store_true", help="skip strain export")
    r.add_argument("--no-metrics-json", action="store_true", help="skip metrics export")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a run against dataset ground truth")
    e.add_argument("run", help="run output directory")
    e.add_argument("dataset", help="dataset directory with truth_points.rtf files")
    e.add_argument("--out", default=None, help="result JSON (default RUN/eval.json)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, DatasetError, RtfError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SolverError, InitializationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
