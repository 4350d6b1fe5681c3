"""Command-line front end for phantom generation, training, detection,
evaluation and the benchmark harnesses.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.
Output directories resolve as: --out flag, then the config's output_dir,
then $ITN_OUT_DIR, then the working directory.  phantom-gen and detect
parallelize across volumes with --jobs; outputs stay deterministic because
every file is keyed by volume index and the collector preserves order.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    HEAD_CHOICES,
    ORACLE_KINDS,
    detect_seed,
    heads_flags,
    model_init_seed,
    oracle_seed,
    phantom_seed,
    train_stream_seed,
)
from .figures import save_comparison_figure, save_convergence_figure, save_loss_curve_figure
from .inference import multi_init_infer, write_trajectories_csv
from .metrics import evaluate_plane, report_row, write_report_csv
from .nets import RegressorModel
from .phantom import generate_phantom
from .predictor import ExactOracle, NetworkPredictor, NoisyOracle
from .training import TrainingDivergedError, phantom_stream, train
from .transforms import load_transforms, save_transforms
from .volume import extract_plane, read_volume, write_plane_pgm, write_volume

REPRESENTATIONS = ("quat", "euler", "matrix", "anchors")
CONF_BENCH_ROWS = ("M1", "M2", "M3", "M4")


# --- shared plumbing --------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if getattr(args, "config", None) else ExperimentConfig()
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        mode=getattr(args, "mode", None),
        heads=getattr(args, "heads", None),
        oracle_kind=getattr(args, "oracle", None),
    )


def _resolve_out(args, cfg: ExperimentConfig) -> Path:
    out = getattr(args, "out", None) or cfg.output_dir or os.environ.get("ITN_OUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_manifest(path: Path) -> list[dict]:
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    base = path.parent
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"manifest is empty: {path}")
    for row in rows:
        row["volume"] = str(base / row["volume"])
        row["gt"] = str(base / row["gt"])
    return rows


def _load_dataset(rows: list[dict]):
    dataset = []
    for row in rows:
        volume = read_volume(row["volume"])
        t_gt = load_transforms(row["gt"])[0]
        dataset.append((row["id"], volume, t_gt))
    return dataset


def _manifest_arg(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return Path(cfg.volumes_dir) / "manifest.csv"


def _pool_map(func, work, jobs: int):
    if jobs <= 1 or len(work) <= 1:
        return [func(item) for item in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(func, work))


# --- phantom-gen ------------------------------------------------------------

def _phantom_gen_worker(item) -> dict:
    spec_json, out_dir, index = item
    from .phantom import PhantomSpec  # local import keeps the worker self-contained

    spec = PhantomSpec.from_json(spec_json)
    volume, t_gt = generate_phantom(spec)
    vol_name = f"vol_{index:04d}.vol"
    gt_name = f"vol_{index:04d}.gt.txt"
    write_volume(Path(out_dir) / vol_name, volume)
    save_transforms(Path(out_dir) / gt_name, [t_gt])
    return {"id": f"vol_{index:04d}", "volume": vol_name, "gt": gt_name}


def cmd_phantom_gen(args) -> int:
    cfg = _load_config(args)
    out = _resolve_out(args, cfg)
    count = args.count if getattr(args, "count", None) is not None else cfg.volume_count
    work = []
    for i in range(count):
        spec = dataclasses.replace(cfg.phantom, seed=phantom_seed(cfg.seed, i))
        work.append((spec.to_json(), str(out), i))
    rows = _pool_map(_phantom_gen_worker, work, getattr(args, "jobs", 1))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "volume", "gt"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {count} phantom volume(s) to {out}")
    return 0


# --- train ------------------------------------------------------------------

def _build_model(cfg: ExperimentConfig) -> RegressorModel:
    with_p, with_q, triplet = heads_flags(cfg.heads)
    return RegressorModel(
        mode=cfg.mode,
        with_trans_probs=with_p,
        with_rot_probs=with_q,
        input_size=cfg.inference.plane_size,
        triplet=triplet,
        seed=model_init_seed(cfg.seed),
    )


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if getattr(args, "steps", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=args.steps))
    out = _resolve_out(args, cfg)
    rows = _read_manifest(_manifest_arg(args, cfg))
    dataset = [(volume, t_gt) for _, volume, t_gt in _load_dataset(rows)]
    model = _build_model(cfg)
    stream = phantom_stream(
        dataset, cfg.inference.plane_size, train_stream_seed(cfg.seed), triplet=model.triplet
    )
    started = time.perf_counter()
    model, history = train(stream, model, cfg.train, loss_csv=out / "loss.csv")
    elapsed = time.perf_counter() - started
    model_path = out / (getattr(args, "model_name", None) or Path(cfg.model_path).name)
    model.save(model_path)
    save_loss_curve_figure(out / "loss.png", range(len(history)), [h.total for h in history])
    print(
        f"trained {cfg.heads}/{cfg.mode} for {cfg.train.steps} steps in {elapsed:.1f}s; "
        f"checkpoint at {model_path}"
    )
    return 0


# --- detect -----------------------------------------------------------------

def _load_checked_model(cfg: ExperimentConfig, args, model_path: str) -> RegressorModel:
    model = RegressorModel.load(model_path)
    if getattr(args, "heads", None) is not None:
        with_p, with_q, triplet = heads_flags(cfg.heads)
        if (model.with_trans_probs, model.with_rot_probs, model.triplet) != (with_p, with_q, triplet):
            raise ConfigError(f"checkpoint heads do not match --heads {cfg.heads}")
    if getattr(args, "mode", None) is not None and model.mode != cfg.mode:
        raise ConfigError(f"checkpoint mode {model.mode!r} does not match --mode {cfg.mode!r}")
    if model.input_size != cfg.inference.plane_size:
        raise ConfigError(
            f"checkpoint expects plane size {model.input_size}, config says {cfg.inference.plane_size}"
        )
    return model


def _make_oracle(cfg: ExperimentConfig, t_gt, volume_index: int):
    kind = cfg.oracle.kind
    if kind == "exact":
        return ExactOracle(t_gt, with_probs=cfg.oracle.with_probs)
    if kind == "capped":
        return ExactOracle(
            t_gt,
            cap_translation=cfg.oracle.cap_translation,
            cap_rotation_deg=cfg.oracle.cap_rotation_deg,
            with_probs=cfg.oracle.with_probs,
        )
    return NoisyOracle(
        t_gt,
        cfg.oracle.sigma_t,
        cfg.oracle.sigma_theta_deg,
        np.random.default_rng(oracle_seed(cfg.seed, volume_index)),
        label_eps=cfg.oracle.label_eps,
        with_probs=cfg.oracle.with_probs,
    )


def _detect_one(cfg: ExperimentConfig, predictor, vol_id, volume, t_gt, index, out: Path,
                dump_planes: bool) -> dict:
    icfg = dataclasses.replace(cfg.inference, seed=detect_seed(cfg.seed, index))
    started = time.perf_counter()
    result = multi_init_infer(volume, predictor, icfg, t_gt)
    wall = time.perf_counter() - started
    save_transforms(out / f"{vol_id}.pred.txt", [result.transform])
    if icfg.log_trajectory:
        write_trajectories_csv(out / f"{vol_id}.traj.csv", result.trajectories)
    if dump_planes:
        planes_dir = out / "planes"
        planes_dir.mkdir(exist_ok=True)
        for run_id, traj in enumerate(result.trajectories):
            for point in traj:
                img = extract_plane(volume, point.transform, icfg.plane_size)
                write_plane_pgm(planes_dir / f"{vol_id}_run{run_id}_it{point.iteration:02d}.pgm", img)
    return {"id": vol_id, "wall_seconds": f"{wall:.6f}", "low_confidence": int(result.low_confidence)}


def _detect_worker(item) -> dict:
    cfg, model_path, row, index, out_dir, dump = item
    volume = read_volume(row["volume"])
    t_gt = load_transforms(row["gt"])[0]
    if model_path:
        predictor = NetworkPredictor(RegressorModel.load(model_path))
    else:
        predictor = _make_oracle(cfg, t_gt, index)
    return _detect_one(cfg, predictor, row["id"], volume, t_gt, index, Path(out_dir), dump)


def _detect_rows(cfg: ExperimentConfig, model_path, manifest_rows, out: Path,
                 dump_planes: bool, jobs: int) -> list[dict]:
    work = [
        (cfg, model_path, row, index, str(out), dump_planes)
        for index, row in enumerate(manifest_rows)
    ]
    summary = _pool_map(_detect_worker, work, jobs)
    with open(out / "detect_summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "wall_seconds", "low_confidence"])
        writer.writeheader()
        writer.writerows(summary)
    return summary


def cmd_detect(args) -> int:
    cfg = _load_config(args)
    if not args.model and args.oracle is None:
        raise ConfigError("detect needs either --model or --oracle")
    out = _resolve_out(args, cfg)
    manifest_rows = _read_manifest(_manifest_arg(args, cfg))
    if args.model:
        _load_checked_model(cfg, args, args.model)  # validate before fanning out
    summary = _detect_rows(cfg, args.model, manifest_rows, out, args.dump_planes, args.jobs)
    mean_wall = float(np.mean([float(s["wall_seconds"]) for s in summary]))
    print(f"detected {len(summary)} plane(s); mean wall time {mean_wall:.3f}s per plane")
    return 0


# --- eval -------------------------------------------------------------------

def _convergence_from_trajectories(detections: Path, vol_ids: list[str]):
    """Per-iteration mean errors pooled over all runs with GT annotations."""
    dx_by_iter: dict[int, list[float]] = {}
    dth_by_iter: dict[int, list[float]] = {}
    for vol_id in vol_ids:
        traj_path = detections / f"{vol_id}.traj.csv"
        if not traj_path.exists():
            continue
        with open(traj_path, newline="") as fh:
            for row in csv.DictReader(fh):
                if not row["dx"]:
                    continue
                it = int(row["iter"])
                dx_by_iter.setdefault(it, []).append(float(row["dx"]))
                dth_by_iter.setdefault(it, []).append(float(row["dtheta"]))
    iters = sorted(dx_by_iter)
    dx_mean = [float(np.mean(dx_by_iter[i])) for i in iters]
    dth_mean = [float(np.mean(dth_by_iter[i])) for i in iters]
    return iters, dx_mean, dth_mean


def _evaluate_detections(cfg: ExperimentConfig, dataset, detections: Path):
    results = []
    details = []
    for vol_id, volume, t_gt in dataset:
        pred_path = detections / f"{vol_id}.pred.txt"
        if not pred_path.exists():
            raise ConfigError(f"missing detection output: {pred_path}")
        t_pred = load_transforms(pred_path)[0]
        res = evaluate_plane(t_pred, t_gt, volume, cfg.inference.plane_size)
        results.append(res)
        details.append({
            "id": vol_id,
            "dx": f"{res.dx:.9g}",
            "dtheta": f"{res.dtheta:.9g}",
            "normal_angle": f"{res.normal_angle:.9g}",
            "psnr": f"{res.psnr:.9g}",
            "ssim": f"{res.ssim:.9g}",
        })
    return results, details


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _resolve_out(args, cfg)
    detections = Path(args.detections) if args.detections else out
    manifest_rows = _read_manifest(_manifest_arg(args, cfg))
    dataset = _load_dataset(manifest_rows)
    results, details = _evaluate_detections(cfg, dataset, detections)

    with open(out / "detail.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "dx", "dtheta", "normal_angle", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(details)
    label = args.label or cfg.heads
    write_report_csv(out / "report.csv", [report_row(label, cfg.phantom.layout, results)])

    iters, dx_mean, dth_mean = _convergence_from_trajectories(detections, [d[0] for d in dataset])
    if iters:
        with open(out / "convergence.csv", "w", newline="") as fh:
            fh.write("iter,dx_mean,dtheta_mean\n")
            for i, dx, dth in zip(iters, dx_mean, dth_mean):
                fh.write(f"{i},{dx:.9g},{dth:.9g}\n")
        save_convergence_figure(out / "convergence.png", iters, dx_mean, dth_mean)
    print(f"evaluated {len(results)} plane(s); report at {out / 'report.csv'}")
    return 0


# --- benchmarks ---------------------------------------------------------------

def _check_shared_inits(detect_dirs: list[Path], vol_ids: list[str]) -> None:
    """Benchmark rows must start every run from identical poses."""
    reference: dict[str, list[str]] = {}
    for directory in detect_dirs:
        for vol_id in vol_ids:
            with open(directory / f"{vol_id}.traj.csv", newline="") as fh:
                inits = [
                    ",".join((row["tx"], row["ty"], row["tz"], row["qw"], row["qx"], row["qy"], row["qz"]))
                    for row in csv.DictReader(fh)
                    if row["iter"] == "0"
                ]
            if vol_id not in reference:
                reference[vol_id] = inits
            elif reference[vol_id] != inits:
                raise RuntimeError(f"benchmark rows disagree on initial poses for {vol_id}")


def _run_bench(args, rows_spec: list[tuple[str, str, str]]) -> int:
    """Train/detect/eval one row per (label, mode, heads) on a shared dataset."""
    cfg = _load_config(args)
    out = _resolve_out(args, cfg)

    dataset_dir = out / "dataset"
    gen_args = argparse.Namespace(config=args.config, seed=cfg.seed, count=cfg.volume_count,
                                  out=str(dataset_dir), jobs=args.jobs,
                                  mode=None, heads=None, oracle=None)
    cmd_phantom_gen(gen_args)
    all_rows = _read_manifest(dataset_dir / "manifest.csv")
    if cfg.eval_count >= len(all_rows) or cfg.eval_count < 1:
        raise ConfigError("eval_count must be at least 1 and smaller than volume_count")
    train_rows = all_rows[: len(all_rows) - cfg.eval_count]
    eval_rows = all_rows[len(all_rows) - cfg.eval_count :]
    train_set = [(volume, t_gt) for _, volume, t_gt in _load_dataset(train_rows)]
    eval_set = _load_dataset(eval_rows)

    report_rows = []
    detect_dirs = []
    for label, mode, heads in rows_spec:
        row_cfg = cfg.with_overrides(mode=mode, heads=heads)
        row_dir = out / label.replace("+", "plus")
        row_dir.mkdir(parents=True, exist_ok=True)

        model = _build_model(row_cfg)
        stream = phantom_stream(
            train_set, row_cfg.inference.plane_size, train_stream_seed(row_cfg.seed), triplet=model.triplet
        )
        model, _history = train(stream, model, row_cfg.train, loss_csv=row_dir / "loss.csv")
        model.save(row_dir / "model.itn")

        _detect_rows(row_cfg, str(row_dir / "model.itn"),
                     [dict(row) for row in eval_rows], row_dir, False, args.jobs)
        detect_dirs.append(row_dir)

        results, _ = _evaluate_detections(row_cfg, eval_set, row_dir)
        report_rows.append(report_row(label, row_cfg.phantom.layout, results))
        print(f"bench row {label}: dx {report_rows[-1]['dx_mean']:.3g} +/- {report_rows[-1]['dx_std']:.3g}, "
              f"dtheta {report_rows[-1]['dtheta_mean']:.3g} +/- {report_rows[-1]['dtheta_std']:.3g}")

    _check_shared_inits(detect_dirs, [r[0] for r in eval_set])
    write_report_csv(out / "report.csv", report_rows)
    save_comparison_figure(out / "comparison.png", report_rows)
    print(f"benchmark report at {out / 'report.csv'}")
    return 0


def cmd_rep_bench(args) -> int:
    return _run_bench(args, [(mode, mode, "M1") for mode in REPRESENTATIONS])


def cmd_conf_bench(args) -> int:
    rows = [(heads, "quat", heads) for heads in CONF_BENCH_ROWS]
    if args.with_triplet:
        rows.append(("M4+", "quat", "M4+"))
    return _run_bench(args, rows)


# --- entry point --------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes (1 = serial)")
    parser.add_argument("--out", help="output directory (falls back to config, then $ITN_OUT_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planefinder",
                                     description="Iterative plane detection in 3D volumes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate phantom volumes with known plane poses")
    _add_common(p)
    p.add_argument("--count", type=int, default=None, help="number of volumes")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", help="train a pose regressor on generated phantoms")
    _add_common(p)
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--mode", choices=REPRESENTATIONS, default=None)
    p.add_argument("--heads", choices=HEAD_CHOICES, default=None)
    p.add_argument("--steps", type=int, default=None, help="training steps (overrides config)")
    p.add_argument("--model-name", default=None, help="checkpoint filename")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run iterative plane detection")
    _add_common(p)
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--model", help="trained model checkpoint")
    p.add_argument("--oracle", nargs="?", const="exact", choices=ORACLE_KINDS, default=None,
                   help="use a ground-truth oracle predictor instead of a model")
    p.add_argument("--mode", choices=REPRESENTATIONS, default=None)
    p.add_argument("--heads", choices=HEAD_CHOICES, default=None)
    p.add_argument("--dump-planes", action="store_true", help="write per-iteration plane PGMs")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against ground truth")
    _add_common(p)
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--detections", help="directory with detect outputs (default: --out)")
    p.add_argument("--label", default=None, help="model_id column value")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rep-bench", help="compare the four transform representations")
    _add_common(p)
    p.set_defaults(func=cmd_rep_bench)

    p = sub.add_parser("conf-bench", help="compare confidence-head variants M1-M4(+)")
    _add_common(p)
    p.add_argument("--with-triplet", action="store_true", help="add the orthogonal-triplet row")
    p.set_defaults(func=cmd_conf_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
