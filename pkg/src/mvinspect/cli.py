"""Command-line surface.

Subcommands: synth, estimate-f, mask, pretrain, build-bank, score, eval,
ablate, pipeline. Config files are strict JSON (unknown keys rejected);
command-line flags override file values which override defaults.

Exit codes: 0 success, 1 I/O failure, 2 validation/config error,
3 numeric failure (non-finite values mid-pipeline).
"""

import argparse
import datetime
import hashlib
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import ProjectionWeights, load_weights, save_weights
from .errors import IoError, NumericError, SchemaError, ValidationError
from .features import load_manifest, load_rig
from .geometry import (
    EpipolarMaskSet,
    PatchGrid,
    build_epipolar_mask,
    estimate_fundamental_8pt,
    mask_to_pgm,
)
from .membank import ScoreReport, bank_stats, load_bank, save_bank, score_sample
from .metrics import AblationSpec, default_ablation_specs, evaluate, run_ablation
from .pipeline import RunConfig, build_masks, fuse_tensors, prepare_weights, run_pipeline
from .pretrain import TrainConfig
from .synth import SceneConfig, synth_dataset

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

_SCENE_KEYS = {
    "seed", "views", "image_width", "image_height", "patch_size", "feature_dims",
    "surface_points", "anomaly_rate", "anomaly_radius", "noise_sigma",
    "camera_baseline", "n_train", "n_test",
}
_TRAIN_KEYS = {
    "learning_rate", "weight_decay", "epochs", "lambda", "n_k", "k_centers",
    "delta_patches", "batch_samples", "seed", "center_refresh", "masked_fill",
    "beta1", "beta2", "eps",
}
_RUN_KEYS = {
    "seed", "fusion", "pretraining", "bank", "mode", "ratio", "delta_patches",
    "refine", "alpha", "train",
}


def _read_json_strict(path, allowed: set, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: {what} must be a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise SchemaError(f"{path}: unknown {what} keys: {sorted(unknown)}")
    return obj


def _parse_delta(value):
    if value in ("inf", "Infinity", None):
        return math.inf if value is not None else None
    return float(value)


def load_scene_config(path) -> tuple:
    obj = _read_json_strict(path, _SCENE_KEYS, "scene config")
    try:
        grid = PatchGrid(int(obj["image_width"]), int(obj["image_height"]),
                         int(obj["patch_size"]))
        cfg = SceneConfig(
            seed=int(obj["seed"]),
            views=int(obj["views"]),
            grid=grid,
            feature_dims=int(obj["feature_dims"]),
            surface_points=int(obj.get("surface_points", 800)),
            anomaly_rate=float(obj.get("anomaly_rate", 0.5)),
            anomaly_radius=float(obj.get("anomaly_radius", 0.35)),
            noise_sigma=float(obj.get("noise_sigma", 0.05)),
            camera_baseline=float(obj.get("camera_baseline", 1.2)),
        )
        return cfg, int(obj.get("n_train", 200)), int(obj.get("n_test", 100))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: bad scene config: {exc}") from exc


def train_config_from_dict(obj: dict, base: TrainConfig = None) -> TrainConfig:
    base = base or TrainConfig()
    unknown = set(obj) - _TRAIN_KEYS
    if unknown:
        raise SchemaError(f"unknown train keys: {sorted(unknown)}")
    mapped = {("lam" if k == "lambda" else k): v for k, v in obj.items()}
    if "delta_patches" in mapped:
        mapped["delta_patches"] = _parse_delta(mapped["delta_patches"])
    try:
        return replace(base, **mapped)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad train config: {exc}") from exc


def load_run_config(path, overrides: dict = None) -> RunConfig:
    obj = _read_json_strict(path, _RUN_KEYS, "run config") if path else {}
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    merged = dict(obj)
    train_obj = merged.pop("train", {})
    if not isinstance(train_obj, dict):
        raise SchemaError("run config: 'train' must be an object")
    if "epochs" in overrides:
        train_obj = dict(train_obj, epochs=overrides.pop("epochs"))
    merged.update(overrides)
    if "delta_patches" in merged:
        merged["delta_patches"] = _parse_delta(merged["delta_patches"])
    try:
        cfg = RunConfig(
            seed=int(merged.get("seed", 0)),
            fusion=str(merged.get("fusion", "epipolar")),
            pretraining=str(merged.get("pretraining", "multi-center+reg")),
            bank=str(merged.get("bank", "per-view")),
            mode=str(merged.get("mode", "single-class")),
            ratio=(float(merged["ratio"]) if merged.get("ratio") is not None else None),
            delta_patches=float(merged.get("delta_patches", 1.0)),
            refine=bool(merged.get("refine", False)),
            alpha=float(merged.get("alpha", 0.5)),
            train=train_config_from_dict(train_obj),
        )
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad run config: {exc}") from exc
    return replace(cfg, train=replace(cfg.train, seed=cfg.seed))


def config_digest(cfg: RunConfig) -> str:
    payload = {
        "seed": cfg.seed, "fusion": cfg.fusion, "pretraining": cfg.pretraining,
        "bank": cfg.bank, "mode": cfg.mode, "ratio": cfg.ratio,
        "delta_patches": repr(cfg.delta_patches), "refine": cfg.refine,
        "alpha": cfg.alpha, "train": {k: repr(v) for k, v in vars(cfg.train).items()},
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_text(path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _load_inputs(args):
    manifest = load_manifest(args.manifest)
    rig_path = Path(args.rig) if getattr(args, "rig", None) else manifest.resolved_rig_path()
    rig = load_rig(rig_path)
    return manifest, rig


def _trace_csv(result) -> str:
    lines = ["epoch,pos_loss,neg_loss,total,collapse_indicator"]
    for row in result.loss_trace:
        lines.append("{epoch},{pos_loss:.9f},{neg_loss:.9f},{total:.9f},"
                     "{collapse_indicator:.9f}".format(**row))
    return "\n".join(lines) + "\n"


def _reports_csv(reports) -> str:
    lines = ["sample_id,score," + ",".join(
        f"view{v}_score" for v in range(len(reports[0].image_scores)))]
    for r in reports:
        views = ",".join(f"{float(s):.9f}" for s in r.image_scores)
        lines.append(f"{r.sample_id},{r.score:.9f},{views}")
    return "\n".join(lines) + "\n"


def _score_heatmap_pgm(token_scores: np.ndarray, grid: PatchGrid) -> bytes:
    arr = np.asarray(token_scores, dtype=np.float64).reshape(grid.grid_h, grid.grid_w)
    top = arr.max()
    scaled = np.zeros_like(arr) if top <= 0 else arr / top * 255.0
    img = np.rint(scaled).astype(np.uint8)
    header = f"P5\n{grid.grid_w} {grid.grid_h}\n255\n".encode("ascii")
    return header + img.tobytes()


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg, n_train, n_test = load_scene_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    synth_dataset(cfg, n_train, n_test, out)
    print(f"wrote {n_train} train / {n_test} test samples to {out}")
    return EXIT_OK


def cmd_estimate_f(args) -> int:
    obj = _read_json_strict(args.points, {"points_a", "points_b"}, "correspondences")
    try:
        pts_a = [tuple(map(float, p)) for p in obj["points_a"]]
        pts_b = [tuple(map(float, p)) for p in obj["points_b"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad correspondence file: {exc}") from exc
    if len(pts_a) != len(pts_b):
        raise SchemaError("points_a and points_b must have equal length")
    f = estimate_fundamental_8pt(list(zip(pts_a, pts_b)))
    payload = {"matrix": f.m.ravel().tolist(), "src_view": f.src_view,
               "dst_view": f.dst_view}
    _write_text(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"estimated fundamental matrix -> {args.out}")
    return EXIT_OK


def cmd_mask(args) -> int:
    rig = load_rig(args.rig)
    grid = PatchGrid(args.image_width, args.image_height, args.patch_size)
    try:
        view_a, view_b = args.pair.split(",")
    except ValueError:
        raise SchemaError(f"--pair must be 'viewA,viewB', got {args.pair!r}") from None
    if (view_a, view_b) not in rig.fundamental:
        raise SchemaError(f"rig has no pair ({view_a}, {view_b}); "
                          f"views are {rig.view_ids}")
    mask = build_epipolar_mask(grid, rig.fundamental[(view_a, view_b)],
                               _parse_delta(args.delta))
    try:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_bytes(mask_to_pgm(mask))
    except OSError as exc:
        raise IoError(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {mask.shape[0]}x{mask.shape[1]} mask ({int(mask.sum())} ones) -> {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .pretrain import train

    manifest, rig = _load_inputs(args)
    base = TrainConfig(seed=args.seed if args.seed is not None else 0)
    cfg = train_config_from_dict(
        _read_json_strict(args.config, _TRAIN_KEYS, "train config") if args.config else {},
        base)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    result = train(manifest, rig, cfg)
    save_weights(result.weights, args.out)
    if args.trace:
        _write_text(args.trace, _trace_csv(result))
    print(f"trained {cfg.epochs} epochs; final loss "
          f"{result.loss_trace[-1]['total']:.6f} -> {args.out}")
    return EXIT_OK


def cmd_build_bank(args) -> int:
    manifest, rig = _load_inputs(args)
    cfg = load_run_config(args.config, _run_overrides(args))
    weights = load_weights(args.weights) if args.weights else None
    if cfg.fusion != "none" and weights is None:
        raise SchemaError("--weights is required unless fusion is 'none'")
    masks = build_masks(manifest, rig, cfg) if cfg.fusion != "none" else None
    z_train = np.stack([_sample_data(manifest, s) for s in manifest.train_samples()])
    fused = fuse_tensors(z_train, masks, weights)
    per_view = {v: fused[:, v].reshape(-1, fused.shape[-1])
                for v in range(fused.shape[1])}
    from .membank import build_bank
    bank = build_bank(per_view, cfg.effective_ratio, cfg.seed, mode=cfg.bank)
    save_bank(bank, args.out)
    print(json.dumps(bank_stats(bank), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_score(args) -> int:
    manifest, rig = _load_inputs(args)
    cfg = load_run_config(args.config, _run_overrides(args))
    bank = load_bank(args.bank_dir)
    weights = load_weights(args.weights) if args.weights else None
    if cfg.fusion != "none" and weights is None:
        raise SchemaError("--weights is required unless fusion is 'none'")
    masks = build_masks(manifest, rig, cfg) if cfg.fusion != "none" else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for sample in manifest.test_samples():
        z = _sample_data(manifest, sample)[None]
        fused = fuse_tensors(z, masks, weights)[0]
        if not np.all(np.isfinite(fused)):
            raise NumericError(f"non-finite fused features for {sample.sample_id}")
        report = score_sample(sample.sample_id, fused, bank, masks=masks,
                              alpha=cfg.alpha, refine=cfg.refine and masks is not None,
                              metadata={"delta_patches": repr(cfg.effective_delta),
                                        "fusion": cfg.fusion, "bank": cfg.bank})
        reports.append(report)
        _write_text(out / f"sample_{sample.sample_id}.json",
                    json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
        if args.heatmaps:
            for v in range(report.token_scores.shape[0]):
                pgm = _score_heatmap_pgm(report.token_scores[v], manifest.grid)
                (out / f"heatmap_{sample.sample_id}_v{v}.pgm").write_bytes(pgm)
    _write_text(out / "scores.csv", _reports_csv(reports))
    print(f"scored {len(reports)} samples -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    score_dir = Path(args.scores)
    reports = []
    for sample in manifest.test_samples():
        path = score_dir / f"sample_{sample.sample_id}.json"
        if not path.exists():
            raise SchemaError(f"missing score record {path}")
        reports.append(ScoreReport.from_json_dict(json.loads(path.read_text())))
    table = evaluate(manifest, reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "metrics.csv", table.to_csv())
    _write_text(out / "metrics.json",
                json.dumps(table.to_json_dict(), indent=2, sort_keys=True) + "\n")
    print(table.to_csv(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    manifest, rig = _load_inputs(args)
    cfg = load_run_config(args.config, _run_overrides(args))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0, 1, 2, 3, 4]
    result = run_ablation(manifest, rig, default_ablation_specs(), seeds, run_config=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "ablation.csv", result.to_csv())
    medians = {spec.name: result.median_image_auroc(spec)
               for spec in default_ablation_specs()}
    _write_text(out / "ablation_medians.json",
                json.dumps(medians, indent=2, sort_keys=True) + "\n")
    print(json.dumps(medians, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    manifest, rig = _load_inputs(args)
    cfg = load_run_config(args.config, _run_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_pipeline(manifest, rig, cfg)

    artifacts = {}
    if result.weights is not None:
        save_weights(result.weights, out / "weights.mvft")
        artifacts["weights"] = "weights.mvft"
    if result.train_result is not None:
        _write_text(out / "train_trace.csv", _trace_csv(result.train_result))
        artifacts["train_trace"] = "train_trace.csv"
    save_bank(result.bank, out / "bank")
    artifacts["bank"] = "bank"
    score_dir = out / "scores"
    score_dir.mkdir(exist_ok=True)
    for report in result.reports:
        _write_text(score_dir / f"sample_{report.sample_id}.json",
                    json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    _write_text(score_dir / "scores.csv", _reports_csv(result.reports))
    artifacts["scores"] = "scores"
    _write_text(out / "metrics.csv", result.metrics.to_csv())
    _write_text(out / "metrics.json",
                json.dumps(result.metrics.to_json_dict(), indent=2, sort_keys=True) + "\n")
    artifacts["metrics"] = "metrics.csv"

    summary = {
        "config_hash": config_digest(cfg),
        "seed": cfg.seed,
        "versions": {
            "mvinspect": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "artifacts": artifacts,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _write_text(out / "run_summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(result.metrics.to_csv(), end="")
    return EXIT_OK


def _sample_data(manifest, sample):
    from .features import load_sample_tensor
    return load_sample_tensor(manifest, sample).data


def _run_overrides(args) -> dict:
    keys = ("seed", "fusion", "pretraining", "bank", "mode", "ratio",
            "delta_patches", "refine", "alpha", "epochs")
    out = {}
    for key in keys:
        val = getattr(args, key if key != "delta_patches" else "delta", None)
        if val is not None:
            out[key] = _parse_delta(val) if key == "delta_patches" else val
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvinspect",
        description="Epipolar-guided multi-view anomaly detection pipeline")
    parser.add_argument("--threads", type=int, default=1,
                        help="cap on worker threads (runs are single-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-view dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate-f", help="eight-point fundamental matrix from points")
    p.add_argument("--points", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_estimate_f)

    p = sub.add_parser("mask", help="export one epipolar attention mask as PGM")
    p.add_argument("--rig", required=True)
    p.add_argument("--image-width", type=int, required=True)
    p.add_argument("--image-height", type=int, required=True)
    p.add_argument("--patch-size", type=int, required=True)
    p.add_argument("--delta", default="1")
    p.add_argument("--pair", required=True, help="viewA,viewB")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("pretrain", help="pretrain fusion weights")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rig")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_pretrain)

    def add_run_flags(p):
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--fusion", choices=["none", "unmasked", "epipolar"])
        p.add_argument("--pretraining")
        p.add_argument("--bank-mode", dest="bank", choices=["per-view", "shared"])
        p.add_argument("--mode", choices=["single-class", "multi-class"])
        p.add_argument("--ratio", type=float)
        p.add_argument("--delta")
        p.add_argument("--refine", action="store_const", const=True, default=None)
        p.add_argument("--alpha", type=float)
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("build-bank", help="build per-view memory banks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rig")
    p.add_argument("--weights")
    p.add_argument("--out", required=True)
    add_run_flags(p)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("score", help="score test samples against a bank")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rig")
    p.add_argument("--bank", dest="bank_dir", required=True)
    p.add_argument("--weights")
    p.add_argument("--out", required=True)
    p.add_argument("--heatmaps", action="store_true")
    add_run_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="compute metrics from score records")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the fusion/pretraining ablation matrix")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rig")
    p.add_argument("--seeds", help="comma-separated, default 0,1,2,3,4")
    p.add_argument("--out", required=True)
    add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("pipeline", help="pretrain -> build-bank -> score -> eval")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rig")
    p.add_argument("--out", required=True)
    add_run_flags(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except IoError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
