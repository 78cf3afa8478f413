"""Command-line entry point: ``lidar-realism <command> [options]``.

Every command accepts ``--config`` (YAML or JSON mapping), ``--seed`` and
``--out``. Flags override config-file values; the merged result is written
to ``<out>/resolved_config.json`` before any work starts.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import datagen, metric, upsample
from .baselines import evaluate_pairs
from .geom import (ProjectionModel, backproject, load_range_image, project_cylindrical,
                   read_kitti_bin, save_range_image, write_kitti_bin, write_ply)
from .nn.checkpoint import CheckpointError
from .nn.ops import NonFiniteError

log = logging.getLogger("lidar_realism")

DEFAULT_LAMBDAS = [0.001, 0.01, 0.1, 0.3, 1.0, 3.0, 10.0]


class UsageError(Exception):
    """Bad flags, bad config values, or inputs that do not fit together."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- configuration ------------------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {p} not found")
    text = p.read_text()
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot parse {p}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"{p} must hold a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(args, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    from_file = _load_config(args.config)
    unknown = set(from_file) - set(defaults) - {"seed", "out"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg.update(from_file)
    for key, val in vars(args).items():
        if key in ("config", "command", "func", "verbose") or val is None:
            continue
        cfg[key] = val
    cfg.setdefault("seed", 0)
    if cfg.get("out") is None:
        raise UsageError("--out is required (flag or config key)")
    return cfg


def _snapshot(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    snap = out / "resolved_config.json"
    tmp = snap.with_name(snap.name + ".tmp")
    tmp.write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True, default=str))
    tmp.replace(snap)
    return out


def _projection(cfg) -> ProjectionModel:
    return ProjectionModel(int(cfg["height"]), int(cfg["width"]), math.radians(cfg["elevation_min_deg"]),
                           math.radians(cfg["elevation_max_deg"]))


def _arch(cfg) -> metric.MetricArchConfig:
    preset = cfg["arch"]
    if preset not in ("desk", "full"):
        raise UsageError("arch must be 'desk' or 'full'")
    over = {k: int(cfg[k]) for k in ("q1", "k1", "q2", "k2") if cfg.get(k) is not None}
    try:
        return metric.MetricArchConfig.desk(**over) if preset == "desk" else metric.MetricArchConfig(**over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _manifest(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.jsonl"
    if not p.is_file():
        raise FileNotFoundError(f"dataset manifest {p} not found")
    return p


def _parse_counts(text):
    if isinstance(text, dict):
        return {k: int(v) for k, v in text.items()}
    out = {}
    for part in str(text).split(","):
        name, _, n = part.partition("=")
        if name.strip() not in datagen.SPLITS or not n:
            raise UsageError(f"bad count spec {part!r}; use train=200,val=25,test=50")
        out[name.strip()] = int(n)
    return out


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


# --- commands -------------------------------------------------------------------------

PROJECTION_DEFAULTS = {"height": 32, "width": 128, "elevation_min_deg": -25.0, "elevation_max_deg": 3.0}
ARCH_DEFAULTS = {"arch": "desk", "q1": None, "k1": None, "q2": None, "k2": None}
TRAIN_DEFAULTS = {"steps": 2000, "batch_size": 6, "log_every": 100, "lr": 1e-3, "val_limit": None}


def cmd_generate(cfg):
    out = _snapshot(cfg, "generate")
    registry = datagen.default_registry()
    if cfg.get("registry"):
        registry = datagen.registry_from_json(json.loads(Path(cfg["registry"]).read_text()))
    counts = _parse_counts(cfg["counts"])
    manifest = datagen.materialize_registry(registry, counts, int(cfg["seed"]), out, _projection(cfg))
    print(f"wrote {len(datagen.read_manifest(manifest))} samples; manifest {manifest}")


def _load_training_data(cfg):
    if not cfg.get("data"):
        raise UsageError("--data is required")
    manifest = _manifest(cfg["data"])
    train = datagen.load_split(manifest, "train")
    if not train:
        raise FileNotFoundError(f"{manifest} has no training split")
    val = datagen.load_split(manifest, "val") or train[: max(1, len(train) // 10)]
    return train, val


def _train_one(cfg, arch, lam, train, val, hoods, out: Path, tag=""):
    settings = metric.TrainSettings(steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]),
                                    log_every=int(cfg["log_every"]), base_lr=float(cfg["lr"]),
                                    val_limit=cfg["val_limit"])
    res = metric.train_metric(train, val, arch, lam=lam, seed=int(cfg["seed"]), settings=settings,
                              train_hoods=hoods[0], val_hoods=hoods[1])
    metric.save_metric(out / f"metric{tag}.ckpt", res.params, arch, res.meta)
    metric.write_history(out / f"history{tag}.csv", res.history)
    return res


def cmd_train_metric(cfg):
    out = _snapshot(cfg, "train-metric")
    arch = _arch(cfg)
    train, val = _load_training_data(cfg)
    hoods = ([metric.build_neighborhoods(s.cloud, arch) for s in train],
             [metric.build_neighborhoods(s.cloud, arch) for s in val])
    res = _train_one(cfg, arch, float(cfg["lam"]), train, val, hoods, out)
    last = res.history[-1]
    print(f"lambda={cfg['lam']} classifier_acc={last['classifier_acc']:.3f} "
          f"adv_weighted_acc={last['adv_weighted_acc']:.3f}; checkpoint {out / 'metric.ckpt'}")


def cmd_sweep_lambda(cfg):
    out = _snapshot(cfg, "sweep-lambda")
    arch = _arch(cfg)
    lams = _floats(cfg["lambdas"])
    if not lams or min(lams) < 0:
        raise UsageError("lambdas must be a non-empty list of non-negative numbers")
    train, val = _load_training_data(cfg)
    hoods = ([metric.build_neighborhoods(s.cloud, arch) for s in train],
             [metric.build_neighborhoods(s.cloud, arch) for s in val])
    for lam in lams:
        res = _train_one(cfg, arch, lam, train, val, hoods, out, tag=f"_lam{lam:g}")
        last = res.history[-1]
        print(f"lambda={lam:g} classifier_acc={last['classifier_acc']:.3f} "
              f"adv_weighted_acc={last['adv_weighted_acc']:.3f}")


def _scene_files(folder: Path):
    """Scene files in a folder; a range image wins over a cloud with the same stem."""
    by_stem = {}
    for q in sorted(folder.iterdir()):
        if q.suffix in (".bin", ".npz") and (q.stem not in by_stem or q.suffix == ".npz"):
            by_stem[q.stem] = q
    return [by_stem[k] for k in sorted(by_stem)]


def _scene_inputs(cfg):
    """(scene_id, PointCloud) from a manifest split or from .bin/.npz paths."""
    if cfg.get("data"):
        manifest = _manifest(cfg["data"])
        return [(s.name, s.cloud) for s in datagen.load_split(manifest, cfg["split"])]
    inputs = cfg.get("inputs") or []
    if not inputs:
        raise UsageError("give --data with --split, or input files/directories")
    files = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            files += _scene_files(p)
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"input {p} not found")
    scenes = []
    for f in files:
        cloud = backproject(load_range_image(f)) if f.suffix == ".npz" else read_kitti_bin(f)
        scenes.append((f.stem, cloud))
    return scenes


def _load_checked_metric(cfg):
    expected = _arch(cfg) if cfg.get("check_arch") else None
    try:
        return metric.load_metric(cfg["checkpoint"], expected)
    except CheckpointError as exc:
        raise UsageError(f"architecture mismatch: {exc}") from exc


def cmd_score(cfg):
    out = _snapshot(cfg, "score")
    params, arch, _ = _load_checked_metric(cfg)
    scenes = _scene_inputs(cfg)
    scored = []
    for sid, cloud in scenes:
        if len(cloud) < arch.k1:
            raise UsageError(f"scene {sid} has {len(cloud)} points, fewer than k1={arch.k1}")
        scored.append((sid, metric.score_scene(cloud, params, arch)))
    metric.write_scores(out / "scores.csv", scored, out / "per_query.csv" if cfg["per_query"] else None)
    if cfg["ply"]:
        ply_dir = out / "ply"
        ply_dir.mkdir(exist_ok=True)
        for sid, s in scored:
            write_ply(ply_dir / (sid.replace("/", "_") + ".ply"), s.query_points, metric.score_colors(s.per_query))
    mean = np.mean([s.scene for _, s in scored], axis=0)
    print(f"scored {len(scored)} scenes; mean S real={mean[0]:.3f} syn={mean[1]:.3f} misc={mean[2]:.3f}")


def cmd_export_features(cfg):
    out = _snapshot(cfg, "export-features")
    params, arch, _ = _load_checked_metric(cfg)
    samples = datagen.load_split(_manifest(cfg["data"]), cfg["split"])
    n = metric.export_features(samples, params, arch, out / "features.csv")
    print(f"wrote {n} feature rows")


def _aligned(pred_dir, target_dir):
    pred = {p.stem: p for p in sorted(Path(pred_dir).glob("*.npz"))}
    target = {p.stem: p for p in sorted(Path(target_dir).glob("*.npz"))}
    if not pred:
        raise UsageError(f"no .npz range images in {pred_dir}")
    if set(pred) != set(target):
        missing = sorted(set(pred) ^ set(target))[:5]
        raise UsageError(f"prediction and target scenes differ, e.g. {missing}")
    return [(k, load_range_image(pred[k]), load_range_image(target[k])) for k in sorted(pred)]


def cmd_eval_baselines(cfg):
    out = _snapshot(cfg, "eval-baselines")
    rep = evaluate_pairs(_aligned(cfg["pred"], cfg["target"]), cfg["method"])
    rep.write(out / "baselines.csv")
    for m, agg in rep.aggregate().items():
        cd, mae, mse = agg["mean"]
        print(f"{m}: CD={cd:.4f} MAE={mae:.4f} MSE={mse:.4f}")


def cmd_upsample(cfg):
    mode = cfg["mode"]
    if mode not in ("nearest", "bilinear", "l1", "l2", "gan"):
        raise UsageError(f"unknown mode {mode!r}")
    if mode in ("l1", "l2", "gan") and not cfg.get("checkpoint"):
        raise UsageError(f"mode {mode} needs --checkpoint")
    out = _snapshot(cfg, "upsample")
    f_up = int(cfg["f_up"])
    sr = upsample.load_upsampler(cfg["checkpoint"]) if cfg.get("checkpoint") else None
    if sr is not None and sr.config.f_up != f_up:
        raise UsageError(f"checkpoint was trained for f_up={sr.config.f_up}")
    model = _projection(cfg)
    files = []
    for item in cfg.get("inputs") or []:
        p = Path(item)
        files += _scene_files(p) if p.is_dir() else [p]
    if not files:
        raise UsageError("no input scenes")
    for f in files:
        image = load_range_image(f) if f.suffix == ".npz" else project_cylindrical(read_kitti_bin(f), model)
        if cfg["pair"]:
            image = upsample.make_lr(image, f_up)
        if mode == "nearest":
            hr = upsample.upsample_nearest(image, f_up)
        elif mode == "bilinear":
            hr = upsample.upsample_bilinear(image, f_up)
        else:
            hr = upsample.sr_generator_forward(image, sr.generator, sr.config, sr.gen_bn)
        save_range_image(out / f"{f.stem}.npz", hr)
        write_kitti_bin(backproject(hr), out / f"{f.stem}.bin")
    print(f"up-sampled {len(files)} scenes with {mode}")


def _synthetic_pairs(kind, n, seed, model, f_up, offset=0):
    pairs = []
    for i in range(n):
        gc = datagen.GeneratorConfig(kind, datagen.sample_seed(seed, offset, "train", i), model)
        hr = datagen.pseudoreal_image(gc) if kind == "PseudoReal" else datagen.geoset_image(gc)
        pairs.append((upsample.make_lr(hr, f_up), hr))
    return pairs


def cmd_train_upsampler(cfg):
    mode = cfg["mode"]
    if mode not in ("l1", "l2", "gan"):
        raise UsageError(f"unknown training mode {mode!r}")
    out = _snapshot(cfg, "train-upsampler")
    try:
        ucfg = upsample.UpsampleConfig.desk(
            f_up=int(cfg["f_up"]), residual_blocks=int(cfg["residual_blocks"]), channels=int(cfg["channels"]),
            steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]), seed=int(cfg["seed"]),
            crop_width=cfg["crop_width"], alpha=2 if mode == "l2" else 1)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = _projection(cfg)
    if cfg.get("data"):
        files = sorted(Path(cfg["data"]).glob("*.npz"))
        if not files:
            raise FileNotFoundError(f"no .npz range images in {cfg['data']}")
        pairs = [(upsample.make_lr(img, ucfg.f_up), img) for img in map(load_range_image, files)]
    else:
        pairs = _synthetic_pairs(cfg["kind"], int(cfg["n_train"]), int(cfg["seed"]), model, ucfg.f_up)
    sr = upsample.train_upsampler(pairs, ucfg, mode)
    upsample.save_upsampler(out / "upsampler.ckpt", sr)
    keys = sorted({k for row in sr.history for k in row})
    metric._write_csv(out / "history.csv", keys, [[row.get(k, "") for k in keys] for row in sr.history])
    print(f"trained {mode} up-sampler for {ucfg.steps} steps; checkpoint {out / 'upsampler.ckpt'}")


# --- parser ---------------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="YAML or JSON file with option values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _projection_flags(p):
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)


def _arch_flags(p):
    p.add_argument("--arch", choices=["desk", "full"])
    for k in ("q1", "k1", "q2", "k2"):
        p.add_argument(f"--{k}", type=int)


def _train_flags(p):
    p.add_argument("--data", help="dataset directory or manifest")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--val-limit", type=int)


COMMANDS = {}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lidar-realism", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, defaults, help_):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.set_defaults(func=func)
        COMMANDS[name] = defaults
        return p

    p = add("generate", cmd_generate, {**PROJECTION_DEFAULTS, "counts": "train=200,val=25,test=50",
                                       "registry": None}, "materialize a synthetic dataset registry")
    _projection_flags(p)
    p.add_argument("--counts", help="samples per dataset and split, e.g. train=200,val=25,test=50")
    p.add_argument("--registry", help="JSON registry file (default: built-in registry)")

    p = add("train-metric", cmd_train_metric, {**ARCH_DEFAULTS, **TRAIN_DEFAULTS, "data": None, "lam": 0.3},
            "train the realism metric")
    _arch_flags(p)
    _train_flags(p)
    p.add_argument("--lam", type=float, help="gradient reversal factor (default 0.3)")

    p = add("sweep-lambda", cmd_sweep_lambda, {**ARCH_DEFAULTS, **TRAIN_DEFAULTS, "data": None,
                                                "lambdas": DEFAULT_LAMBDAS}, "train once per lambda value")
    _arch_flags(p)
    _train_flags(p)
    p.add_argument("--lambdas", help="comma separated list")

    score_defaults = {**ARCH_DEFAULTS, "checkpoint": None, "data": None, "split": "test", "inputs": None,
                      "ply": False, "per_query": False, "check_arch": False}
    p = add("score", cmd_score, score_defaults, "score scenes with a trained metric")
    _arch_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split")
    p.add_argument("inputs", nargs="*", default=None)
    p.add_argument("--ply", action="store_true", default=None, help="write colored query points per scene")
    p.add_argument("--per-query", action="store_true", default=None)
    p.add_argument("--check-arch", action="store_true", default=None,
                   help="fail unless the checkpoint matches the configured architecture")

    p = add("export-features", cmd_export_features, {**ARCH_DEFAULTS, "checkpoint": None, "data": None,
                                                      "split": "test", "check_arch": False},
            "write per-query feature vectors")
    _arch_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--check-arch", action="store_true", default=None)

    p = add("eval-baselines", cmd_eval_baselines, {"pred": None, "target": None, "method": "pred"},
            "Chamfer/MAE/MSE between aligned range-image folders")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--method")

    p = add("upsample", cmd_upsample, {**PROJECTION_DEFAULTS, "mode": "bilinear", "f_up": 4, "checkpoint": None,
                                       "inputs": None, "pair": False}, "vertically up-sample range images")
    _projection_flags(p)
    p.add_argument("--mode", choices=["nearest", "bilinear", "l1", "l2", "gan"])
    p.add_argument("--f-up", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--pair", action="store_true", default=None,
                   help="inputs are high resolution; subsample them first")
    p.add_argument("inputs", nargs="*", default=None)

    p = add("train-upsampler", cmd_train_upsampler,
            {**PROJECTION_DEFAULTS, "mode": "l1", "f_up": 4, "residual_blocks": 4, "channels": 32, "steps": 1000,
             "batch_size": 8, "crop_width": 32, "data": None, "kind": "GeoSet", "n_train": 200},
            "train the learned up-sampler")
    _projection_flags(p)
    p.add_argument("--mode", choices=["l1", "l2", "gan"])
    p.add_argument("--f-up", type=int)
    p.add_argument("--residual-blocks", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop-width", type=int)
    p.add_argument("--data", help="folder of high-resolution .npz range images")
    p.add_argument("--kind", choices=["GeoSet", "PseudoReal"])
    p.add_argument("--n-train", type=int)
    return parser


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args, COMMANDS[args.command])
        args.func(cfg)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, TypeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
