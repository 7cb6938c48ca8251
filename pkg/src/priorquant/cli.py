"""Command-line entry point: simulate, train, restore, analyze-priors, metrics.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import io
from .analysis import analyze_priors
from .metrics import psnr, ssim
from .model import NetConfig, RestoreNet
from .optics import (
    NoiseParams,
    PsfModelParams,
    build_psf_grid,
    delta_psf_grid,
    make_pair,
    matched_response,
    save_psf_meta,
)
from .priors import MissingPriorError, SfrSpec, build_priors, load_prior_stack, save_prior_stack, zero_out
from .scenes import random_scene
from .train import DataError, NumericError, TrainConfig, load_dataset, train

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

SIM_DEFAULTS = {
    "n_scenes": 16,
    "height": 64,
    "width": 64,
    "seed": 0,
    "bands": 8,
    "n_spectral": 4,
    "psf": {
        **asdict(PsfModelParams()),
        "field_rows": 3,
        "field_cols": 3,
        "kernel_size": 15,
        "delta": False,
    },
    "noise": asdict(NoiseParams()),
    "sfr": {"frequencies": list(SfrSpec().frequencies), "orientations": list(SfrSpec().orientations)},
}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, given: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    for key, default in defaults.items():
        value = given.get(key, default)
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{prefix}{key}' must be an object")
            value = _merge(default, value, f"{prefix}{key}.")
        elif isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"config key '{prefix}{key}' must be a boolean")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key '{prefix}{key}' must be a number")
            if isinstance(default, int) and not isinstance(value, int):
                raise ConfigError(f"config key '{prefix}{key}' must be an integer")
        out[key] = value
    return out


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = io.read_json(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return cfg


def parse_sim_config(raw: dict) -> dict:
    cfg = _merge(SIM_DEFAULTS, raw)
    psf = cfg["psf"]
    checks = [
        (cfg["n_scenes"] >= 1, "n_scenes"),
        (cfg["height"] >= 11 and cfg["width"] >= 11, "height"),
        (cfg["bands"] >= 3, "bands"),
        (1 <= cfg["n_spectral"] <= cfg["bands"], "n_spectral"),
        (psf["kernel_size"] >= 1 and psf["kernel_size"] % 2 == 1, "psf.kernel_size"),
        (psf["field_rows"] >= 1 and psf["field_cols"] >= 1, "psf.field_rows"),
    ]
    for ok, key in checks:
        if not ok:
            raise ConfigError(f"invalid value for config key '{key}'")
    for section, build in (("psf", PsfModelParams), ("noise", NoiseParams), ("sfr", SfrSpec)):
        names = {f.name for f in fields(build)}
        try:
            build(**{k: v for k, v in cfg[section].items() if k in names})
        except ValueError as exc:
            raise ConfigError(f"invalid config section '{section}': {exc}") from exc
    return cfg


# --------------------------------------------------------------- commands


def cmd_simulate(config_path, out_dir, seed=None) -> Path:
    cfg = parse_sim_config(_read_config(config_path))
    if seed is not None:
        cfg["seed"] = seed
    out_dir = Path(out_dir)
    psf = cfg["psf"]
    params = PsfModelParams(**{k: psf[k] for k in asdict(PsfModelParams())})
    noise = NoiseParams(**cfg["noise"])
    sfr_spec = SfrSpec(tuple(cfg["sfr"]["frequencies"]), tuple(cfg["sfr"]["orientations"]))
    resp = matched_response(cfg["bands"])
    if psf["delta"]:
        grid = delta_psf_grid(psf["field_rows"], psf["field_cols"], cfg["bands"])
    else:
        grid = build_psf_grid(params, psf["field_rows"], psf["field_cols"], cfg["bands"], psf["kernel_size"])
    for msg in grid.warnings:
        logging.warning(msg)

    out_dir.mkdir(parents=True, exist_ok=True)
    io.write_json(out_dir / "sim_config.json", cfg)
    entries = []
    for i in range(cfg["n_scenes"]):
        scene_seed = 1000 * cfg["seed"] + i
        sharp = random_scene(cfg["height"], cfg["width"], scene_seed)
        pair = make_pair(sharp, params, resp, noise, scene_seed, grid=grid)
        stack = build_priors(pair.degraded, grid, noise, sfr_spec, cfg["n_spectral"])
        d = out_dir / f"scene_{i:03d}"
        d.mkdir(exist_ok=True)
        io.save_png(d / "sharp.png", pair.sharp)
        io.save_png(d / "degraded.png", pair.degraded)
        io.save_atsr(d / "sharp.atsr", pair.sharp.astype(np.float32))
        io.save_atsr(d / "degraded.atsr", pair.degraded.astype(np.float32))
        save_psf_meta(d / "psf.json", grid, None if psf["delta"] else params, resp, noise)
        save_prior_stack(d / "priors", stack)
        rel = lambda name: f"{d.name}/{name}"
        entries.append({
            "sharp_path": rel("sharp.atsr"),
            "degraded_path": rel("degraded.atsr"),
            "psf_meta_path": rel("psf.json"),
            "prior_path": rel("priors/manifest.json"),
            "seed": scene_seed,
        })
    manifest = out_dir / "manifest.json"
    io.write_json(manifest, entries)
    return manifest


def _train_configs(raw: dict, seed, samples) -> tuple[TrainConfig, NetConfig]:
    unknown = set(raw) - {"train", "net"}
    if unknown:
        raise ConfigError(f"unknown config key '{sorted(unknown)[0]}'")
    traw = dict(raw.get("train", {}))
    nraw = dict(raw.get("net", {}))
    if seed is not None:
        traw["seed"] = seed
    nraw.setdefault("prior_channels", {k: int(v.shape[0]) for k, v in samples[0].priors.planes().items()})
    known = {f.name for f in fields(NetConfig)}
    for key in nraw:
        if key not in known:
            raise ConfigError(f"unknown config key 'net.{key}'")
    try:
        return TrainConfig.from_dict(traw), NetConfig(**nraw)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train/net config: {exc}") from exc


def cmd_train(manifest, config_path, out_dir, seed=None):
    raw = _read_config(config_path)
    samples = load_dataset(manifest)
    tcfg, ncfg = _train_configs(raw, seed, samples)
    if tcfg.crop % ncfg.align_unit:
        raise ConfigError(f"invalid value for config key 'train.crop': not divisible by {ncfg.align_unit}")
    return train(manifest, tcfg, ncfg, out_dir, samples=samples)


def _load_checkpoint(path) -> RestoreNet:
    try:
        return RestoreNet.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_restore(checkpoint, image_path, prior_manifest, out_path, keep="all"):
    net = _load_checkpoint(checkpoint)
    try:
        degraded = io.load_image(image_path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {image_path}: {exc}") from exc
    try:
        stack = load_prior_stack(prior_manifest)
    except MissingPriorError as exc:
        raise DataError(str(exc)) from exc
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read priors {prior_manifest}: {exc}") from exc
    if stack.spatial != degraded.shape[1:]:
        raise DataError(f"priors are {stack.spatial}, image is {degraded.shape[1:]}")
    try:
        stack = zero_out(stack, keep)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    restored, _ = net.restore(degraded, stack)
    if not np.all(np.isfinite(restored)):
        raise NumericError("restored image contains non-finite values")
    restored = np.clip(restored, 0.0, 1.0)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    io.save_png(out_path, restored)
    io.save_atsr(out_path.with_suffix(".atsr"), restored.astype(np.float32))
    return restored


def cmd_analyze_priors(checkpoint, manifest, out_path):
    net = _load_checkpoint(checkpoint)
    samples = load_dataset(manifest)
    report = analyze_priors(net, samples)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out_path)
    report.write_per_image_csv(out_path.with_name(out_path.stem + "_per_image.csv"))
    return report


def cmd_metrics(restored_path, reference_path) -> dict:
    try:
        a = io.load_image(restored_path)
        b = io.load_image(reference_path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    p = psnr(a, b)
    return {"psnr": "inf" if math.isinf(p) else p, "ssim": ssim(a, b)}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="priorquant", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render degraded/sharp pairs and priors")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the restoration network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("restore", help="restore one degraded image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--priors", required=True, help="prior manifest.json")
    p.add_argument("--out", required=True, help="output PNG; an .atsr copy is written alongside")
    p.add_argument("--keep-prior", default="all")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("analyze-priors", help="activated-code counts per kept prior")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("metrics", help="PSNR/SSIM of an image against a reference")
    p.add_argument("restored")
    p.add_argument("reference")
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "simulate":
            print(cmd_simulate(args.config, args.out, args.seed))
        elif args.command == "train":
            cmd_train(args.manifest, args.config, args.out, args.seed)
        elif args.command == "restore":
            cmd_restore(args.checkpoint, args.image, args.priors, args.out, args.keep_prior)
        elif args.command == "analyze-priors":
            cmd_analyze_priors(args.checkpoint, args.manifest, args.out)
        elif args.command == "metrics":
            result = cmd_metrics(args.restored, args.reference)
            text = json.dumps(result, sort_keys=True)
            if args.out:
                Path(args.out).write_text(text + "\n")
            print(text)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
