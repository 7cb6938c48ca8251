"""Adam training loop over synthetic pairs, with validation and checkpointing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .io import load_image, read_json, write_json
from .metrics import psnr, ssim
from .model import NetConfig, RestoreNet
from .optics import load_psf_meta
from .priors import PRIOR_NAMES, PriorStack, build_priors, load_prior_stack
from .tensor import Tensor, backward
from .vq import reset_dead_codes

log = logging.getLogger(__name__)

LOG_COLUMNS = [
    "epoch", "lr", "content_loss", "align_loss", "total_loss", "val_psnr", "val_ssim", "activated_codes",
]


class DataError(RuntimeError):
    pass


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 4
    crop: int = 64
    epochs: int = 50
    halve_every: int = 50
    seed: int = 0
    val_count: int = 2
    dead_code_threshold: float = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.halve_every < 1:
            raise ValueError("batch_size, halve_every must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config key(s): {sorted(unknown)}")
        return cls(**d)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * 0.5 ** (epoch // cfg.halve_every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState,
              lr_t: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update; a missing gradient counts as zero."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data -= (lr_t * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# ------------------------------------------------------------------- data


@dataclass
class Sample:
    degraded: np.ndarray
    sharp: np.ndarray
    priors: PriorStack
    source: str = ""


def load_manifest(path) -> list[dict]:
    path = Path(path)
    try:
        entries = read_json(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise DataError(f"manifest {path} is empty")
    for e in entries:
        for key in ("sharp_path", "degraded_path", "psf_meta_path", "seed"):
            if key not in e:
                raise DataError(f"manifest {path} entry lacks {key!r}")
    return entries


def load_sample(entry: dict, root: Path, n_sp: int = 4) -> Sample:
    resolve = lambda p: (root / p) if not Path(p).is_absolute() else Path(p)
    try:
        sharp = load_image(resolve(entry["sharp_path"]))
        degraded = load_image(resolve(entry["degraded_path"]))
        if "prior_path" in entry:
            priors = load_prior_stack(resolve(entry["prior_path"]))
        else:
            grid, _, _, noise = load_psf_meta(resolve(entry["psf_meta_path"]))
            priors = build_priors(degraded, grid, noise, n_sp=n_sp)
    except (OSError, ValueError) as exc:
        raise DataError(f"{entry['degraded_path']}: {exc}") from exc
    if sharp.shape != degraded.shape:
        raise DataError(f"{entry['degraded_path']}: shape {degraded.shape} != sharp {sharp.shape}")
    return Sample(degraded, sharp, priors, str(entry["degraded_path"]))


def load_dataset(manifest_path) -> list[Sample]:
    manifest_path = Path(manifest_path)
    return [load_sample(e, manifest_path.parent) for e in load_manifest(manifest_path)]


def crop_sample(s: Sample, y: int, x: int, size: int) -> Sample:
    cut = lambda a: a[:, y : y + size, x : x + size]
    return Sample(
        cut(s.degraded), cut(s.sharp), PriorStack(**{k: cut(v) for k, v in s.priors.planes().items()}), s.source
    )


def stack_batch(samples: list[Sample]):
    deg = np.stack([s.degraded for s in samples])
    sharp = np.stack([s.sharp for s in samples])
    priors = {k: np.stack([s.priors.planes()[k] for s in samples]) for k in PRIOR_NAMES}
    return deg, priors, sharp


# --------------------------------------------------------------- evaluation


def evaluate(net: RestoreNet, samples: list[Sample]) -> dict:
    """Mean PSNR/SSIM of restored and of degraded images against sharp."""
    rows = []
    for s in samples:
        restored, _ = net.restore(s.degraded, s.priors)
        restored = np.clip(restored, 0.0, 1.0)
        rows.append((psnr(restored, s.sharp), ssim(restored, s.sharp), psnr(s.degraded, s.sharp)))
    if not rows:
        return {"psnr": float("nan"), "ssim": float("nan"), "degraded_psnr": float("nan")}
    arr = np.array(rows)
    return {"psnr": float(arr[:, 0].mean()), "ssim": float(arr[:, 1].mean()), "degraded_psnr": float(arr[:, 2].mean())}


# ------------------------------------------------------------------- train


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def train(manifest_path, tcfg: TrainConfig, ncfg: NetConfig, out_dir, samples: list[Sample] | None = None):
    """Train from a manifest; writes checkpoint/, train_log.csv and crops.csv into ``out_dir``.

    Returns (net, log rows).
    """
    out_dir = Path(out_dir)
    if samples is None:
        samples = load_dataset(manifest_path)
    n_val = tcfg.val_count if len(samples) > tcfg.val_count else 0
    train_set = samples[: len(samples) - n_val]
    val_set = samples[len(samples) - n_val :]
    for s in train_set:
        if min(s.degraded.shape[1:]) < tcfg.crop:
            raise DataError(f"{s.source}: image smaller than crop {tcfg.crop}")
    if tcfg.crop % ncfg.align_unit:
        raise ValueError(f"crop {tcfg.crop} not divisible by alignment unit {ncfg.align_unit}")

    rng = np.random.default_rng(tcfg.seed)
    net = RestoreNet(ncfg, seed=tcfg.seed)
    params = net.parameters()
    state = AdamState()
    rows, crops = [], []
    for epoch in range(tcfg.epochs):
        lr_t = lr_at(tcfg, epoch)
        sums = np.zeros(3)
        n_steps = 0
        seen: set[int] = set()
        last_codes = None
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), tcfg.batch_size):
            batch = []
            for i in order[start : start + tcfg.batch_size]:
                s = train_set[i]
                y = int(rng.integers(0, s.degraded.shape[1] - tcfg.crop + 1))
                x = int(rng.integers(0, s.degraded.shape[2] - tcfg.crop + 1))
                crops.append((epoch, n_steps, int(i), y, x))
                batch.append(crop_sample(s, y, x, tcfg.crop))
            deg, priors, sharp = stack_batch(batch)
            net.zero_grad()
            out = net.losses(deg, priors, sharp)
            backward(out["total"])
            adam_step(params, {k: p.grad for k, p in params.items()}, state, lr_t,
                      tcfg.beta1, tcfg.beta2, tcfg.epsilon)
            sums += [out["content"].item(), out["align"].item(), out["total"].item()]
            seen.update(np.unique(out["indices"]).tolist())
            last_codes = out["z_hat"].data
            n_steps += 1
        if tcfg.dead_code_threshold > 0 and last_codes is not None:
            reset_dead_codes(net.codebook, last_codes, tcfg.dead_code_threshold, rng)
        metrics = evaluate(net, val_set)
        means = sums / max(n_steps, 1)
        row = {
            "epoch": epoch, "lr": lr_t, "content_loss": float(means[0]), "align_loss": float(means[1]),
            "total_loss": float(means[2]), "val_psnr": metrics["psnr"], "val_ssim": metrics["ssim"],
            "activated_codes": len(seen),
        }
        rows.append(row)
        log.info("epoch %d lr %.3g total %.5f val_psnr %.3f codes %d",
                 epoch, lr_t, row["total_loss"], row["val_psnr"], row["activated_codes"])

    out_dir.mkdir(parents=True, exist_ok=True)
    net.save(out_dir / "checkpoint")
    write_json(out_dir / "train_config.json", asdict(tcfg))
    write_json(out_dir / "net_config.json", asdict(ncfg))
    with open(out_dir / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])
    with open(out_dir / "crops.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "sample", "y", "x"])
        w.writerows(crops)
    return net, rows
