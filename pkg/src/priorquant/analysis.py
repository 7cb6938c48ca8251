"""Prior-correlation analysis: keep one prior, zero the rest, count activated codes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import psnr, ssim
from .model import RestoreNet
from .priors import PRIOR_NAMES, zero_out
from .train import Sample

ANALYSIS_ROWS = PRIOR_NAMES + ("all", "none")
REPORT_COLUMNS = ["prior", "activated_codes", "mean_psnr", "mean_ssim", "psnr_delta_vs_none", "ssim_delta_vs_none"]


@dataclass
class PriorRow:
    prior: str
    activated_codes: int
    mean_psnr: float
    mean_ssim: float
    images_evaluated: int
    per_image_codes: list[int] = field(default_factory=list)
    psnr_delta: float = 0.0
    ssim_delta: float = 0.0


@dataclass
class AnalysisReport:
    rows: list[PriorRow]
    K: int

    def row(self, prior: str) -> PriorRow:
        return next(r for r in self.rows if r.prior == prior)

    def check(self) -> None:
        for r in self.rows:
            if not 0 <= r.activated_codes <= self.K:
                raise ValueError(f"{r.prior}: activated_codes {r.activated_codes} outside [0, {self.K}]")
            if r.images_evaluated < 1:
                raise ValueError(f"{r.prior}: no images evaluated")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.prior, r.activated_codes, _num(r.mean_psnr), _num(r.mean_ssim),
                            _num(r.psnr_delta), _num(r.ssim_delta)])

    def write_per_image_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["prior", "image", "activated_codes"])
            for r in self.rows:
                for i, c in enumerate(r.per_image_codes):
                    w.writerow([r.prior, i, c])


def _num(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(float(v))


def analyze_priors(net: RestoreNet, samples: list[Sample]) -> AnalysisReport:
    if not samples:
        raise ValueError("no images to analyze")
    rows = []
    for keep in ANALYSIS_ROWS:
        seen: set[int] = set()
        per_image, scores = [], []
        for s in samples:
            restored, idx = net.restore(s.degraded, zero_out(s.priors, keep))
            restored = np.clip(restored, 0.0, 1.0)
            codes = set(np.unique(idx).tolist())
            per_image.append(len(codes))
            seen |= codes
            scores.append((psnr(restored, s.sharp), ssim(restored, s.sharp)))
        arr = np.array(scores)
        rows.append(PriorRow(keep, len(seen), float(arr[:, 0].mean()), float(arr[:, 1].mean()),
                             len(samples), per_image))
    base = rows[-1]
    for r in rows:
        r.psnr_delta = r.mean_psnr - base.mean_psnr
        r.ssim_delta = r.mean_ssim - base.mean_ssim
    report = AnalysisReport(rows, net.codebook.K)
    report.check()
    return report
