"""Per-prior activated-code counts and metric deltas for a trained checkpoint.

Prints a fixed-width table and, with --per-image, the per-image code counts.

    python scripts/prior_correlation.py runs/toy/train/checkpoint runs/toy/sim/manifest.json
"""

import argparse

from priorquant.analysis import analyze_priors
from priorquant.model import RestoreNet
from priorquant.train import load_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("manifest")
    ap.add_argument("--per-image", action="store_true")
    args = ap.parse_args()

    net = RestoreNet.load(args.checkpoint)
    report = analyze_priors(net, load_dataset(args.manifest))
    print(f"{'prior':<10}{'codes':>7}{'psnr':>9}{'ssim':>8}{'dpsnr':>9}{'dssim':>9}")
    for r in report.rows:
        print(f"{r.prior:<10}{r.activated_codes:>7}{r.mean_psnr:>9.3f}{r.mean_ssim:>8.4f}"
              f"{r.psnr_delta:>+9.3f}{r.ssim_delta:>+9.4f}")
    if args.per_image:
        for r in report.rows:
            print(r.prior, " ".join(map(str, r.per_image_codes)))


if __name__ == "__main__":
    main()
