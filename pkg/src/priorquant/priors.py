"""Auxiliary priors: SFR cube, field-of-view map, noise map, spectral prior."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .io import load_atsr, read_json, save_atsr, write_json
from .optics import NoiseParams, PsfGrid, bilinear_maps, spectral_lift

PRIOR_NAMES = ("sfr", "fov", "noise", "spectral")
SFR_PAD = 64
_ORIENTATIONS = ("horizontal", "vertical")


@dataclass
class SfrSpec:
    frequencies: tuple[float, ...] = (0.125, 0.25, 0.375, 0.5)
    orientations: tuple[str, ...] = _ORIENTATIONS

    def __post_init__(self):
        freqs = tuple(float(f) for f in self.frequencies)
        if not freqs:
            raise ValueError("SfrSpec needs at least one frequency")
        if any(b <= a for a, b in zip(freqs, freqs[1:])):
            raise ValueError("SFR frequencies must be strictly increasing")
        if freqs[0] <= 0 or freqs[-1] > 0.5:
            raise ValueError("SFR frequencies must lie in (0, 0.5] cycles/pixel")
        bad = set(self.orientations) - set(_ORIENTATIONS)
        if bad or not self.orientations:
            raise ValueError(f"unknown orientations {sorted(bad)}")
        self.frequencies = freqs
        self.orientations = tuple(self.orientations)

    def n_planes(self, bands: int) -> int:
        return bands * len(self.frequencies) * len(self.orientations)


@dataclass
class PriorStack:
    sfr: np.ndarray
    fov: np.ndarray
    noise: np.ndarray
    spectral: np.ndarray

    def planes(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PRIOR_NAMES}

    @property
    def spatial(self) -> tuple[int, int]:
        return self.fov.shape[1:]

    def check(self) -> None:
        hw = self.spatial
        for name, arr in self.planes().items():
            if arr.ndim != 3 or arr.shape[1:] != hw:
                raise ValueError(f"prior {name} has shape {arr.shape}, expected [*, {hw[0]}, {hw[1]}]")
        if np.abs(self.fov).max(initial=0) > 1 + 1e-6:
            raise ValueError("fov prior outside [-1, 1]")
        if self.sfr.size and (self.sfr.min() < 0 or self.sfr.max() > 1 + 1e-6):
            raise ValueError("sfr prior outside [0, 1]")
        if (self.noise < 0).any():
            raise ValueError("noise prior negative")


def mtf(kernel: np.ndarray, pad: int = SFR_PAD) -> np.ndarray:
    """|DFT| of the zero-padded kernel divided by its DC value."""
    k = kernel.shape[-1]
    if k > pad:
        raise ValueError(f"kernel size {k} exceeds SFR padding {pad}")
    padded = np.zeros((pad, pad))
    padded[:k, :k] = kernel
    spec = np.abs(np.fft.fft2(padded))
    return spec / spec[0, 0]


def sample_mtf(mtf_plane: np.ndarray, spec: SfrSpec) -> np.ndarray:
    pad = mtf_plane.shape[0]
    out = []
    for f in spec.frequencies:
        b = int(round(f * pad))
        if b > pad // 2:
            raise ValueError(f"frequency {f} beyond Nyquist of the padded kernel")
        for o in spec.orientations:
            out.append(mtf_plane[0, b] if o == "horizontal" else mtf_plane[b, 0])
    return np.array(out)


def sfr_cube(grid: PsfGrid, spec: SfrSpec, h: int, w: int) -> np.ndarray:
    """SFR at each node, band-major then frequency then orientation, interpolated per pixel."""
    rows, cols, bands = grid.field_rows, grid.field_cols, grid.bands
    nodes = np.empty((rows, cols, spec.n_planes(bands)))
    for i in range(rows):
        for j in range(cols):
            nodes[i, j] = np.concatenate(
                [sample_mtf(mtf(grid.kernels[i, j, b]), spec) for b in range(bands)]
            )
    maps = bilinear_maps(rows, cols, h, w)
    cube = np.einsum("ijp,ijhw->phw", nodes, maps)
    return np.clip(cube, 0.0, 1.0)


def fov_map(h: int, w: int) -> np.ndarray:
    rows = 2.0 * np.arange(h) / (h - 1) - 1.0 if h > 1 else np.zeros(1)
    cols = 2.0 * np.arange(w) / (w - 1) - 1.0 if w > 1 else np.zeros(1)
    out = np.empty((2, h, w))
    out[0] = rows[:, None]
    out[1] = cols[None, :]
    return out


def noise_map(noise: NoiseParams, degraded: np.ndarray) -> np.ndarray:
    signal = np.asarray(degraded, dtype=np.float64).mean(axis=0, keepdims=True)
    return np.sqrt(np.maximum(noise.shot_gain * signal + noise.read_sigma**2, 0.0))


def spectral_prior(spectral: np.ndarray, n_sp: int, eps: float = 1e-6) -> np.ndarray:
    bands = spectral.shape[0]
    if not 1 <= n_sp <= bands:
        raise ValueError(f"n_sp={n_sp} must be in [1, {bands}]")
    groups = np.stack([g.mean(axis=0) for g in np.array_split(np.asarray(spectral, dtype=np.float64), n_sp)])
    return groups / (groups.sum(axis=0, keepdims=True) + eps)


def zero_out(stack: PriorStack, keep: str | None) -> PriorStack:
    """Replace every prior except ``keep`` with zeros; ``keep`` may be 'all' or 'none'."""
    keep = "none" if keep is None else keep
    if keep not in PRIOR_NAMES + ("all", "none"):
        raise ValueError(f"unknown prior {keep!r}; expected one of {PRIOR_NAMES + ('all', 'none')}")
    if keep == "all":
        return replace(stack)
    return PriorStack(
        **{n: (a if n == keep else np.zeros_like(a)) for n, a in stack.planes().items()}
    )


def build_priors(
    degraded: np.ndarray,
    grid: PsfGrid,
    noise: NoiseParams,
    sfr_spec: SfrSpec | None = None,
    n_sp: int = 4,
) -> PriorStack:
    """Priors for one degraded image; the spectral prior lifts the degraded RGB."""
    _, h, w = degraded.shape
    stack = PriorStack(
        sfr=sfr_cube(grid, sfr_spec or SfrSpec(), h, w),
        fov=fov_map(h, w),
        noise=noise_map(noise, degraded),
        spectral=spectral_prior(spectral_lift(degraded, grid.bands), n_sp),
    )
    stack.check()
    return stack


def prior_channels(bands: int, sfr_spec: SfrSpec | None = None, n_sp: int = 4) -> dict[str, int]:
    return {"sfr": (sfr_spec or SfrSpec()).n_planes(bands), "fov": 2, "noise": 1, "spectral": n_sp}


def save_prior_stack(directory, stack: PriorStack) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in stack.planes().items():
        save_atsr(directory / f"{name}.atsr", arr.astype(np.float32))
        entries.append({"name": name, "shape": list(arr.shape), "role": "prior", "path": f"{name}.atsr"})
    manifest = directory / "manifest.json"
    write_json(manifest, entries)
    return manifest


class MissingPriorError(FileNotFoundError):
    def __init__(self, missing: list[str]):
        super().__init__(f"missing prior files: {', '.join(missing)}")
        self.missing = missing


def load_prior_stack(manifest_path) -> PriorStack:
    manifest_path = Path(manifest_path)
    entries = {e["name"]: e for e in read_json(manifest_path)}
    missing = [
        n for n in PRIOR_NAMES
        if n not in entries or not (manifest_path.parent / entries[n]["path"]).is_file()
    ]
    if missing:
        raise MissingPriorError(missing)
    return PriorStack(
        **{n: load_atsr(manifest_path.parent / entries[n]["path"]) for n in PRIOR_NAMES}
    )
