"""Spectral, spatially-varying image degradation.

The observed image is the spectral-response-weighted sum over bands of the
sharp band image convolved with a field-dependent PSF, plus heteroscedastic
Gaussian noise. PSFs live on a coarse grid of field nodes and are bilinearly
interpolated per pixel.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import load_atsr, read_json, save_atsr, write_json
from .tensor import im2col


@dataclass
class PsfModelParams:
    sigma_center: float = 0.7
    sigma_slope: float = 0.9
    astig_ratio: float = 1.4
    chroma_shift_slope: float = 0.3

    def __post_init__(self):
        if self.sigma_center <= 0:
            raise ValueError("sigma_center must be > 0")
        if self.sigma_slope < 0 or self.chroma_shift_slope < 0:
            raise ValueError("PSF slopes must be >= 0")
        if self.astig_ratio < 1:
            raise ValueError("astig_ratio must be >= 1")


@dataclass
class NoiseParams:
    shot_gain: float = 1e-4
    read_sigma: float = 0.005

    def __post_init__(self):
        if self.shot_gain < 0 or self.read_sigma < 0:
            raise ValueError("noise parameters must be >= 0")


@dataclass
class SpectralResponse:
    weights: np.ndarray  # [3, bands]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != 3:
            raise ValueError(f"spectral response must be [3, bands], got {w.shape}")
        if (w < 0).any():
            raise ValueError("spectral response weights must be >= 0")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("each RGB row of the spectral response must sum to 1")
        self.weights = w

    @property
    def bands(self) -> int:
        return self.weights.shape[1]


@dataclass
class PsfGrid:
    kernels: np.ndarray  # [field_rows, field_cols, bands, k, k]
    warnings: list[str] = field(default_factory=list)

    @property
    def field_rows(self) -> int:
        return self.kernels.shape[0]

    @property
    def field_cols(self) -> int:
        return self.kernels.shape[1]

    @property
    def bands(self) -> int:
        return self.kernels.shape[2]

    @property
    def k(self) -> int:
        return self.kernels.shape[3]


@dataclass
class Pair:
    degraded: np.ndarray
    sharp: np.ndarray
    spectral: np.ndarray
    grid: PsfGrid
    noise: NoiseParams


# ------------------------------------------------------------------ geometry


def node_coords(n: int) -> np.ndarray:
    """Normalized [-1, 1] coordinates of ``n`` equally spaced field nodes."""
    if n == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n)


def interp_weights(n_nodes: int, size: int) -> np.ndarray:
    """[size, n_nodes] linear interpolation weights of nodes spanning [0, size-1]."""
    w = np.zeros((size, n_nodes))
    if n_nodes == 1:
        w[:, 0] = 1.0
        return w
    t = np.arange(size) * ((n_nodes - 1) / (size - 1)) if size > 1 else np.zeros(1)
    lo = np.minimum(np.floor(t).astype(int), n_nodes - 2)
    frac = t - lo
    w[np.arange(size), lo] = 1.0 - frac
    w[np.arange(size), lo + 1] += frac
    return w


def bilinear_maps(rows: int, cols: int, h: int, w: int) -> np.ndarray:
    """[rows, cols, H, W] bilinear weight of each grid node at each pixel."""
    wy = interp_weights(rows, h)
    wx = interp_weights(cols, w)
    return np.einsum("hi,wj->ijhw", wy, wx)


# ---------------------------------------------------------------------- PSFs


def _gaussian_samples(k: int, sig_rad: float, sig_tan: float, radial: np.ndarray, shift: float):
    half = k // 2
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    yy -= shift * radial[0]
    xx -= shift * radial[1]
    tangential = np.array([-radial[1], radial[0]])
    a = yy * radial[0] + xx * radial[1]
    b = yy * tangential[0] + xx * tangential[1]
    return np.exp(-0.5 * ((a / sig_rad) ** 2 + (b / sig_tan) ** 2))


def gaussian_psf(k: int, sigma: float, astig_ratio: float = 1.0, radial=(1.0, 0.0), shift: float = 0.0):
    """Sampled anisotropic Gaussian on a k x k grid, normalized to unit sum.

    ``radial`` is the (row, col) unit direction; the kernel is stretched by
    ``astig_ratio`` perpendicular to it and its centre moved ``shift`` pixels
    along it. Returns (kernel, truncated_mass).
    """
    radial = np.asarray(radial, dtype=np.float64)
    if k == 1:
        return np.ones((1, 1)), 0.0
    sig_tan = sigma * astig_ratio
    kern = _gaussian_samples(k, sigma, sig_tan, radial, shift)
    reach = int(math.ceil(5 * sig_tan + abs(shift)))
    big = _gaussian_samples(k + 2 * reach, sigma, sig_tan, radial, shift)
    truncated = 1.0 - kern.sum() / big.sum()
    return kern / kern.sum(), float(truncated)


def build_psf_grid(params: PsfModelParams, field_rows: int, field_cols: int, bands: int, k: int) -> PsfGrid:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    kernels = np.zeros((field_rows, field_cols, bands, k, k))
    warnings = []
    b_ref = (bands - 1) / 2.0
    us, vs = node_coords(field_rows), node_coords(field_cols)
    for i, u in enumerate(us):
        for j, v in enumerate(vs):
            r = math.hypot(u, v)
            radial = np.array([u, v]) / r if r > 0 else np.array([1.0, 0.0])
            astig = params.astig_ratio if r > 0 else 1.0
            sigma = params.sigma_center + params.sigma_slope * r
            for b in range(bands):
                shift = params.chroma_shift_slope * r * (b - b_ref)
                kern, lost = gaussian_psf(k, sigma, astig, radial, shift)
                if lost > 0.01:
                    warnings.append(f"node ({i},{j}) band {b}: {lost:.3f} of PSF mass truncated")
                kernels[i, j, b] = kern
    return PsfGrid(kernels, warnings)


def delta_psf_grid(field_rows: int, field_cols: int, bands: int) -> PsfGrid:
    return PsfGrid(np.ones((field_rows, field_cols, bands, 1, 1)))


# ------------------------------------------------------------------ spectrum


def spectral_basis(bands: int) -> np.ndarray:
    """[bands, 3] nonnegative lift basis whose rows sum to 1.

    Each channel owns an anchor band; bands between anchors blend the two
    neighbouring channels linearly, bands outside the outer anchors copy the
    nearest channel. Bands follow the RGB channel order (long to short
    wavelength), so three bands give the identity.
    """
    if bands < 3:
        raise ValueError("need at least 3 bands")
    anchors = [int(round((c + 0.5) * bands / 3.0 - 0.5)) for c in range(3)]
    basis = np.zeros((bands, 3))
    for b in range(bands):
        if b <= anchors[0]:
            basis[b, 0] = 1.0
        elif b >= anchors[2]:
            basis[b, 2] = 1.0
        else:
            seg = 0 if b < anchors[1] else 1
            lo, hi = anchors[seg], anchors[seg + 1]
            t = (b - lo) / (hi - lo)
            basis[b, seg] = 1.0 - t
            basis[b, seg + 1] += t
    return basis


def matched_response(bands: int) -> SpectralResponse:
    """Response that inverts :func:`spectral_basis`: uniform over each channel's pure bands."""
    basis = spectral_basis(bands)
    weights = (basis == 1.0).T.astype(np.float64)
    return SpectralResponse(weights / weights.sum(axis=1, keepdims=True))


def spectral_lift(rgb: np.ndarray, bands: int) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    return np.einsum("bc,chw->bhw", spectral_basis(bands), rgb)


def integrate_spectrum(spectral: np.ndarray, resp: SpectralResponse) -> np.ndarray:
    if spectral.shape[0] != resp.bands:
        raise ValueError(f"image has {spectral.shape[0]} bands, response has {resp.bands}")
    return np.einsum("cb,bhw->chw", resp.weights, spectral)


# ----------------------------------------------------------------- rendering


def blur_spatially_varying(spectral: np.ndarray, grid: PsfGrid) -> np.ndarray:
    """Per band, convolve with the per-pixel bilinearly interpolated PSF.

    Interpolating kernels and convolving equals blending the node-wise
    convolutions with the same weights, which is what is computed here.
    """
    bands, h, w = spectral.shape
    if bands != grid.bands:
        raise ValueError(f"image has {bands} bands, PSF grid has {grid.bands}")
    rows, cols, k = grid.field_rows, grid.field_cols, grid.k
    maps = bilinear_maps(rows, cols, h, w).reshape(rows * cols, h * w)
    out = np.empty((bands, h, w))
    for b in range(bands):
        cols_b = im2col(spectral[b][None, None], k, k).reshape(k * k, h * w)
        flipped = np.ascontiguousarray(grid.kernels[:, :, b, ::-1, ::-1]).reshape(rows * cols, k * k)
        out[b] = ((flipped @ cols_b) * maps).sum(axis=0).reshape(h, w)
    return out


def add_noise(clean: np.ndarray, noise: NoiseParams, seed: int) -> np.ndarray:
    clean = np.asarray(clean, dtype=np.float64)
    if noise.shot_gain == 0 and noise.read_sigma == 0:
        return clean.copy()
    rng = np.random.default_rng(seed)
    std = np.sqrt(np.maximum(noise.shot_gain * clean + noise.read_sigma**2, 0.0))
    return np.clip(clean + std * rng.standard_normal(clean.shape), 0.0, 1.0)


def render_degraded(
    sharp_spectral: np.ndarray,
    grid: PsfGrid,
    resp: SpectralResponse,
    noise: NoiseParams,
    seed: int,
) -> np.ndarray:
    if grid.bands != resp.bands or sharp_spectral.shape[0] != resp.bands:
        raise ValueError(
            f"band mismatch: image {sharp_spectral.shape[0]}, grid {grid.bands}, response {resp.bands}"
        )
    blurred = blur_spatially_varying(np.asarray(sharp_spectral, dtype=np.float64), grid)
    rgb = integrate_spectrum(blurred, resp)
    return np.clip(add_noise(np.clip(rgb, 0.0, 1.0), noise, seed), 0.0, 1.0)


def make_pair(
    sharp_rgb: np.ndarray,
    params: PsfModelParams,
    resp: SpectralResponse,
    noise: NoiseParams,
    seed: int,
    field_rows: int = 3,
    field_cols: int = 3,
    k: int = 15,
    grid: PsfGrid | None = None,
) -> Pair:
    sharp_rgb = np.asarray(sharp_rgb, dtype=np.float64)
    if grid is None:
        grid = build_psf_grid(params, field_rows, field_cols, resp.bands, k)
    spectral = spectral_lift(sharp_rgb, resp.bands)
    degraded = render_degraded(spectral, grid, resp, noise, seed)
    return Pair(degraded=degraded, sharp=sharp_rgb, spectral=spectral, grid=grid, noise=noise)


# ------------------------------------------------------------ serialization


def save_psf_meta(json_path, grid: PsfGrid, params: PsfModelParams | None, resp: SpectralResponse, noise: NoiseParams):
    json_path = Path(json_path)
    kern_path = json_path.with_suffix(".atsr")
    save_atsr(kern_path, grid.kernels)
    write_json(
        json_path,
        {
            "kernels_path": kern_path.name,
            "field_rows": grid.field_rows,
            "field_cols": grid.field_cols,
            "bands": grid.bands,
            "kernel_size": grid.k,
            "psf_model_params": asdict(params) if params is not None else None,
            "spectral_response": resp.weights.tolist(),
            "noise_params": asdict(noise),
            "warnings": grid.warnings,
        },
    )


def load_psf_meta(json_path):
    """Returns (PsfGrid, PsfModelParams | None, SpectralResponse, NoiseParams)."""
    json_path = Path(json_path)
    meta = read_json(json_path)
    kernels = load_atsr(json_path.parent / meta["kernels_path"]).astype(np.float64)
    params = meta.get("psf_model_params")
    return (
        PsfGrid(kernels, list(meta.get("warnings", []))),
        PsfModelParams(**params) if params else None,
        SpectralResponse(np.array(meta["spectral_response"])),
        NoiseParams(**meta["noise_params"]),
    )
