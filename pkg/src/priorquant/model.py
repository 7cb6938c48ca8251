"""Prior-quantized coarse-to-fine restoration network and its content loss.

Layout of one forward pass (N images, ``scales`` = n):

* each prior goes through its own encoder (three stride-2 conv+relu stages);
  the four outputs are concatenated into the code field and quantized;
* the restoration encoder produces features ES_0..ES_{n-1}; the quantized
  codes are concatenated onto ES_{n-1} and fused by a 1x1 conv and a ResBlock;
* multi-scale feature fusion (MFF) resamples every scale's features to every
  decoder scale with 1x1 convs and pixel (un)shuffle, then reduces with a 3x3
  conv;
* each decoder scale predicts a residual that is added to the area-downsampled
  degraded input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import load_atsr, read_json, save_atsr, write_json
from .priors import PRIOR_NAMES, PriorStack
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    conv2d,
    downsample_area,
    fft2,
    mul,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
    sub,
    tabs,
    transpose,
    tsum,
    upsample_nearest,
)
from .vq import Codebook, alignment_terms, quantize, straight_through

CODE_STRIDE = 8
FOURIER_WEIGHT = 0.1


@dataclass
class NetConfig:
    scales: int = 3
    base_channels: int = 16
    prior_channels: dict = field(default_factory=lambda: {"sfr": 64, "fov": 2, "noise": 1, "spectral": 4})
    encoder_channels: int = 16
    d_z: int = 64
    K: int = 128
    mff_channels: int = 8
    res_blocks: int = 2
    use_mff: bool = True

    def __post_init__(self):
        if self.scales < 2:
            raise ValueError("scales must be >= 2")
        for name in ("base_channels", "encoder_channels", "d_z", "K", "mff_channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.res_blocks < 0:
            raise ValueError("res_blocks must be >= 0")
        if set(self.prior_channels) != set(PRIOR_NAMES):
            raise ValueError(f"prior_channels must name exactly {PRIOR_NAMES}")
        if any(c <= 0 for c in self.prior_channels.values()):
            raise ValueError("prior channel counts must be positive")
        if self.d_z % len(PRIOR_NAMES):
            raise ValueError(f"d_z={self.d_z} not divisible by {len(PRIOR_NAMES)} priors")

    @property
    def align_unit(self) -> int:
        return 2 ** (self.scales - 1) * CODE_STRIDE

    def channels(self, scale: int) -> int:
        return self.base_channels * 2**scale


def build_pyramid(image: np.ndarray, scales: int) -> list[np.ndarray]:
    """Area-downsampled copies at halving resolutions, finest first."""
    out = [np.asarray(image)]
    for _ in range(scales - 1):
        out.append(downsample_area(Tensor(out[-1])).data)
    return out


class RestoreNet:
    def __init__(self, config: NetConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or NetConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self.codebook = Codebook(self.config.K, self.config.d_z, seed=seed + 1, dtype=self.dtype)
        self._build()

    # ----------------------------------------------------------------- setup

    def _add_conv(self, name: str, cin: int, cout: int, k: int, gain: float = 1.0) -> None:
        std = gain * np.sqrt(2.0 / (cin * k * k))
        w = self._rng.standard_normal((cout, cin, k, k)) * std
        self.params[f"{name}.w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

    def _add_resblock(self, name: str, c: int) -> None:
        self._add_conv(f"{name}.c1", c, c, 3)
        self._add_conv(f"{name}.c2", c, c, 3, gain=0.1)

    def _mff_source_channels(self, target: int, source: int) -> tuple[int, int]:
        """(1x1 conv output channels, channels after resampling) for one MFF path."""
        m = self.config.mff_channels
        if source > target:
            r = 2 ** (source - target)
            return m * r * r, m
        if source < target:
            r = 2 ** (target - source)
            return m, m * r * r
        return m, m

    def _build(self) -> None:
        cfg = self.config
        n = cfg.scales
        part = cfg.d_z // len(PRIOR_NAMES)
        for p in PRIOR_NAMES:
            ec = cfg.encoder_channels
            self._add_conv(f"enc.{p}.0", cfg.prior_channels[p], ec, 3)
            self._add_conv(f"enc.{p}.1", ec, ec, 3)
            self._add_conv(f"enc.{p}.2", ec, part, 3)
        self._add_conv("res.in", 3, cfg.channels(0), 3)
        for k in range(n):
            if k:
                self._add_conv(f"res.down{k}", cfg.channels(k - 1), cfg.channels(k), 3)
            for j in range(cfg.res_blocks):
                self._add_resblock(f"res.e{k}.rb{j}", cfg.channels(k))
        low = cfg.channels(n - 1)
        self._add_conv("fuse.in", low + cfg.d_z, low, 1)
        self._add_resblock("fuse.rb", low)
        if cfg.use_mff:
            for t in range(n):
                total = 0
                for s in range(n):
                    conv_out, after = self._mff_source_channels(t, s)
                    self._add_conv(f"mff.{t}.{s}", cfg.channels(s), conv_out, 1)
                    total += after
                self._add_conv(f"mff.{t}.out", total, cfg.channels(t), 3)
        for t in reversed(range(n)):
            c = cfg.channels(t)
            self._add_conv(f"dec{t}.in", 2 * c, c, 1)
            for j in range(cfg.res_blocks):
                self._add_resblock(f"dec{t}.rb{j}", c)
            self._add_conv(f"dec{t}.out", c, 3, 3, gain=0.01)
            if t:
                self._add_conv(f"dec{t}.up", c, cfg.channels(t - 1), 3)

    def parameters(self) -> dict[str, Tensor]:
        """All trainable tensors, codebook entries included."""
        return {**self.params, "codebook.entries": self.codebook.entries}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # --------------------------------------------------------------- layers

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        return conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride)

    def _resblock(self, name: str, x: Tensor) -> Tensor:
        return x + self._conv(f"{name}.c2", relu(self._conv(f"{name}.c1", x)))

    def _as_batch(self, arr) -> Tensor:
        a = np.asarray(arr, dtype=self.dtype)
        return Tensor(a if a.ndim == 4 else a[None])

    # -------------------------------------------------------------- forward

    def encode_priors(self, stack: PriorStack | dict) -> Tensor:
        """Code field [N, h, w, d_z] from the four prior encoders."""
        planes = stack.planes() if isinstance(stack, PriorStack) else stack
        feats = []
        for p in PRIOR_NAMES:
            x = self._as_batch(planes[p])
            if x.shape[1] != self.config.prior_channels[p]:
                raise ShapeError(
                    f"prior {p} has {x.shape[1]} channels, config expects {self.config.prior_channels[p]}"
                )
            for s in range(3):
                x = relu(self._conv(f"enc.{p}.{s}", x, stride=2))
            feats.append(x)
        return transpose(concat(feats, axis=1), (0, 2, 3, 1))

    def mff(self, feats: list[Tensor]) -> list[Tensor]:
        """Fuse every encoder scale into every decoder scale."""
        n = len(feats)
        if not self.config.use_mff:
            return list(feats)
        fused = []
        for t in range(n):
            paths = []
            for s in range(n):
                y = self._conv(f"mff.{t}.{s}", feats[s])
                if s > t:
                    y = pixel_shuffle(y, 2 ** (s - t))
                elif s < t:
                    y = pixel_unshuffle(y, 2 ** (t - s))
                paths.append(y)
            fused.append(self._conv(f"mff.{t}.out", concat(paths, axis=1)))
        return fused

    def forward(self, degraded, stack: PriorStack | dict, count_usage: bool = True):
        """Returns (pyramid of outputs finest first, aux dict with z_hat and indices)."""
        cfg = self.config
        x_in = self._as_batch(degraded)
        h, w = x_in.shape[-2:]
        unit = cfg.align_unit
        if h % unit or w % unit:
            raise ShapeError(f"input {h}x{w} not divisible by alignment unit {unit}; pad first")
        planes = stack.planes() if isinstance(stack, PriorStack) else stack
        for name, arr in planes.items():
            if tuple(np.shape(arr)[-2:]) != (h, w):
                raise ShapeError(f"prior {name} spatial size {np.shape(arr)[-2:]} != image {(h, w)}")

        z_hat = self.encode_priors(planes)
        z_q, indices = quantize(z_hat, self.codebook, count=count_usage)
        codes = transpose(straight_through(z_hat, z_q), (0, 3, 1, 2))
        low = cfg.scales - 1
        for _ in range(low, 3):
            codes = upsample_nearest(codes)
        for _ in range(3, low):
            codes = downsample_area(codes)

        feats = []
        x = relu(self._conv("res.in", x_in))
        for k in range(cfg.scales):
            if k:
                x = relu(self._conv(f"res.down{k}", x, stride=2))
            for j in range(cfg.res_blocks):
                x = self._resblock(f"res.e{k}.rb{j}", x)
            feats.append(x)
        fused = self._resblock("fuse.rb", self._conv("fuse.in", concat([feats[-1], codes], axis=1)))
        feats[-1] = fused

        skips = self.mff(feats)
        inputs = [x_in]
        for _ in range(low):
            inputs.append(downsample_area(inputs[-1]))

        outputs = [None] * cfg.scales
        y = fused
        for t in reversed(range(cfg.scales)):
            y = self._conv(f"dec{t}.in", concat([y, skips[t]], axis=1))
            for j in range(cfg.res_blocks):
                y = self._resblock(f"dec{t}.rb{j}", y)
            outputs[t] = self._conv(f"dec{t}.out", y) + inputs[t]
            if t:
                y = relu(self._conv(f"dec{t}.up", upsample_nearest(y)))
        return outputs, {"z_hat": z_hat, "indices": indices}

    __call__ = forward

    def losses(self, degraded, stack, sharp, count_usage: bool = True) -> dict:
        """Forward pass plus content, alignment and total losses."""
        outputs, aux = self.forward(degraded, stack, count_usage)
        sharp = np.asarray(sharp, dtype=self.dtype)
        gt = build_pyramid(sharp if sharp.ndim == 4 else sharp[None], self.config.scales)
        content = content_loss(outputs, gt)
        t1, t2 = alignment_terms(aux["z_hat"], aux["indices"], self.codebook)
        align = t1 + t2
        return {
            "outputs": outputs,
            "indices": aux["indices"],
            "z_hat": aux["z_hat"],
            "content": content,
            "align": align,
            "total": total_loss(content, align),
        }

    def restore(self, degraded: np.ndarray, stack: PriorStack | dict, count_usage: bool = False):
        """Scale-0 output for one [3, H, W] image of any size, plus code indices.

        Image and priors are replicate-padded to the alignment unit and the
        output cropped back.
        """
        _, h, w = degraded.shape
        unit = self.config.align_unit
        ph, pw = -h % unit, -w % unit
        pad = lambda a: np.pad(a, ((0, 0), (0, ph), (0, pw)), mode="edge")
        planes = stack.planes() if isinstance(stack, PriorStack) else stack
        outputs, aux = self.forward(pad(degraded), {k: pad(v) for k, v in planes.items()}, count_usage)
        return outputs[0].data[0, :, :h, :w], aux["indices"][0]

    # ------------------------------------------------------------ persistence

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, p in self.params.items():
            save_atsr(directory / f"{name}.atsr", p.data)
            entries.append({"name": name, "shape": list(p.shape), "path": f"{name}.atsr"})
        self.codebook.save(directory)
        write_json(
            directory / "manifest.json",
            {"params": entries, "config": asdict(self.config), "dtype": self.dtype.name},
        )

    @classmethod
    def load(cls, directory) -> "RestoreNet":
        directory = Path(directory)
        meta = read_json(directory / "manifest.json")
        net = cls(NetConfig(**meta["config"]), dtype=meta.get("dtype", "float32"))
        for e in meta["params"]:
            arr = load_atsr(directory / e["path"])
            if e["name"] not in net.params or net.params[e["name"]].shape != arr.shape:
                raise ValueError(f"checkpoint parameter {e['name']} does not fit the config")
            net.params[e["name"]].data = arr.astype(net.dtype)
        book = Codebook.load(directory)
        net.codebook.entries.data = book.entries.data.astype(net.dtype)
        net.codebook.usage = book.usage
        return net


def _l1(a: Tensor, b) -> Tensor:
    return tsum(tabs(sub(a, b)))


def content_loss(pred: list[Tensor], gt: list, weight: float = FOURIER_WEIGHT) -> Tensor:
    """Sum over scales of (pixel L1 + weight * Fourier L1) / element count.

    The Fourier term is the L1 norm over real and imaginary parts of the
    unnormalized per-channel 2-D DFT difference.
    """
    if len(pred) != len(gt):
        raise ShapeError(f"pyramid lengths differ: {len(pred)} vs {len(gt)}")
    total = None
    for p, g in zip(pred, gt):
        g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=p.dtype))
        if p.shape != g.shape:
            raise ShapeError(f"pyramid scale shapes differ: {p.shape} vs {g.shape}")
        term = _l1(p, g)
        if weight:
            term = term + mul(_l1(fft2(p), fft2(g)), weight)
        term = mul(term, 1.0 / p.data.size)
        total = term if total is None else total + term
    return total


def total_loss(content: Tensor, align: Tensor) -> Tensor:
    return content + align
