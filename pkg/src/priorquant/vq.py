"""Learnable codebook: nearest-entry quantization, straight-through routing,
two-term stop-gradient alignment loss and usage statistics."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

from .io import load_atsr, read_json, save_atsr, write_json
from .tensor import ShapeError, Tensor, _make, detach, mul, sub, take_rows, tsum

_CHUNK = 2048


class Codebook:
    """K entries of dimension d_z plus per-entry assignment counters."""

    def __init__(self, K: int = 128, d_z: int = 64, seed: int = 0, dtype=np.float32, entries=None):
        if entries is None:
            if K < 1:
                raise ValueError("codebook must have at least one entry")
            rng = np.random.default_rng(seed)
            entries = rng.uniform(-1.0 / K, 1.0 / K, size=(K, d_z))
        entries = np.asarray(entries, dtype=dtype)
        self.entries = Tensor(entries, requires_grad=True)
        self.usage = np.zeros(entries.shape[0], dtype=np.int64)

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def d_z(self) -> int:
        return self.entries.shape[1]

    def reset_usage(self) -> None:
        self.usage[:] = 0

    def save(self, directory, name: str = "codebook") -> None:
        directory = Path(directory)
        save_atsr(directory / f"{name}.atsr", self.entries.data)
        write_json(directory / f"{name}.json", {"K": self.K, "d_z": self.d_z, "usage": self.usage.tolist()})

    @classmethod
    def load(cls, directory, name: str = "codebook") -> "Codebook":
        directory = Path(directory)
        meta = read_json(directory / f"{name}.json")
        book = cls(entries=load_atsr(directory / f"{name}.atsr"))
        if (book.K, book.d_z) != (meta["K"], meta["d_z"]):
            raise ValueError("codebook entries disagree with their JSON metadata")
        book.usage[:] = meta["usage"]
        return book

    def export_usage_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["entry_index", "count"])
            for k, c in enumerate(self.usage):
                writer.writerow([k, int(c)])


def nearest_indices(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """argmin_k ||v - e_k||_2 per row; ties go to the lowest index."""
    v = np.asarray(vectors, dtype=np.float64)
    e = np.asarray(entries, dtype=np.float64)
    out = np.empty(v.shape[0], dtype=np.int64)
    for s in range(0, v.shape[0], _CHUNK):
        d = ((v[s : s + _CHUNK, None, :] - e[None]) ** 2).sum(axis=-1)
        out[s : s + _CHUNK] = np.argmin(d, axis=1)
    return out


def quantize(z_hat, book: Codebook, count: bool = True):
    """Map each code vector (last axis) onto its closest codebook entry.

    Returns (z_q array, integer indices with the leading shape of ``z_hat``).
    """
    z = z_hat.data if isinstance(z_hat, Tensor) else np.asarray(z_hat)
    if book.K == 0:
        raise ValueError("empty codebook")
    if z.shape[-1] != book.d_z:
        raise ShapeError(f"code dimension {z.shape[-1]} != codebook d_z {book.d_z}")
    idx = nearest_indices(z.reshape(-1, book.d_z), book.entries.data).reshape(z.shape[:-1])
    if count:
        book.usage += np.bincount(idx.reshape(-1), minlength=book.K)
    return book.entries.data[idx], idx


def straight_through(z_hat: Tensor, z_q: np.ndarray) -> Tensor:
    """Forward value ``z_q``; the backward pass hands the gradient to ``z_hat`` unchanged."""
    z_q = np.asarray(z_q, dtype=z_hat.dtype)
    if z_q.shape != z_hat.shape:
        raise ShapeError(f"straight_through: {z_hat.shape} vs {z_q.shape}")
    return _make(z_q.copy(), (z_hat,), lambda g: (g,))


def alignment_terms(z_hat: Tensor, indices: np.ndarray, book: Codebook) -> tuple[Tensor, Tensor]:
    """(codebook term, encoder term), each summed over the code field / (number of positions).

    The first term reaches only the selected entries, the second only ``z_hat``.
    """
    n = max(int(np.asarray(indices).size), 1)
    z_q = take_rows(book.entries, indices)
    d1 = sub(detach(z_hat), z_q)
    d2 = sub(z_hat, detach(z_q))
    return mul(tsum(mul(d1, d1)), 1.0 / n), mul(tsum(mul(d2, d2)), 1.0 / n)


def alignment_loss(z_hat: Tensor, indices: np.ndarray, book: Codebook) -> Tensor:
    t1, t2 = alignment_terms(z_hat, indices, book)
    return t1 + t2


def count_activated(indices, K: int | None = None) -> int:
    """Number of distinct entries among one index array or a stream of them."""
    if isinstance(indices, np.ndarray) or np.isscalar(indices):
        indices = [indices]
    seen: set[int] = set()
    for arr in indices:
        arr = np.asarray(arr).reshape(-1)
        if arr.size and (arr.min() < 0 or (K is not None and arr.max() >= K)):
            raise ValueError(f"code index out of range [0, {K})")
        seen.update(np.unique(arr).tolist())
    return len(seen)


def activated_set(indices: Iterable[np.ndarray]) -> set[int]:
    seen: set[int] = set()
    for arr in indices:
        seen.update(np.unique(np.asarray(arr)).tolist())
    return seen


def reset_dead_codes(book: Codebook, z_hat_batch: np.ndarray, threshold: float, rng=None) -> list[int]:
    """Re-seed entries used fewer than ``threshold`` times with random encoder outputs.

    Entries are overwritten in place so optimizer state keyed on the entry
    tensor stays valid. Usage counters are reset. Returns the re-seeded indices.
    """
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    pool = np.asarray(z_hat_batch).reshape(-1, book.d_z)
    dead = np.flatnonzero(book.usage < threshold)
    if dead.size and pool.shape[0]:
        picks = rng.integers(0, pool.shape[0], size=dead.size)
        book.entries.data[dead] = pool[picks]
    book.reset_usage()
    return dead.tolist()
