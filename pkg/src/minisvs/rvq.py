"""Residual vector quantization.

A coder is an ordered cascade of codebooks; each stage quantizes the
previous stage's residual to its nearest entry (ties break to the lowest
index, so encoding is bit-deterministic). Codebooks learn by k-means++
initialization plus EMA updates. With `pin_zero` the first entry of every
codebook is held at the zero vector, which guarantees that quantization
error never increases with the number of stages.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

BITSTREAM_MAGIC = b"HSC1"

EMA_DECAY = 0.99
DEAD_CODE_THRESHOLD = 2.0
COUNT_EPS = 1e-5


@dataclass
class Codebook:
    entries: np.ndarray  # (K, D)
    ema_counts: np.ndarray = field(default=None)
    ema_sums: np.ndarray = field(default=None)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float32)
        if self.entries.ndim != 2 or self.entries.shape[0] < 1 or self.entries.shape[1] < 1:
            raise ValueError("codebook entries must be a (K >= 1, D >= 1) matrix")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("codebook entries must be finite")
        if self.ema_counts is None:
            self.ema_counts = np.ones(self.entries.shape[0], dtype=np.float32)
        if self.ema_sums is None:
            self.ema_sums = self.entries.copy()
        self.ema_counts = np.asarray(self.ema_counts, dtype=np.float32)
        self.ema_sums = np.asarray(self.ema_sums, dtype=np.float32)
        if np.any(self.ema_counts < 0):
            raise ValueError("ema_counts must be non-negative")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


class RvqCoder:
    def __init__(self, codebooks: list[Codebook], pin_zero: bool = False):
        if not codebooks:
            raise ValueError("a coder needs at least one codebook")
        dims = {cb.dim for cb in codebooks}
        if len(dims) != 1:
            raise ValueError(f"all codebooks must share one dimension, got {sorted(dims)}")
        self.codebooks = codebooks
        self.pin_zero = pin_zero
        if pin_zero:
            for cb in codebooks:
                cb.entries[0] = 0.0
                cb.ema_sums[0] = 0.0

    @property
    def n_quantizers(self) -> int:
        return len(self.codebooks)

    @property
    def dim(self) -> int:
        return self.codebooks[0].dim

    @property
    def codebook_size(self) -> int:
        return self.codebooks[0].size


@dataclass
class CodecCodes:
    indices: np.ndarray  # (C, frames)
    codebook_size: int
    dim: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2:
            raise ValueError("codes must be quantizers x frames")
        if self.indices.size and (
            self.indices.min() < 0 or self.indices.max() >= self.codebook_size
        ):
            raise ValueError("code index out of codebook range")

    @property
    def n_quantizers(self) -> int:
        return self.indices.shape[0]

    @property
    def frames(self) -> int:
        return self.indices.shape[1]


def _nearest(entries: np.ndarray, r: np.ndarray) -> np.ndarray:
    # squared distances via the expansion; argmin takes the first minimum,
    # which implements lowest-index tie breaking
    d = (r * r).sum(axis=1, keepdims=True) - 2.0 * (r @ entries.T) + (entries * entries).sum(axis=1)
    return np.argmin(d, axis=1)


def encode_detailed(coder: RvqCoder, z: np.ndarray):
    """Full encode pass.

    Returns (codes, quantized, residuals, selected) where residuals[c] is the
    stage-c input residual and selected[c] the chosen entries, both
    (C, frames, D).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != coder.dim:
        raise ValueError(f"latents must be frames x {coder.dim}, got {z.shape}")
    c_total = coder.n_quantizers
    residuals = np.empty((c_total, z.shape[0], z.shape[1]))
    selected = np.empty_like(residuals)
    idx = np.empty((c_total, z.shape[0]), dtype=np.int64)
    r = z.copy()
    for c, cb in enumerate(coder.codebooks):
        residuals[c] = r
        ids = _nearest(cb.entries.astype(np.float64), r)
        idx[c] = ids
        selected[c] = cb.entries[ids]
        r = r - selected[c]
    codes = CodecCodes(idx, coder.codebook_size, coder.dim)
    return codes, z - r, residuals, selected


def encode(coder: RvqCoder, z: np.ndarray) -> CodecCodes:
    return encode_detailed(coder, z)[0]


def decode(coder: RvqCoder, codes: CodecCodes, n_quantizers: int | None = None) -> np.ndarray:
    """Sum the selected entries; n_quantizers truncates the cascade."""
    c_use = codes.n_quantizers if n_quantizers is None else n_quantizers
    if not (1 <= c_use <= codes.n_quantizers):
        raise ValueError(f"n_quantizers must lie in [1, {codes.n_quantizers}]")
    if codes.n_quantizers > coder.n_quantizers:
        raise ValueError("codes carry more quantizer stages than the coder")
    if codes.codebook_size != coder.codebook_size or codes.dim != coder.dim:
        raise ValueError("codes are inconsistent with this coder (K or D differs)")
    out = np.zeros((codes.frames, coder.dim))
    for c in range(c_use):
        ids = codes.indices[c]
        if ids.size and ids.max() >= coder.codebooks[c].size:
            raise ValueError(f"stage {c} index out of range")
        out += coder.codebooks[c].entries[ids]
    return out


def quantize(coder: RvqCoder, z: np.ndarray) -> np.ndarray:
    """encode then decode in one step: nearest cascade reconstruction."""
    codes, zq, _, _ = encode_detailed(coder, z)
    return zq


def commitment_loss(residuals: np.ndarray, selected: np.ndarray) -> float:
    """Sum over stages of the mean-per-frame squared quantization error."""
    residuals = np.asarray(residuals, dtype=np.float64)
    selected = np.asarray(selected, dtype=np.float64)
    if residuals.shape != selected.shape:
        raise ValueError(f"shape mismatch {residuals.shape} vs {selected.shape}")
    diff = residuals - selected
    return float(((diff * diff).sum(axis=2)).mean(axis=1).sum())


def _kmeans(samples: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations to stability."""
    n = samples.shape[0]
    centers = np.empty((k, samples.shape[1]))
    centers[0] = samples[rng.integers(0, n)]
    d2 = ((samples - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = samples[rng.integers(0, n)]
        else:
            centers[j] = samples[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((samples - centers[j]) ** 2).sum(axis=1))
    assign = _nearest(centers, samples)
    for _ in range(50):
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = samples[mask].mean(axis=0)
        new_assign = _nearest(centers, samples)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centers


def init_codebooks(coder: RvqCoder, samples: np.ndarray, seed: int) -> RvqCoder:
    """Stage-wise k-means++ on the residual stream; deterministic per seed."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != coder.dim:
        raise ValueError(f"samples must be frames x {coder.dim}")
    k = coder.codebook_size
    if samples.shape[0] < k:
        raise ValueError(f"need at least {k} sample frames, got {samples.shape[0]}")
    rng = np.random.default_rng(seed)
    r = samples.copy()
    books = []
    for _ in range(coder.n_quantizers):
        centers = _kmeans(r, k, rng)
        cb = Codebook(centers.astype(np.float32))
        books.append(cb)
        if coder.pin_zero:
            cb.entries[0] = 0.0
            cb.ema_sums[0] = 0.0
        r = r - cb.entries[_nearest(cb.entries.astype(np.float64), r)]
    return RvqCoder(books, pin_zero=coder.pin_zero)


def ema_update(
    coder: RvqCoder,
    batch: np.ndarray,
    decay: float = EMA_DECAY,
    rng=None,
    dead_threshold: float = DEAD_CODE_THRESHOLD,
) -> RvqCoder:
    """One EMA codebook update from a batch of latent frames (in place).

    Per stage: counts and sums decay toward the batch assignment statistics
    and entries become sums / max(counts, eps). Entries that received no
    assignment in this batch and whose EMA count sits under dead_threshold
    are reseeded from random batch frames when an rng is supplied. Residuals
    propagate through the pre-update entries.
    """
    if not (0.0 <= decay < 1.0):
        raise ValueError("decay must lie in [0, 1)")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != coder.dim:
        raise ValueError(f"batch must be frames x {coder.dim}")
    r = batch.copy()
    for cb in coder.codebooks:
        old_entries = cb.entries.astype(np.float64)
        ids = _nearest(old_entries, r)
        k = cb.size
        counts = np.bincount(ids, minlength=k).astype(np.float64)
        sums = np.zeros((k, cb.dim))
        np.add.at(sums, ids, r)
        cb.ema_counts = (decay * cb.ema_counts + (1.0 - decay) * counts).astype(np.float32)
        cb.ema_sums = (decay * cb.ema_sums + (1.0 - decay) * sums).astype(np.float32)
        new_entries = cb.ema_sums / np.maximum(cb.ema_counts, COUNT_EPS)[:, None]
        if rng is not None:
            dead = (counts == 0) & (cb.ema_counts < dead_threshold)
            if coder.pin_zero:
                dead[0] = False
            n_dead = int(dead.sum())
            if n_dead:
                picks = rng.integers(0, r.shape[0], size=n_dead)
                new_entries[dead] = r[picks]
                cb.ema_counts[dead] = 1.0
                cb.ema_sums[dead] = new_entries[dead]
        cb.entries = new_entries.astype(np.float32)
        if coder.pin_zero:
            cb.entries[0] = 0.0
            cb.ema_sums[0] = 0.0
        r = r - old_entries[ids]
    return coder


# -- file formats -------------------------------------------------------------


def write_bitstream(path, codes: CodecCodes, sample_rate: int, hop_size: int) -> None:
    """HSC1 container: u16 C, u16 K, u16 D, u32 frames, u32 sr, u32 hop,
    then frame-major u16 indices, all little-endian."""
    if codes.codebook_size > 0xFFFF:
        raise ValueError("codebook size exceeds the u16 index format")
    header = BITSTREAM_MAGIC + struct.pack(
        "<HHHIII",
        codes.n_quantizers,
        codes.codebook_size,
        codes.dim,
        codes.frames,
        sample_rate,
        hop_size,
    )
    body = codes.indices.T.astype("<u2").tobytes()  # frame-major
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def read_bitstream(path):
    """Returns (CodecCodes, sample_rate, hop_size)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != BITSTREAM_MAGIC:
        raise ValueError(f"{path}: not a codec bitstream (bad magic)")
    c, k, d, frames, sr, hop = struct.unpack("<HHHIII", blob[4:22])
    expect = frames * c * 2
    body = blob[22:]
    if len(body) != expect:
        raise ValueError(f"{path}: truncated bitstream ({len(body)} of {expect} payload bytes)")
    idx = np.frombuffer(body, dtype="<u2").reshape(frames, c).T.astype(np.int64)
    return CodecCodes(idx, k, d), sr, hop


def save_codebooks(path, coder: RvqCoder) -> None:
    """Raw f32 little-endian entries with a JSON sidecar {C, K, D}."""
    stacked = np.stack([cb.entries for cb in coder.codebooks])
    with open(path, "wb") as fh:
        fh.write(stacked.astype("<f4").tobytes())
    sidecar = {
        "C": coder.n_quantizers,
        "K": coder.codebook_size,
        "D": coder.dim,
        "pin_zero": coder.pin_zero,
    }
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh)


def load_codebooks(path) -> RvqCoder:
    with open(str(path) + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    c, k, d = int(meta["C"]), int(meta["K"]), int(meta["D"])
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != c * k * d:
        raise ValueError(f"{path}: expected {c * k * d} floats, found {raw.size}")
    stacked = raw.reshape(c, k, d)
    books = [Codebook(stacked[i].copy()) for i in range(c)]
    return RvqCoder(books, pin_zero=bool(meta.get("pin_zero", False)))
