"""Layers, desk-scale networks and the AdamW optimizer.

All parameters are autodiff Tensors; parameter names are stable so that
checkpoints round-trip. Training nets run in float32 (matching the f32
checkpoint format, which makes resume bit-exact); gradient-check builds
pass dtype=float64.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import NumericalError, Tensor, as_tensor, conv1d3, embedding


def _uniform(rng, fan_in: int, shape, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng, dtype=np.float32):
        self.w = Tensor(_uniform(rng, n_in, (n_in, n_out), dtype), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return as_tensor(x, self.w.dtype) @ self.w + self.b

    def params(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


class Conv3:
    """Width-3 frame convolution, zero padded, length preserving."""

    def __init__(self, n_in: int, n_out: int, rng, dtype=np.float32):
        self.w = Tensor(_uniform(rng, 3 * n_in, (3, n_in, n_out), dtype), requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return conv1d3(as_tensor(x, self.w.dtype), self.w, self.b)

    def params(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


class Embedding:
    def __init__(self, n_ids: int, dim: int, rng, dtype=np.float32):
        self.table = Tensor(_uniform(rng, dim, (n_ids, dim), dtype), requires_grad=True)

    def __call__(self, ids):
        return embedding(self.table, ids)

    def params(self, prefix: str):
        return [(prefix + ".table", self.table)]


class GatedConvBlock:
    """Residual block: x + proj(tanh(conv_f(x) + tf) * sigmoid(conv_g(x) + tg)).

    The optional time vector is injected additively into both gates, one
    linear per gate, broadcast over frames.
    """

    def __init__(self, width: int, rng, time_dim: int | None = None, dtype=np.float32):
        self.conv_f = Conv3(width, width, rng, dtype)
        self.conv_g = Conv3(width, width, rng, dtype)
        self.proj = Linear(width, width, rng, dtype)
        self.time_f = Linear(time_dim, width, rng, dtype) if time_dim else None
        self.time_g = Linear(time_dim, width, rng, dtype) if time_dim else None

    def __call__(self, x, t_emb=None):
        a = self.conv_f(x)
        g = self.conv_g(x)
        if t_emb is not None:
            if self.time_f is None:
                raise ValueError("block was built without time conditioning")
            a = a + self.time_f(t_emb)
            g = g + self.time_g(t_emb)
        return x + self.proj(a.tanh() * g.sigmoid())

    def params(self, prefix: str):
        out = (
            self.conv_f.params(prefix + ".conv_f")
            + self.conv_g.params(prefix + ".conv_g")
            + self.proj.params(prefix + ".proj")
        )
        if self.time_f is not None:
            out += self.time_f.params(prefix + ".time_f")
            out += self.time_g.params(prefix + ".time_g")
        return out


def time_embedding(t: float, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of a scalar diffusion time t in [0, 1]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = 1000.0 * float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(dtype)


class ScoreNet:
    """Conditional score estimator s(z_t, mu_hat, h_cond, t) -> frames x D.

    Additive input projections feed a stack of gated residual blocks; the
    diffusion time enters every block through a sinusoidal embedding.
    """

    def __init__(
        self,
        latent_dim: int,
        cond_dim: int,
        width: int = 64,
        blocks: int = 4,
        time_dim: int = 64,
        rng=None,
        dtype=np.float32,
    ):
        rng = np.random.default_rng(0) if rng is None else rng
        self.latent_dim = latent_dim
        self.time_dim = time_dim
        self.dtype = dtype
        self.z_in = Linear(latent_dim, width, rng, dtype)
        self.mu_in = Linear(latent_dim, width, rng, dtype)
        self.cond_in = Linear(cond_dim, width, rng, dtype)
        self.blocks = [GatedConvBlock(width, rng, time_dim, dtype) for _ in range(blocks)]
        self.out = Linear(width, latent_dim, rng, dtype)

    def __call__(self, z_t, mu_hat, h_cond, t: float):
        z_t = as_tensor(z_t, self.dtype)
        mu_hat = as_tensor(mu_hat, self.dtype)
        h_cond = as_tensor(h_cond, self.dtype)
        if not (z_t.shape[-2] == mu_hat.shape[-2] == h_cond.shape[-2]):
            raise ValueError(
                f"frame counts differ: z_t {z_t.shape}, mu {mu_hat.shape}, cond {h_cond.shape}"
            )
        t_emb = Tensor(time_embedding(t, self.time_dim, self.dtype))
        h = self.z_in(z_t) + self.mu_in(mu_hat) + self.cond_in(h_cond)
        for blk in self.blocks:
            h = blk(h, t_emb)
        return self.out(h)

    def params(self, prefix: str = "score"):
        out = (
            self.z_in.params(prefix + ".z_in")
            + self.mu_in.params(prefix + ".mu_in")
            + self.cond_in.params(prefix + ".cond_in")
        )
        for i, blk in enumerate(self.blocks):
            out += blk.params(f"{prefix}.block{i}")
        return out + self.out.params(prefix + ".out")


class MelEncoder:
    """Log-mel frames -> continuous latent, frames x D."""

    def __init__(self, mel_bins: int, latent_dim: int, width: int = 64, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dtype = dtype
        self.lin_in = Linear(mel_bins, width, rng, dtype)
        self.block = GatedConvBlock(width, rng, None, dtype)
        self.lin_out = Linear(width, latent_dim, rng, dtype)

    def __call__(self, x):
        h = self.lin_in(as_tensor(x, self.dtype)).tanh()
        h = self.block(h)
        return self.lin_out(h)

    def params(self, prefix: str = "enc"):
        return (
            self.lin_in.params(prefix + ".lin_in")
            + self.block.params(prefix + ".block")
            + self.lin_out.params(prefix + ".lin_out")
        )


class MelDecoder:
    """Quantized latent -> log-mel frames."""

    def __init__(self, mel_bins: int, latent_dim: int, width: int = 64, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dtype = dtype
        self.lin_in = Linear(latent_dim, width, rng, dtype)
        self.block = GatedConvBlock(width, rng, None, dtype)
        self.lin_out = Linear(width, mel_bins, rng, dtype)

    def __call__(self, z):
        h = self.lin_in(as_tensor(z, self.dtype)).tanh()
        h = self.block(h)
        return self.lin_out(h)

    def params(self, prefix: str = "dec"):
        return (
            self.lin_in.params(prefix + ".lin_in")
            + self.block.params(prefix + ".block")
            + self.lin_out.params(prefix + ".lin_out")
        )


class MelPatchDiscriminator:
    """Small conv net scoring log-mel patches; exposes per-layer features."""

    def __init__(self, mel_bins: int, width: int = 32, rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dtype = dtype
        self.conv1 = Conv3(mel_bins, width, rng, dtype)
        self.conv2 = Conv3(width, width, rng, dtype)
        self.head = Linear(width, 1, rng, dtype)

    def __call__(self, x):
        """Returns (per-frame scores, [layer features])."""
        f1 = self.conv1(as_tensor(x, self.dtype)).relu()
        f2 = self.conv2(f1).relu()
        return self.head(f2), [f1, f2]

    def params(self, prefix: str = "disc"):
        return (
            self.conv1.params(prefix + ".conv1")
            + self.conv2.params(prefix + ".conv2")
            + self.head.params(prefix + ".head")
        )


class AdamW:
    """AdamW with decoupled weight decay applied before the moment update."""

    def __init__(
        self,
        params,
        lr: float,
        beta1: float = 0.8,
        beta2: float = 0.99,
        weight_decay: float = 0.01,
        eps: float = 1e-8,
    ):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(np.sum(g)):
                raise NumericalError(f"non-finite gradient at optimizer step {t}")
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += self.eps
            p.data -= (self.lr / bc1) * m / denom

    def state_arrays(self, names) -> dict[str, np.ndarray]:
        """Moment arrays keyed for checkpointing; names align with params."""
        out = {}
        for name, m, v in zip(names, self.m, self.v):
            out["adam.m." + name] = m
            out["adam.v." + name] = v
        return out

    def load_state_arrays(self, names, arrays: dict[str, np.ndarray], step: int):
        for i, name in enumerate(names):
            self.m[i] = arrays["adam.m." + name].astype(self.m[i].dtype).reshape(self.m[i].shape)
            self.v[i] = arrays["adam.v." + name].astype(self.v[i].dtype).reshape(self.v[i].shape)
        self.step_count = int(step)


def set_params(named_params, arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into live parameter tensors, shape checked."""
    for name, tensor in named_params:
        if name not in arrays:
            raise KeyError(f"checkpoint missing parameter '{name}'")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(tensor.data.shape):
            raise ValueError(
                f"shape mismatch for '{name}': checkpoint {arr.shape} vs model {tensor.data.shape}"
            )
        tensor.data = arr.astype(tensor.data.dtype).copy()


def grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)
