"""Composite training losses.

Reconstruction L1, LSGAN pair, feature matching, CTC (log-space forward
DP, with an autodiff variant whose backward is the classic alpha-beta
posterior), frame-wise contrastive InfoNCE over paired representation
streams, and the two weighted totals. Functions accept numpy arrays or
autodiff Tensors wherever a gradient path makes sense.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, custom


@dataclass(frozen=True)
class LossWeights:
    recon: float = 45.0
    emb: float = 0.02
    fm: float = 2.0
    lyrics: float = 1.0
    note: float = 1.0
    prior: float = 1.0

    def __post_init__(self):
        for name in ("recon", "emb", "fm", "lyrics", "note", "prior"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight '{name}' must be >= 0")


@dataclass(frozen=True)
class CtcTarget:
    labels: tuple
    alphabet: int  # labels live in [1, alphabet]; 0 is the blank

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))
        for lab in self.labels:
            if not (1 <= lab <= self.alphabet):
                raise ValueError(f"label {lab} outside [1, {self.alphabet}]")


def recon_l1(x, x_hat):
    """Mean absolute difference over all entries."""
    _check_shapes(x, x_hat)
    diff = x - x_hat
    return diff.abs().mean() if isinstance(diff, Tensor) else np.abs(diff).mean()


def lsgan_d(real_scores, fake_scores):
    """Least-squares discriminator loss: mean[(real-1)^2] + mean[fake^2]."""
    r = real_scores - 1.0
    return (r * r).mean() + (fake_scores * fake_scores).mean()


def lsgan_g(fake_scores):
    """Least-squares generator loss: mean[(fake-1)^2]."""
    f = fake_scores - 1.0
    return (f * f).mean()


def feature_matching(real_feats, fake_feats):
    """Sum over layers of the per-layer mean absolute feature difference."""
    if len(real_feats) != len(fake_feats):
        raise ValueError(f"layer count mismatch: {len(real_feats)} vs {len(fake_feats)}")
    total = None
    for rf, ff in zip(real_feats, fake_feats):
        _check_shapes(rf, ff)
        diff = rf - ff
        term = diff.abs().mean() if isinstance(diff, Tensor) else np.abs(diff).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("feature lists are empty")
    return total


# -- CTC ----------------------------------------------------------------------


def _extend_labels(labels):
    ext = [0]
    for lab in labels:
        ext.extend((lab, 0))
    return np.asarray(ext, dtype=np.int64)


def _min_frames(ext) -> int:
    # one frame per label plus one per repeated-label boundary
    labels = ext[1::2]
    repeats = int(np.sum(labels[1:] == labels[:-1])) if labels.size > 1 else 0
    return int(labels.size + repeats)


def _ctc_alpha_beta(logp: np.ndarray, ext: np.ndarray):
    """Log-space forward/backward lattices and the total log-likelihood."""
    t_len, _ = logp.shape
    s_len = ext.size
    neg = -np.inf
    logp_ext = logp[:, ext]  # (T, S)
    skip_ok = np.zeros(s_len, dtype=bool)
    skip_ok[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    skip_idx = np.flatnonzero(skip_ok)

    alpha = np.full((t_len, s_len), neg)
    alpha[0, 0] = logp_ext[0, 0]
    if s_len > 1:
        alpha[0, 1] = logp_ext[0, 1]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        merged = prev.copy()
        merged[1:] = np.logaddexp(merged[1:], prev[:-1])
        if skip_idx.size:
            merged[skip_idx] = np.logaddexp(merged[skip_idx], prev[skip_idx - 2])
        alpha[t] = merged + logp_ext[t]
    log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2] if s_len > 1 else neg)

    beta = np.full((t_len, s_len), neg)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    for t in range(t_len - 2, -1, -1):
        emit = beta[t + 1] + logp_ext[t + 1]
        merged = emit.copy()
        merged[:-1] = np.logaddexp(merged[:-1], emit[1:])
        if skip_idx.size:
            merged[skip_idx - 2] = np.logaddexp(merged[skip_idx - 2], emit[skip_idx])
        beta[t] = merged
    return alpha, beta, float(log_z)


def ctc_loss(log_probs: np.ndarray, target: CtcTarget) -> float:
    """Negative log marginal over all monotonic blank alignments."""
    logp = np.asarray(log_probs, dtype=np.float64)
    if logp.ndim != 2 or logp.shape[1] != target.alphabet + 1:
        raise ValueError(
            f"log_probs must be frames x {target.alphabet + 1}, got {logp.shape}"
        )
    ext = _extend_labels(target.labels)
    if logp.shape[0] < _min_frames(ext):
        raise ValueError(
            f"target needs at least {_min_frames(ext)} frames, got {logp.shape[0]}"
        )
    _, _, log_z = _ctc_alpha_beta(logp, ext)
    return -log_z


def ctc_loss_graph(log_probs: Tensor, target: CtcTarget) -> Tensor:
    """Differentiable CTC; gradient is minus the state posterior per symbol."""
    logp = log_probs.data.astype(np.float64)
    if logp.ndim != 2 or logp.shape[1] != target.alphabet + 1:
        raise ValueError(
            f"log_probs must be frames x {target.alphabet + 1}, got {logp.shape}"
        )
    ext = _extend_labels(target.labels)
    if logp.shape[0] < _min_frames(ext):
        raise ValueError(
            f"target needs at least {_min_frames(ext)} frames, got {logp.shape[0]}"
        )
    alpha, beta, log_z = _ctc_alpha_beta(logp, ext)
    with np.errstate(invalid="ignore"):
        posterior = np.exp(alpha + beta - log_z)  # (T, S)

    def grad_fn(g):
        acc = np.zeros_like(logp)
        np.add.at(acc.T, ext, posterior.T)
        return ((-float(g) * acc).astype(log_probs.data.dtype),)

    return custom(np.asarray(-log_z, dtype=log_probs.data.dtype), (log_probs,), grad_fn, "ctc")


# -- contrastive ---------------------------------------------------------------


def contrastive_loss(h, h_tilde, tau_cont: float = 0.5, n_negatives: int = 10, rng=None):
    """Symmetric frame-wise InfoNCE over two paired representation streams.

    For each frame t and each direction, -log of exp(cos(anchor_t,
    positive_t)/tau) over the sum of exp(cos(anchor_t, neg_k)/tau) with
    n_negatives random unmatched frames drawn from the anchor's own stream;
    terms are summed over frames and the two directions added. The value can
    be negative. Invariant to positive per-row rescaling and to swapping the
    streams.
    """
    if tau_cont <= 0:
        raise ValueError("tau_cont must be positive")
    ha, hb = _values_of(h), _values_of(h_tilde)
    if ha.shape != hb.shape:
        raise ValueError(f"paired streams differ in shape: {ha.shape} vs {hb.shape}")
    n = ha.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 frames")
    if np.any(np.linalg.norm(ha, axis=1) < 1e-12) or np.any(np.linalg.norm(hb, axis=1) < 1e-12):
        raise ValueError("zero rows make cosine similarity undefined")
    rng = np.random.default_rng(0) if rng is None else rng
    # unmatched frame indices per anchor, shared by both directions
    neg_idx = np.empty((n, n_negatives), dtype=np.int64)
    for t in range(n):
        pool = rng.integers(0, n - 1, size=n_negatives)
        pool = pool + (pool >= t)  # skip the anchor's own frame
        neg_idx[t] = pool

    def direction(anchor, positive):
        pos = _row_cos(anchor, positive) * (1.0 / tau_cont)
        flat = neg_idx.reshape(-1)
        anchor_rep = anchor[np.repeat(np.arange(n), n_negatives)]
        negs = _row_cos(anchor_rep, anchor[flat]) * (1.0 / tau_cont)
        neg_exp = negs.exp() if isinstance(negs, Tensor) else np.exp(negs)
        denom = neg_exp.reshape(n, n_negatives).sum(axis=1)
        log_denom = denom.log() if isinstance(denom, Tensor) else np.log(denom)
        return (log_denom - pos).sum()

    return direction(h, h_tilde) + direction(h_tilde, h)


def _row_cos(a, b):
    dot = (a * b).sum(axis=-1)
    na = (a * a).sum(axis=-1) ** 0.5
    nb = (b * b).sum(axis=-1) ** 0.5
    return dot / (na * nb)


# -- totals --------------------------------------------------------------------


def generator_total(parts: dict, weights: LossWeights):
    """Weighted audio-autoencoder objective.

    parts maps {adv, recon, emb, fm, lyrics, note} to loss values; missing
    parts count as zero.
    """
    total = parts.get("adv", 0.0)
    for name in ("recon", "emb", "fm", "lyrics", "note"):
        if name in parts:
            total = total + getattr(weights, name) * parts[name]
    return total


def latent_generator_total(l_diff, l_prior, lambda_prior: float, contrastive_terms=()):
    """Latent-generator objective: diff + lambda_prior * prior + contrastive."""
    total = l_diff + lambda_prior * l_prior
    for term in contrastive_terms:
        total = total + term
    return total


def _values_of(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_shapes(a, b):
    va, vb = _values_of(a), _values_of(b)
    if va.shape != vb.shape:
        raise ValueError(f"shape mismatch: {va.shape} vs {vb.shape}")
