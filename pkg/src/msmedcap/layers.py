"""Attention building blocks shared by the Q-Former and the toy decoder LM."""

from __future__ import annotations

import hashlib
import math

import torch
from torch import nn
import torch.nn.functional as F


class MaskedAttention(nn.Module):
    """Multi-head attention with an explicit boolean "may attend" mask.

    mask: (Lq, Lk) or (B, Lq, Lk); True keeps the edge. Masked probabilities are
    exactly zero, so masked keys cannot influence the output bits.
    """

    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.head_dim = dim // heads
        self.kv_dim = kv_dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, mask=None, return_probs=False):
        context = x if context is None else context
        b, lq, _ = x.shape
        lk = context.shape[1]
        h, d = self.heads, self.head_dim
        q = self.q(x).view(b, lq, h, d).transpose(1, 2)
        k = self.k(context).view(b, lk, h, d).transpose(1, 2)
        v = self.v(context).view(b, lk, h, d).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d)
        if mask is not None:
            if mask.dim() == 2:
                mask = mask[None]
            scores = scores.masked_fill(~mask[:, None], float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        y = (probs @ v).transpose(1, 2).reshape(b, lq, h * d)
        y = self.out(y)
        return (y, probs) if return_probs else y


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__(nn.Linear(dim, mult * dim), nn.GELU(), nn.Linear(mult * dim, dim))


def causal_mask(n: int, device=None) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool, device=device).tril()


def fingerprint_tensors(named) -> str:
    """sha256 over (name, shape, float32 little-endian bytes), in name order."""
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        a = t.detach().to(torch.float32).cpu().contiguous().numpy().astype("<f4")
        h.update(name.encode())
        h.update(repr(tuple(a.shape)).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def check_finite(t: torch.Tensor, where: str) -> None:
    from .errors import NumericError

    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations in {where}")


def masked_mean_ce(logits: torch.Tensor, targets: torch.Tensor, ignore_index: int) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=ignore_index)
