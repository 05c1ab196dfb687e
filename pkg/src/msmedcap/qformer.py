"""Query transformer: learnable soft queries, masked self-attention over
[queries ; text], cross-attention from query rows to frozen image features,
and the contrastive / matching / generation pre-training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import CLS, PAD
from .errors import ConfigError, DataError
from .layers import FeedForward, MaskedAttention, check_finite

MODES = ("itc", "itm", "itg", "caption")


@dataclass
class QFormerConfig:
    num_queries: int = 8
    hidden: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    contrast_dim: int = 32
    max_text_len: int = 34
    temp_init: float = 0.07


@dataclass(frozen=True)
class AttentionMask:
    mode: str
    matrix: np.ndarray  # (M+T, M+T) bool; [i, j] True = position i may attend j

    def as_tensor(self, device=None) -> torch.Tensor:
        return torch.as_tensor(self.matrix, device=device)


def build_attention_mask(mode: str, M: int, T: int) -> AttentionMask:
    """Self-attention layout [queries 0..M-1 ; text M..M+T-1] for one objective."""
    if mode not in MODES:
        raise ConfigError(f"unknown mask mode {mode!r}")
    if M < 1 or T < 0:
        raise ConfigError("need M >= 1 and T >= 0")
    if mode == "caption":
        if T:
            raise ConfigError("caption mode takes no text positions")
        return AttentionMask(mode, np.ones((M, M), dtype=bool))
    if T == 0:
        raise ConfigError(f"{mode} mode needs at least one text position")
    n = M + T
    m = np.zeros((n, n), dtype=bool)
    if mode == "itm":
        m[:] = True
    elif mode == "itc":
        m[:M, :M] = True
        m[M:, M:] = True
    else:  # itg: queries see queries; text sees all queries plus its own prefix
        m[:M, :M] = True
        m[M:, :M] = True
        m[M:, M:] = np.tril(np.ones((T, T), dtype=bool))
    return AttentionMask(mode, m)


class QFormerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, feat_dim: int, ffn_mult: int):
        super().__init__()
        self.self_attn = MaskedAttention(dim, heads)
        self.ln_self = nn.LayerNorm(dim)
        self.cross_attn = MaskedAttention(dim, heads, kv_dim=feat_dim)
        self.ln_cross = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult)
        self.ln_ffn = nn.LayerNorm(dim)

    def forward(self, x, feats, mask, num_queries):
        x = self.ln_self(x + self.self_attn(x, mask=mask))
        q = x[:, :num_queries]
        q = self.ln_cross(q + self.cross_attn(q, feats))
        x = torch.cat([q, x[:, num_queries:]], dim=1)
        return self.ln_ffn(x + self.ffn(x))


class QFormer(nn.Module):
    """One Q-Former branch. Parameter groups (see `param_group`):

    queries, text_embed, qformer (embedding norm + blocks), heads, proj.
    """

    def __init__(self, cfg: QFormerConfig, feat_dim: int, vocab_size: int, lm_width: int):
        super().__init__()
        self.cfg = cfg
        self.feat_dim = feat_dim
        d = cfg.hidden
        self.queries = nn.Parameter(torch.randn(cfg.num_queries, d) * 0.02)
        self.word_embed = nn.Embedding(vocab_size, d)
        self.pos_embed = nn.Embedding(cfg.max_text_len, d)
        nn.init.normal_(self.word_embed.weight, std=0.02)
        nn.init.normal_(self.pos_embed.weight, std=0.02)
        self.embed_ln = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(QFormerBlock(d, cfg.heads, feat_dim, cfg.ffn_mult) for _ in range(cfg.layers))
        self.itc_vision = nn.Linear(d, cfg.contrast_dim)
        self.itc_text = nn.Linear(d, cfg.contrast_dim)
        self.itm_head = nn.Linear(d, 1)
        self.itg_head = nn.Linear(d, vocab_size)
        self.temp = nn.Parameter(torch.tensor(cfg.temp_init))
        self.proj = nn.Linear(d, lm_width)

    @staticmethod
    def param_group(name: str) -> str:
        root = name.split(".")[0]
        if root == "queries":
            return "queries"
        if root in ("word_embed", "pos_embed"):
            return "text_embed"
        if root in ("embed_ln", "blocks"):
            return "qformer"
        if root == "proj":
            return "proj"
        return "heads"

    def group_params(self, groups) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if self.param_group(n) in groups]

    def forward(self, feats: torch.Tensor, text_ids: torch.Tensor | None = None, mode: str = "caption"):
        """feats (B, N, C); text_ids (B, T) or None. Returns (query_states, text_states|None)."""
        if feats.shape[-1] != self.feat_dim:
            raise DataError(f"image features have width {feats.shape[-1]}, branch expects {self.feat_dim}")
        if (text_ids is None) != (mode == "caption"):
            raise ConfigError(f"mode {mode!r} inconsistent with text presence")
        b = feats.shape[0]
        m = self.cfg.num_queries
        x = self.queries.unsqueeze(0).expand(b, -1, -1)
        t = 0
        if text_ids is not None:
            t = text_ids.shape[1]
            if t > self.cfg.max_text_len:
                raise DataError(f"text length {t} exceeds max_text_len {self.cfg.max_text_len}")
            pos = torch.arange(t, device=feats.device)
            x = torch.cat([x, self.word_embed(text_ids) + self.pos_embed(pos)], dim=1)
        x = self.embed_ln(x)
        mask = build_attention_mask(mode, m, t).as_tensor(feats.device)
        if text_ids is not None:
            keep = torch.cat([torch.ones(b, m, dtype=torch.bool), text_ids != PAD], dim=1)
            mask = mask[None] & keep[:, None, :]
        for i, block in enumerate(self.blocks):
            x = block(x, feats, mask, m)
            check_finite(x, f"qformer block {i}")
        return x[:, :m], (x[:, m:] if text_ids is not None else None)


def qformer_forward(model: QFormer, image_feats, text_ids=None, mode="caption"):
    return model(image_feats, text_ids, mode)


def project_queries(model: QFormer, query_states: torch.Tensor) -> torch.Tensor:
    """Affine map of query states to the LM embedding width."""
    return model.proj(query_states)


def contrastive_loss(sim: torch.Tensor, temp: torch.Tensor | float) -> torch.Tensor:
    """Symmetric InfoNCE over a B x B image-text similarity matrix."""
    logits = sim / temp
    labels = torch.arange(sim.shape[0], device=sim.device)
    return (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)) / 2


def itc_similarity(model: QFormer, feats, cls_ids) -> torch.Tensor:
    q, t = model(feats, cls_ids, "itc")
    img = F.normalize(model.itc_vision(q), dim=-1)  # (B, M, E)
    txt = F.normalize(model.itc_text(t[:, 0]), dim=-1)  # (B, E)
    # block-diagonal mask: query states depend only on the image, text only on the text
    return torch.einsum("ime,je->ijm", img, txt).max(dim=-1).values


def itc_loss(model: QFormer, feats, cls_ids) -> torch.Tensor:
    if feats.shape[0] < 2:
        raise DataError("itc_loss needs a batch of at least 2 pairs")
    if (cls_ids[:, 0] != CLS).any():
        raise DataError("itc text must start with the CLS token")
    return contrastive_loss(itc_similarity(model, feats, cls_ids), model.temp)


def draw_negatives(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """For each i, a uniformly drawn index j != i."""
    j = rng.integers(batch_size - 1, size=batch_size)
    return j + (j >= np.arange(batch_size))


def itm_logits(model: QFormer, feats, cls_ids) -> torch.Tensor:
    q, _ = model(feats, cls_ids, "itm")
    return model.itm_head(q).squeeze(-1).mean(dim=1)


def itm_loss(model: QFormer, feats, cls_ids, negatives=None, rng=None) -> torch.Tensor:
    b = feats.shape[0]
    if b < 2:
        raise DataError("itm_loss needs a batch of at least 2 pairs")
    if negatives is None:
        negatives = draw_negatives(b, rng if rng is not None else np.random.default_rng())
    neg = torch.as_tensor(np.asarray(negatives), dtype=torch.long)
    logits = itm_logits(model, torch.cat([feats, feats]), torch.cat([cls_ids, cls_ids[neg]]))
    labels = torch.cat([torch.ones(b), torch.zeros(b)]).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, labels)


def itg_logits(model: QFormer, feats, bos_ids) -> torch.Tensor:
    _, t = model(feats, bos_ids, "itg")
    return model.itg_head(t)


def itg_loss(model: QFormer, feats, bos_ids) -> torch.Tensor:
    targets = bos_ids[:, 1:]
    if ((targets != PAD).sum(dim=1) == 0).any():
        raise DataError("itg_loss got a caption with no tokens to predict (all PAD)")
    logits = itg_logits(model, feats, bos_ids)[:, :-1]
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD)


def pretrain_loss(model: QFormer, feats, cls_ids, bos_ids, rng) -> dict[str, torch.Tensor]:
    parts = {
        "itc": itc_loss(model, feats, cls_ids),
        "itm": itm_loss(model, feats, cls_ids, rng=rng),
        "itg": itg_loss(model, feats, bos_ids),
    }
    parts["total"] = parts["itc"] + parts["itm"] + parts["itg"]
    return parts
