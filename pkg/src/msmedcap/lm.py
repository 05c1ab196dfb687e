"""Toy decoder-only language model used as the frozen captioning head.

It is pre-trained on captions alone, frozen, and then conditioned through a
prefix of projected query outputs followed by an embedded text prompt.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import BOS, EOS, PAD, Tokenizer, pad_batch
from .encoders import sinusoidal_positions
from .errors import ConfigError, DataError, NumericError
from .layers import FeedForward, MaskedAttention, causal_mask, fingerprint_tensors

log = logging.getLogger(__name__)


@dataclass
class LMConfig:
    width: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_ctx: int = 64
    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01


class DecoderBlock(nn.Module):
    def __init__(self, dim, heads, ffn_mult):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MaskedAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult)

    def forward(self, x, mask):
        x = x + self.attn(self.ln1(x), mask=mask)
        return x + self.ffn(self.ln2(x))


class FrozenLM(nn.Module):
    def __init__(self, cfg: LMConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.tok_embed = nn.Embedding(vocab_size, cfg.width)
        nn.init.normal_(self.tok_embed.weight, std=0.02)
        self.register_buffer(
            "positions", torch.tensor(sinusoidal_positions(cfg.max_ctx, cfg.width), dtype=torch.float32)
        )
        self.blocks = nn.ModuleList(DecoderBlock(cfg.width, cfg.heads, cfg.ffn_mult) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.width)
        self.head = nn.Linear(cfg.width, vocab_size)
        self.frozen = False

    def freeze(self) -> "FrozenLM":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def fingerprint(self) -> str:
        return fingerprint_tensors(self.state_dict().items())

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_embed(ids)

    def forward_embeds(self, x: torch.Tensor, offset: int | torch.Tensor = 0) -> torch.Tensor:
        """x (B, L, D) input embeddings -> (B, L, V) next-token logits."""
        length = x.shape[1]
        if length > self.cfg.max_ctx:
            raise DataError(f"sequence of {length} positions exceeds the LM context {self.cfg.max_ctx}")
        if isinstance(offset, int):
            pos = self.positions[offset : offset + length].to(x.dtype)[None]
        else:  # per-row offsets
            idx = offset[:, None] + torch.arange(length)[None]
            pos = self.positions.to(x.dtype)[idx]
        h = x + pos
        mask = causal_mask(length, x.device)
        for block in self.blocks:
            h = block(h, mask)
        return self.head(self.ln_f(h))


def build_prefix(v_clip_proj, v_sam_proj, prompt_ids, lm: FrozenLM) -> torch.Tensor:
    """Concatenate [clip query rows ; sam query rows ; embedded prompt].

    Inputs may be (M, D) or batched (B, M, D); an absent branch is None or has
    zero rows. `prompt_ids` is a 1-D token sequence shared across the batch.
    """
    blocks = [b for b in (v_clip_proj, v_sam_proj) if b is not None]
    batched = any(b.dim() == 3 for b in blocks)
    width = lm.cfg.width
    for b in blocks:
        if b.shape[-1] != width:
            raise DataError(f"prefix block width {b.shape[-1]} != LM width {width}")
    ids = torch.as_tensor(list(prompt_ids), dtype=torch.long)
    prompt = lm.embed_tokens(ids)
    if batched:
        n = next(b.shape[0] for b in blocks if b.dim() == 3)
        blocks = [b if b.dim() == 3 else b.expand(n, -1, -1) for b in blocks]
        prompt = prompt.unsqueeze(0).expand(n, -1, -1)
    dtype = blocks[0].dtype if blocks else prompt.dtype
    return torch.cat([b.to(dtype) for b in blocks] + [prompt.to(dtype)], dim=-2)


def lm_loss(lm: FrozenLM, prefix: torch.Tensor, caption_ids: torch.Tensor) -> torch.Tensor:
    """Causal cross-entropy of BOS-framed captions given prefix rows.

    prefix (B, P, D) or (P, D); caption_ids (B, T) or (T,), PAD-padded.
    """
    if prefix.dim() == 2:
        prefix = prefix[None]
    if caption_ids.dim() == 1:
        caption_ids = caption_ids[None]
    if (caption_ids[:, 0] != BOS).any():
        raise DataError("captions must be framed BOS ... EOS")
    p = prefix.shape[1]
    inputs = caption_ids[:, :-1]
    targets = caption_ids[:, 1:]
    if p + inputs.shape[1] > lm.cfg.max_ctx:
        raise DataError(f"prefix ({p}) plus caption ({inputs.shape[1]}) exceeds the LM context {lm.cfg.max_ctx}")
    x = torch.cat([prefix, lm.embed_tokens(inputs).to(prefix.dtype)], dim=1)
    logits = lm.forward_embeds(x)[:, p:]
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=PAD)


# ---------------------------------------------------------------------------
# Pre-training the toy LM


def pretrain_toy_lm(
    captions: Sequence[str], tokenizer: Tokenizer, cfg: LMConfig, seed: int, max_caption_tokens: int = 32
) -> FrozenLM:
    """Fit a small causal LM on captions, then freeze it.

    Captions are placed at random context offsets so the model later reads
    them after a prefix of arbitrary length.
    """
    if not captions:
        raise DataError("pretrain_toy_lm needs a non-empty caption corpus")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    lm = FrozenLM(cfg, len(tokenizer))
    encoded = [tokenizer.encode(c, max_caption_tokens) for c in captions]
    opt = torch.optim.AdamW(lm.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / 100) * 0.5 * (1 + math.cos(math.pi * s / cfg.steps)))
    lm.train()
    for step in range(cfg.steps):
        pick = rng.integers(len(encoded), size=cfg.batch_size)
        ids = torch.as_tensor(pad_batch([encoded[i] for i in pick]))
        width = ids.shape[1] - 1
        offsets = torch.as_tensor(rng.integers(0, cfg.max_ctx - width + 1, size=cfg.batch_size))
        logits = lm.forward_embeds(lm.embed_tokens(ids[:, :-1]), offsets)
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), ids[:, 1:].reshape(-1), ignore_index=PAD)
        if not torch.isfinite(loss):
            raise NumericError(f"toy LM loss is not finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0 or step == cfg.steps - 1:
            log.info("toy lm step %d loss %.4f", step, loss.item())
    return lm.freeze()


def perplexity(lm: FrozenLM, captions: Sequence[str], tokenizer: Tokenizer, offset: int = 0, max_caption_tokens=32) -> float:
    """Per-token perplexity of BOS-framed captions (EOS included, BOS not predicted)."""
    ids = torch.as_tensor(pad_batch([tokenizer.encode(c, max_caption_tokens) for c in captions]))
    with torch.no_grad():
        logits = lm.forward_embeds(lm.embed_tokens(ids[:, :-1]), offset)
        nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), ids[:, 1:].reshape(-1), ignore_index=PAD)
    return float(torch.exp(nll))


def unigram_perplexity(train: Sequence[str], test: Sequence[str], tokenizer: Tokenizer, max_caption_tokens=32) -> float:
    """Add-one smoothed unigram baseline over the same predicted tokens."""
    counts = np.ones(len(tokenizer))
    for c in train:
        for i in tokenizer.encode(c, max_caption_tokens)[1:]:
            counts[i] += 1
    logp = np.log(counts / counts.sum())
    toks = [i for c in test for i in tokenizer.encode(c, max_caption_tokens)[1:]]
    return float(np.exp(-np.mean(logp[toks])))


# ---------------------------------------------------------------------------
# Decoding


def _next_logprobs(lm: FrozenLM, prefix: torch.Tensor, seqs: list[list[int]]) -> torch.Tensor:
    ids = torch.as_tensor(seqs, dtype=torch.long)
    pre = prefix.unsqueeze(0).expand(len(seqs), -1, -1)
    x = torch.cat([pre, lm.embed_tokens(ids).to(prefix.dtype)], dim=1)
    return torch.log_softmax(lm.forward_embeds(x)[:, -1], dim=-1)


def greedy_decode(lm: FrozenLM, prefix: torch.Tensor, max_len: int) -> list[int]:
    """Token ids after BOS, up to and excluding EOS."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    seq = [BOS]
    with torch.no_grad():
        for _ in range(max_len):
            if prefix.shape[0] + len(seq) > lm.cfg.max_ctx:
                break
            tok = int(torch.argmax(_next_logprobs(lm, prefix, [seq])[0]))
            if tok == EOS:
                break
            seq.append(tok)
    return seq[1:]


def beam_decode(lm: FrozenLM, prefix: torch.Tensor, beam_size: int, max_len: int, alpha: float = 0.7) -> list[int]:
    """Beam search ranked by logprob / length**alpha; ties go to the lower token id.

    EOS counts toward the length of a finished hypothesis.
    """
    if beam_size < 1:
        raise ConfigError("beam size must be >= 1")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    alive: list[tuple[list[int], float]] = [([BOS], 0.0)]
    finished: list[tuple[float, list[int]]] = []
    with torch.no_grad():
        for _ in range(max_len):
            if prefix.shape[0] + len(alive[0][0]) > lm.cfg.max_ctx:
                break
            logp = _next_logprobs(lm, prefix, [s for s, _ in alive]).double().numpy()
            n = len(alive[0][0])  # generated length once this step's token is appended
            cands = []
            for h, (_, total) in enumerate(alive):
                for tok in range(logp.shape[1]):
                    new_total = total + logp[h, tok]
                    cands.append((-new_total / n**alpha, tok, h, new_total))
            cands.sort()
            survivors = []
            for neg_score, tok, h, new_total in cands[:beam_size]:
                seq = alive[h][0]
                if tok == EOS:
                    finished.append((neg_score, seq[1:]))
                else:
                    survivors.append((seq + [tok], new_total))
            alive = survivors
            if not alive or len(finished) >= beam_size:
                break
    pool = finished + [(-total / (len(seq) - 1) ** alpha, seq[1:]) for seq, total in alive]
    pool.sort(key=lambda item: (item[0], item[1]))
    return pool[0][1]


def generate(
    lm: FrozenLM,
    prefix: torch.Tensor,
    tokenizer: Tokenizer,
    strategy: str = "greedy",
    beam_size: int = 3,
    max_len: int = 32,
    alpha: float = 0.7,
) -> str:
    if strategy == "greedy":
        ids = greedy_decode(lm, prefix, max_len)
    elif strategy == "beam":
        ids = beam_decode(lm, prefix, beam_size, max_len, alpha)
    else:
        raise ConfigError(f"unknown decoding strategy {strategy!r}")
    return tokenizer.decode(ids)
