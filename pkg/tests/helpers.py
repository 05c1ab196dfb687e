"""Tiny float64 models and a central-difference gradient checker."""

import numpy as np
import torch

from msmedcap.data import BOS, CLS, EOS, PAD
from msmedcap.lm import FrozenLM, LMConfig
from msmedcap.qformer import QFormer, QFormerConfig

TINY_M, TINY_D, TINY_L, TINY_B, TINY_V = 2, 8, 1, 2, 12
TINY_FEAT = 6


def tiny_qformer(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    cfg = QFormerConfig(num_queries=TINY_M, hidden=TINY_D, layers=TINY_L, heads=2, ffn_mult=2, contrast_dim=4, max_text_len=8)
    return QFormer(cfg, TINY_FEAT, TINY_V, lm_width=TINY_D).to(dtype)


def tiny_lm(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    lm = FrozenLM(LMConfig(width=TINY_D, layers=1, heads=2, ffn_mult=2, max_ctx=16), TINY_V).to(dtype)
    return lm.freeze()


def tiny_batch(seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(TINY_B, 5, TINY_FEAT, generator=g, dtype=dtype)
    words = torch.randint(5, TINY_V, (TINY_B, 3), generator=g)
    bos = torch.cat([torch.full((TINY_B, 1), BOS), words, torch.full((TINY_B, 1), EOS)], dim=1)
    bos[1, -1] = PAD  # one padded caption
    bos[1, -2] = EOS
    cls = bos.clone()
    cls[:, 0] = CLS
    return feats, cls, bos


def central_difference_error(loss_fn, tensors, eps=1e-6):
    """Norm-wise relative error between autograd and central differences.

    Returns ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||) over all entries.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    auto = torch.autograd.grad(loss, tensors, allow_unused=True)
    auto = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, auto)]
    num = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            num.append(g)
    a = torch.cat([x.reshape(-1) for x in auto])
    n = torch.cat([x.reshape(-1) for x in num])
    denom = max(a.norm().item(), n.norm().item(), 1e-30)
    return (a - n).norm().item() / denom, a.norm().item()


def fresh_rng(seed=0):
    return np.random.default_rng(seed)


def mark_probe_scores(n_train=400, n_test=200, seed=7):
    """Linear-probe mark accuracy for (general, detail) features on single-mark medical images."""
    from msmedcap.data import CorpusConfig, render_medical
    from msmedcap.encoders import encode_detail, encode_general, linear_probe_accuracy

    cfg = CorpusConfig()
    general, detail, labels = [], [], []
    for i in range(n_train + n_test):
        img, _, info = render_medical(np.random.default_rng([seed, i]), cfg, n_marks=1)
        general.append(encode_general(img))
        detail.append(encode_detail(img))
        labels.append(info["marks"][0][0])
    labels = np.array(labels)
    out = []
    for feats in (np.stack(general), np.stack(detail)):
        out.append(linear_probe_accuracy(feats[:n_train], labels[:n_train], feats[n_train:], labels[n_train:]))
    return tuple(out)
