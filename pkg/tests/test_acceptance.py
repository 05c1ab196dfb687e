"""End-to-end acceptance checks, one test group per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary ends with one
``criterion N: PASS|FAIL`` line per criterion.
"""

import hashlib
import math
import random
import shutil
import subprocess
import sys
import time
from pathlib import Path

import pytest
import torch

from msmedcap.config import DecodeConfig, OptimizerConfig, StagePlan, load_config
from msmedcap.data import MARKS, Manifest
from msmedcap.lm import lm_loss
from msmedcap.metrics import EvalPair, bleu_n, cider, meteor_lite, rouge_l, scale_report
from msmedcap.qformer import build_attention_mask, itc_loss, itg_logits, itg_loss, itm_loss, project_queries
from msmedcap.checkpoint import Checkpoint
from msmedcap.training import (
    CaptionModel,
    CorpusData,
    FeatureStore,
    JsonlLog,
    PRETRAIN_GROUPS,
    caption_manifest,
    encoder_fingerprints,
    run_ablation,
    run_finetune,
    run_pretrain,
    select_cells,
)

from helpers import TINY_D, TINY_M, central_difference_error, mark_probe_scores, tiny_batch, tiny_lm, tiny_qformer
from oracles import dense_cider, naive_bleu, naive_meteor, naive_rouge

ROOT = Path(__file__).resolve().parents[1]


def report(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")


# -- 1. gradient fidelity ------------------------------------------------------------


@pytest.mark.criterion(1)
def test_c1_gradients_match_central_differences():
    start = time.perf_counter()
    qf = tiny_qformer(seed=1)
    lm = tiny_lm(seed=1)
    feats, cls, bos = tiny_batch(seed=1)
    params = [p for p in qf.parameters() if p.requires_grad]

    def captioning():
        q, _ = qf(feats[:1], None, "caption")
        return lm_loss(lm, project_queries(qf, q)[0], bos[0])

    losses = {
        "itc": lambda: itc_loss(qf, feats, cls),
        "itm": lambda: itm_loss(qf, feats, cls, negatives=[1, 0]),
        "itg": lambda: itg_loss(qf, feats, bos),
        "lm": captioning,
    }
    errors = {}
    for name, fn in losses.items():
        err, norm = central_difference_error(fn, params)
        assert norm > 0, name
        errors[name] = err
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-4 and elapsed < 60
    report(1, ok, f"max rel err {max(errors.values()):.2e}, {elapsed:.1f}s")
    assert ok, errors


# -- 2. masks and causality ----------------------------------------------------------


def _rows(mask):
    return ["".join("1" if v else "0" for v in r) for r in mask.matrix]


@pytest.mark.criterion(2)
def test_c2_mask_examples():
    assert _rows(build_attention_mask("itg", 2, 3)) == ["11000", "11000", "11100", "11110", "11111"]
    assert _rows(build_attention_mask("itc", 2, 2)) == ["1100", "1100", "0011", "0011"]
    itm = build_attention_mask("itm", 1, 1).matrix
    assert itm.shape == (2, 2) and itm.all()


@pytest.mark.criterion(2)
def test_c2_causality_and_invariance_bit_exact():
    qf = tiny_qformer(seed=0, dtype=torch.float32)
    lm = tiny_lm(seed=0, dtype=torch.float32)
    feats, cls, bos = tiny_batch(seed=0, dtype=torch.float32)

    base = itg_logits(qf, feats, bos)
    base_q, _ = qf(feats, bos, "itg")
    for t in range(1, bos.shape[1]):
        other = bos.clone()
        other[0, t] = 5 if other[0, t] != 5 else 6
        assert torch.equal(itg_logits(qf, feats, other)[0, :t], base[0, :t])
        assert torch.equal(qf(feats, other, "itg")[0], base_q)

    prefix = torch.randn(TINY_M, TINY_D)
    ids = bos[0]
    lm_base = lm.forward_embeds(torch.cat([prefix, lm.embed_tokens(ids)])[None])
    for t in range(1, len(ids)):
        other = ids.clone()
        other[t] = 5 if other[t] != 5 else 6
        out = lm.forward_embeds(torch.cat([prefix, lm.embed_tokens(other)])[None])
        assert torch.equal(out[0, : TINY_M + t], lm_base[0, : TINY_M + t])

    q1, t1 = qf(feats, cls, "itc")
    q2, t2 = qf(feats + torch.randn_like(feats), cls, "itc")
    assert torch.equal(t1, t2) and not torch.equal(q1, q2)
    report(2, True, "masks exact, causality and itc invariance bit-exact")


# -- 3. freezing contract -------------------------------------------------------------


@pytest.mark.criterion(3)
def test_c3_freezing_contract_at_defaults(default_cfg, data, store, trained_lm):
    enc_before = encoder_fingerprints(default_cfg)
    lm_before = trained_lm.fingerprint()
    pre_log = JsonlLog()
    pre = run_pretrain(default_cfg.pretrain, default_cfg, data, store, pre_log)
    init = {}
    for b in pre.meta["branches"]:
        init.update(CaptionModel(default_cfg, len(data.tokenizer), [b], default_cfg.seed).group_fingerprints())
    after_pre = CaptionModel(default_cfg, len(data.tokenizer), pre.meta["branches"], default_cfg.seed)
    after_pre.load_blobs(pre.params)
    pre_changed = {k for k, v in after_pre.group_fingerprints().items() if init[k] != v}

    ft, _ = run_finetune(default_cfg.finetune, pre, trained_lm, default_cfg, data, store)
    expected = {f"{b}.{g}" for b in ("clip", "sam") for g in ("queries", "qformer", "proj")}
    ok = (
        encoder_fingerprints(default_cfg) == enc_before
        and trained_lm.fingerprint() == lm_before
        and set(ft.meta["changed_groups"]) == expected
        and all(k.split(".", 1)[1] in PRETRAIN_GROUPS for k in pre_changed)
        and ft.meta["complete"]
    )
    report(3, ok, f"finetune changed {sorted(ft.meta['changed_groups'])}")
    assert ok


# -- 4. metric oracles ---------------------------------------------------------------


def _random_pairs(seed, count=100):
    rng = random.Random(seed)
    words = ["a", "b", "c", "d", "tiny", "mark", "left"]
    out = []
    for i in range(count):
        cand = " ".join(rng.choice(words) for _ in range(rng.randint(1, 7)))
        refs = [" ".join(rng.choice(words) for _ in range(rng.randint(1, 7))) for _ in range(rng.randint(1, 3))]
        out.append((f"im{i}", cand, refs))
    return out


@pytest.mark.criterion(4)
def test_c4_metrics_match_oracles():
    raw = _random_pairs(42)
    pairs = [EvalPair(i, c, r) for i, c, r in raw]
    simple = [(c, r) for _, c, r in raw]
    gaps = {f"bleu{n}": abs(bleu_n(pairs, n) - naive_bleu(simple, n)) for n in (1, 2, 3)}
    gaps["rouge"] = abs(rouge_l(pairs) - naive_rouge(simple))
    gaps["cider"] = abs(cider(pairs) - dense_cider(simple))
    gaps["meteor"] = abs(meteor_lite(pairs) - naive_meteor(simple))
    assert max(gaps.values()) < 1e-9, gaps

    P = lambda c, r, image="x": EvalPair(image, c, [r])  # noqa: E731
    assert bleu_n([P("a a a", "a b")], 1) == pytest.approx(1 / 3, abs=1e-15)
    assert round(rouge_l([P("the cat", "the cat sat")]), 4) == 0.7722
    assert cider([P("a b", "a b", "1"), P("c d", "c d", "2")]) == pytest.approx(5.0, abs=1e-12)
    assert meteor_lite([P("a b", "b a")]) == pytest.approx(0.5, abs=1e-15)
    report(4, True, f"max oracle gap {max(gaps.values()):.1e}")


# -- 5. report scaling ----------------------------------------------------------------


@pytest.mark.criterion(5)
def test_c5_scale_report():
    scaled = scale_report({"Bleu 1": 0.1089, "CIDEr": 0.0575, "ROUGE_L": 0.154}).scaled
    got = (scaled["Bleu 1"], scaled["CIDEr"], scaled["ROUGE_L"])
    ok = all(math.isclose(a, b, abs_tol=1e-9) for a, b in zip(got, (108.9, 57.5, 15.4)))
    report(5, ok, f"scaled {tuple(round(x, 6) for x in got)}")
    assert ok


# -- 6. overfit smoke test -------------------------------------------------------------


@pytest.mark.criterion(6)
def test_c6_overfit_sixteen_pairs(default_cfg, data, store, trained_lm):
    start = time.perf_counter()
    cfg = default_cfg.replace(
        finetune=StagePlan("finetune", epochs=500, batch_size=16, optimizer=OptimizerConfig(lr=3e-3), mix="M", max_steps=500),
        decode=DecodeConfig("greedy"),
    )
    med = Manifest(data.medical.samples[:16], "medical", data.medical.root)
    small = CorpusData(data.general, med, med, data.tokenizer, data.max_caption_tokens)
    init = Checkpoint(
        params=CaptionModel(cfg, len(data.tokenizer), ["clip", "sam"], cfg.seed).blobs(),
        fingerprints=encoder_fingerprints(cfg),
        meta={"branches": ["clip", "sam"], "seed": cfg.seed},
    )
    ft, model = run_finetune(cfg.finetune, init, trained_lm, cfg, small, store)
    records = caption_manifest(model, trained_lm, cfg, small, med, store)
    by_image = {r["image"]: r["prediction"] for r in records}
    score = bleu_n([EvalPair(s.image_ref, by_image[s.image_ref], [s.caption]) for s in med.samples], 1)
    elapsed = time.perf_counter() - start
    ok = ft.step <= 500 and score >= 0.9 and elapsed < 300
    report(6, ok, f"BLEU-1 {score:.3f} after {ft.step} steps, {elapsed:.1f}s")
    assert ok


# -- 7. direction of effect + probe asymmetry --------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_c7_dual_branch_beats_general_only(data, store, trained_lm):
    start = time.perf_counter()
    cfg = load_config(ROOT / "configs" / "ablation.json")
    assert (len(data.medical), len(data.test)) == (200, 50)
    cells = select_cells(["BLIP2 (G+M)", "MSMedCap (G, G+M)"])
    rows = run_ablation(cells, cfg, data, trained_lm, [0, 1, 2], FeatureStore(cfg))
    baseline, ours = (r.median["CIDEr"] for r in rows)
    elapsed = time.perf_counter() - start
    ok = ours > baseline and elapsed < 1800
    report(7, ok, f"median CIDEr {ours:.3f} vs {baseline:.3f}, {elapsed:.0f}s")
    assert ok


@pytest.mark.criterion(7)
def test_c7_probe_asymmetry():
    general, detail = mark_probe_scores()
    chance = 1 / len(MARKS)
    ok = detail > 0.9 and general <= chance + 0.1
    report(7, ok, f"detail probe {detail:.3f}, general probe {general:.3f}, chance {chance:.3f}")
    assert ok


# -- 8. end-to-end determinism -----------------------------------------------------------

PIPELINE = ("gen-data", "pretrain", "finetune", "generate", "evaluate")


def _run_pipeline(out):
    for cmd in PIPELINE:
        proc = subprocess.run(
            [sys.executable, "-m", "msmedcap.cli", cmd, "--out", str(out)], capture_output=True, text=True, cwd=out.parent
        )
        assert proc.returncode == 0, f"{cmd}: {proc.stderr}"


def _digest(out):
    return {
        str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(out.rglob("*"))
        if p.is_file()
    }


@pytest.mark.criterion(8)
def test_c8_two_runs_byte_identical(tmp_path):
    out = tmp_path / "run"
    _run_pipeline(out)
    first = _digest(out)
    shutil.rmtree(out)
    _run_pipeline(out)
    second = _digest(out)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    required = {"lm/blobs.bin", "pretrain/blobs.bin", "finetune/blobs.bin", "predictions.jsonl", "report.json", "report.txt"}
    ok = not differing and required <= first.keys()
    report(8, ok, f"{len(first)} artifacts compared, {len(differing)} differ")
    assert ok, differing
