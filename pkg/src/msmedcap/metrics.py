"""Caption metrics: corpus BLEU-1..3, ROUGE-L, CIDEr-D and an exact-match
METEOR variant, plus the fixed per-metric display scaling and report table."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .data import tokenize
from .errors import DataError


@dataclass
class EvalPair:
    image: str
    candidate: str
    references: list[str]

    def __post_init__(self):
        if not self.references:
            raise DataError(f"pair {self.image!r} has no references")


def _toks(text: str) -> list[str]:
    return tokenize(text)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu_n(pairs: Sequence[EvalPair], n: int, sentence_level: bool = False) -> float:
    """Corpus BLEU with uniform weights over orders 1..n.

    The reference length is the closest reference length (shorter on ties).
    With `sentence_level`, returns the mean of per-pair BLEU instead.
    """
    if n not in (1, 2, 3, 4):
        raise ValueError("n must be in 1..4")
    if sentence_level:
        return sum(bleu_n([p], n) for p in pairs) / len(pairs) if pairs else 0.0
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for p in pairs:
        cand = _toks(p.candidate)
        refs = [_toks(r) for r in p.references]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for k in range(1, n + 1):
            counts = _ngrams(cand, k)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= _ngrams(r, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: str, references: Sequence[str], beta: float = 1.2) -> float:
    cand = _toks(candidate)
    best = 0.0
    for ref in references:
        r = _toks(ref)
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        prec, rec = lcs / len(cand), lcs / len(r)
        best = max(best, (1 + beta**2) * prec * rec / (rec + beta**2 * prec))
    return best


def rouge_l(pairs: Sequence[EvalPair], beta: float = 1.2) -> float:
    if not pairs:
        return 0.0
    return math.fsum(rouge_l_pair(p.candidate, p.references, beta) for p in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# CIDEr-D


def _cider_vec(counts: Counter, log_n_docs: float, df: dict):
    vec = {g: c * (log_n_docs - math.log(max(1.0, df[g]))) for g, c in counts.items()}
    norm = math.sqrt(math.fsum(v * v for v in vec.values()))
    return vec, norm


def cider_pair_scores(pairs: Sequence[EvalPair], n: int = 4, sigma: float = 6.0) -> list[float]:
    if len(pairs) < 2:
        raise DataError("CIDEr needs a corpus of at least 2 images (document frequencies)")
    refs = [[_toks(r) for r in p.references] for p in pairs]
    cands = [_toks(p.candidate) for p in pairs]
    df: dict = defaultdict(float)
    for rs in refs:
        for g in {g for r in rs for k in range(1, n + 1) for g in _ngrams(r, k)}:
            df[g] += 1
    log_n = math.log(float(len(pairs)))
    scores = []
    for cand, rs in zip(cands, refs):
        total = 0.0
        for r in rs:
            delta = len(cand) - len(r)
            sims = []
            for k in range(1, n + 1):
                vc, nc = _cider_vec(_ngrams(cand, k), log_n, df)
                vr, nr = _cider_vec(_ngrams(r, k), log_n, df)
                val = math.fsum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
                sims.append(val / (nc * nr) if nc and nr else 0.0)
            total += math.fsum(sims) / n * math.exp(-(delta**2) / (2 * sigma**2)) * 10.0
        scores.append(total / len(rs))
    return scores


def cider(pairs: Sequence[EvalPair], n: int = 4, sigma: float = 6.0) -> float:
    s = cider_pair_scores(pairs, n, sigma)
    return math.fsum(s) / len(s)


# ---------------------------------------------------------------------------
# METEOR (exact matching only)


def _min_chunks(cand: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """Maximum exact-match count and the fewest chunks over alignments achieving it."""
    cc, rc = Counter(cand), Counter(ref)
    quota = {w: min(cc[w], rc[w]) for w in cc}
    matches = sum(quota.values())
    if matches == 0:
        return 0, 0
    ref_pos = defaultdict(list)
    for j, w in enumerate(ref):
        ref_pos[w].append(j)
    # remaining[i]: occurrences of cand[i] at positions >= i
    remaining = [0] * len(cand)
    seen: Counter = Counter()
    for i in range(len(cand) - 1, -1, -1):
        seen[cand[i]] += 1
        remaining[i] = seen[cand[i]]

    @lru_cache(maxsize=None)
    def best(i: int, prev: int, used: int) -> float:
        # prev: reference index matched at i-1, or -1 if i-1 is unmatched
        if i == len(cand):
            return 0
        w = cand[i]
        still_needed = quota.get(w, 0) - sum(1 for j in ref_pos.get(w, ()) if used >> j & 1)
        out = math.inf
        if still_needed < remaining[i]:  # may leave this occurrence unmatched
            out = best(i + 1, -1, used)
        if still_needed > 0:
            for j in ref_pos[w]:
                if not used >> j & 1:
                    extra = 0 if prev >= 0 and j == prev + 1 else 1
                    out = min(out, extra + best(i + 1, j, used | (1 << j)))
        return out

    return matches, int(best(0, -1, 0))


def meteor_pair(candidate: str, references: Sequence[str], alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    cand = _toks(candidate)
    best = 0.0
    for ref in references:
        r = _toks(ref)
        m, chunks = _min_chunks(cand, r)
        if m == 0:
            continue
        p, rec = m / len(cand), m / len(r)
        fmean = p * rec / (alpha * p + (1 - alpha) * rec)
        penalty = gamma * (chunks / m) ** beta
        best = max(best, fmean * (1 - penalty))
    return best


def meteor_lite(pairs: Sequence[EvalPair]) -> float:
    if not pairs:
        return 0.0
    return math.fsum(meteor_pair(p.candidate, p.references) for p in pairs) / len(pairs)


# ---------------------------------------------------------------------------
# Aggregation and report

METRIC_COLUMNS = ("Bleu 1", "Bleu 2", "Bleu 3", "METEOR", "ROUGE_L", "CIDEr", "BERT score", "BLEURT")
SCALE_EXPONENT = {
    "Bleu 1": 3,
    "Bleu 2": 3,
    "Bleu 3": 3,
    "METEOR": 3,
    "ROUGE_L": 2,
    "CIDEr": 3,
    "BERT score": 2,
    "BLEURT": 1,
}
PLUGGABLE = ("BERT score", "BLEURT")


def evaluate(pairs: Sequence[EvalPair]) -> dict[str, float]:
    return {
        "Bleu 1": bleu_n(pairs, 1),
        "Bleu 2": bleu_n(pairs, 2),
        "Bleu 3": bleu_n(pairs, 3),
        "METEOR": meteor_lite(pairs),
        "ROUGE_L": rouge_l(pairs),
        "CIDEr": cider(pairs),
    }


@dataclass
class ScoreReport:
    raw: dict[str, float | None]
    factors: dict[str, float] = field(default_factory=lambda: {k: 10.0**e for k, e in SCALE_EXPONENT.items()})

    @property
    def scaled(self) -> dict[str, float | None]:
        return {k: (None if self.raw.get(k) is None else self.raw[k] * self.factors[k]) for k in METRIC_COLUMNS}

    def to_dict(self) -> dict:
        return {"raw": {k: self.raw.get(k) for k in METRIC_COLUMNS}, "scaled": self.scaled}


def scale_report(raw: dict[str, float | None]) -> ScoreReport:
    return ScoreReport(dict(raw))


def format_table(rows: Iterable[tuple[str, ScoreReport | None]]) -> str:
    """Plain-text table in the column order and scaling of the published comparison."""
    rows = list(rows)
    header1 = ["Models", *METRIC_COLUMNS]
    header2 = ["", *(f"(x10^{SCALE_EXPONENT[c]})" for c in METRIC_COLUMNS)]
    body = []
    for name, report in rows:
        if report is None:
            body.append([name] + ["failed"] * len(METRIC_COLUMNS))
            continue
        scaled = report.scaled
        body.append([name] + ["n/a" if scaled[c] is None else f"{scaled[c]:.1f}" for c in METRIC_COLUMNS])
    table = [header1, header2, *body]
    widths = [max(len(r[i]) for r in table) for i in range(len(header1))]
    lines = []
    for k, r in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[0]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(r)))
        if k == 1:
            lines.append("-" * len(lines[-1]))
    return "\n".join(lines) + "\n"


def load_predictions(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out[rec["image"]] = rec["prediction"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise DataError(f"malformed prediction at line {lineno} of {path}") from None
    return out


def pairs_from(predictions: dict[str, str], references: dict[str, list[str]]) -> list[EvalPair]:
    missing = sorted(set(references) - set(predictions))
    if missing:
        raise DataError(f"{len(missing)} test images have no prediction, e.g. {missing[0]}")
    return [EvalPair(img, predictions[img], references[img]) for img in sorted(references)]
