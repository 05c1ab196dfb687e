"""Brute-force reference implementations used to cross-check the metrics.

They share no code with msmedcap.metrics: n-grams are enumerated by slicing
into lists, LCS is a plain memoized recursion, CIDEr builds dense vectors
over an explicit n-gram vocabulary, and METEOR tries every alignment.
"""

import math
from functools import lru_cache


def toks(s):
    import re

    return re.findall(r"\w+|[^\w\s]", s.lower())


def ngram_list(t, n):
    return [tuple(t[i : i + n]) for i in range(len(t) - n + 1)]


def naive_bleu(pairs, n):
    """pairs: list of (candidate, [references]) strings."""
    hits = [0] * n
    tot = [0] * n
    c_len = r_len = 0
    for cand, refs in pairs:
        c = toks(cand)
        rs = [toks(r) for r in refs]
        c_len += len(c)
        best = None
        for r in rs:
            key = (abs(len(r) - len(c)), len(r))
            if best is None or key < best:
                best = key
        r_len += best[1]
        for k in range(1, n + 1):
            grams = ngram_list(c, k)
            tot[k - 1] += len(grams)
            for g in set(grams):
                in_c = grams.count(g)
                in_r = max(ngram_list(r, k).count(g) for r in rs)
                hits[k - 1] += min(in_c, in_r)
    if c_len == 0 or 0 in hits:
        return 0.0
    geo = math.exp(sum(math.log(h / t) for h, t in zip(hits, tot)) / n)
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * geo


def recursive_lcs(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def naive_rouge(pairs, beta=1.2):
    scores = []
    for cand, refs in pairs:
        c = toks(cand)
        best = 0.0
        for r in refs:
            rt = toks(r)
            l = recursive_lcs(c, rt)
            if l:
                p, rc = l / len(c), l / len(rt)
                best = max(best, (1 + beta**2) * p * rc / (rc + beta**2 * p))
        scores.append(best)
    return sum(scores) / len(scores)


def dense_cider(pairs, n=4, sigma=6.0):
    cands = [toks(c) for c, _ in pairs]
    refs = [[toks(r) for r in rs] for _, rs in pairs]
    big = len(pairs)
    total = 0.0
    for cand, rs in zip(cands, refs):
        per_ref = []
        for r in rs:
            sims = []
            for k in range(1, n + 1):
                vocab = sorted(set(ngram_list(cand, k)) | set(ngram_list(r, k)))
                idf = []
                for g in vocab:
                    df = sum(1 for other in refs if any(g in ngram_list(x, k) for x in other))
                    idf.append(math.log(big) - math.log(max(1.0, df)))
                vc = [ngram_list(cand, k).count(g) * w for g, w in zip(vocab, idf)]
                vr = [ngram_list(r, k).count(g) * w for g, w in zip(vocab, idf)]
                nc = math.sqrt(sum(x * x for x in vc))
                nr = math.sqrt(sum(x * x for x in vr))
                if nc == 0 or nr == 0:
                    sims.append(0.0)
                    continue
                dot = sum(min(x, y) * y for x, y in zip(vc, vr))
                sims.append(dot / (nc * nr))
            pen = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma**2))
            per_ref.append(sum(sims) / n * pen * 10.0)
        total += sum(per_ref) / len(per_ref)
    return total / len(pairs)


def exhaustive_alignment(c, r):
    """(max matches, min chunks) by enumerating every one-to-one exact alignment."""
    found = {}

    def walk(i, used, links):
        if i == len(c):
            m = len(links)
            if m:
                chunks = 1 + sum(
                    1 for (i0, j0), (i1, j1) in zip(links, links[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1)
                )
                found[m] = min(found.get(m, chunks), chunks)
            return
        walk(i + 1, used, links)
        for j in range(len(r)):
            if j not in used and r[j] == c[i]:
                walk(i + 1, used | {j}, links + [(i, j)])

    walk(0, frozenset(), [])
    if not found:
        return 0, 0
    m = max(found)
    return m, found[m]


def naive_meteor(pairs):
    scores = []
    for cand, refs in pairs:
        c = toks(cand)
        best = 0.0
        for r in refs:
            rt = toks(r)
            m, ch = exhaustive_alignment(c, rt)
            if m == 0:
                continue
            p, rc = m / len(c), m / len(rt)
            f = 10 * p * rc / (rc + 9 * p)
            best = max(best, f * (1 - 0.5 * (ch / m) ** 3))
        scores.append(best)
    return sum(scores) / len(scores)
