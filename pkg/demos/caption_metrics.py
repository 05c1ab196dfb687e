"""
Caption metrics by hand
=======================

Small cases where each score can be worked out by hand, then the corpus-level
report with the usual x1000 / x10 scaling.
"""

from msmedcap.metrics import EvalPair, bleu_n, cider, evaluate, format_table, meteor_lite, rouge_l, scale_report

P = EvalPair

# clipped unigram precision: only one "a" in the reference counts
print("BLEU-1", bleu_n([P("x", "a a a", ["a b"])], 1))

# LCS of 2 over lengths 2 and 3
print("ROUGE-L", round(rouge_l([P("x", "the cat", ["the cat sat"])]), 4))

# two images, disjoint two-word captions: unigram and bigram sims are 1
print("CIDEr", cider([P("1", "a b", ["a b"]), P("2", "c d", ["c d"])]))

# every word matches but the order is reversed: two chunks
print("METEOR", meteor_lite([P("x", "a b", ["b a"])]))

pairs = [
    P("im1", "tiny ring mark in the upper left region", ["tiny ring mark in the upper left region"]),
    P("im2", "tiny bar mark in the lower left region", ["tiny cross mark in the lower left region"]),
    P("im3", "tiny cross mark in the upper right region", ["tiny bar mark in the lower right region"]),
]
raw = evaluate(pairs)
print({k: round(v, 4) for k, v in raw.items()})
print(format_table([("three captions", scale_report(raw))]))
