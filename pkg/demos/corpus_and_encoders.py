"""
Synthetic corpus and the two frozen encoders
============================================

General images are colored shapes with a caption naming them. Medical images
are gray scans whose caption only names a few small marks and where they sit.
The general encoder blurs before patching, so marks disappear; the detail
encoder keeps them. A linear probe makes the gap visible.
"""

import tempfile

import numpy as np

from msmedcap.data import MARKS, CorpusConfig, generate_synthetic_corpus, render_medical
from msmedcap.encoders import box_blur, encode_detail, encode_general, linear_probe_accuracy

# a small corpus on disk
root = tempfile.mkdtemp()
cfg = CorpusConfig(general_train=6, general_test=0, medical_train=6, medical_test=2)
paths, manifest = generate_synthetic_corpus(cfg, seed=0, out_dir=root)
print(manifest.counts())
for s in manifest.samples[:3] + manifest.samples[6:9]:
    print(f"{s.domain:8s} {s.caption}")

# one medical scan, with and without its marks
img, caption, info = render_medical(np.random.default_rng(3), CorpusConfig())
print("\ncaption:", caption)
print("pixels changed by marks:", int((img != info["background"]).any(axis=2).sum()))
same = np.array_equal(box_blur(img, 9), box_blur(info["background"], 9))
print("identical after the general branch's blur:", same)

# feature shapes: (rows, dims)
print("general features", encode_general(img).shape, "detail features", encode_detail(img).shape)

# probe: which mark is on a single-mark scan?
feats_g, feats_d, labels = [], [], []
for i in range(600):
    im, _, inf = render_medical(np.random.default_rng([7, i]), CorpusConfig(), n_marks=1)
    feats_g.append(encode_general(im))
    feats_d.append(encode_detail(im))
    labels.append(inf["marks"][0][0])
labels = np.array(labels)
for name, feats in (("general", np.stack(feats_g)), ("detail", np.stack(feats_d))):
    acc = linear_probe_accuracy(feats[:400], labels[:400], feats[400:], labels[400:])
    print(f"{name:8s} probe accuracy {acc:.3f}  (chance {1 / len(MARKS):.3f})")
