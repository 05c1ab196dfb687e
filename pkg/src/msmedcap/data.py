"""Manifests, the word-level tokenizer, the synthetic coarse/fine caption corpus
and the mixed-dataset batch sampler."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

DOMAINS = ("general", "medical")
SPLITS = ("train", "test")

PAD, BOS, EOS, CLS, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<cls>", "<unk>")


# ---------------------------------------------------------------------------
# PPM (P6) images


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DataError(f"expected HxWx3 uint8 image, got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header: magic, width, height, maxval separated by whitespace, then one whitespace byte
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM is supported")
    body = raw[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise DataError(f"{path}: truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class CaptionSample:
    image_ref: str
    caption: str
    domain: str
    split: str

    def to_json(self) -> str:
        return json.dumps(
            {"image": self.image_ref, "caption": self.caption, "domain": self.domain, "split": self.split}
        )


@dataclass
class Manifest:
    samples: list[CaptionSample]
    source_name: str
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.samples)

    def counts(self) -> dict[str, int]:
        c = Counter(f"{s.domain}/{s.split}" for s in self.samples)
        return dict(sorted(c.items()))

    def image_path(self, sample: CaptionSample) -> Path:
        p = Path(sample.image_ref)
        return p if p.is_absolute() else self.root / p

    def load_image(self, sample: CaptionSample) -> np.ndarray:
        return read_ppm(self.image_path(sample))

    def filter(self, domain: str | None = None, split: str | None = None, name: str | None = None) -> "Manifest":
        keep = [
            s
            for s in self.samples
            if (domain is None or s.domain == domain) and (split is None or s.split == split)
        ]
        return Manifest(keep, name or self.source_name, self.root)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        lines = []
        for s in self.samples:
            # image refs are written relative to the manifest's own directory
            ref = Path(s.image_ref)
            if not ref.is_absolute():
                ref = Path(_relpath(self.root / ref, path.parent))
            lines.append(CaptionSample(ref.as_posix(), s.caption, s.domain, s.split).to_json())
        path.write_text("".join(line + "\n" for line in lines))


def _relpath(target: Path, start: Path) -> str:
    import os

    return os.path.relpath(target, start)


def load_manifest(path: str | Path, check_images: bool = True) -> Manifest:
    """Parse a JSON-lines manifest. Image refs resolve relative to the file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    samples = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed record at line {lineno}: {exc.msg}") from None
        if not isinstance(rec, dict) or not all(
            isinstance(rec.get(k), str) for k in ("image", "caption", "domain", "split")
        ):
            raise DataError(f"malformed record at line {lineno}: need string keys image, caption, domain, split")
        if rec["domain"] not in DOMAINS:
            raise DataError(f"unknown domain at line {lineno}: {rec['domain']!r}")
        if rec["split"] not in SPLITS:
            raise DataError(f"unknown split at line {lineno}: {rec['split']!r}")
        if not tokenize(rec["caption"]):
            raise DataError(f"empty caption at line {lineno}")
        samples.append(CaptionSample(rec["image"], rec["caption"], rec["domain"], rec["split"]))
    manifest = Manifest(samples, path.stem, path.parent)
    if check_images:
        for lineno, s in enumerate(samples, start=1):
            if not manifest.image_path(s).is_file():
                raise DataError(f"image not found for record {lineno}: {s.image_ref}")
    if not samples:
        log.warning("manifest %s is empty", path)
    log.info("loaded %s: %s", path, manifest.counts())
    return manifest


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class Tokenizer:
    """Closed word-level vocabulary. Ids 0..4 are PAD, BOS, EOS, CLS, UNK."""

    def __init__(self, words: Sequence[str]):
        self.itos = list(SPECIAL_TOKENS) + [w for w in words if w not in SPECIAL_TOKENS]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab(self) -> dict[str, int]:
        return dict(self.stoi)

    def encode(self, text: str, max_len: int | None = None, first: int = BOS) -> list[int]:
        """Frame as [first, tokens..., EOS]; `max_len` bounds the content tokens."""
        ids = [self.stoi.get(t, UNK) for t in tokenize(text)]
        if max_len is not None:
            ids = ids[:max_len]
        return [first] + ids + [EOS]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS, CLS):
                continue
            out.append(self.itos[i])
        return " ".join(out)

    def to_list(self) -> list[str]:
        return self.itos[len(SPECIAL_TOKENS) :]


def build_tokenizer(corpus: Sequence[str], min_freq: int = 1) -> Tokenizer:
    if not corpus:
        raise DataError("cannot build a tokenizer from an empty corpus")
    counts = Counter(t for text in corpus for t in tokenize(text))
    kept = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Tokenizer(kept)


def pad_batch(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


# ---------------------------------------------------------------------------
# Synthetic corpus

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
    "white": (235, 235, 235),
}
REGIONS = ("upper left", "upper right", "lower left", "lower right")

# 3x3 marks. Every window-clipped sub-block of a 3x3 mark under a 9x9 window is a
# prefix/suffix/whole in each axis; its sum stays within +-40 levels, so a rounded
# 9x9 box blur over a flat background cannot see the mark (40/81 < 0.5).
_CHECKER = np.array([[1, -1, 1], [-1, 1, -1], [1, -1, 1]])
MARKS = {
    "cross": 40 * _CHECKER,
    "ring": -40 * _CHECKER,
    "bar": np.array([[-13, -13, -13], [26, 26, 26], [-13, -13, -13]]),
}
MARK_SIZE = 3
MEDICAL_BACKGROUND = 64
# marks sit at this offset inside an 8-pixel grid cell; cells 1..6 keep a
# clean 8-pixel margin inside the 64x64 canvas
MARK_GRID = 8
MARK_OFFSET = 3
MARK_CLEARANCE = 8


@dataclass
class CorpusConfig:
    general_train: int = 200
    general_test: int = 0
    medical_train: int = 200
    medical_test: int = 50
    image_size: int = 64
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    marks: tuple[str, ...] = tuple(MARKS)
    regions: tuple[str, ...] = REGIONS
    max_shapes: int = 3
    max_marks: int = 2

    def counts(self) -> dict[tuple[str, str], int]:
        return {
            ("general", "train"): self.general_train,
            ("general", "test"): self.general_test,
            ("medical", "train"): self.medical_train,
            ("medical", "test"): self.medical_test,
        }


def _shape_mask(kind: str, cy: int, cx: int, r: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if kind == "triangle":
        top = cy - r
        return (yy >= top) & (yy <= cy + r) & (np.abs(xx - cx) <= (yy - top) / 2)
    raise DataError(f"unknown shape {kind!r}")


def _place_shapes(rng, n, size, r_range, blocked, kinds, max_tries=200):
    """Place up to n shapes with disjoint padded bounding boxes avoiding `blocked`."""
    placed = []
    occupied = blocked.copy()
    for _ in range(n):
        for _ in range(max_tries):
            r = int(rng.integers(r_range[0], r_range[1] + 1))
            cy = int(rng.integers(r, size - r))
            cx = int(rng.integers(r, size - r))
            y0, y1, x0, x1 = max(cy - r - 1, 0), min(cy + r + 2, size), max(cx - r - 1, 0), min(cx + r + 2, size)
            if occupied[y0:y1, x0:x1].any():
                continue
            occupied[y0:y1, x0:x1] = True
            placed.append((str(kinds[int(rng.integers(len(kinds)))]), cy, cx, r))
            break
    return placed


def _join_phrases(phrases: list[str]) -> str:
    if len(phrases) == 1:
        return phrases[0]
    return ", ".join(phrases[:-1]) + " and " + phrases[-1]


def render_general(rng: np.random.Generator, cfg: CorpusConfig) -> tuple[np.ndarray, str, dict]:
    size = cfg.image_size
    img = np.zeros((size, size, 3), dtype=np.uint8)
    n = int(rng.integers(1, cfg.max_shapes + 1))
    shapes = _place_shapes(rng, n, size, (7, 12), np.zeros((size, size), bool), cfg.shapes)
    phrases = []
    for kind, cy, cx, r in sorted(shapes, key=lambda s: (s[2], s[1])):
        color = cfg.colors[int(rng.integers(len(cfg.colors)))]
        img[_shape_mask(kind, cy, cx, r, size)] = COLORS[color]
        phrases.append(f"a {color} {kind}")
    return img, _join_phrases(phrases), {"shapes": shapes}


def render_medical(
    rng: np.random.Generator, cfg: CorpusConfig, n_marks: int | None = None
) -> tuple[np.ndarray, str, dict]:
    """Gray 'scan' with large blobs and 1-2 fine marks; the caption names only the marks.

    `info["background"]` holds the same image without marks.
    """
    size = cfg.image_size
    cells = size // MARK_GRID
    usable = list(range(1, cells - 1))
    half = len(usable) // 2
    n_marks = int(rng.integers(1, cfg.max_marks + 1)) if n_marks is None else n_marks
    regions = sorted(rng.choice(len(cfg.regions), size=n_marks, replace=False).tolist())
    marks: list[tuple[str, int, int, str]] = []
    for reg in regions:
        rows = usable[:half] if reg < 2 else usable[half:]
        cols = usable[:half] if reg % 2 == 0 else usable[half:]
        while True:
            a, b = int(rng.choice(rows)), int(rng.choice(cols))
            # no 9x9 window may touch two marks
            if all(max(abs(a - a2), abs(b - b2)) >= 2 for _, a2, b2, _ in marks):
                break
        marks.append((str(cfg.marks[int(rng.integers(len(cfg.marks)))]), a, b, cfg.regions[reg]))

    blocked = np.zeros((size, size), bool)
    for _, a, b, _ in marks:
        y, x = a * MARK_GRID + MARK_OFFSET, b * MARK_GRID + MARK_OFFSET
        c = MARK_CLEARANCE
        blocked[max(y - c, 0) : y + MARK_SIZE + c, max(x - c, 0) : x + MARK_SIZE + c] = True
    n_shapes = int(rng.integers(1, cfg.max_shapes + 1))
    shapes = _place_shapes(rng, n_shapes, size, (5, 9), blocked, cfg.shapes)

    canvas = np.full((size, size), MEDICAL_BACKGROUND, dtype=np.int16)
    for kind, cy, cx, r in shapes:
        canvas[_shape_mask(kind, cy, cx, r, size)] = int(rng.integers(90, 141))
    background = np.repeat(canvas[:, :, None], 3, axis=2).astype(np.uint8)
    for kind, a, b, _ in marks:
        y, x = a * MARK_GRID + MARK_OFFSET, b * MARK_GRID + MARK_OFFSET
        canvas[y : y + MARK_SIZE, x : x + MARK_SIZE] += MARKS[kind]
    img = np.repeat(np.clip(canvas, 0, 255)[:, :, None], 3, axis=2).astype(np.uint8)
    caption = " and ".join(f"tiny {kind} mark in the {region} region" for kind, _, _, region in marks)
    return img, caption, {"marks": marks, "shapes": shapes, "background": background}


def generate_synthetic_corpus(
    cfg: CorpusConfig, seed: int, out_dir: str | Path
) -> tuple[list[Path], Manifest]:
    """Write PPM images plus ``manifest.jsonl`` under `out_dir`; deterministic in (cfg, seed)."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    paths, samples = [], []
    for d, domain in enumerate(DOMAINS):
        for s, split in enumerate(SPLITS):
            for i in range(cfg.counts()[(domain, split)]):
                rng = np.random.default_rng([seed, d, s, i])
                render = render_general if domain == "general" else render_medical
                img, caption, _ = render(rng, cfg)
                ref = f"images/{domain}_{split}_{i:04d}.ppm"
                try:
                    write_ppm(out_dir / ref, img)
                except OSError as exc:
                    raise DataError(f"cannot write {out_dir / ref}: {exc}") from exc
                paths.append(out_dir / ref)
                samples.append(CaptionSample(ref, caption, domain, split))
    manifest = Manifest(samples, "synthetic", out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return paths, manifest


# ---------------------------------------------------------------------------
# Mixed-dataset sampling


@dataclass
class MixSpec:
    weights: dict[str, float]
    seed: int = 0

    def normalized(self) -> dict[str, float]:
        if any(w < 0 for w in self.weights.values()):
            raise DataError("mix weights must be nonnegative")
        total = float(sum(self.weights.values()))
        if total <= 0:
            raise DataError("mix needs at least one positive weight")
        return {k: w / total for k, w in self.weights.items()}

    @classmethod
    def proportional(cls, manifests: Sequence[Manifest], seed: int = 0) -> "MixSpec":
        return cls({m.source_name: float(len(m)) for m in manifests}, seed)


class BatchSampler:
    """Infinite, reproducible stream of batches drawn from several manifests.

    Each slot picks a dataset by weight, then a sample uniformly within it.
    Yields lists of ``(source_name, CaptionSample)``.
    """

    def __init__(self, mix: MixSpec, manifests: Sequence[Manifest], batch_size: int, rng=None):
        if batch_size < 2:
            raise DataError("batch_size must be >= 2 (contrastive losses need in-batch negatives)")
        probs = mix.normalized()
        by_name = {m.source_name: m for m in manifests}
        missing = [k for k, w in probs.items() if w > 0 and k not in by_name]
        if missing:
            raise DataError(f"mix names unknown manifests: {missing}")
        self.names = [k for k in sorted(probs) if probs[k] > 0]
        for k in self.names:
            if len(by_name[k]) == 0:
                raise DataError(f"manifest {k!r} has positive weight but no samples")
        self.probs = np.array([probs[k] for k in self.names])
        self.probs /= self.probs.sum()
        self.manifests = [by_name[k] for k in self.names]
        self.batch_size = batch_size
        self.rng = rng if rng is not None else np.random.default_rng(mix.seed)

    def next_batch(self) -> list[tuple[str, CaptionSample]]:
        which = self.rng.choice(len(self.names), size=self.batch_size, p=self.probs)
        batch = []
        for k in which:
            m = self.manifests[k]
            batch.append((self.names[k], m.samples[int(self.rng.integers(len(m)))]))
        return batch

    def __iter__(self) -> Iterator[list[tuple[str, CaptionSample]]]:
        while True:
            yield self.next_batch()


def sample_batches(mix: MixSpec, manifests: Sequence[Manifest], batch_size: int) -> BatchSampler:
    return BatchSampler(mix, manifests, batch_size)
