"""Desk-scale task generators, metrics and dataset I/O.

* synthetic depth-like denoising: piecewise-planar images plus clipped
  Gaussian noise, scored by PSNR;
* toy constrained tagging: P heads x A items, D labels (label 0 is null), with
  each head's non-null count fixed by a planted linear rule of its features.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialization
from .energies import TagInput
from .errors import ConfigurationError, DimensionError, FormatError, SpenError

PSNR_CAP = 99.0
GENERATOR_VERSION = 1


# ---------------------------------------------------------------- denoising


@dataclass
class DenoiseExample:
    clean: np.ndarray
    noisy: np.ndarray
    seed: int

    def pair(self):
        return self.noisy, self.clean


def piecewise_planar(rng, h, w, n_rects=(2, 6), low=0.2, high=0.8):
    """A depth-map-like image: a sloped background with overlapping sloped rectangles."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)

    def plane():
        return rng.uniform(0.3, 0.7) + rng.uniform(-0.3, 0.3) * yy + rng.uniform(-0.3, 0.3) * xx

    img = plane()
    for _ in range(rng.integers(n_rects[0], n_rects[1] + 1)):
        r0, c0 = rng.integers(0, h - 2), rng.integers(0, w - 2)
        r1 = rng.integers(r0 + 2, min(h, r0 + h // 2 + 2) + 1)
        c1 = rng.integers(c0 + 2, min(w, c0 + w // 2 + 2) + 1)
        img[r0:r1, c0:c1] = plane()[r0:r1, c0:c1]
    return np.clip(img, low, high)


def gen_denoise(n, h=32, w=32, sigma=0.1, seed=0):
    """``n`` (clean, noisy) pairs; a pure function of its arguments."""
    if not sigma > 0:
        raise ConfigurationError("noise level must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        clean = piecewise_planar(rng, h, w)[None]
        noisy = np.clip(clean + sigma * rng.standard_normal(clean.shape), 0.0, 1.0)
        out.append(DenoiseExample(clean, noisy, seed))
    return out


def psnr(prediction, truth):
    """10 log10(1 / MSE) for unit-range images; identical images give ``PSNR_CAP``."""
    prediction = np.asarray(prediction, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if prediction.shape != truth.shape:
        raise DimensionError(f"psnr: shapes {prediction.shape} and {truth.shape} differ")
    mse = float(np.mean((prediction - truth) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


class DenoiseTask:
    name = "denoise"
    loss = "squared-error"

    def score(self, preds, golds, inputs=None):
        return float(np.mean([psnr(p, g) for p, g in zip(preds, golds)]))


# ------------------------------------------------------------------ tagging


@dataclass
class TagRule:
    """Planted generator parameters shared by every example of a dataset."""

    count_weight: np.ndarray
    count_bias: float
    arc_weight: np.ndarray
    item_weight: np.ndarray
    label_weight: np.ndarray
    score_noise: float

    def count(self, head):
        return float(self.count_weight @ head + self.count_bias)


@dataclass
class TagExample:
    x: TagInput
    labels: np.ndarray  # (P, A) ints, 0 = null
    counts: np.ndarray  # (P,) planted non-null counts
    gold: np.ndarray  # (P, A, D) one-hot

    def pair(self):
        return self.x, self.gold


def one_hot(labels, D):
    return np.eye(D)[labels]


def make_tag_rule(rng, A, D, feature_dim, score_noise=0.5):
    cw = rng.standard_normal(feature_dim)
    cw *= 1.2 / np.linalg.norm(cw)
    return TagRule(
        count_weight=cw,
        count_bias=A / 2.0,
        arc_weight=rng.standard_normal(feature_dim) / np.sqrt(feature_dim),
        item_weight=rng.standard_normal(feature_dim) / np.sqrt(feature_dim),
        label_weight=rng.standard_normal((D - 1, feature_dim)),
        score_noise=score_noise,
    )


def gen_tag_example(rng, rule, P, A, D, feature_dim, max_retries=100):
    heads = np.zeros((P, feature_dim))
    counts = np.zeros(P, dtype=np.int64)
    for p in range(P):
        for _ in range(max_retries):
            head = rng.standard_normal(feature_dim)
            c = int(np.rint(rule.count(head)))
            if 0 <= c <= A:
                break
        else:
            raise SpenError(f"could not draw a feasible count for head {p} in {max_retries} tries")
        # move the head along the count direction so the linear rule is exactly integral
        cw = rule.count_weight
        head = head + (c - rule.count(head)) * cw / (cw @ cw)
        heads[p], counts[p] = head, c
    items = rng.standard_normal((A, feature_dim))
    arcs = rng.standard_normal((P, A, feature_dim))
    scores = arcs @ rule.arc_weight + items @ rule.item_weight
    scores = scores + rule.score_noise * rng.standard_normal((P, A))
    labels = np.zeros((P, A), dtype=np.int64)
    kinds = 1 + np.argmax(arcs @ rule.label_weight.T, axis=-1)
    for p in range(P):
        chosen = np.argsort(-scores[p], kind="stable")[: counts[p]]
        labels[p, chosen] = kinds[p, chosen]
    return TagExample(TagInput(heads, items, arcs), labels, counts, one_hot(labels, D))


def gen_tagging(P=3, A=6, D=5, feature_dim=16, n=500, seed=0, score_noise=0.5):
    """(rule, examples); examples share one planted rule drawn from ``seed``."""
    if D < 2:
        raise ConfigurationError("tagging needs D >= 2 (label 0 is the null label)")
    rng = np.random.default_rng(seed)
    rule = make_tag_rule(rng, A, D, feature_dim, score_noise)
    return rule, [gen_tag_example(rng, rule, P, A, D, feature_dim) for _ in range(n)]


def tag_metrics(pred_labels, gold_labels, planted_counts):
    """(per-arc accuracy, fraction of heads whose non-null count misses the planted count)."""
    pred = np.asarray(pred_labels)
    gold = np.asarray(gold_labels)
    counts = np.asarray(planted_counts)
    if pred.shape != gold.shape or pred.shape[:-1] != counts.shape:
        raise DimensionError("tag_metrics: shapes do not match")
    accuracy = float(np.mean(pred == gold))
    violation = float(np.mean(np.count_nonzero(pred != 0, axis=-1) != counts))
    return accuracy, violation


class TaggingTask:
    """Dev score is arc accuracy minus count-violation rate."""

    name = "tagging"
    loss = "log-loss"

    def metrics(self, preds, golds):
        pred = np.stack([np.argmax(p, axis=-1) for p in preds])
        gold = np.stack([np.argmax(g, axis=-1) for g in golds])
        counts = np.count_nonzero(gold != 0, axis=-1)
        return tag_metrics(pred, gold, counts)

    def score(self, preds, golds, inputs=None):
        accuracy, violation = self.metrics(preds, golds)
        return accuracy - violation


# ---------------------------------------------------------------------- PGM


def load_pgm(path):
    """Read a binary (P5) PGM as a (1, h, w) array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif data[pos : pos + 1].isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", start)
        return data[start:pos], start

    magic, at = token()
    if magic != b"P5":
        raise FormatError(f"not a binary PGM (magic {magic!r})", at)
    fields = []
    for what in ("width", "height", "maxval"):
        tok, at = token()
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"bad PGM {what} {tok!r}", at) from None
    w, h, maxval = fields
    if w <= 0 or h <= 0 or not 0 < maxval <= 65535:
        raise FormatError(f"invalid PGM dimensions {w}x{h} maxval {maxval}", at)
    pos += 1  # the single whitespace byte after maxval
    dtype = ">u1" if maxval < 256 else ">u2"
    need = w * h * np.dtype(dtype).itemsize
    if len(data) - pos < need:
        raise FormatError(f"truncated PGM payload: need {need} bytes, have {len(data) - pos}", pos)
    pixels = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return (pixels.astype(np.float64) / maxval).reshape(1, h, w)


def save_pgm(path, image, maxval=255):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = ">u1" if maxval < 256 else ">u2"
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + q.astype(dtype).tobytes())


# ------------------------------------------------------------ dataset files


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for key, value in entries.items():
            fh.write(f"{key} = {value}\n")


def read_manifest(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip() and not line.lstrip().startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _stack(arrays):
    return np.stack(arrays) if arrays else np.zeros((0,))


def save_denoise_split(directory, split, examples, **meta):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    serialization.save(
        directory / f"{split}.spnt",
        {
            "clean": _stack([e.clean for e in examples]),
            "noisy": _stack([e.noisy for e in examples]),
        },
    )
    shape = "x".join(str(s) for s in examples[0].clean.shape) if examples else "0"
    write_manifest(
        directory / f"{split}.manifest",
        {"task": "denoise", "count": len(examples), "shape": shape,
         "generator_version": GENERATOR_VERSION, **meta},
    )


def load_denoise_split(directory, split):
    t = serialization.load(Path(directory) / f"{split}.spnt")
    return [DenoiseExample(c, nz, -1) for c, nz in zip(t["clean"], t["noisy"])]


def save_tag_split(directory, split, examples, **meta):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    serialization.save(
        directory / f"{split}.spnt",
        {
            "heads": _stack([e.x.heads for e in examples]),
            "items": _stack([e.x.items for e in examples]),
            "arcs": _stack([e.x.arcs for e in examples]),
            "labels": _stack([e.labels for e in examples]).astype(np.float64),
            "counts": _stack([e.counts for e in examples]).astype(np.float64),
            "gold": _stack([e.gold for e in examples]),
        },
    )
    P, A, D = examples[0].gold.shape if examples else (0, 0, 0)
    write_manifest(
        directory / f"{split}.manifest",
        {"task": "tagging", "count": len(examples), "shape": f"{P}x{A}x{D}",
         "generator_version": GENERATOR_VERSION, **meta},
    )


def load_tag_split(directory, split):
    t = serialization.load(Path(directory) / f"{split}.spnt")
    return [
        TagExample(TagInput(h, i, a), lab.astype(np.int64), c.astype(np.int64), g)
        for h, i, a, lab, c, g in zip(t["heads"], t["items"], t["arcs"], t["labels"], t["counts"], t["gold"])
    ]
