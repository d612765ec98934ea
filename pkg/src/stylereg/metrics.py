"""Evaluation metrics: colour-histogram similarity, text-image retrieval
precision and antonym-prompt quality, plus report building and rendering.

The two CLIP-style metrics go through a pluggable embedder so they run
offline with ``MockEmbedder``. ``ClipEmbedder`` wraps a real CLIP model and
needs the optional ``transformers`` dependency.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import InvalidArgumentError

DEFAULT_BINS = 16
DEFAULT_IQA_PAIRS = (("Good photo.", "Bad photo."),)
DEFAULT_IQA_TEMPERATURE = 0.01
METRIC_NAMES = ("pixel_hist", "clip_r_precision", "clip_iqa")


@runtime_checkable
class EmbedderInterface(Protocol):
    embedder_id: str

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise InvalidArgumentError("embedding has zero or non-finite norm")
    return v / norm


class MockEmbedder:
    """Deterministic offline embedder.

    Text maps to a unit vector seeded by its SHA-256. Images map to a fixed
    random projection of their 4x4 mean-colour thumbnail, so similar images
    land near each other. Stateless, hence safe for concurrent use.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.embedder_id = f"mock-{dim}-{seed}"
        self._projection = np.random.default_rng([seed, 1]).standard_normal((dim, 48))

    def embed_text(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng([self.seed, int.from_bytes(digest[:8], "big")])
        return _unit(rng.standard_normal(self.dim))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        img = _check_rgb(image).astype(np.float64) / 255.0
        h, w, _ = img.shape
        ys = np.array_split(np.arange(h), 4)
        xs = np.array_split(np.arange(w), 4)
        thumb = np.array([img[np.ix_(y, x)].mean(axis=(0, 1)) if len(y) and len(x) else np.zeros(3)
                          for y in ys for x in xs])
        return _unit(self._projection @ (thumb.ravel() - 0.5))


class ClipEmbedder:
    """CLIP image/text towers from ``transformers``; loaded lazily on first use."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        self.model_name = model_name
        self.device = device
        self.embedder_id = f"clip:{model_name}"
        self._model = None
        self._processor = None

    def _load(self):
        if self._model is None:
            try:
                from transformers import CLIPModel, CLIPProcessor
            except ImportError as exc:
                raise InvalidArgumentError(
                    "the real CLIP embedder needs the 'clip' extra (pip install transformers)") from exc
            self._model = CLIPModel.from_pretrained(self.model_name).to(self.device).eval()
            self._processor = CLIPProcessor.from_pretrained(self.model_name)
        return self._model, self._processor

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        import torch

        model, proc = self._load()
        inputs = proc(images=[_check_rgb(image)], return_tensors="pt").to(self.device)
        with torch.no_grad():
            feats = model.get_image_features(**inputs)
        return _unit(feats[0].double().cpu().numpy())

    def embed_text(self, text: str) -> np.ndarray:
        import torch

        model, proc = self._load()
        inputs = proc(text=[text], return_tensors="pt", padding=True).to(self.device)
        with torch.no_grad():
            feats = model.get_text_features(**inputs)
        return _unit(feats[0].double().cpu().numpy())


def make_embedder(kind: str) -> EmbedderInterface:
    if kind == "mock":
        return MockEmbedder()
    if kind == "real":
        return ClipEmbedder()
    raise InvalidArgumentError(f"unknown embedder {kind!r}; expected 'mock' or 'real'")


# -- colour histograms ------------------------------------------------------

def _check_rgb(image) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgumentError(f"expected an RGB image of shape (H, W, 3), got {arr.shape}")
    if arr.dtype != np.uint8:
        raise InvalidArgumentError(f"expected 8-bit RGB, got dtype {arr.dtype}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise InvalidArgumentError("image has no pixels")
    return arr


@dataclass(frozen=True)
class ColorHistogram:
    bins_per_channel: int
    counts: np.ndarray  # (3, bins), each row sums to 1
    raw_counts: np.ndarray = field(repr=False)
    num_pixels: int = 0

    def exact(self) -> list[list[Fraction]]:
        return [[Fraction(int(c), self.num_pixels) for c in row] for row in self.raw_counts]


def color_histogram(image, bins: int = DEFAULT_BINS) -> ColorHistogram:
    """Per-channel normalised histogram with ``bins`` equal-width bins over 0..255."""
    if not isinstance(bins, int) or not 1 <= bins <= 256:
        raise InvalidArgumentError("bins must be an integer in [1, 256]")
    img = _check_rgb(image)
    idx = img.reshape(-1, 3).astype(np.int64) * bins // 256
    raw = np.stack([np.bincount(idx[:, c], minlength=bins) for c in range(3)])
    n = img.shape[0] * img.shape[1]
    return ColorHistogram(bins, raw / n, raw, n)


def pixel_hist_score(generated, references: Sequence, bins: int = DEFAULT_BINS) -> float:
    """Channel-mean histogram intersection against the mean reference histogram.

    Computed in exact rational arithmetic, so identical distributions give
    exactly 1.0 and disjoint ones exactly 0.0.
    """
    references = list(references)
    if not references:
        raise InvalidArgumentError("at least one reference image is required")
    gen = color_histogram(generated, bins).exact()
    refs = [color_histogram(r, bins).exact() for r in references]
    total = Fraction(0)
    for c in range(3):
        for b in range(bins):
            ref_mass = sum((h[c][b] for h in refs), Fraction(0)) / len(refs)
            total += min(gen[c][b], ref_mass)
    return float(total / 3)


# -- retrieval precision ------------------------------------------------------

def _validate_pool(true_prompt: str, distractors: Sequence[str]):
    if len(set(distractors)) != len(distractors):
        raise InvalidArgumentError("distractor prompts contain duplicates")
    if true_prompt in distractors:
        raise InvalidArgumentError(f"true prompt {true_prompt!r} also appears among the distractors")


def r_precision_hits(generated: Sequence[tuple], distractor_prompts: Sequence[str],
                     embedder: EmbedderInterface) -> list[bool]:
    """Per-image hit flags; a tie with any distractor counts as a miss."""
    generated = list(generated)
    distractors = list(distractor_prompts)
    if not generated:
        raise InvalidArgumentError("at least one generated (image, prompt) pair is required")
    if not distractors:
        raise InvalidArgumentError("at least one distractor prompt is required")
    text_cache: dict[str, np.ndarray] = {}

    def text(p: str) -> np.ndarray:
        if p not in text_cache:
            text_cache[p] = _unit(embedder.embed_text(p))
        return text_cache[p]

    hits = []
    for image, true_prompt in generated:
        _validate_pool(true_prompt, distractors)
        v = _unit(embedder.embed_image(image))
        s_true = float(v @ text(true_prompt))
        s_best = max(float(v @ text(d)) for d in distractors)
        hits.append(s_true > s_best)
    return hits


def clip_r_precision(generated: Sequence[tuple], distractor_prompts: Sequence[str],
                     embedder: EmbedderInterface) -> float:
    hits = r_precision_hits(generated, distractor_prompts, embedder)
    return sum(hits) / len(hits)


# -- quality ---------------------------------------------------------------

def antonym_softmax(s_pos: float, s_neg: float, temperature: float = DEFAULT_IQA_TEMPERATURE) -> float:
    """Probability of the positive prompt under a two-way softmax of s / temperature."""
    if not temperature > 0:
        raise InvalidArgumentError("temperature must be positive")
    z = (s_pos - s_neg) / temperature
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def clip_iqa_score(image, embedder: EmbedderInterface,
                   prompt_pairs: Sequence[tuple[str, str]] = DEFAULT_IQA_PAIRS,
                   temperature: float = DEFAULT_IQA_TEMPERATURE) -> float:
    pairs = list(prompt_pairs)
    if not pairs:
        raise InvalidArgumentError("at least one (positive, negative) prompt pair is required")
    v = _unit(embedder.embed_image(image))
    scores = []
    for pos, neg in pairs:
        s_pos = float(v @ _unit(embedder.embed_text(pos)))
        s_neg = float(v @ _unit(embedder.embed_text(neg)))
        scores.append(antonym_softmax(s_pos, s_neg, temperature))
    return math.fsum(scores) / len(scores)


# -- reports -----------------------------------------------------------------

@dataclass
class MetricReport:
    per_category: dict[str, dict[str, float]]
    aggregate: dict[str, float]
    metadata: dict

    def to_dict(self) -> dict:
        return {"per_category": self.per_category, "aggregate": self.aggregate, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        try:
            return cls(dict(data["per_category"]), dict(data["aggregate"]), dict(data.get("metadata", {})))
        except (KeyError, TypeError) as exc:
            raise InvalidArgumentError(f"not a metric report: {exc}") from None

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_report(results: dict[str, dict[str, float]], run_id: str = "", embedder_id: str = "",
                 extra_metadata: dict | None = None) -> MetricReport:
    """Collect per-category metric triples and their arithmetic means."""
    if not results:
        raise InvalidArgumentError("no per-category results to report")
    per_category = {}
    for category, triple in results.items():
        missing = [m for m in METRIC_NAMES if m not in triple]
        if missing:
            raise InvalidArgumentError(f"category {category!r} lacks metrics {missing}")
        per_category[category] = {m: float(triple[m]) for m in METRIC_NAMES}
    n = len(per_category)
    aggregate = {m: math.fsum(v[m] for v in per_category.values()) / n for m in METRIC_NAMES}
    metadata = {"run_id": run_id, "embedder_id": embedder_id, "timestamp": time.time()}
    metadata.update(extra_metadata or {})
    return MetricReport(per_category, aggregate, metadata)


def _table(header: Sequence[str], rows: list[list[str]]) -> str:
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]

    def fmt(cells: Sequence[str]) -> str:
        return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    lines = [fmt(header), "  ".join("-" * w for w in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)


def render_report(report: MetricReport) -> str:
    rows = [[cat] + [f"{vals[m]:.4f}" for m in METRIC_NAMES] for cat, vals in sorted(report.per_category.items())]
    rows.append(["mean"] + [f"{report.aggregate[m]:.4f}" for m in METRIC_NAMES])
    return _table(["category", *METRIC_NAMES], rows)


def rank_markers(values: Sequence[float]) -> list[str]:
    """``*`` for the best value and ``+`` for the runner-up; ties go to the earlier entry."""
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    marks = [""] * len(values)
    if order:
        marks[order[0]] = "*"
    if len(order) > 1:
        marks[order[1]] = "+"
    return marks


def render_comparison(reports: dict[str, MetricReport]) -> str:
    """Aggregate metrics per method with best (*) and second-best (+) marked per column."""
    if not reports:
        raise InvalidArgumentError("no reports to compare")
    names = list(reports)
    columns = {}
    for m in METRIC_NAMES:
        values = [reports[n].aggregate[m] for n in names]
        marks = rank_markers(values) if len(names) > 1 else [""] * len(names)
        columns[m] = [f"{v:.4f}{mk or ' '}" for v, mk in zip(values, marks)]
    rows = [[n] + [columns[m][i] for m in METRIC_NAMES] for i, n in enumerate(names)]
    table = _table(["method", *METRIC_NAMES], rows)
    return table + ("\n* best  + second best" if len(names) > 1 else "")
