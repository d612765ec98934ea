"""Generate styled images from trained checkpoints and score them."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from . import embedding as emb
from .checkpoint import load_checkpoint
from .data import StyleCategoryManifest
from .errors import InvalidArgumentError
from .metrics import (
    EmbedderInterface,
    MetricReport,
    build_report,
    clip_iqa_score,
    pixel_hist_score,
    r_precision_hits,
)
from .toy_ldm import ToyBackbone, sample
from .trainer import styled_prompt

logger = logging.getLogger(__name__)


def generate_images(backbone: ToyBackbone, prompt: str, seeds: Sequence[int], image_size: int,
                    num_inference_steps: int) -> list[np.ndarray]:
    ids = emb.tokenize_prompt(backbone, prompt)
    with torch.no_grad():
        cond = backbone.encode_text(ids, styled=any(p in prompt for p in backbone.spans))
    return [sample(backbone, cond, backbone.schedule, s, image_size=image_size,
                   num_inference_steps=num_inference_steps) for s in seeds]


def sampling_settings(header: dict, image_size: int | None = None) -> tuple[int, int, int]:
    """(image_size, sample_steps, seed) from a checkpoint header, with an optional size override."""
    training = header.get("extra", {}).get("training", {})
    size = image_size or training.get("image_size", 256)
    return int(size), int(training.get("sample_steps", 50)), int(training.get("seed", 0))


@dataclass
class CategoryEvaluation:
    category_id: str
    checkpoint: Path
    manifest: StyleCategoryManifest


def evaluate(runs: Sequence[CategoryEvaluation], embedder: EmbedderInterface, output_dir: str | os.PathLike,
             *, image_size: int | None = None, seed: int | None = None, samples_per_object: int = 1,
             run_id: str = "") -> MetricReport:
    """Sample every (category, object) styled prompt, then score each category.

    Retrieval distractors for an image are the styled prompts of every other
    object in the run.
    """
    runs = list(runs)
    if not runs:
        raise InvalidArgumentError("nothing to evaluate")
    if samples_per_object < 1:
        raise InvalidArgumentError("samples_per_object must be >= 1")
    out = Path(output_dir)
    pool = sorted({styled_prompt(o, r.manifest.placeholder) for r in runs for o in r.manifest.object_names})
    results = {}
    for run in runs:
        backbone, header = load_checkpoint(run.checkpoint)
        size, steps, cfg_seed = sampling_settings(header, image_size)
        base_seed = cfg_seed if seed is None else seed
        seeds = [base_seed + i for i in range(samples_per_object)]
        references = run.manifest.load_images()
        pairs = []
        for obj in run.manifest.object_names:
            prompt = styled_prompt(obj, run.manifest.placeholder)
            for s, img in zip(seeds, generate_images(backbone, prompt, seeds, size, steps)):
                path = out / "images" / run.category_id / f"{obj.replace(' ', '_')}-{s}.png"
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(img, "RGB").save(path, format="PNG")
                pairs.append((img, prompt))
        hist = [pixel_hist_score(img, references) for img, _ in pairs]
        hits = []
        for img, prompt in pairs:
            hits += r_precision_hits([(img, prompt)], [p for p in pool if p != prompt], embedder)
        iqa = [clip_iqa_score(img, embedder) for img, _ in pairs]
        results[run.category_id] = {
            "pixel_hist": float(np.mean(hist)),
            "clip_r_precision": sum(hits) / len(hits),
            "clip_iqa": float(np.mean(iqa)),
        }
        logger.info("%s: %s", run.category_id, results[run.category_id])
    report = build_report(results, run_id=run_id, embedder_id=embedder.embedder_id,
                          extra_metadata={"distractor_pool_size": len(pool) - 1,
                                          "samples_per_object": samples_per_object})
    report.save(out / "report.json")
    return report
