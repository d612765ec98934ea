"""Two-stage style personalisation.

Stage 1 optimises only the style-identifier embedding rows under the
reconstruction loss. Stage 2 generates content references with the frozen
base model, then jointly fine-tunes the identifier rows and the attention
blocks of the text encoder and denoiser under
``lambda1 * L_ldm + lambda2 * L_content``.

Every stage draws its randomness from its own seeded generator; stage 2 keeps
separate streams for the styled and content branches. Resuming from any
stage boundary therefore reproduces an uninterrupted run bit for bit, and a
run with ``lambda2 == 0`` follows the same trajectory as a run with the
content branch switched off.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from . import embedding as emb
from .checkpoint import load_checkpoint, save_checkpoint
from .data import StyleCategoryManifest
from .errors import (
    DivergenceError,
    InvalidArgumentError,
    NotFoundError,
    PreconditionError,
    StageError,
)
from .schedule import PROFILES, add_noise_batch, total_loss
from .style_reasoning import KeywordCache, StyleKeywords, VlmClientInterface, cached_style_keywords
from .pretrain import pretrained_toy_backbone
from .toy_ldm import ToyBackbone, ToyModelConfig, image_to_latent, sample

logger = logging.getLogger(__name__)

STYLED_TEMPLATE = "an {object} with {placeholder} style"
UNSTYLED_TEMPLATE = "a photo of a {object}"
OPTIMIZER = {"name": "adam", "betas": [0.9, 0.999], "eps": 1e-8, "weight_decay": 0.0}


@dataclass
class TrainingConfig:
    stage1_steps: int = 500
    stage1_lr: float = 1e-6
    stage2_steps: int = 2500
    stage2_lr: float = 5e-5
    batch_size: int = 1
    image_size: int = 256
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    schedule_profile: str = "linear"
    content_refs_per_object: int = 4
    train_span_rows_in_stage2: bool = True
    num_timesteps: int = 1000
    sample_steps: int = 50
    backbone: str = "toy"
    embed_dim: int = 32
    num_attention_heads: int = 4
    hidden_channels: int = 32
    latent_size: int = 16
    pretrain_steps: int = 1000
    pretrain_lr: float = 2e-3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise InvalidArgumentError("step counts must be >= 1")
        if not (self.stage1_lr > 0 and self.stage2_lr > 0):
            raise InvalidArgumentError("learning rates must be positive")
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise InvalidArgumentError("lambda1 and lambda2 must be non-negative")
        if self.batch_size < 1 or self.image_size < 1 or self.content_refs_per_object < 1:
            raise InvalidArgumentError("batch_size, image_size and content_refs_per_object must be >= 1")
        if self.schedule_profile not in PROFILES:
            raise InvalidArgumentError(f"schedule_profile must be one of {PROFILES}")
        if self.pretrain_steps < 0 or not self.pretrain_lr > 0:
            raise InvalidArgumentError("pretrain_steps must be >= 0 and pretrain_lr > 0")
        if self.backbone != "toy":
            raise InvalidArgumentError(f"unsupported backbone {self.backbone!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "TrainingConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def with_overrides(self, **overrides) -> "TrainingConfig":
        values = {k: v for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **values)

    def toy_model_config(self) -> ToyModelConfig:
        return ToyModelConfig(
            embed_dim=self.embed_dim,
            latent_shape=(3, self.latent_size, self.latent_size),
            num_attention_heads=self.num_attention_heads,
            hidden_channels=self.hidden_channels,
            num_timesteps=self.num_timesteps,
            schedule_profile=self.schedule_profile,
            seed=self.seed,
        )


@dataclass
class ContentReferenceSet:
    object_name: str
    images: list[np.ndarray]
    generator_fingerprint: str
    prompt_used: str
    seeds: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.images:
            raise InvalidArgumentError("a content reference set needs at least one image")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise InvalidArgumentError("content reference images differ in size")


@dataclass
class TrainStepRecord:
    step: int
    stage: int
    l_ldm: float
    l_content: float
    l_total: float
    timestep_sampled: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "TrainStepRecord":
        return cls(**json.loads(line))


@dataclass
class StageResult:
    records: list[TrainStepRecord]
    checkpoint_path: Path | None = None


@dataclass
class PipelineResult:
    run_dir: Path
    final_checkpoint: Path
    records: list[TrainStepRecord]
    keywords: StyleKeywords


def styled_prompt(obj: str, placeholder: str = emb.DEFAULT_PLACEHOLDER) -> str:
    return STYLED_TEMPLATE.format(object=obj, placeholder=placeholder)


def unstyled_prompt(obj: str) -> str:
    return UNSTYLED_TEMPLATE.format(object=obj)


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def _slug(name: str) -> str:
    base = re.sub(r"[^A-Za-z0-9_-]+", "_", name).strip("_") or "obj"
    return f"{base}-{hashlib.sha256(name.encode()).hexdigest()[:8]}"


def _atomic_write(path: Path, write: Callable[[str], None]):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def generate_content_references(frozen_backbone: ToyBackbone, objects: Sequence[str], config: TrainingConfig,
                                cache_dir: str | os.PathLike | None = None,
                                sampler: Callable = sample) -> dict[str, ContentReferenceSet]:
    """Sample ``content_refs_per_object`` unstyled images per object.

    Images for (object, fingerprint, seed) are cached as
    ``{cache_dir}/{fingerprint}/{object}/{seed}.png``; warm entries are reused
    without invoking the sampler.
    """
    objects = list(objects)
    if not objects:
        raise InvalidArgumentError("no objects to generate content references for")
    fingerprint = frozen_backbone.fingerprint()
    root = Path(cache_dir) / fingerprint if cache_dir is not None else None
    index: dict = {}
    if root is not None and (root / "index.json").exists():
        index = json.loads((root / "index.json").read_text(encoding="utf-8"))
    out = {}
    for obj in objects:
        prompt = unstyled_prompt(obj)
        seeds = [config.seed + i for i in range(config.content_refs_per_object)]
        images, cond = [], None
        for s in seeds:
            path = root / _slug(obj) / f"{s}.png" if root is not None else None
            if path is not None and path.exists():
                with Image.open(path) as im:
                    img = np.asarray(im.convert("RGB"))
                if img.shape[:2] == (config.image_size, config.image_size):
                    images.append(img)
                    continue
            if cond is None:
                with torch.no_grad():
                    cond = frozen_backbone.encode_text(frozen_backbone.tokenizer.encode(prompt), styled=False)
            img = sampler(frozen_backbone, cond, frozen_backbone.schedule, s,
                          image_size=config.image_size, num_inference_steps=config.sample_steps)
            images.append(img)
            if path is not None:
                _atomic_write(path, lambda tmp, img=img: Image.fromarray(img, "RGB").save(tmp, format="PNG"))
                index.setdefault(obj, {})[str(s)] = {"path": str(path.relative_to(root)), "prompt": prompt,
                                                      "image_size": config.image_size}
        out[obj] = ContentReferenceSet(obj, images, fingerprint, prompt, seeds)
    if root is not None:
        _atomic_write(root / "index.json",
                      lambda tmp: Path(tmp).write_text(json.dumps(index, indent=2, sort_keys=True)))
    return out


def _reference_latents(images: Iterable[np.ndarray], backbone: ToyBackbone) -> torch.Tensor:
    shape = backbone.config.latent_shape
    dtype = backbone.embedding_weight().dtype
    return torch.stack([image_to_latent(img, shape, dtype) for img in images])


class _RowGuard:
    """Keeps every embedding row outside ``mask`` bit-exact across optimiser steps."""

    def __init__(self, backbone: ToyBackbone, mask: emb.FreezeMask):
        self.backbone = backbone
        self.rows = mask.row_mask(backbone.vocab_size)
        self.frozen = backbone.embedding_weight().detach().clone()

    def mask_grad(self):
        grad = self.backbone.embedding_weight().grad
        if grad is not None:
            grad[~self.rows] = 0.0

    def restore(self):
        with torch.no_grad():
            weight = self.backbone.embedding_weight()
            weight[~self.rows] = self.frozen[~self.rows]


def _make_optimizer(params: list, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=lr, betas=tuple(OPTIMIZER["betas"]), eps=OPTIMIZER["eps"],
                            weight_decay=OPTIMIZER["weight_decay"])


class _Branch:
    """Draws (latent target, prompt ids, t, eps) batches from one RNG stream."""

    def __init__(self, backbone: ToyBackbone, targets: list[tuple[torch.Tensor, list[int]]], seed: int,
                 fixed_timestep: int | None = None, fixed_noise: torch.Tensor | None = None):
        self.backbone = backbone
        self.targets = targets
        self.gen = torch.Generator().manual_seed(seed)
        self.fixed_timestep = fixed_timestep
        self.fixed_noise = fixed_noise

    def loss(self, batch_size: int, styled: bool) -> tuple[torch.Tensor, int]:
        bb = self.backbone
        schedule = bb.schedule
        dtype = bb.embedding_weight().dtype
        shape = bb.config.latent_shape
        picks = torch.randint(len(self.targets), (batch_size,), generator=self.gen).tolist()
        t = torch.randint(schedule.num_steps, (batch_size,), generator=self.gen)
        eps = torch.randn((batch_size,) + tuple(shape), generator=self.gen, dtype=torch.float64).to(dtype)
        if self.fixed_timestep is not None:
            t = torch.full((batch_size,), schedule.check_timestep(self.fixed_timestep), dtype=torch.long)
        if self.fixed_noise is not None:
            eps = self.fixed_noise.to(dtype).expand((batch_size,) + tuple(shape)).clone()
        x0 = torch.stack([self.targets[i][0] for i in picks])
        xt = add_noise_batch(x0, eps, t, schedule)
        per_item = []
        for b, i in enumerate(picks):
            cond = bb.encode_text(self.targets[i][1], styled=styled)
            pred = bb.denoise_batch(xt[b:b + 1], t[b:b + 1], cond.vectors[None])[0]
            w = schedule.weights[int(t[b])]
            per_item.append(w * (pred - x0[b]).pow(2).sum())
        return torch.stack(per_item).mean(), int(t[0])


def _styled_targets(backbone: ToyBackbone, manifest: StyleCategoryManifest, span: emb.StyleIdentifierSpan,
                    images: Sequence[np.ndarray] | None = None) -> list[tuple[torch.Tensor, list[int]]]:
    latents = _reference_latents(images if images is not None else manifest.load_images(), backbone)
    prompts = [emb.expand_identifier(styled_prompt(o, span.placeholder), span.placeholder, span,
                                     backbone.tokenizer) for o in manifest.object_names]
    return [(x, ids) for x in latents for ids in prompts]


def _check_finite(value: torch.Tensor, step: int, stage: int):
    v = float(value.detach())
    if not math.isfinite(v):
        raise DivergenceError(step, stage, v)


def run_stage1(backbone: ToyBackbone, manifest: StyleCategoryManifest, span: emb.StyleIdentifierSpan,
               config: TrainingConfig, *, checkpoint_path: str | os.PathLike | None = None,
               reference_images: Sequence[np.ndarray] | None = None, step_offset: int = 0,
               fixed_timestep: int | None = None, fixed_noise: torch.Tensor | None = None) -> StageResult:
    """Optimise only the span embedding rows under the reconstruction loss."""
    if span.placeholder not in backbone.spans:
        raise NotFoundError(f"span {span.placeholder!r} is not registered")
    mask = emb.stage1_freeze_mask(backbone, span)
    targets = _styled_targets(backbone, manifest, span, reference_images)
    if not targets:
        raise PreconditionError("manifest has no reference images")
    params = mask.apply(backbone)
    guard = _RowGuard(backbone, mask)
    opt = _make_optimizer(params, config.stage1_lr)
    branch = _Branch(backbone, targets, derive_seed(config.seed, "stage1/styled"), fixed_timestep, fixed_noise)
    records = []
    backbone.train()
    for i in range(config.stage1_steps):
        step = step_offset + i + 1
        opt.zero_grad(set_to_none=True)
        l_ldm, t0 = branch.loss(config.batch_size, styled=True)
        _check_finite(l_ldm, step, 1)
        l_ldm.backward()
        guard.mask_grad()
        opt.step()
        guard.restore()
        v = float(l_ldm.detach())
        records.append(TrainStepRecord(step, 1, v, 0.0, v, t0))
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    path = None
    if checkpoint_path is not None:
        path = save_checkpoint(checkpoint_path, backbone, {"stage": 1, "step": step_offset + config.stage1_steps,
                                                           "training": config.to_dict(), "optimizer": OPTIMIZER})
    return StageResult(records, path)


def run_stage2(backbone: ToyBackbone, manifest: StyleCategoryManifest, span: emb.StyleIdentifierSpan,
               content_refs: dict[str, ContentReferenceSet], config: TrainingConfig, *,
               checkpoint_path: str | os.PathLike | None = None,
               reference_images: Sequence[np.ndarray] | None = None, step_offset: int = 0,
               content_branch: bool = True) -> StageResult:
    """Joint fine-tuning of span rows and attention blocks under the total loss.

    ``content_branch=False`` drops the content term entirely (the LDM-only
    ablation); the styled branch draws are unaffected.
    """
    if span.placeholder not in backbone.spans:
        raise NotFoundError(f"span {span.placeholder!r} is not registered")
    missing = [o for o in manifest.object_names if o not in content_refs]
    if content_branch and missing:
        raise PreconditionError(f"no content references for objects {missing}")
    mask = emb.stage2_freeze_mask(backbone, span, config.train_span_rows_in_stage2)
    styled = _Branch(backbone, _styled_targets(backbone, manifest, span, reference_images),
                     derive_seed(config.seed, "stage2/styled"))
    content = None
    if content_branch:
        targets = []
        for obj in manifest.object_names:
            ids = backbone.tokenizer.encode(unstyled_prompt(obj))
            for x in _reference_latents(content_refs[obj].images, backbone):
                targets.append((x, ids))
        content = _Branch(backbone, targets, derive_seed(config.seed, "stage2/content"))
    params = mask.apply(backbone)
    guard = _RowGuard(backbone, mask)
    opt = _make_optimizer(params, config.stage2_lr)
    records = []
    backbone.train()
    for i in range(config.stage2_steps):
        step = step_offset + i + 1
        opt.zero_grad(set_to_none=True)
        l_ldm, t0 = styled.loss(config.batch_size, styled=True)
        _check_finite(l_ldm, step, 2)
        if content is not None:
            l_content, _ = content.loss(config.batch_size, styled=False)
            _check_finite(l_content, step, 2)
            loss = total_loss(l_ldm, l_content, config.lambda1, config.lambda2)
            lc = float(l_content.detach())
        else:
            loss = config.lambda1 * l_ldm
            lc = 0.0
        loss.backward()
        guard.mask_grad()
        opt.step()
        guard.restore()
        ll = float(l_ldm.detach())
        records.append(TrainStepRecord(step, 2, ll, lc, config.lambda1 * ll + config.lambda2 * lc, t0))
    backbone.eval()
    for p in backbone.parameters():
        p.requires_grad_(False)
    path = None
    if checkpoint_path is not None:
        path = save_checkpoint(checkpoint_path, backbone, {"stage": 2, "step": step_offset + config.stage2_steps,
                                                           "training": config.to_dict(), "optimizer": OPTIMIZER})
    return StageResult(records, path)


def _write_records(path: Path, records: list[TrainStepRecord]):
    _atomic_write(path, lambda tmp: Path(tmp).write_text("".join(r.to_json() + "\n" for r in records)))


def read_records(path: str | os.PathLike) -> list[TrainStepRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [TrainStepRecord.from_json(line) for line in path.read_text().splitlines() if line.strip()]


def run_full_pipeline(manifest: StyleCategoryManifest, config: TrainingConfig, vlm: VlmClientInterface,
                      run_dir: str | os.PathLike, *, content_cache_dir: str | os.PathLike | None = None,
                      keyword_cache_dir: str | os.PathLike | None = None,
                      backbone: ToyBackbone | None = None,
                      pretrain_cache_dir: str | os.PathLike | None = None) -> PipelineResult:
    """Keywords -> embedding init -> content refs -> stage 1 -> stage 2.

    Each boundary leaves an artefact in ``run_dir``; rerunning with the same
    config resumes from the last completed boundary.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = run_dir / "config.json"
    resolved = config.to_dict()
    if snapshot.exists():
        previous = json.loads(snapshot.read_text())
        if previous != resolved:
            raise PreconditionError(f"{run_dir} was started with a different config")
    else:
        snapshot.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    keyword_cache = KeywordCache(keyword_cache_dir or run_dir / "keywords")
    content_cache = Path(content_cache_dir) if content_cache_dir else run_dir / "content_refs"
    records_path = run_dir / "records.log"
    init_ckpt, s1_ckpt, s2_ckpt = run_dir / "init.ckpt", run_dir / "stage1.ckpt", run_dir / "stage2.ckpt"

    def stage(label: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(label, exc) from exc

    if manifest.cached_keywords is not None:
        keywords = manifest.cached_keywords
    else:
        keywords = stage("extract-keywords", cached_style_keywords, manifest.category_id,
                         manifest.image_payloads(), vlm, keyword_cache)
    logger.info("style keywords for %s: %r", manifest.category_id, keywords.keywords)

    if backbone is not None:
        base = backbone
    else:
        base = stage("pretrain", pretrained_toy_backbone, config.toy_model_config(), config.pretrain_steps,
                     config.pretrain_lr, cache_dir=pretrain_cache_dir)
    frozen = base.clone()
    for p in frozen.parameters():
        p.requires_grad_(False)

    def initialise():
        record = emb.compute_keyword_embeddings(base, keywords)
        span = emb.allocate_span(base, manifest.placeholder, record.n)
        emb.register_and_initialize(base, span, record)
        save_checkpoint(init_ckpt, base, {"stage": 0, "step": 0, "training": resolved,
                                          "keywords": keywords.keywords})
        return base

    current = load_checkpoint(init_ckpt)[0] if init_ckpt.exists() else stage("initialize", initialise)
    span = emb.registered_span(current, manifest.placeholder)

    content_refs = stage("content-references", generate_content_references, frozen, manifest.object_names,
                         config, cache_dir=content_cache)
    images = manifest.load_images()
    records = read_records(records_path)

    if s1_ckpt.exists():
        current = load_checkpoint(s1_ckpt)[0]
        records = [r for r in records if r.stage == 1]
    else:
        result = stage("stage1", run_stage1, current, manifest, span, config, checkpoint_path=s1_ckpt,
                       reference_images=images)
        records = result.records
        _write_records(records_path, records)

    if s2_ckpt.exists():
        records = read_records(records_path)
    else:
        result = stage("stage2", run_stage2, current, manifest, span, content_refs, config,
                       checkpoint_path=s2_ckpt, reference_images=images, step_offset=config.stage1_steps)
        records = records + result.records
        _write_records(records_path, records)

    return PipelineResult(run_dir, s2_ckpt, records, keywords)
