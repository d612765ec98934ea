"""Generic pretraining for the toy backbone.

The personalisation stages assume a pretrained base model whose denoiser
already reads its text conditioning. For the toy backbone that base is
produced here: all parameters are trained on procedurally generated pattern
images paired with captions naming the pattern and its palette colours.
Results are cached on disk keyed by the model config and pretraining
settings, since the run takes tens of seconds on CPU.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PATTERNS, analogous_palette, pattern_caption, pattern_image
from .schedule import add_noise_batch
from .toy_ldm import ToyBackbone, ToyModelConfig, build_toy_backbone, image_to_latent

logger = logging.getLogger(__name__)

CACHE_ENV = "STYLEREG_CACHE_DIR"


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "stylereg")


def pretrain_toy_backbone(backbone: ToyBackbone, steps: int, lr: float = 2e-3, batch_size: int = 8,
                          seed: int = 0, image_size: int = 64) -> list[float]:
    """Train every parameter on captioned synthetic patterns; returns per-step losses."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    rng = np.random.default_rng([seed, 0x5EED])
    gen = torch.Generator().manual_seed(seed)
    params = list(backbone.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    shape = backbone.config.latent_shape
    dtype = backbone.embedding_weight().dtype
    losses = []
    backbone.train()
    for _ in range(steps):
        latents, ids = [], []
        for _ in range(batch_size):
            kind = PATTERNS[int(rng.integers(len(PATTERNS)))]
            palette = analogous_palette(rng)
            latents.append(image_to_latent(pattern_image(kind, palette, image_size, rng), shape, dtype))
            ids.append(backbone.tokenizer.encode(pattern_caption(kind, palette)))
        x0 = torch.stack(latents)
        t = torch.randint(backbone.schedule.num_steps, (batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=torch.float64).to(dtype)
        context = backbone.text_encoder(torch.tensor(ids))
        pred = backbone.denoise_batch(add_noise_batch(x0, eps, t, backbone.schedule), t, context)
        loss = (pred - x0).pow(2).flatten(1).sum(1).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    backbone.eval()
    for p in params:
        p.requires_grad_(False)
    return losses


def _cache_key(config: ToyModelConfig, steps: int, lr: float, batch_size: int) -> str:
    blob = json.dumps({"model": config.to_dict(), "steps": steps, "lr": lr, "batch": batch_size},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pretrained_toy_backbone(config: ToyModelConfig, steps: int = 1000, lr: float = 2e-3,
                            batch_size: int = 8, cache_dir: str | os.PathLike | None = None) -> ToyBackbone:
    """Build the toy backbone and pretrain it, reusing a cached result when present."""
    if steps == 0:
        return build_toy_backbone(config)
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    path = root / "pretrained" / f"toy-{_cache_key(config, steps, lr, batch_size)}.ckpt"
    if path.exists():
        return load_checkpoint(path)[0]
    backbone = build_toy_backbone(config)
    logger.info("pretraining toy backbone for %d steps (cached at %s)", steps, path)
    losses = pretrain_toy_backbone(backbone, steps, lr, batch_size, seed=config.seed)
    save_checkpoint(path, backbone, {"pretrain": {"steps": steps, "lr": lr, "batch_size": batch_size,
                                                  "final_loss": losses[-1] if losses else None}})
    return load_checkpoint(path)[0]
