"""Desk-scale text-conditioned diffusion backbone.

The toy model works directly in a small pixel latent space (no VAE):

* text encoder: token lookup + learned positions -> one multi-head
  self-attention block -> layer norm -> linear projection
* denoiser: conv encoder/decoder with a sinusoidal timestep embedding and one
  cross-attention block over the text conditioning; predicts the clean latent

Every trainable array is tagged with exactly one parameter group so training
stages can declare what they update. A pretrained backbone can be plugged in
by satisfying :class:`BackboneInterface` and tagging its parameters the same
way.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgumentError, OutOfRangeError
from .schedule import LatentSample, NoiseSchedule, build_schedule
from .tokenizer import WordPieceTokenizer

PARAMETER_GROUPS = ("token_embedding", "text_attention", "text_other",
                    "denoiser_attention", "denoiser_other")

# Attention groups hold every array inside the attention module: q/k/v
# projections, output projection and all biases. Pre-attention norms are not
# part of the block and stay in the *_other groups.
ATTENTION_SCOPE = "qkv+out_proj+biases"

MAX_PROMPT_TOKENS = 77

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class ToyModelConfig:
    embed_dim: int = 32
    latent_shape: tuple[int, int, int] = (3, 16, 16)
    vocab_size: int | None = None
    num_attention_heads: int = 4
    hidden_channels: int = 32
    num_timesteps: int = 1000
    schedule_profile: str = "linear"
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.latent_shape = tuple(int(v) for v in self.latent_shape)

    def validate(self, base_vocab: int):
        if self.embed_dim <= 0 or self.num_attention_heads <= 0 or self.hidden_channels <= 0:
            raise InvalidArgumentError("embed_dim, num_attention_heads and hidden_channels must be positive")
        if self.embed_dim % self.num_attention_heads:
            raise InvalidArgumentError(
                f"embed_dim {self.embed_dim} not divisible by num_attention_heads {self.num_attention_heads}"
            )
        if len(self.latent_shape) != 3 or min(self.latent_shape) <= 0:
            raise InvalidArgumentError(f"latent_shape must be (channels, height, width), got {self.latent_shape}")
        c, h, w = self.latent_shape
        if h % 2 or w % 2:
            raise InvalidArgumentError("latent height and width must be even")
        if self.vocab_size is not None and self.vocab_size < base_vocab:
            raise InvalidArgumentError(f"vocab_size must be >= tokenizer size {base_vocab}")
        if self.dtype not in _DTYPES:
            raise InvalidArgumentError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_shape"] = list(self.latent_shape)
        return d


@dataclass
class Conditioning:
    vectors: torch.Tensor  # (sequence_length, embed_dim)
    styled: bool = False

    def __post_init__(self):
        if self.vectors.dim() != 2 or self.vectors.shape[0] < 1:
            raise InvalidArgumentError("conditioning must be a non-empty (sequence, dim) matrix")


@runtime_checkable
class BackboneInterface(Protocol):
    """What trainers and samplers need from a text-to-image backbone."""

    tokenizer: WordPieceTokenizer
    schedule: NoiseSchedule
    text_encoder: nn.Module
    denoiser: nn.Module
    spans: dict

    def encode_text(self, token_ids: Sequence[int], styled: bool = False) -> Conditioning: ...

    def lookup(self, token_ids: Sequence[int]) -> torch.Tensor: ...

    def denoise(self, noisy: LatentSample, conditioning: Conditioning) -> torch.Tensor: ...

    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]: ...

    def extend_vocabulary(self, rows: torch.Tensor) -> list[int]: ...

    def embedding_weight(self) -> nn.Parameter: ...


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ToyTextEncoder(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int, num_heads: int):
        super().__init__()
        self.token_embedding = nn.Embedding(vocab_size, embed_dim)
        self.position_embedding = nn.Parameter(torch.randn(MAX_PROMPT_TOKENS, embed_dim) * 0.02)
        self.norm_in = nn.LayerNorm(embed_dim)
        self.attn = nn.MultiheadAttention(embed_dim, num_heads, batch_first=True)
        self.norm_out = nn.LayerNorm(embed_dim)
        self.projection = nn.Linear(embed_dim, embed_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        h = self.token_embedding(ids) + self.position_embedding[: ids.shape[-1]]
        q = self.norm_in(h)
        attn_out, _ = self.attn(q, q, q, need_weights=False)
        h = h + attn_out
        return self.projection(self.norm_out(h))


class CrossAttention(nn.Module):
    def __init__(self, query_dim: int, context_dim: int, heads: int):
        super().__init__()
        inner = context_dim
        self.heads = heads
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        m = context.shape[1]
        q = self.to_q(x).view(b, n, self.heads, -1).transpose(1, 2)
        k = self.to_k(context).view(b, m, self.heads, -1).transpose(1, 2)
        v = self.to_v(context).view(b, m, self.heads, -1).transpose(1, 2)
        scale = q.shape[-1] ** -0.5
        weights = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, n, -1)
        return self.to_out(out)


class ToyDenoiser(nn.Module):
    def __init__(self, channels: int, hidden: int, context_dim: int, heads: int):
        super().__init__()
        self.hidden = hidden
        self.time_mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.conv_in = nn.Conv2d(channels, hidden, 3, padding=1)
        self.down = nn.Conv2d(hidden, hidden, 4, stride=2, padding=1)
        self.norm_mid = nn.GroupNorm(4, hidden)
        self.cross_attn = CrossAttention(hidden, context_dim, heads)
        self.up = nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1)
        self.conv_out = nn.Conv2d(2 * hidden, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, self.hidden).to(x.dtype))
        skip = torch.nn.functional.silu(self.conv_in(x) + temb[:, :, None, None])
        h = torch.nn.functional.silu(self.down(skip))
        b, c, hh, ww = h.shape
        tokens = self.norm_mid(h).flatten(2).transpose(1, 2)
        h = h + self.cross_attn(tokens, context).transpose(1, 2).reshape(b, c, hh, ww)
        h = torch.nn.functional.silu(self.up(h))
        return self.conv_out(torch.cat([h, skip], dim=1))


class ToyBackbone(nn.Module):
    """Toy text encoder + denoiser pair implementing :class:`BackboneInterface`.

    The clean-sample prediction is preconditioned as
    ``alpha_t * x_t + sigma_t * F(x_t, t, c)`` so that the untrained network
    starts from the linear estimate of the clean sample.
    """

    def __init__(self, config: ToyModelConfig, tokenizer: WordPieceTokenizer | None = None):
        super().__init__()
        self.tokenizer = tokenizer or WordPieceTokenizer()
        config.validate(len(self.tokenizer))
        self.config = config
        self.dtype = _DTYPES[config.dtype]
        self.schedule = build_schedule(config.num_timesteps, config.schedule_profile)
        vocab = config.vocab_size or len(self.tokenizer)
        if not self.tokenizer.added_tokens:
            self.tokenizer.pad_to(vocab)
        if len(self.tokenizer) != vocab:
            raise InvalidArgumentError("tokenizer and embedding table sizes disagree")
        channels = config.latent_shape[0]
        gen_state = torch.random.get_rng_state()
        try:
            torch.manual_seed(config.seed)
            self.text_encoder = ToyTextEncoder(vocab, config.embed_dim, config.num_attention_heads)
            self.denoiser = ToyDenoiser(channels, config.hidden_channels, config.embed_dim,
                                        config.num_attention_heads)
        finally:
            torch.random.set_rng_state(gen_state)
        self.to(self.dtype)
        self.spans: dict[str, dict] = {}
        self._alphas = torch.tensor(self.schedule.alphas, dtype=self.dtype)
        self._sigmas = torch.tensor(self.schedule.sigmas, dtype=self.dtype)

    @property
    def vocab_size(self) -> int:
        return self.text_encoder.token_embedding.num_embeddings

    def embedding_weight(self) -> nn.Parameter:
        return self.text_encoder.token_embedding.weight

    def _check_ids(self, token_ids: Sequence[int]) -> torch.Tensor:
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        if ids.numel() == 0:
            raise InvalidArgumentError("cannot encode an empty token sequence")
        if ids.numel() > MAX_PROMPT_TOKENS:
            raise InvalidArgumentError(f"prompt longer than {MAX_PROMPT_TOKENS} tokens")
        if int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size:
            raise OutOfRangeError(f"token id outside vocabulary of size {self.vocab_size}")
        return ids

    def lookup(self, token_ids: Sequence[int]) -> torch.Tensor:
        """Raw embedding-table rows, before positions and attention."""
        return self.text_encoder.token_embedding(self._check_ids(token_ids))

    def encode_text(self, token_ids: Sequence[int], styled: bool = False) -> Conditioning:
        ids = self._check_ids(token_ids)
        return Conditioning(self.text_encoder(ids[None])[0], styled=styled)

    def encode_prompt(self, prompt: str, styled: bool | None = None) -> Conditioning:
        ids = self.tokenizer.encode(prompt)
        if styled is None:
            span_ids = {i for s in self.spans.values() for i in s["token_ids"]}
            styled = any(i in span_ids for i in ids)
        return self.encode_text(ids, styled=styled)

    def denoise(self, noisy: LatentSample, conditioning: Conditioning) -> torch.Tensor:
        x = noisy.data
        if tuple(x.shape) != self.config.latent_shape:
            raise InvalidArgumentError(
                f"latent shape {tuple(x.shape)} does not match configured {self.config.latent_shape}"
            )
        t = self.schedule.check_timestep(noisy.timestep)
        return self.denoise_batch(x[None], torch.tensor([t]), conditioning.vectors[None])[0]

    def denoise_batch(self, x: torch.Tensor, t: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        shape = (-1, 1, 1, 1)
        x = x.to(self.dtype)
        residual = self.denoiser(x, t, context.to(self.dtype))
        return self._alphas[t].view(shape) * x + self._sigmas[t].view(shape) * residual

    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        groups: dict[str, dict[str, nn.Parameter]] = {g: {} for g in PARAMETER_GROUPS}
        for name, param in self.named_parameters():
            if name.startswith("text_encoder.token_embedding."):
                groups["token_embedding"][name] = param
            elif name.startswith("text_encoder.attn."):
                groups["text_attention"][name] = param
            elif name.startswith("text_encoder."):
                groups["text_other"][name] = param
            elif name.startswith("denoiser.cross_attn."):
                groups["denoiser_attention"][name] = param
            elif name.startswith("denoiser."):
                groups["denoiser_other"][name] = param
            else:
                raise AssertionError(f"parameter {name} has no group")
        return groups

    def group_manifest(self) -> dict[str, list[str]]:
        return {g: sorted(p) for g, p in self.parameter_groups().items()}

    def extend_vocabulary(self, rows: torch.Tensor) -> list[int]:
        """Append rows to the embedding table; existing rows are copied bit-exactly."""
        old = self.text_encoder.token_embedding
        rows = rows.detach().to(old.weight.dtype)
        if rows.dim() != 2 or rows.shape[1] != old.embedding_dim:
            raise InvalidArgumentError(f"rows must have shape (n, {old.embedding_dim})")
        new = nn.Embedding(old.num_embeddings + rows.shape[0], old.embedding_dim,
                           dtype=old.weight.dtype)
        with torch.no_grad():
            new.weight.copy_(torch.cat([old.weight.detach(), rows], dim=0))
        new.weight.requires_grad_(old.weight.requires_grad)
        self.text_encoder.token_embedding = new
        return list(range(old.num_embeddings, new.num_embeddings))

    def clone(self) -> "ToyBackbone":
        return copy.deepcopy(self)

    def fingerprint(self) -> str:
        return parameter_fingerprint(self)


def parameter_fingerprint(backbone: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(backbone.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_toy_backbone(config: ToyModelConfig | None = None) -> ToyBackbone:
    return ToyBackbone(config or ToyModelConfig())


def encode_text(backbone: BackboneInterface, token_ids: Sequence[int]) -> Conditioning:
    return backbone.encode_text(token_ids)


def denoise(backbone: BackboneInterface, noisy: LatentSample, conditioning: Conditioning) -> torch.Tensor:
    return backbone.denoise(noisy, conditioning)


def latent_to_image(latent: torch.Tensor, image_size: int) -> np.ndarray:
    """Map a (C, H, W) latent in [-1, 1] to an (S, S, 3) uint8 RGB image."""
    x = latent.detach().to(torch.float64).clamp(-1.0, 1.0)
    pixels = torch.round((x + 1.0) * 127.5).to(torch.uint8)
    if pixels.shape[0] == 1:
        pixels = pixels.expand(3, -1, -1)
    arr = pixels[:3].permute(1, 2, 0).numpy()
    h, w = arr.shape[:2]
    if image_size % h == 0 and image_size % w == 0:
        return np.ascontiguousarray(arr.repeat(image_size // h, 0).repeat(image_size // w, 1))
    from PIL import Image

    return np.asarray(Image.fromarray(arr).resize((image_size, image_size), Image.NEAREST))


def image_to_latent(image: np.ndarray, latent_shape: Sequence[int], dtype=torch.float64) -> torch.Tensor:
    """Area-resample an RGB uint8 image into a latent in [-1, 1]."""
    from PIL import Image

    c, h, w = latent_shape
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise InvalidArgumentError("expected an (H, W, 3) uint8 RGB image")
    if arr.shape[:2] != (h, w):
        arr = np.asarray(Image.fromarray(arr).resize((w, h), Image.BOX))
    x = torch.from_numpy(arr.astype(np.float64) / 127.5 - 1.0).permute(2, 0, 1)
    if c == 1:
        x = x.mean(0, keepdim=True)
    elif c != 3:
        raise InvalidArgumentError("toy latents must have 1 or 3 channels")
    return x.to(dtype).contiguous()


@torch.no_grad()
def sample_latent(backbone: BackboneInterface, conditioning: Conditioning, schedule: NoiseSchedule,
                  seed: int, num_inference_steps: int = 50) -> torch.Tensor:
    """Ancestral sampling with clean-sample predictions.

    Uses the Gaussian posterior q(x_s | x_t, x0_hat) between consecutive
    timesteps of an evenly strided subset of the schedule.
    """
    if num_inference_steps < 1:
        raise InvalidArgumentError("num_inference_steps must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    shape = tuple(backbone.config.latent_shape)
    dtype = backbone.embedding_weight().dtype
    last = schedule.num_steps - 1
    steps = min(num_inference_steps, last)
    times = sorted({int(round(v)) for v in np.linspace(last, 0, steps + 1)}, reverse=True)
    x = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    x = schedule.sigmas[last] * x
    for t, s in zip(times[:-1], times[1:]):
        x0 = backbone.denoise(LatentSample(x, t), conditioning)
        a_t, s_t, _ = schedule.coefficients(t)
        a_s, s_s, _ = schedule.coefficients(s)
        a_ts = a_t / a_s
        var_ts = max(s_t ** 2 - a_ts ** 2 * s_s ** 2, 0.0)
        mean = (a_ts * s_s ** 2 / s_t ** 2) * x + (a_s * var_ts / s_t ** 2) * x0
        std = math.sqrt(var_ts * s_s ** 2 / s_t ** 2)
        noise = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
        x = mean + std * noise if s > 0 else mean
    return x


def sample(backbone: BackboneInterface, conditioning: Conditioning, schedule: NoiseSchedule,
           seed: int, image_size: int = 256, num_inference_steps: int = 50) -> np.ndarray:
    """Generate one image: ancestral sampling then mapping to uint8 RGB."""
    latent = sample_latent(backbone, conditioning, schedule, seed, num_inference_steps)
    return latent_to_image(latent, image_size)
