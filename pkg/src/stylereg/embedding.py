"""Multi-token style identifiers initialised from keyword embeddings.

A placeholder such as ``[V*]`` is expanded into ``n`` fresh tokens
(``V1*`` ... ``Vn*``), one per sub-word token of the extracted style
keywords. The new embedding-table rows start as exact copies of the keyword
rows, so the identifier begins life as an alias of its keywords.
"""

from __future__ import annotations

import hashlib
import logging
import re
import time
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import (
    AmbiguousPlaceholderError,
    ConflictError,
    InvalidArgumentError,
    MissingPlaceholderError,
    NotFoundError,
)
from .style_reasoning import StyleKeywords
from .tokenizer import WordPieceTokenizer

logger = logging.getLogger(__name__)

MAX_IDENTIFIER_TOKENS = 8
DEFAULT_PLACEHOLDER = "[V*]"


@dataclass(frozen=True)
class StyleIdentifierSpan:
    placeholder: str
    token_names: tuple[str, ...]
    token_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.token_names) != len(self.token_ids):
            raise InvalidArgumentError("token_names and token_ids differ in length")
        ids = list(self.token_ids)
        if ids and ids != list(range(ids[0], ids[0] + len(ids))):
            raise InvalidArgumentError("span token ids must be contiguous")

    @property
    def n(self) -> int:
        return len(self.token_ids)

    def to_dict(self) -> dict:
        return {"placeholder": self.placeholder, "token_names": list(self.token_names),
                "token_ids": list(self.token_ids)}


@dataclass
class EmbeddingInitRecord:
    keyword_embeddings: torch.Tensor  # (n, embed_dim)
    source_keywords: str
    initialized_at: float = field(default_factory=time.time)

    @property
    def n(self) -> int:
        return self.keyword_embeddings.shape[0]

    def matrix_hash(self) -> str:
        data = self.keyword_embeddings.detach().cpu().contiguous().numpy().tobytes()
        return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class FreezeMask:
    """Which parameters an optimisation stage may touch.

    ``trainable_rows`` are embedding-table rows; ``trainable_groups`` name
    whole parameter groups (always empty for stage 1).
    """

    trainable_rows: frozenset[int]
    trainable_groups: frozenset[str] = frozenset()
    everything_else_frozen: bool = True

    def row_mask(self, vocab_size: int) -> torch.Tensor:
        mask = torch.zeros(vocab_size, dtype=torch.bool)
        if self.trainable_rows:
            mask[sorted(self.trainable_rows)] = True
        return mask

    def apply(self, backbone) -> list[nn.Parameter]:
        """Set ``requires_grad`` per the mask; return the parameters to optimise."""
        trainable = []
        for group, params in backbone.parameter_groups().items():
            for param in params.values():
                on = group in self.trainable_groups or (
                    group == "token_embedding" and bool(self.trainable_rows))
                param.requires_grad_(on)
                if on:
                    trainable.append(param)
        return trainable

    def trainable_count(self, backbone) -> int:
        groups = backbone.parameter_groups()
        count = len(self.trainable_rows) * backbone.embedding_weight().shape[1]
        for g in self.trainable_groups:
            if g != "token_embedding":
                count += sum(p.numel() for p in groups[g].values())
        return count


def _stem(placeholder: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9]", "", placeholder)
    return stem or "S"


def allocate_span(backbone, placeholder: str, n: int) -> StyleIdentifierSpan:
    """Reserve ``n`` ids directly past the current vocabulary for ``placeholder``."""
    if n < 1:
        raise InvalidArgumentError("a style identifier needs at least one token")
    if placeholder in backbone.spans:
        raise ConflictError(f"placeholder {placeholder!r} is already registered")
    start = backbone.vocab_size
    stem = _stem(placeholder)
    names = tuple(f"{stem}{i}*" for i in range(1, n + 1))
    return StyleIdentifierSpan(placeholder, names, tuple(range(start, start + n)))


def compute_keyword_embeddings(backbone, keywords: StyleKeywords | str) -> EmbeddingInitRecord:
    """Embedding-table rows of the keyword tokens (before positions/attention)."""
    text = keywords.keywords if isinstance(keywords, StyleKeywords) else str(keywords)
    ids = backbone.tokenizer.encode(text)
    if not any(i != backbone.tokenizer.unk_id for i in ids):
        raise InvalidArgumentError(f"keywords {text!r} produce no known tokens")
    if len(ids) > MAX_IDENTIFIER_TOKENS:
        logger.warning("keywords %r tokenize to %d tokens; truncating to %d",
                       text, len(ids), MAX_IDENTIFIER_TOKENS)
        ids = ids[:MAX_IDENTIFIER_TOKENS]
    with torch.no_grad():
        rows = backbone.lookup(ids).detach().clone()
    return EmbeddingInitRecord(rows, text)


def register_and_initialize(backbone, span: StyleIdentifierSpan, record: EmbeddingInitRecord):
    if span.placeholder in backbone.spans:
        raise ConflictError(f"placeholder {span.placeholder!r} is already registered")
    if span.n == 0:
        raise InvalidArgumentError("cannot register an empty span")
    if record.n != span.n:
        raise InvalidArgumentError(f"record has {record.n} rows but span has {span.n} tokens")
    if not torch.isfinite(record.keyword_embeddings).all():
        raise InvalidArgumentError("keyword embeddings contain non-finite entries")
    vocab = backbone.vocab_size
    if span.token_ids[0] != vocab:
        raise ConflictError(
            f"span ids start at {span.token_ids[0]} but the next free id is {vocab}")
    tok_ids = backbone.tokenizer.add_tokens(span.token_names)
    if tuple(tok_ids) != span.token_ids:
        raise ConflictError("tokenizer and embedding table are out of sync")
    new_ids = backbone.extend_vocabulary(record.keyword_embeddings)
    assert tuple(new_ids) == span.token_ids
    backbone.spans[span.placeholder] = {
        **span.to_dict(),
        "source_keywords": record.source_keywords,
        "init_matrix_hash": record.matrix_hash(),
    }
    return backbone


def registered_span(backbone, placeholder: str = DEFAULT_PLACEHOLDER) -> StyleIdentifierSpan:
    try:
        info = backbone.spans[placeholder]
    except KeyError:
        raise NotFoundError(f"no style identifier registered for {placeholder!r}") from None
    return StyleIdentifierSpan(info["placeholder"], tuple(info["token_names"]), tuple(info["token_ids"]))


def _check_registered(backbone_or_tokenizer, span: StyleIdentifierSpan):
    tok = getattr(backbone_or_tokenizer, "tokenizer", backbone_or_tokenizer)
    for name, i in zip(span.token_names, span.token_ids):
        if tok.token_to_id.get(name) != i:
            raise NotFoundError(f"span token {name!r} is not registered")


def expand_identifier(prompt: str, placeholder: str, span: StyleIdentifierSpan,
                      tokenizer: WordPieceTokenizer) -> list[int]:
    """Tokenize ``prompt`` with the single placeholder replaced by the span ids."""
    count = prompt.count(placeholder)
    if count == 0:
        raise MissingPlaceholderError(f"prompt {prompt!r} does not contain {placeholder!r}")
    if count > 1:
        raise AmbiguousPlaceholderError(f"prompt {prompt!r} contains {placeholder!r} {count} times")
    _check_registered(tokenizer, span)
    before, after = prompt.split(placeholder)
    return tokenizer.encode(before) + list(span.token_ids) + tokenizer.encode(after)


def tokenize_prompt(backbone, prompt: str) -> list[int]:
    """Tokenize, expanding any registered placeholder it contains."""
    for placeholder in backbone.spans:
        if placeholder in prompt:
            return expand_identifier(prompt, placeholder, registered_span(backbone, placeholder),
                                     backbone.tokenizer)
    return backbone.tokenizer.encode(prompt)


def stage1_freeze_mask(backbone, span: StyleIdentifierSpan) -> FreezeMask:
    if span.n == 0:
        raise InvalidArgumentError("empty span")
    if span.placeholder not in backbone.spans:
        raise NotFoundError(f"span {span.placeholder!r} is not registered")
    _check_registered(backbone, span)
    return FreezeMask(frozenset(span.token_ids))


def stage2_freeze_mask(backbone, span: StyleIdentifierSpan, train_span_rows: bool = True) -> FreezeMask:
    groups = {"text_attention", "denoiser_attention"}
    if train_span_rows:
        base = stage1_freeze_mask(backbone, span)
        return FreezeMask(base.trainable_rows, frozenset(groups))
    return FreezeMask(frozenset(), frozenset(groups))
