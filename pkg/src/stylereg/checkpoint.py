"""Versioned backbone checkpoints.

A checkpoint is a safetensors file: the JSON header (format version, model
config, parameter-group manifest, tokenizer state, registered spans and any
caller metadata) lives in the safetensors metadata block, followed by the
named parameter arrays. Nothing time-dependent is written, so identical
training runs produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .errors import InvalidArgumentError, NotFoundError
from .tokenizer import WordPieceTokenizer
from .toy_ldm import ATTENTION_SCOPE, ToyBackbone, ToyModelConfig

FORMAT_NAME = "stylereg-checkpoint"
FORMAT_VERSION = 1
# A single metadata key: safetensors writes metadata from an unordered map,
# so several keys would make the byte layout vary between processes.
_META_KEY = "stylereg"


def save_checkpoint(path: str | os.PathLike, backbone: ToyBackbone, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "config": backbone.config.to_dict(),
        "parameter_groups": backbone.group_manifest(),
        "attention_scope": ATTENTION_SCOPE,
        "tokenizer": backbone.tokenizer.state(),
        "spans": backbone.spans,
        "extra": extra or {},
    }
    tensors = {name: t.detach().contiguous().clone() for name, t in backbone.state_dict().items()}
    metadata = {_META_KEY: json.dumps(header, sort_keys=True)}
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        save_file(tensors, tmp, metadata=metadata)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def read_header(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"checkpoint {path} not found")
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
    except Exception as exc:  # safetensors raises its own untyped errors
        raise InvalidArgumentError(f"{path} is not a readable checkpoint ({exc})") from None
    try:
        header = json.loads(meta[_META_KEY])
    except (KeyError, json.JSONDecodeError):
        header = None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise InvalidArgumentError(f"{path} is not a {FORMAT_NAME} file")
    if header.get("format_version") != FORMAT_VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {header.get('format_version')}")
    return header


def load_checkpoint(path: str | os.PathLike) -> tuple[ToyBackbone, dict]:
    header = read_header(path)
    tensors = {}
    with safe_open(str(path), framework="pt") as fh:
        for name in fh.keys():
            tensors[name] = fh.get_tensor(name)
    tok_state = header["tokenizer"]
    tokenizer = WordPieceTokenizer()
    tokenizer.pad_to(tok_state["reserved_size"])
    cfg = dict(header["config"])
    cfg["vocab_size"] = None
    backbone = ToyBackbone(ToyModelConfig(**cfg), tokenizer)
    added = tok_state.get("added_tokens", [])
    if added:
        tokenizer.add_tokens(added)
        backbone.extend_vocabulary(torch.zeros(len(added), backbone.embedding_weight().shape[1]))
    backbone.config.vocab_size = header["config"].get("vocab_size")
    backbone.load_state_dict(tensors, strict=True)
    backbone.spans = {k: dict(v) for k, v in header.get("spans", {}).items()}
    return backbone, header
