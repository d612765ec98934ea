"""Style keyword extraction with a vision-language model.

The VLM receives a fixed analysis template plus the style reference images
and must answer with a one-key JSON object ``{"style keywords": "..."}``.
Responses are parsed leniently (prose and markdown fences around the object
are tolerated) but validated strictly against that schema.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import tempfile
import time
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

from .errors import (
    ExtractionFailedError,
    InvalidArgumentError,
    KeywordParseError,
    KeywordSchemaError,
)

logger = logging.getLogger(__name__)

KEYWORD_KEY = "style keywords"
MAX_IMAGES_PER_REQUEST = 16

STYLE_PROMPT_TEMPLATE = (
    "Analyze the provided images, depicting visual style keywords. Extract and describe the "
    "stylistic attributes related to geometric patterns, material aesthetics, or artistic "
    "techniques, and summary all the feature in 1–3 concise descriptive keywords for each "
    "stylistic category. Avoid references to specific objects, colors, or contextual elements. "
    "Return the results in a dictionary format with a single key of ‘style keywords’ "
    "and one single result.\n"
    "For examples, the answer might be:\n"
    "{\n"
    '  "style keywords": "geometric reliefs"\n'
    "}"
)

TEMPLATE_HASH = hashlib.sha256(STYLE_PROMPT_TEMPLATE.encode("utf-8")).hexdigest()

# Keyword table the offline mock draws from; indexed by a hash of the images.
MOCK_KEYWORD_TABLE = (
    "geometric reliefs",
    "ink wash",
    "woodcut print",
    "stained glass mosaic",
    "pastel gradient",
    "checkered tiles",
    "striped pattern",
    "grainy texture",
)


def build_style_prompt() -> str:
    return STYLE_PROMPT_TEMPLATE


@dataclass(frozen=True)
class ImagePayload:
    data: bytes
    media_type: str = "image/png"

    @classmethod
    def from_path(cls, path: str | os.PathLike) -> "ImagePayload":
        media_type = mimetypes.guess_type(str(path))[0] or "application/octet-stream"
        return cls(Path(path).read_bytes(), media_type)

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"


@dataclass(frozen=True)
class VlmRequest:
    prompt_text: str
    images: tuple[ImagePayload, ...]

    def __post_init__(self):
        if not self.prompt_text:
            raise InvalidArgumentError("prompt_text must be non-empty")
        if not 1 <= len(self.images) <= MAX_IMAGES_PER_REQUEST:
            raise InvalidArgumentError(
                f"a request carries 1..{MAX_IMAGES_PER_REQUEST} images, got {len(self.images)}")

    def digest(self) -> str:
        h = hashlib.sha256(self.prompt_text.encode("utf-8"))
        for img in self.images:
            h.update(img.media_type.encode())
            h.update(hashlib.sha256(img.data).digest())
        return h.hexdigest()


@dataclass(frozen=True)
class StyleKeywords:
    keywords: str
    raw_response: str = ""

    def __post_init__(self):
        if not self.keywords.strip():
            raise KeywordSchemaError("style keywords are empty")
        if "\n" in self.keywords or "\r" in self.keywords:
            raise KeywordSchemaError("style keywords must be a single line")


@runtime_checkable
class VlmClientInterface(Protocol):
    max_retries: int
    timeout: float

    def send(self, request: VlmRequest) -> str: ...


@dataclass
class MockVlmClient:
    """Offline client: answers with a table entry chosen by hashing the images."""

    keyword_table: Sequence[str] = MOCK_KEYWORD_TABLE
    max_retries: int = 3
    timeout: float = 0.0
    calls: int = field(default=0, compare=False)

    def send(self, request: VlmRequest) -> str:
        self.calls += 1
        h = hashlib.sha256()
        for img in request.images:
            h.update(hashlib.sha256(img.data).digest())
        index = int.from_bytes(h.digest()[:8], "big") % len(self.keyword_table)
        return json.dumps({KEYWORD_KEY: self.keyword_table[index]})


@dataclass
class HttpVlmClient:
    """Chat-completion style endpoint (one text part, N image parts).

    Configured from ``STYLEREG_VLM_ENDPOINT``, ``STYLEREG_VLM_API_KEY`` and
    ``STYLEREG_VLM_MODEL`` unless given explicitly. Holds no mutable state,
    so concurrent ``send`` calls are safe.
    """

    endpoint: str | None = None
    api_key: str | None = None
    model: str | None = None
    max_retries: int = 3
    timeout: float = 60.0

    def __post_init__(self):
        self.endpoint = self.endpoint or os.environ.get("STYLEREG_VLM_ENDPOINT")
        self.api_key = self.api_key or os.environ.get("STYLEREG_VLM_API_KEY")
        self.model = self.model or os.environ.get("STYLEREG_VLM_MODEL", "gpt-4o")
        if not self.endpoint:
            raise InvalidArgumentError("no VLM endpoint configured (set STYLEREG_VLM_ENDPOINT)")

    def build_body(self, request: VlmRequest) -> dict:
        content = [{"type": "text", "text": request.prompt_text}]
        content += [{"type": "image_url", "image_url": {"url": img.data_url()}} for img in request.images]
        return {"model": self.model, "messages": [{"role": "user", "content": content}]}

    def send(self, request: VlmRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=json.dumps(self.build_body(request)).encode(),
                                     headers=headers, method="POST")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        return payload["choices"][0]["message"]["content"]


def _first_json_object(text: str):
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except (ValueError, RecursionError):
            obj = None
        if isinstance(obj, dict):
            return obj
        pos = text.find("{", pos + 1)
    return None


def parse_keywords(response: str | bytes) -> StyleKeywords:
    """Extract and validate the first JSON object in a VLM response."""
    if isinstance(response, (bytes, bytearray)):
        text = bytes(response).decode("utf-8", errors="replace")
    elif isinstance(response, str):
        text = response
    else:
        raise KeywordParseError(f"response must be text, got {type(response).__name__}")
    obj = _first_json_object(text)
    if obj is None:
        # Typographic quotes are a common VLM slip.
        normalized = text.translate({0x201C: '"', 0x201D: '"'})
        obj = _first_json_object(normalized) if normalized != text else None
    if obj is None:
        raise KeywordParseError("no JSON object found in response")
    if list(obj) != [KEYWORD_KEY]:
        raise KeywordSchemaError(f"expected exactly one key {KEYWORD_KEY!r}, got {sorted(obj)!r}")
    value = obj[KEYWORD_KEY]
    if not isinstance(value, str):
        raise KeywordSchemaError(f"{KEYWORD_KEY!r} must be a string")
    return StyleKeywords(value.strip(), raw_response=text)


def _extract_once(images: Sequence[ImagePayload], client: VlmClientInterface) -> StyleKeywords:
    attempts = int(client.max_retries) + 1
    last = None
    for attempt in range(1, attempts + 1):
        request = VlmRequest(build_style_prompt(), tuple(images))
        last = client.send(request)
        try:
            return parse_keywords(last)
        except (KeywordParseError, KeywordSchemaError) as exc:
            logger.info("attempt %d/%d: unusable VLM response (%s)", attempt, attempts, exc)
    raise ExtractionFailedError(f"no valid keywords after {attempts} attempts", last)


def extract_style_keywords(images: Sequence[ImagePayload], client: VlmClientInterface,
                           per_image: bool = False) -> StyleKeywords:
    """Query the VLM for style keywords, retrying on malformed answers.

    By default all images go into one request. With ``per_image`` each image
    is queried alone and the most frequent answer wins (earliest on ties).
    """
    images = list(images)
    if not images:
        raise InvalidArgumentError("at least one style image is required")
    if not per_image:
        return _extract_once(images, client)
    results = [_extract_once([img], client) for img in images]
    counts = Counter(r.keywords for r in results)
    best = max(counts.values())
    winner = next(r for r in results if counts[r.keywords] == best)
    raw = json.dumps([r.raw_response for r in results])
    return StyleKeywords(winner.keywords, raw_response=raw)


class KeywordCache:
    """One JSON file per style category under ``root``."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, category_id: str) -> Path:
        return self.root / f"{category_id}.json"

    def load(self, category_id: str) -> StyleKeywords | None:
        path = self.path(category_id)
        if not path.exists():
            return None
        entry = json.loads(path.read_text(encoding="utf-8"))
        if entry.get("template_hash") != TEMPLATE_HASH or entry.get("category_id") != category_id:
            return None
        return StyleKeywords(entry["keywords"], entry.get("raw_response", ""))

    def save(self, category_id: str, keywords: StyleKeywords) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        entry = {
            "category_id": category_id,
            "keywords": keywords.keywords,
            "raw_response": keywords.raw_response,
            "timestamp": time.time(),
            "template_hash": TEMPLATE_HASH,
        }
        path = self.path(category_id)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(entry, fh, indent=2, ensure_ascii=False)
        os.replace(tmp, path)
        return path


def cached_style_keywords(category_id: str, images: Sequence[ImagePayload], client: VlmClientInterface,
                          cache: KeywordCache, force_refresh: bool = False,
                          per_image: bool = False) -> StyleKeywords:
    if not force_refresh:
        hit = cache.load(category_id)
        if hit is not None:
            return hit
    keywords = extract_style_keywords(images, client, per_image=per_image)
    cache.save(category_id, keywords)
    return keywords
