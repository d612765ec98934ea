"""Style-category manifests and the synthetic toy corpus.

Manifest schema (JSON, paths relative to the manifest file)::

    {
      "category_id": "toy00-stripes",
      "reference_image_paths": ["images/ref0.png", "images/ref1.png", "images/ref2.png"],
      "object_names": ["car", "tulip", "apple"],
      "placeholder": "[V*]",            # optional
      "cached_keywords": "ink wash"     # optional
    }
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ManifestDataError, ManifestValidationError, NotFoundError
from .style_reasoning import ImagePayload, StyleKeywords

DEFAULT_PLACEHOLDER = "[V*]"
REFERENCES_PER_CATEGORY = 3

_REQUIRED = ("category_id", "reference_image_paths", "object_names")
_OPTIONAL = ("placeholder", "cached_keywords")

OBJECT_POOL = ("car", "tulip", "apple", "house", "cat", "dog", "bird", "tree", "boat", "chair",
               "cup", "vase", "bicycle", "horse", "castle", "lamp", "clock", "guitar", "teapot", "owl")
PATTERNS = ("stripes", "checker", "noise")


@dataclass
class StyleCategoryManifest:
    category_id: str
    reference_image_paths: list[Path]
    object_names: list[str]
    placeholder: str = DEFAULT_PLACEHOLDER
    cached_keywords: StyleKeywords | None = None
    source_path: Path | None = field(default=None, compare=False)

    def load_images(self) -> list[np.ndarray]:
        return [_read_rgb(p) for p in self.reference_image_paths]

    def image_payloads(self) -> list[ImagePayload]:
        return [ImagePayload.from_path(p) for p in self.reference_image_paths]

    def to_dict(self, relative_to: Path | None = None) -> dict:
        base = relative_to or (self.source_path.parent if self.source_path else None)

        def rel(p: Path) -> str:
            return os.path.relpath(p, base) if base else str(p)

        d = {
            "category_id": self.category_id,
            "reference_image_paths": [rel(p) for p in self.reference_image_paths],
            "object_names": list(self.object_names),
            "placeholder": self.placeholder,
        }
        if self.cached_keywords is not None:
            d["cached_keywords"] = self.cached_keywords.keywords
        return d


def _read_rgb(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except FileNotFoundError:
        raise ManifestDataError(str(path), "file does not exist") from None
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ManifestDataError(str(path), f"cannot decode image ({exc})") from None


def load_manifest(path: str | os.PathLike) -> StyleCategoryManifest:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"manifest {path} not found")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestValidationError("<document>", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ManifestValidationError("<document>", "top level must be an object")
    for key in raw:
        if key not in _REQUIRED + _OPTIONAL:
            raise ManifestValidationError(key, "unknown field")
    for key in _REQUIRED:
        if key not in raw:
            raise ManifestValidationError(key, "missing required field")

    category_id = raw["category_id"]
    if not isinstance(category_id, str) or not category_id.strip():
        raise ManifestValidationError("category_id", "must be a non-empty string")
    if any(c in category_id for c in "/\\") or category_id in (".", ".."):
        raise ManifestValidationError("category_id", "must not contain path separators")

    refs = raw["reference_image_paths"]
    if not isinstance(refs, list) or not refs:
        raise ManifestValidationError("reference_image_paths", "must list at least one image")
    if not all(isinstance(r, str) and r for r in refs):
        raise ManifestValidationError("reference_image_paths", "entries must be non-empty strings")

    objects = raw["object_names"]
    if not isinstance(objects, list) or not objects:
        raise ManifestValidationError("object_names", "must list at least one object")
    if not all(isinstance(o, str) and o.strip() for o in objects):
        raise ManifestValidationError("object_names", "entries must be non-empty strings")
    if len(set(objects)) != len(objects):
        raise ManifestValidationError("object_names", "entries must be unique")

    placeholder = raw.get("placeholder", DEFAULT_PLACEHOLDER)
    if not isinstance(placeholder, str) or not placeholder.strip():
        raise ManifestValidationError("placeholder", "must be a non-empty string")

    cached = raw.get("cached_keywords")
    if cached is not None:
        if not isinstance(cached, str):
            raise ManifestValidationError("cached_keywords", "must be a string")
        try:
            cached = StyleKeywords(cached.strip(), raw_response="")
        except ValueError as exc:
            raise ManifestValidationError("cached_keywords", str(exc)) from None

    ref_paths = [(path.parent / r).resolve() for r in refs]
    for p in ref_paths:
        _read_rgb(p)

    return StyleCategoryManifest(category_id, ref_paths, list(objects), placeholder, cached,
                                 source_path=path.resolve())


def save_manifest(manifest: StyleCategoryManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_dict(relative_to=path.parent.resolve()), indent=2) + "\n",
                    encoding="utf-8")
    manifest.source_path = path.resolve()
    return path


HUE_NAMES = ("red", "orange", "yellow", "green", "teal", "blue", "purple", "pink")
PATTERN_WORDS = {"stripes": "striped", "checker": "checkered", "noise": "grainy"}


def analogous_palette(rng: np.random.Generator, k: int = 3) -> np.ndarray:
    """``k`` colours around one base hue with spread-out brightness.

    Keeping the hue tight makes a style's colour identity dominate its
    pixel statistics, so different categories separate cleanly.
    """
    base = rng.uniform(0, 1)
    values = np.sort(rng.uniform(0.3, 1.0, k))
    rgb = []
    for v in values:
        h = (base + rng.uniform(-0.04, 0.04)) % 1.0
        rgb.append(colorsys.hsv_to_rgb(h, rng.uniform(0.5, 1.0), v))
    return np.round(np.array(rgb) * 255).astype(np.uint8)


def colour_words(rgb: np.ndarray) -> str:
    h, _, v = colorsys.rgb_to_hsv(*(np.asarray(rgb, dtype=np.float64) / 255.0))
    tone = "dark" if v < 0.55 else "muted" if v < 0.8 else "bright"
    return f"{tone} {HUE_NAMES[int(h * len(HUE_NAMES) + 0.5) % len(HUE_NAMES)]}"


def pattern_caption(kind: str, palette: np.ndarray) -> str:
    """Fixed-length caption, e.g. ``a striped pattern with dark blue muted blue bright teal``."""
    return f"a {PATTERN_WORDS[kind]} pattern with " + " ".join(colour_words(c) for c in palette)


def pattern_image(kind: str, palette: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "stripes":
        period = int(rng.integers(6, 14))
        angle = rng.uniform(0, np.pi)
        coord = xx * np.cos(angle) + yy * np.sin(angle) + rng.uniform(0, period)
        idx = (coord // (period / len(palette))).astype(int) % len(palette)
    elif kind == "checker":
        cell = int(rng.integers(6, 12))
        ox, oy = rng.integers(0, cell, 2)
        idx = (((xx + ox) // cell) + ((yy + oy) // cell)).astype(int) % 2
        idx = np.where(((xx + ox) // cell) % 3 == 0, 2, idx)
    elif kind == "noise":
        coarse = rng.uniform(0, 1, (size // 8 + 1, size // 8 + 1))
        field = np.kron(coarse, np.ones((8, 8)))[:size, :size]
        field = field + 0.25 * rng.uniform(0, 1, (size, size))
        idx = np.clip((field / 1.25 * len(palette)).astype(int), 0, len(palette) - 1)
    else:
        raise ValueError(f"unknown pattern {kind!r}")
    return palette[idx]


def make_toy_corpus(output_dir: str | os.PathLike, num_categories: int, seed: int,
                    image_size: int = 64, objects_per_category: int = 3) -> list[StyleCategoryManifest]:
    """Write procedural style categories (3 reference images each) plus manifests."""
    if num_categories < 1:
        raise ValueError("num_categories must be >= 1")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifests = []
    for k in range(num_categories):
        rng = np.random.default_rng([seed, k])
        kind = PATTERNS[k % len(PATTERNS)]
        palette = analogous_palette(rng)
        category_id = f"toy{k:02d}-{kind}"
        cat_dir = out / category_id
        img_dir = cat_dir / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for j in range(REFERENCES_PER_CATEGORY):
            img = pattern_image(kind, palette, image_size, rng)
            p = img_dir / f"ref{j}.png"
            Image.fromarray(img, "RGB").save(p, format="PNG")
            paths.append(p.resolve())
        chosen = rng.choice(len(OBJECT_POOL), size=objects_per_category, replace=False)
        objects = [OBJECT_POOL[i] for i in sorted(chosen)]
        manifest = StyleCategoryManifest(category_id, paths, objects)
        save_manifest(manifest, cat_dir / "manifest.json")
        manifests.append(manifest)
    return manifests
