"""Command-line entry point: ``stylereg <subcommand> ...``.

Run layout under ``--run-root`` (default ``runs``)::

    {run_root}/{run_id}/config.json               resolved training config
    {run_root}/{run_id}/run.json                  artefact index
    {run_root}/{run_id}/{category_id}/stage1.ckpt
    {run_root}/{run_id}/{category_id}/stage2.ckpt
    {run_root}/{run_id}/{category_id}/records.log
    {cache_dir}/keywords, content_refs, pretrained

``cache_dir`` is ``--cache-dir``, else ``$STYLEREG_CACHE_DIR``, else
``{run_root}/cache``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import re
import sys
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from PIL import Image

from .checkpoint import load_checkpoint, read_header
from .data import load_manifest
from .errors import InvalidArgumentError, StyleRegError
from .evaluation import CategoryEvaluation, evaluate, generate_images, sampling_settings
from .metrics import MetricReport, make_embedder, render_comparison, render_report
from .pretrain import CACHE_ENV
from .style_reasoning import HttpVlmClient, KeywordCache, MockVlmClient, cached_style_keywords
from .trainer import TrainingConfig, run_full_pipeline

logger = logging.getLogger("stylereg")

# flag -> TrainingConfig field
CONFIG_FLAGS = {
    "seed": int, "lambda1": float, "lambda2": float, "stage1_steps": int, "stage1_lr": float,
    "stage2_steps": int, "stage2_lr": float, "image_size": int,
}


@dataclass
class RunArtifacts:
    run_id: str
    run_root: Path
    checkpoint_paths: dict[str, str] = field(default_factory=dict)
    generated_image_dir: str | None = None
    report_path: str | None = None
    log_paths: dict[str, str] = field(default_factory=dict)

    def save(self) -> Path:
        path = self.run_root / self.run_id / "run.json"
        data = dataclasses.asdict(self)
        data["run_root"] = str(self.run_root)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _common_flags() -> argparse.ArgumentParser:
    # SUPPRESS defaults let the flags appear before or after the subcommand.
    p = argparse.ArgumentParser(add_help=False)
    s = argparse.SUPPRESS
    for name, kind in CONFIG_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=s)
    p.add_argument("--mock-vlm", action="store_true", default=s, help="use the offline VLM client")
    p.add_argument("--run-root", default=s, help="directory holding all runs (default: runs)")
    p.add_argument("--cache-dir", default=s, help="shared cache directory")
    p.add_argument("-v", "--verbose", action="store_true", default=s)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="stylereg", parents=[common],
                                     description="Style identifier training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-keywords", parents=[common], help="query the VLM for style keywords")
    p.add_argument("manifest")
    p.add_argument("--per-image", action="store_true", help="one request per image, majority vote")
    p.add_argument("--force", action="store_true", help="ignore the keyword cache")

    p = sub.add_parser("train", parents=[common], help="run the two-stage pipeline per manifest")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--config", help="JSON file with TrainingConfig fields")
    p.add_argument("--run-id")

    p = sub.add_parser("generate", parents=[common], help="sample images from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--prompt", required=True)
    p.add_argument("--num-images", type=int, default=1)
    p.add_argument("--output", help="output directory (default: <checkpoint dir>/generated)")

    p = sub.add_parser("evaluate", parents=[common], help="score checkpoints against their manifests")
    p.add_argument("pairs", nargs="+", metavar="CHECKPOINT MANIFEST")
    p.add_argument("--embedder", choices=("mock", "real"), default="mock")
    p.add_argument("--samples-per-object", type=int, default=1)
    p.add_argument("--output", help="output directory (default: next to the checkpoints)")

    p = sub.add_parser("report", parents=[common], help="compare saved metric reports")
    p.add_argument("results", nargs="+")
    p.add_argument("--labels", nargs="+")
    return parser


def _cache_dir(args) -> Path:
    explicit = getattr(args, "cache_dir", None) or os.environ.get(CACHE_ENV)
    return Path(explicit) if explicit else _run_root(args) / "cache"


def _run_root(args) -> Path:
    return Path(getattr(args, "run_root", "runs"))


def _vlm(args):
    return MockVlmClient() if getattr(args, "mock_vlm", False) else HttpVlmClient()


def resolve_config(args) -> TrainingConfig:
    """Defaults, then the config file, then command-line flags."""
    config = TrainingConfig.from_file(args.config) if getattr(args, "config", None) else TrainingConfig()
    return config.with_overrides(**{k: getattr(args, k, None) for k in CONFIG_FLAGS})


def _new_run_id() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S") + "-" + uuid.uuid4().hex[:6]


def cmd_extract_keywords(args) -> int:
    manifest = load_manifest(args.manifest)
    cache = KeywordCache(_cache_dir(args) / "keywords")
    keywords = cached_style_keywords(manifest.category_id, manifest.image_payloads(), _vlm(args), cache,
                                     force_refresh=args.force, per_image=args.per_image)
    print(f"{manifest.category_id}\t{keywords.keywords}")
    return 0


def cmd_train(args) -> int:
    config = resolve_config(args)
    manifests = [load_manifest(m) for m in args.manifests]
    ids = [m.category_id for m in manifests]
    if len(set(ids)) != len(ids):
        raise InvalidArgumentError(f"duplicate category ids among manifests: {ids}")
    run_id = args.run_id or _new_run_id()
    if not re.fullmatch(r"[A-Za-z0-9._-]+", run_id):
        raise InvalidArgumentError(f"run id {run_id!r} may only contain letters, digits, '.', '_' and '-'")
    root = _run_root(args)
    run_dir = root / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    cache = _cache_dir(args)
    vlm = _vlm(args)
    artifacts = RunArtifacts(run_id, root)
    for manifest in manifests:
        result = run_full_pipeline(manifest, config, vlm, run_dir / manifest.category_id,
                                   content_cache_dir=cache / "content_refs",
                                   keyword_cache_dir=cache / "keywords",
                                   pretrain_cache_dir=cache)
        artifacts.checkpoint_paths[manifest.category_id] = str(result.final_checkpoint)
        artifacts.log_paths[manifest.category_id] = str(result.run_dir / "records.log")
        last = result.records[-1]
        print(f"{manifest.category_id}\t{result.final_checkpoint}\tkeywords={result.keywords.keywords!r}"
              f"\tfinal_l_total={last.l_total:.6g}")
        artifacts.save()
    return 0


def cmd_generate(args) -> int:
    if args.num_images < 1:
        raise InvalidArgumentError("--num-images must be >= 1")
    ckpt = Path(args.checkpoint)
    backbone, header = load_checkpoint(ckpt)
    size, steps, cfg_seed = sampling_settings(header, getattr(args, "image_size", None))
    seed = getattr(args, "seed", cfg_seed)
    seeds = [seed + i for i in range(args.num_images)]
    out = Path(args.output) if args.output else ckpt.parent / "generated"
    out.mkdir(parents=True, exist_ok=True)
    stem = re.sub(r"[^A-Za-z0-9]+", "_", args.prompt).strip("_")[:60] or "prompt"
    for s, img in zip(seeds, generate_images(backbone, args.prompt, seeds, size, steps)):
        path = out / f"{stem}-{s}.png"
        Image.fromarray(img, "RGB").save(path, format="PNG")
        print(path)
    return 0


def cmd_evaluate(args) -> int:
    if len(args.pairs) % 2:
        raise InvalidArgumentError("evaluate expects CHECKPOINT MANIFEST pairs")
    runs = []
    for ckpt, man in zip(args.pairs[::2], args.pairs[1::2]):
        read_header(ckpt)
        manifest = load_manifest(man)
        runs.append(CategoryEvaluation(manifest.category_id, Path(ckpt), manifest))
    if len({r.category_id for r in runs}) != len(runs):
        raise InvalidArgumentError("each category may be evaluated once per report")
    if args.output:
        out = Path(args.output)
    else:
        out = Path(os.path.commonpath([str(r.checkpoint.resolve().parent) for r in runs])) / "evaluation"
    run_id = out.resolve().parent.name
    report = evaluate(runs, make_embedder(args.embedder), out, image_size=getattr(args, "image_size", None),
                      seed=getattr(args, "seed", None), samples_per_object=args.samples_per_object,
                      run_id=run_id)
    print(render_report(report))
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_report(args) -> int:
    reports = [MetricReport.load(p) for p in args.results]
    labels = args.labels or [r.metadata.get("run_id") or Path(p).stem for r, p in zip(reports, args.results)]
    if len(labels) != len(reports):
        raise InvalidArgumentError("--labels must name every result file")
    if len(set(labels)) != len(labels):
        labels = [f"{label}#{i}" for i, label in enumerate(labels)]
    if len(reports) == 1:
        print(render_report(reports[0]))
    else:
        print(render_comparison(dict(zip(labels, reports))))
    return 0


COMMANDS = {
    "extract-keywords": cmd_extract_keywords,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (StyleRegError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
