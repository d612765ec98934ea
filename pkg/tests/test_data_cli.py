import json

import numpy as np
import pytest
from PIL import Image

from stylereg.cli import build_parser, main, resolve_config
from stylereg.data import load_manifest, make_toy_corpus, pattern_caption, save_manifest
from stylereg.errors import ManifestDataError, ManifestValidationError, NotFoundError
from stylereg.metrics import pixel_hist_score


def _write(path, data):
    path.write_text(json.dumps(data))
    return path


def test_corpus_deterministic_and_shaped(tmp_path):
    a = make_toy_corpus(tmp_path / "a", 2, 7)
    b = make_toy_corpus(tmp_path / "b", 2, 7)
    for ma, mb in zip(a, b):
        assert len(ma.reference_image_paths) == 3
        for pa, pb in zip(ma.reference_image_paths, mb.reference_image_paths):
            assert pa.read_bytes() == pb.read_bytes()
        assert ma.object_names == mb.object_names


def test_corpus_28_categories_separable(tmp_path):
    ms = make_toy_corpus(tmp_path, 28, 0, image_size=24)
    assert len({m.category_id for m in ms}) == 28
    imgs = [m.load_images() for m in ms[:6]]
    within = np.mean([pixel_hist_score(i[0], i[1:]) for i in imgs])
    across = np.mean([pixel_hist_score(imgs[k][0], imgs[(k + 1) % 6][1:]) for k in range(6)])
    assert within > across + 0.2


def test_caption_fixed_length():
    rng = np.random.default_rng(0)
    from stylereg.data import analogous_palette

    lengths = {len(pattern_caption(k, analogous_palette(rng)).split()) for k in ("stripes", "noise") * 20}
    assert lengths == {10}


def test_manifest_round_trip(tmp_path):
    m = make_toy_corpus(tmp_path, 1, 1)[0]
    again = load_manifest(m.source_path)
    assert again == m
    save_manifest(again, tmp_path / "copy" / "manifest.json")
    assert load_manifest(tmp_path / "copy" / "manifest.json").reference_image_paths == m.reference_image_paths


def test_manifest_errors(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "ok.png")
    (tmp_path / "bad.png").write_bytes(b"not an image")
    base = {"category_id": "c", "reference_image_paths": ["ok.png"], "object_names": ["car"]}
    with pytest.raises(NotFoundError):
        load_manifest(tmp_path / "missing.json")
    with pytest.raises(ManifestValidationError) as info:
        load_manifest(_write(tmp_path / "m1.json", {**base, "reference_image_paths": []}))
    assert info.value.field == "reference_image_paths"
    with pytest.raises(ManifestValidationError) as info:
        load_manifest(_write(tmp_path / "m2.json", {**base, "colour": 1}))
    assert info.value.field == "colour"
    with pytest.raises(ManifestValidationError) as info:
        load_manifest(_write(tmp_path / "m3.json", {**base, "object_names": ["a", "a"]}))
    assert info.value.field == "object_names"
    with pytest.raises(ManifestDataError) as info:
        load_manifest(_write(tmp_path / "m4.json", {**base, "reference_image_paths": ["gone.png"]}))
    assert info.value.path.endswith("gone.png")
    with pytest.raises(ManifestDataError):
        load_manifest(_write(tmp_path / "m5.json", {**base, "reference_image_paths": ["bad.png"]}))
    m = load_manifest(_write(tmp_path / "m6.json", {**base, "cached_keywords": "ink wash"}))
    assert m.cached_keywords.keywords == "ink wash"


def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["train", "m.json", "--no-such-flag"])
    assert info.value.code == 2


def test_cli_typed_error_exit(tmp_path, capsys):
    assert main(["extract-keywords", str(tmp_path / "missing.json"), "--mock-vlm"]) == 1
    assert "NotFoundError" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg = _write(tmp_path / "c.json", {"stage1_steps": 11, "stage2_steps": 12, "lambda2": 0.5})
    args = build_parser().parse_args(["--lambda2", "0.25", "train", "m.json", "--config", str(cfg),
                                      "--stage2-steps", "3"])
    resolved = resolve_config(args)
    assert (resolved.stage1_steps, resolved.stage2_steps, resolved.lambda2) == (11, 3, 0.25)
    assert resolve_config(build_parser().parse_args(["train", "m.json"])).stage1_steps == 500


def test_extract_keywords_uses_cache(tmp_path, monkeypatch, capsys):
    from stylereg import cli

    m = make_toy_corpus(tmp_path / "corpus", 1, 3)[0]
    calls = []

    class Counting(cli.MockVlmClient):
        def send(self, request):
            calls.append(1)
            return super().send(request)

    monkeypatch.setattr(cli, "MockVlmClient", Counting)
    argv = ["extract-keywords", str(m.source_path), "--mock-vlm", "--cache-dir", str(tmp_path / "cache")]
    assert main(argv) == 0
    first = capsys.readouterr().out
    assert main(argv) == 0
    assert capsys.readouterr().out == first
    assert len(calls) == 1


def test_report_command(tmp_path, capsys):
    from stylereg.metrics import build_report

    paths = []
    for name, v in (("a", 0.4), ("b", 0.6)):
        r = build_report({"c": {"pixel_hist": v, "clip_r_precision": 1 - v, "clip_iqa": v}}, run_id=name)
        paths.append(str(r.save(tmp_path / f"{name}.json")))
    assert main(["report", *paths]) == 0
    out = capsys.readouterr().out
    assert "0.6000*" in out and "0.4000+" in out
