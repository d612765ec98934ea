import json
import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stylereg.errors import (
    ExtractionFailedError,
    InvalidArgumentError,
    KeywordParseError,
    KeywordSchemaError,
    StyleRegError,
)
from stylereg.style_reasoning import (
    TEMPLATE_HASH,
    HttpVlmClient,
    ImagePayload,
    KeywordCache,
    MockVlmClient,
    VlmRequest,
    build_style_prompt,
    cached_style_keywords,
    extract_style_keywords,
    parse_keywords,
)

from conftest import ScriptedVlm, valid_response

IMAGES = [ImagePayload(bytes([i]) * 10) for i in range(3)]


def test_template_shape():
    p = build_style_prompt()
    assert p.startswith("Analyze the provided images,")
    assert "style keywords" in p
    assert p == build_style_prompt()


def test_parse_reference_example():
    assert parse_keywords('{"style keywords": "geometric reliefs"}').keywords == "geometric reliefs"


def test_parse_fenced_and_prose():
    assert parse_keywords('```json\n{"style keywords": "ink wash"}\n```').keywords == "ink wash"
    text = 'Sure! Here you go: {"style keywords": "woodcut print"} Hope it helps.'
    assert parse_keywords(text).keywords == "woodcut print"
    assert parse_keywords(b'{"style keywords": "ink wash"}').keywords == "ink wash"


def test_parse_typographic_quotes():
    assert parse_keywords("{“style keywords”: “paper cut”}").keywords == "paper cut"


@pytest.mark.parametrize("bad, err", [
    ('{"styles": "x"}', KeywordSchemaError),
    ('{"style keywords": "a", "extra": 1}', KeywordSchemaError),
    ('{"style keywords": "   "}', KeywordSchemaError),
    ('{"style keywords": 3}', KeywordSchemaError),
    ('{"style keywords": "a\\nb"}', KeywordSchemaError),
    ("no json here", KeywordParseError),
    ("", KeywordParseError),
])
def test_parse_errors(bad, err):
    with pytest.raises(err):
        parse_keywords(bad)


def test_parse_rejects_non_text():
    with pytest.raises(KeywordParseError):
        parse_keywords(None)


@given(st.text(alphabet=string.ascii_letters + string.digits + " -,.", min_size=1).filter(
    lambda s: s.strip() == s and s.strip()))
def test_round_trip(s):
    assert parse_keywords(json.dumps({"style keywords": s})).keywords == s


@given(st.binary(max_size=200))
@settings(max_examples=300)
def test_fuzz_bytes_typed_errors_only(data):
    try:
        parse_keywords(data)
    except StyleRegError:
        pass


def test_deeply_nested_input_is_handled():
    with pytest.raises(StyleRegError):
        parse_keywords("{" * 100_000)


def test_retry_recovers_after_garbage():
    vlm = ScriptedVlm(["garbage", "{not json", valid_response("ink wash")])
    assert extract_style_keywords(IMAGES, vlm).keywords == "ink wash"
    assert vlm.calls == 3
    assert len(vlm.requests[0].images) == 3


def test_retry_budget_and_last_response():
    vlm = ScriptedVlm(["nope"], max_retries=2)
    with pytest.raises(ExtractionFailedError) as info:
        extract_style_keywords(IMAGES, vlm)
    assert vlm.calls == 3
    assert info.value.last_response == "nope"


def test_empty_image_list():
    with pytest.raises(InvalidArgumentError):
        extract_style_keywords([], MockVlmClient())


def test_request_image_bounds():
    with pytest.raises(InvalidArgumentError):
        VlmRequest("x", ())
    with pytest.raises(InvalidArgumentError):
        VlmRequest("x", tuple(IMAGES[:1] * 17))


def test_per_image_majority_vote():
    vlm = ScriptedVlm([valid_response("a"), valid_response("b"), valid_response("b")])
    assert extract_style_keywords(IMAGES, vlm, per_image=True).keywords == "b"
    assert [len(r.images) for r in vlm.requests] == [1, 1, 1]


def test_mock_client_deterministic():
    a = extract_style_keywords(IMAGES, MockVlmClient())
    b = extract_style_keywords(IMAGES, MockVlmClient())
    assert a == b


def test_keyword_cache(tmp_path):
    cache = KeywordCache(tmp_path)
    vlm = MockVlmClient()
    first = cached_style_keywords("cat1", IMAGES, vlm, cache)
    second = cached_style_keywords("cat1", IMAGES, vlm, cache)
    assert first.keywords == second.keywords and vlm.calls == 1
    entry = json.loads(cache.path("cat1").read_text())
    assert set(entry) == {"category_id", "keywords", "raw_response", "timestamp", "template_hash"}
    assert entry["template_hash"] == TEMPLATE_HASH
    cached_style_keywords("cat1", IMAGES, vlm, cache, force_refresh=True)
    assert vlm.calls == 2


def test_http_client_body_and_config(monkeypatch):
    monkeypatch.delenv("STYLEREG_VLM_ENDPOINT", raising=False)
    with pytest.raises(InvalidArgumentError):
        HttpVlmClient()
    monkeypatch.setenv("STYLEREG_VLM_ENDPOINT", "http://localhost:1/v1/chat/completions")
    client = HttpVlmClient(model="m")
    body = client.build_body(VlmRequest(build_style_prompt(), tuple(IMAGES)))
    content = body["messages"][0]["content"]
    assert content[0] == {"type": "text", "text": build_style_prompt()}
    assert [c["type"] for c in content[1:]] == ["image_url"] * 3
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
