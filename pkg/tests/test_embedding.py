import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stylereg import embedding as emb
from stylereg.errors import (
    AmbiguousPlaceholderError,
    ConflictError,
    InvalidArgumentError,
    MissingPlaceholderError,
    NotFoundError,
)
from stylereg.style_reasoning import StyleKeywords

from conftest import snapshot


def _register(bb, keywords="geometric reliefs", placeholder="[V*]"):
    rec = emb.compute_keyword_embeddings(bb, StyleKeywords(keywords))
    span = emb.allocate_span(bb, placeholder, rec.n)
    emb.register_and_initialize(bb, span, rec)
    return span, rec


def test_keyword_record_shapes(backbone):
    rec = emb.compute_keyword_embeddings(backbone, "ink wash")
    assert rec.keyword_embeddings.shape == (2, backbone.config.embed_dim)
    single = emb.compute_keyword_embeddings(backbone, "ink")
    ink = backbone.tokenizer.encode("ink")
    assert torch.equal(single.keyword_embeddings[0], backbone.embedding_weight()[ink[0]])


def test_geometric_reliefs_token_count(backbone):
    # fixture tokenizer: "geometric" + "relief" + "##s"
    assert backbone.tokenizer.encode("geometric reliefs") == [89, 91, 250]
    assert emb.compute_keyword_embeddings(backbone, "geometric reliefs").n == 3


def test_keywords_without_known_tokens(backbone):
    with pytest.raises(InvalidArgumentError):
        emb.compute_keyword_embeddings(backbone, "ééé")


def test_long_keywords_truncated(backbone, caplog):
    rec = emb.compute_keyword_embeddings(backbone, "ink wash oil pastel pencil charcoal line geometric relief")
    assert rec.n == emb.MAX_IDENTIFIER_TOKENS
    assert "truncating" in caplog.text


def test_register_grows_vocab_and_keeps_rows(backbone):
    before = backbone.embedding_weight().detach().clone()
    vocab = backbone.vocab_size
    rec = emb.compute_keyword_embeddings(backbone, "ink wash")
    span = emb.allocate_span(backbone, "[V*]", 2)
    emb.register_and_initialize(backbone, span, rec)
    assert backbone.vocab_size == vocab + 2
    assert span.token_ids == (vocab, vocab + 1) and span.token_names == ("V1*", "V2*")
    assert torch.equal(backbone.embedding_weight()[:vocab], before)
    ids = backbone.tokenizer.encode("V1*")
    assert torch.equal(backbone.lookup(ids)[0], rec.keyword_embeddings[0])


def test_register_errors(backbone):
    span, rec = _register(backbone)
    with pytest.raises(ConflictError):
        emb.register_and_initialize(backbone, span, rec)
    with pytest.raises(ConflictError):
        emb.allocate_span(backbone, "[V*]", 1)
    other = emb.allocate_span(backbone, "[W*]", 2)
    with pytest.raises(InvalidArgumentError):
        emb.register_and_initialize(backbone, other, rec)
    with pytest.raises(InvalidArgumentError):
        emb.allocate_span(backbone, "[W*]", 0)


def test_alias_property_at_embedding_stage(backbone):
    span, _ = _register(backbone)
    a = backbone.lookup(emb.expand_identifier("an owl [V*] style", "[V*]", span, backbone.tokenizer))
    b = backbone.lookup(backbone.tokenizer.encode("an owl geometric reliefs style"))
    assert torch.equal(a, b)


def test_expand_identifier_lengths(backbone):
    span3, _ = _register(backbone)
    rec1 = emb.compute_keyword_embeddings(backbone, "ink")
    span1 = emb.allocate_span(backbone, "[S*]", 1)
    emb.register_and_initialize(backbone, span1, rec1)
    tok = backbone.tokenizer
    one = emb.expand_identifier("an apple with [S*] style", "[S*]", span1, tok)
    three = emb.expand_identifier("an apple with [V*] style", "[V*]", span3, tok)
    assert len(three) == len(one) + 2
    assert one[3] == span1.token_ids[0]
    with pytest.raises(MissingPlaceholderError):
        emb.expand_identifier("an apple", "[V*]", span3, tok)
    with pytest.raises(AmbiguousPlaceholderError):
        emb.expand_identifier("[V*] and [V*]", "[V*]", span3, tok)


@pytest.fixture(scope="module")
def registered():
    from stylereg.toy_ldm import build_toy_backbone

    bb = build_toy_backbone()
    _register(bb)
    return bb


WORDS = st.lists(st.sampled_from(["an", "owl", "with", "style", "red", "of", "ink"]), max_size=6)


@given(WORDS, WORDS)
@settings(max_examples=50, deadline=None)
def test_expansion_preserves_content(registered, before, after):
    span = emb.registered_span(registered)
    prompt = " ".join(before + ["[V*]"] + after)
    ids = emb.expand_identifier(prompt, "[V*]", span, registered.tokenizer)
    stripped = [i for i in ids if i not in set(span.token_ids)]
    assert stripped == registered.tokenizer.encode(prompt.replace("[V*]", ""))


def test_freeze_mask_counts(backbone):
    rec = emb.compute_keyword_embeddings(backbone, "ink wash")
    span = emb.allocate_span(backbone, "[V*]", 2)
    emb.register_and_initialize(backbone, span, rec)
    mask = emb.stage1_freeze_mask(backbone, span)
    assert mask.trainable_count(backbone) == 2 * backbone.config.embed_dim
    with pytest.raises(InvalidArgumentError):
        emb.stage1_freeze_mask(backbone, emb.StyleIdentifierSpan("[V*]", (), ()))
    with pytest.raises(NotFoundError):
        emb.stage1_freeze_mask(backbone, emb.StyleIdentifierSpan("[Q*]", ("Q1*",), (999,)))


def test_masked_optimizer_step_keeps_non_span_rows(backbone):
    from stylereg.trainer import _RowGuard

    span, _ = _register(backbone)
    mask = emb.stage1_freeze_mask(backbone, span)
    before = snapshot(backbone)
    params = mask.apply(backbone)
    guard = _RowGuard(backbone, mask)
    opt = torch.optim.Adam(params, lr=1e-2)
    ids = emb.tokenize_prompt(backbone, "an owl with [V*] style")
    backbone.encode_text(ids).vectors.pow(2).sum().backward()
    guard.mask_grad()
    opt.step()
    guard.restore()
    after = snapshot(backbone)
    rows = mask.row_mask(backbone.vocab_size)
    key = "text_encoder.token_embedding.weight"
    assert torch.equal(after[key][~rows], before[key][~rows])
    assert not torch.equal(after[key][rows], before[key][rows])
    assert all(torch.equal(after[k], before[k]) for k in before if k != key)


def test_stage2_mask_groups(backbone):
    span, _ = _register(backbone)
    mask = emb.stage2_freeze_mask(backbone, span)
    assert mask.trainable_groups == {"text_attention", "denoiser_attention"}
    assert mask.trainable_rows == set(span.token_ids)
    assert emb.stage2_freeze_mask(backbone, span, train_span_rows=False).trainable_rows == frozenset()
