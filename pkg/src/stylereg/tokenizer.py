"""A small frozen-vocabulary word-piece tokenizer for the toy backbone.

Words are matched greedily (longest piece first) against the vocabulary,
falling back to single characters with ``##`` continuation pieces, so every
lowercase alphanumeric word tokenizes without hitting ``[UNK]``. Tokens added
at runtime (style identifiers) are matched verbatim before word splitting.
"""

from __future__ import annotations

import re
import string
from typing import Iterable

from .errors import ConflictError, InvalidArgumentError

UNK = "[UNK]"

_WORDS = """
a an the of with in on at and or for to by from photo picture image painting drawing
render rendering style styled art artwork illustration sketch of this that is are
car tulip apple house cat dog bird tree flower boat chair cup vase bicycle horse
mountain castle lamp clock guitar teapot shoe fish owl rabbit bridge city street
train plane robot dragon lion fox bear butterfly mushroom
good bad high low quality clear blurry sharp noisy
ink wash water color colour oil pastel pencil charcoal line lines geometric geometry
relief abstract minimal minimalist pattern patterns texture textured stripe stripes
striped checker checkered grid dot dots dotted noise grain grainy flat bold soft
smooth rough mosaic tile tiles pixel pixels low poly cubist cubism impression
impressionist expression expressionist surreal pop retro vintage paper cut craft
wood woodcut print block stencil glass stained metal metallic marble stone
fabric woven weave knit embroidery brush brushstroke stroke strokes gradient
neon glow shadow shade shaded light dark bright muted vivid pale warm cool
ornament ornamental folk tribal ethnic classic classical modern baroque
japanese chinese persian celtic art deco nouveau
red orange yellow green teal blue purple pink white black gray grey brown
"""

_SUFFIXES = ["##s", "##es", "##ed", "##ing", "##ic", "##al", "##ly", "##er", "##ist", "##ism", "##y"]


def _base_vocab() -> list[str]:
    vocab = [UNK]
    seen = set(vocab)

    def add(tok: str):
        if tok not in seen:
            seen.add(tok)
            vocab.append(tok)

    for w in _WORDS.split():
        add(w)
    for ch in string.ascii_lowercase + string.digits:
        add(ch)
    for ch in string.ascii_lowercase + string.digits:
        add("##" + ch)
    for s in _SUFFIXES:
        add(s)
    for p in ".,;:!?'\"-()/&+*[]{}<>=#@%$_~`|\\^":
        add(p)
    return vocab


BASE_VOCAB: tuple[str, ...] = tuple(_base_vocab())

_PRETOKEN = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class WordPieceTokenizer:
    def __init__(self, vocab: Iterable[str] = BASE_VOCAB):
        self.vocab: list[str] = list(vocab)
        self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.token_to_id) != len(self.vocab):
            raise InvalidArgumentError("vocabulary contains duplicate tokens")
        self.unk_id = self.token_to_id[UNK]
        self.added_tokens: list[str] = []
        self._added_re: re.Pattern | None = None

    def __len__(self) -> int:
        return len(self.vocab)

    def pad_to(self, size: int):
        """Reserve ``[unused{i}]`` entries so the vocabulary matches a larger table."""
        if self.added_tokens:
            raise ConflictError("cannot reserve entries after tokens were added")
        while len(self.vocab) < size:
            tok = f"[unused{len(self.vocab)}]"
            self.token_to_id[tok] = len(self.vocab)
            self.vocab.append(tok)

    def add_tokens(self, tokens: Iterable[str]) -> list[int]:
        tokens = list(tokens)
        for tok in tokens:
            if not tok or tok in self.token_to_id:
                raise ConflictError(f"token {tok!r} already present in the vocabulary")
        if len(set(tokens)) != len(tokens):
            raise ConflictError("duplicate tokens in one registration")
        ids = []
        for tok in tokens:
            self.token_to_id[tok] = len(self.vocab)
            ids.append(len(self.vocab))
            self.vocab.append(tok)
            self.added_tokens.append(tok)
        ordered = sorted(self.added_tokens, key=len, reverse=True)
        self._added_re = re.compile("|".join(re.escape(t) for t in ordered))
        return ids

    def _wordpiece(self, word: str) -> list[int]:
        ids, start = [], 0
        while start < len(word):
            end, piece_id = len(word), None
            while end > start:
                piece = word[start:end] if start == 0 else "##" + word[start:end]
                if piece in self.token_to_id:
                    piece_id = self.token_to_id[piece]
                    break
                end -= 1
            if piece_id is None:
                return [self.unk_id]
            ids.append(piece_id)
            start = end
        return ids

    def _encode_plain(self, text: str) -> list[int]:
        ids = []
        for tok in _PRETOKEN.findall(text.lower()):
            if tok in self.token_to_id and not tok.startswith("##"):
                ids.append(self.token_to_id[tok])
            else:
                ids.extend(self._wordpiece(tok))
        return ids

    def encode(self, text: str) -> list[int]:
        if self._added_re is None:
            return self._encode_plain(text)
        ids, pos = [], 0
        for m in self._added_re.finditer(text):
            ids.extend(self._encode_plain(text[pos:m.start()]))
            ids.append(self.token_to_id[m.group(0)])
            pos = m.end()
        ids.extend(self._encode_plain(text[pos:]))
        return ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.vocab[i] for i in ids]

    def state(self) -> dict:
        return {
            "base_size": len(BASE_VOCAB),
            "reserved_size": len(self.vocab) - len(self.added_tokens),
            "added_tokens": list(self.added_tokens),
        }

    @classmethod
    def from_state(cls, state: dict) -> "WordPieceTokenizer":
        tok = cls()
        if state.get("base_size", len(BASE_VOCAB)) != len(BASE_VOCAB):
            raise InvalidArgumentError("checkpoint was written with a different base vocabulary")
        tok.pad_to(state.get("reserved_size", len(BASE_VOCAB)))
        if state.get("added_tokens"):
            tok.add_tokens(state["added_tokens"])
        return tok
