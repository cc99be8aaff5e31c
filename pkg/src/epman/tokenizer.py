"""Lower-cased word-level tokenizer over a closed vocabulary."""

from __future__ import annotations

import re
from typing import Iterable, Sequence

SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", "<q>", "<a>")
PAD, UNK, BOS, EOS, QUERY, ANSWER = range(len(SPECIAL_TOKENS))

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")
_NO_SPACE_BEFORE = {".", ",", "!", "?", ";", ":", "'"}


def words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    return [s for s in (p.strip() for p in _SENTENCE_RE.split(text.strip())) if s]


class Tokenizer:
    """Maps words to ids. Unknown words map to ``<unk>``.

    The vocabulary is the special tokens followed by ``vocab`` in the given
    order, so two tokenizers built from the same word list agree exactly.
    """

    def __init__(self, vocab: Iterable[str]):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        for w in vocab:
            if w not in SPECIAL_TOKENS:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary contains duplicates")

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        seen: dict[str, None] = {}
        for t in texts:
            for w in words(t):
                seen.setdefault(w, None)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    @property
    def eos_id(self) -> int:
        return EOS

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, UNK) for w in words(text)]

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        out: list[str] = []
        for i in ids:
            w = self.itos[int(i)]
            if skip_special and w in SPECIAL_TOKENS:
                continue
            if out and w in _NO_SPACE_BEFORE:
                out[-1] += w
            else:
                out.append(w)
        return " ".join(out)

    def unknown_words(self, text: str) -> list[str]:
        return [w for w in words(text) if w not in self.stoi]
