"""Token normalisation and the word/id vocabulary."""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_NON_ALPHA = re.compile(r"[^A-Za-z\s]")


def normalize_tokens(raw: str) -> list[str]:
    """Drop every non-alphabetic character, lowercase, split on whitespace."""
    return _NON_ALPHA.sub("", raw).lower().split()


class Vocabulary:
    """Word <-> id map with PAD/BOS/EOS/UNK at ids 0..3."""

    def __init__(self, words: Iterable[str] = (), min_count: int = 3):
        self.min_count = min_count
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def encode_word(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    def decode_id(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.encode_word(w) for w in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        """Ids to words; with ``strip`` the specials BOS/PAD are dropped and EOS ends the sentence."""
        out = []
        for i in ids:
            i = int(i)
            if strip:
                if i == EOS:
                    break
                if i in (PAD, BOS):
                    continue
            out.append(self.itos[i])
        return out

    def to_dict(self) -> dict:
        return {"min_count": self.min_count, "words": self.itos[len(SPECIALS):]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"], min_count=d.get("min_count", 3))


def build_vocab(sentences: Iterable[Iterable[str]], min_count: int = 3) -> Vocabulary:
    """Words seen at least ``min_count`` times, most frequent first (ties alphabetical)."""
    counts = Counter(w for s in sentences for w in s)
    kept = sorted((w for w, n in counts.items() if n >= min_count and w not in SPECIALS),
                  key=lambda w: (-counts[w], w))
    return Vocabulary(kept, min_count=min_count)
