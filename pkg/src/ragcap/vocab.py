"""Word-level vocabularies for object names and decoder tokens."""
from __future__ import annotations

from typing import Iterable, Sequence

UNK = "[UNK]"
SEP = "[SEP]"
EOS = "[EOS]"


class Vocab:
    """Whitespace word vocabulary with an UNK fallback."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if UNK not in tokens:
            raise ValueError("vocabulary must contain [UNK]")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}
        self.unk_id = self._ids[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.id(w) for w in text.split()]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def for_names(cls, names: Iterable[str]) -> "Vocab":
        """Name vocabulary: [UNK], [SEP], then the sorted distinct name words."""
        words = sorted({w for n in names for w in normalize(n).split()})
        return cls([UNK, SEP] + [w for w in words if w not in (UNK, SEP)])

    @classmethod
    def for_decoder(cls, fixed: Sequence[str], texts: Iterable[str]) -> "Vocab":
        """Decoder vocabulary: [EOS], [UNK], the fixed prompt words, then caption words."""
        head = [EOS, UNK]
        for w in fixed:
            if w not in head:
                head.append(w)
        seen = set(head)
        words = sorted({w for t in texts for w in normalize(t).split()} - seen)
        return cls(head + words)


def normalize(text: str) -> str:
    return " ".join(text.lower().split())
