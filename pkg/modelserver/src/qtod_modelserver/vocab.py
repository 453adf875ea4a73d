"""Word-level vocabulary for the seq2seq model.

The serving stack cannot assume a downloadable subword tokenizer, so the
model speaks a whitespace word vocabulary built from its training data.
Ids 0-4 are pinned: pad, eos, unk, then the two relevance label tokens,
so a relevance head can address its labels without a lookup table.
"""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD_TOKEN = "<pad>"
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"
MATCHED = "MATCHED"
MISMATCHED = "MISMATCHED"

RESERVED = (PAD_TOKEN, EOS_TOKEN, UNK_TOKEN, MATCHED, MISMATCHED)

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
MATCHED_ID = 3
MISMATCHED_ID = 4


def words_of(text: str) -> list[str]:
    return text.split()


class Vocabulary:
    def __init__(self, words: Sequence[str]):
        if tuple(words[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        self._words = list(words)
        self._ids = {w: i for i, w in enumerate(self._words)}
        if len(self._ids) != len(self._words):
            raise ValueError("duplicate words in vocabulary")

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts = Counter(w for t in texts for w in words_of(t))
        tail = sorted(
            w for w, c in counts.items() if c >= min_count and w not in RESERVED
        )
        return cls(list(RESERVED) + tail)

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id_of(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def encode(self, text: str, max_length: int | None = None,
               add_eos: bool = True) -> list[int]:
        ids = [self.id_of(w) for w in words_of(text)]
        if add_eos:
            ids.append(EOS_ID)
        if max_length is not None:
            # keep the tail: for dialogue prompts the newest turns matter most
            ids = ids[-max_length:]
        return ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if skip_special and i in (PAD_ID, EOS_ID):
                continue
            words.append(self._words[i] if 0 <= i < len(self._words) else UNK_TOKEN)
        return " ".join(words)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps({"words": self._words}, ensure_ascii=False), encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(payload["words"])
