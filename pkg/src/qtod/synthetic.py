"""Synthetic corpora with analytically known retrieval behavior.

Construction rules that make desk-scale pipeline scores exact instead of
merely plausible:

- Every dialogue draws fresh vocabulary, so no query token ever appears
  in another session's records.
- Each session KB holds 8 records of 6 tokens each (2-token name,
  2-token category, price, area). Uniform lengths pin every BM25 length
  normalizer to 1, so scores are pure IDF sums and the two gold records
  of a turn tie exactly (resolved by ascending record id).
- Non-gold records of a session share no token with any of its queries,
  so they score 0 and are excluded no matter the KB size.
- Distractor-pool records use a disjoint vocabulary of the same record
  shape: expansion changes corpus statistics but never introduces a
  query-term occurrence, so the ranked prefix is size-invariant.

Under the rule backend this yields entity-F1 = 1.0 and recall@3 = 1.0 by
construction, making any pipeline regression visible.
"""

from __future__ import annotations

from .data import AnnotatedDialogue, DatasetSplit, TurnRecord
from .kb import KnowledgeBase, KnowledgeRecord
from .prompts import NOTHING_TOKEN, SYSTEM, USER

_CONSONANTS = "bdfglmnprstvz"
_VOWELS = "aeiou"
_SYLLABLES = [c + v for c in _CONSONANTS for v in _VOWELS]
_BASE = len(_SYLLABLES)

DOMAINS = ("restaurant", "hotel", "attraction")


def _word(i: int, syllables: int = 3) -> str:
    """Injective integer-to-word encoding (fixed syllable count, so
    session vocabulary at 3 syllables and pool vocabulary at 4 never
    collide)."""
    parts = []
    for _ in range(syllables):
        i, digit = divmod(i, _BASE)
        parts.append(_SYLLABLES[digit])
    return "".join(reversed(parts))


class _Vocab:
    """Hands out fresh words from a counter."""

    def __init__(self, start: int = 0, syllables: int = 3):
        self.next_index = start
        self.syllables = syllables

    def word(self) -> str:
        w = _word(self.next_index, self.syllables)
        self.next_index += 1
        return w

    def phrase(self, n: int) -> str:
        return " ".join(self.word() for _ in range(n))


def _record(rid: str, domain: str, name: str, category: str, price: str, area: str) -> KnowledgeRecord:
    return KnowledgeRecord(
        rid,
        domain,
        (("name", name), ("category", category), ("price", price), ("area", area)),
    )


def _find_utterance(price: str, category: str, noun: str, area: str) -> str:
    article = "an" if price[:1] in "aeiou" else "a"
    return f"find {article} {price} {category} {noun} in the {area}"


def _options_response(names: list[str]) -> str:
    if not names:
        return "no matching options"
    return f"there are {len(names)} options: " + " and ".join(names)


def build_dialogue(index: int, vocab: _Vocab, domain: str | None = None) -> AnnotatedDialogue:
    """One three-turn dialogue: two full constraint queries (each with
    exactly two satisfying records) and a thanks turn."""
    domain = domain or DOMAINS[index % len(DOMAINS)]
    noun = domain

    food_a, food_b = vocab.phrase(2), vocab.phrase(2)
    food_fill_1, food_fill_2 = vocab.phrase(2), vocab.phrase(2)
    price_a, price_b, price_fill = vocab.word(), vocab.word(), vocab.word()
    area_a, area_b, area_fill_1, area_fill_2 = (
        vocab.word(), vocab.word(), vocab.word(), vocab.word(),
    )
    names = [vocab.phrase(2) for _ in range(8)]

    records = (
        _record("r0", domain, names[0], food_a, price_a, area_a),
        _record("r1", domain, names[1], food_a, price_a, area_a),
        _record("r2", domain, names[2], food_b, price_b, area_b),
        _record("r3", domain, names[3], food_b, price_b, area_b),
        _record("r4", domain, names[4], food_fill_1, price_fill, area_fill_1),
        _record("r5", domain, names[5], food_fill_1, price_fill, area_fill_1),
        _record("r6", domain, names[6], food_fill_2, price_fill, area_fill_2),
        _record("r7", domain, names[7], food_fill_2, price_fill, area_fill_2),
    )

    query_1 = _find_utterance(price_a, food_a, noun, area_a)
    query_2 = _find_utterance(price_b, food_b, noun, area_b)
    turns = (
        TurnRecord(USER, query_1, gold_query=query_1, gold_record_ids=("r0", "r1")),
        TurnRecord(SYSTEM, _options_response([names[0], names[1]])),
        TurnRecord(USER, query_2, gold_query=query_2, gold_record_ids=("r2", "r3")),
        TurnRecord(SYSTEM, _options_response([names[2], names[3]])),
        TurnRecord(USER, "thanks!", gold_query=NOTHING_TOKEN, gold_record_ids=()),
        TurnRecord(SYSTEM, "no matching options"),
    )
    return AnnotatedDialogue(
        session_id=f"syn{index:04d}",
        domain=domain,
        kb=KnowledgeBase(records, scope="session"),
        turns=turns,
    )


def build_corpus(n_dialogues: int = 300, seed: int = 0) -> DatasetSplit:
    """A three-domain corpus split 80/10/10. The seed offsets the
    vocabulary so differently seeded corpora share no tokens."""
    vocab = _Vocab(start=seed * 50_000)
    dialogues = [build_dialogue(i, vocab) for i in range(n_dialogues)]
    n_train = int(n_dialogues * 0.8)
    n_val = int(n_dialogues * 0.1)
    return DatasetSplit(
        train=tuple(dialogues[:n_train]),
        validation=tuple(dialogues[n_train : n_train + n_val]),
        test=tuple(dialogues[n_train + n_val :]),
    )


def build_distractor_pool(n_records: int = 2000, seed: int = 0) -> KnowledgeBase:
    """Value-distinct distractors in the same 6-token record shape, on a
    vocabulary disjoint from every corpus (4-syllable words)."""
    vocab = _Vocab(start=seed * 500_000, syllables=4)
    records = tuple(
        _record(
            f"px{i:04d}",
            "distractor",
            vocab.phrase(2),
            vocab.phrase(2),
            vocab.word(),
            vocab.word(),
        )
        for i in range(n_records)
    )
    return KnowledgeBase(records, scope="dataset")
