"""Query-annotated dialogue corpora: loading, stats, cross-domain session
merging, few-shot splits, and converters from public corpus formats.

The native format is JSON-lines, one dialogue per line:

    {"session_id": str, "domain": str, "kb": <kb schema>,
     "turns": [{"speaker": "user"|"system", "text": str,
                "gold_query": str?, "gold_record_ids": [str]?,
                "domain": str?}, ...]}

Annotation fields sit on user turns; the gold response is the following
system turn. Null queries are the literal "[NOTHING]" string.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from random import Random
from typing import Iterable, Iterator, Sequence

from .errors import CapacityError, ContractViolation, SchemaError, ValidationError
from .kb import (
    KnowledgeBase,
    KnowledgeRecord,
    kb_from_smd_items,
    record_from_obj,
)
from .pipeline import AnnotatedTurn
from .prompts import NOTHING_TOKEN, SYSTEM, USER


@dataclass(frozen=True)
class TurnRecord:
    """One stored turn; annotation fields are meaningful on user turns."""

    speaker: str
    text: str
    gold_query: str | None = None
    gold_record_ids: tuple[str, ...] | None = None
    domain: str | None = None

    def __post_init__(self):
        if self.speaker not in (USER, SYSTEM):
            raise ValidationError(f"unknown speaker {self.speaker!r}")
        if not self.text:
            raise ValidationError("turn text must be non-empty")


@dataclass(frozen=True)
class AnnotatedDialogue:
    session_id: str
    domain: str
    kb: KnowledgeBase
    turns: tuple[TurnRecord, ...]

    def validate(self, strict: bool = True) -> None:
        """Alternation, pairing, and annotation invariants. Strict mode
        additionally requires a gold query on every user turn."""
        for i, turn in enumerate(self.turns):
            expected = USER if i % 2 == 0 else SYSTEM
            if turn.speaker != expected:
                raise SchemaError(
                    f"session {self.session_id}: turn {i} must be {expected}"
                )
        if len(self.turns) % 2 != 0:
            raise SchemaError(
                f"session {self.session_id}: every user turn needs a system response"
            )
        known = set(self.kb.record_ids)
        for i in range(0, len(self.turns), 2):
            user_turn = self.turns[i]
            if strict and user_turn.gold_query is None:
                raise SchemaError(
                    f"session {self.session_id}: user turn {i // 2} lacks gold_query"
                )
            for rid in user_turn.gold_record_ids or ():
                if rid not in known:
                    raise SchemaError(
                        f"session {self.session_id}: gold record id {rid!r} "
                        f"not in the session kb"
                    )

    def iter_annotated_turns(self) -> Iterator[AnnotatedTurn]:
        for i in range(0, len(self.turns) - 1, 2):
            user_turn, system_turn = self.turns[i], self.turns[i + 1]
            yield AnnotatedTurn(
                turn=i // 2,
                utterance=user_turn.text,
                gold_query=user_turn.gold_query,
                gold_response=system_turn.text,
                gold_record_ids=user_turn.gold_record_ids,
                domain=user_turn.domain,
            )

    def with_kb(self, kb: KnowledgeBase) -> "AnnotatedDialogue":
        return replace(self, kb=kb)

    @property
    def user_turn_count(self) -> int:
        return (len(self.turns) + 1) // 2


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[AnnotatedDialogue, ...] = ()
    validation: tuple[AnnotatedDialogue, ...] = ()
    test: tuple[AnnotatedDialogue, ...] = ()

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name, part in self.parts().items():
            for dialogue in part:
                if dialogue.session_id in seen:
                    raise SchemaError(
                        f"session {dialogue.session_id} appears in both "
                        f"{seen[dialogue.session_id]} and {name}"
                    )
                seen[dialogue.session_id] = name

    def parts(self) -> dict[str, tuple[AnnotatedDialogue, ...]]:
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def all_dialogues(self) -> list[AnnotatedDialogue]:
        return [d for part in self.parts().values() for d in part]


def _kb_from_obj(obj, session_id: str) -> KnowledgeBase:
    if isinstance(obj, list):
        return kb_from_smd_items(obj, f"d{session_id}")
    if isinstance(obj, dict):
        raw = obj.get("records")
        if not isinstance(raw, list):
            raise SchemaError(f"session {session_id}: kb missing 'records' list")
        records = tuple(record_from_obj(r, i) for i, r in enumerate(raw))
        return KnowledgeBase(records, scope="session")
    raise SchemaError(f"session {session_id}: kb must be object or array")


def dialogue_from_obj(obj: dict, strict: bool = True) -> AnnotatedDialogue:
    for fld in ("session_id", "domain", "kb", "turns"):
        if fld not in obj:
            raise SchemaError(f"dialogue missing field {fld!r}")
    session_id = str(obj["session_id"])
    turns = []
    for i, raw in enumerate(obj["turns"]):
        if not isinstance(raw, dict) or "speaker" not in raw or "text" not in raw:
            raise SchemaError(f"session {session_id}: turn {i} malformed")
        ids = raw.get("gold_record_ids")
        try:
            turns.append(
                TurnRecord(
                    speaker=raw["speaker"],
                    text=raw["text"],
                    gold_query=raw.get("gold_query"),
                    gold_record_ids=tuple(ids) if ids is not None else None,
                    domain=raw.get("domain"),
                )
            )
        except ValidationError as exc:
            raise SchemaError(f"session {session_id}: turn {i}: {exc}") from exc
    dialogue = AnnotatedDialogue(
        session_id=session_id,
        domain=str(obj["domain"]),
        kb=_kb_from_obj(obj["kb"], session_id),
        turns=tuple(turns),
    )
    dialogue.validate(strict=strict)
    return dialogue


def dialogue_to_obj(dialogue: AnnotatedDialogue) -> dict:
    turns = []
    for turn in dialogue.turns:
        obj: dict = {"speaker": turn.speaker, "text": turn.text}
        if turn.gold_query is not None:
            obj["gold_query"] = turn.gold_query
        if turn.gold_record_ids is not None:
            obj["gold_record_ids"] = list(turn.gold_record_ids)
        if turn.domain is not None:
            obj["domain"] = turn.domain
        turns.append(obj)
    return {
        "session_id": dialogue.session_id,
        "domain": dialogue.domain,
        "kb": {
            "scope": "session",
            "records": [
                {
                    "id": r.record_id,
                    "domain": r.domain,
                    "slots": [list(p) for p in r.slots],
                }
                for r in dialogue.kb.records
            ],
        },
        "turns": turns,
    }


SPLIT_FILES = {"train": "train.jsonl", "validation": "validation.jsonl", "test": "test.jsonl"}


def load_dialogues(path: str | Path, strict: bool = True) -> tuple[AnnotatedDialogue, ...]:
    """One JSONL file to dialogues; a missing file is an empty partition."""
    path = Path(path)
    if not path.exists():
        return ()
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        out.append(dialogue_from_obj(obj, strict=strict))
    return tuple(out)


def load_dataset(path: str | Path, strict: bool = True) -> DatasetSplit:
    path = Path(path)
    parts = {
        name: load_dialogues(path / fname, strict=strict)
        for name, fname in SPLIT_FILES.items()
    }
    return DatasetSplit(**parts)


def save_dialogues(dialogues: Iterable[AnnotatedDialogue], path: str | Path) -> None:
    lines = [
        json.dumps(dialogue_to_obj(d), sort_keys=True, ensure_ascii=False)
        for d in dialogues
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def save_dataset(split: DatasetSplit, path: str | Path) -> None:
    """Canonical serialization: loading what this wrote and writing it
    again is byte-stable."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, fname in SPLIT_FILES.items():
        save_dialogues(split.parts()[name], path / fname)


@dataclass(frozen=True)
class DatasetStats:
    dialogues: int
    utterances: int
    turns_per_dialogue: float
    tokens_per_query: float
    null_queries: int
    session_kb_avg_size: float
    dataset_kb_size_total: int
    dataset_kb_size_deduped: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def dataset_stats(dialogues: Sequence[AnnotatedDialogue]) -> DatasetStats:
    """Corpus statistics. Utterances count every turn; tokens per query
    averages whitespace tokens over non-null gold queries; the
    dataset-level KB size is reported both before and after value
    deduplication."""
    from .kb import merge_to_dataset_level

    n_dialogues = len(dialogues)
    utterances = sum(len(d.turns) for d in dialogues)
    query_token_counts = []
    null_queries = 0
    for dialogue in dialogues:
        for annotated in dialogue.iter_annotated_turns():
            if annotated.gold_query is None:
                continue
            if annotated.gold_query == NOTHING_TOKEN:
                null_queries += 1
            else:
                query_token_counts.append(len(annotated.gold_query.split()))
    total_kb = sum(len(d.kb) for d in dialogues)
    deduped = (
        len(merge_to_dataset_level([d.kb for d in dialogues])) if dialogues else 0
    )
    return DatasetStats(
        dialogues=n_dialogues,
        utterances=utterances,
        turns_per_dialogue=utterances / n_dialogues if n_dialogues else 0.0,
        tokens_per_query=(
            sum(query_token_counts) / len(query_token_counts)
            if query_token_counts
            else 0.0
        ),
        null_queries=null_queries,
        session_kb_avg_size=total_kb / n_dialogues if n_dialogues else 0.0,
        dataset_kb_size_total=total_kb,
        dataset_kb_size_deduped=deduped,
    )


def _merge_session_kbs(
    kbs: Sequence[KnowledgeBase],
) -> tuple[KnowledgeBase, list[dict[str, str]]]:
    """Merge constituent KBs into one session KB, returning per-KB id
    remaps (dedup can collapse ids, collisions rename them)."""
    merged: list[KnowledgeRecord] = []
    key_to_id: dict = {}
    taken: set[str] = set()
    remaps: list[dict[str, str]] = []
    for kb in kbs:
        remap: dict[str, str] = {}
        for record in kb.records:
            key = record.dedup_key()
            if key in key_to_id:
                remap[record.record_id] = key_to_id[key]
                continue
            original_id = record.record_id
            rid = original_id
            if rid in taken:
                k = 1
                while f"{rid}__{k}" in taken:
                    k += 1
                rid = f"{rid}__{k}"
                record = KnowledgeRecord(rid, record.domain, record.slots)
            taken.add(rid)
            key_to_id[key] = rid
            remap[original_id] = rid
            merged.append(record)
        remaps.append(remap)
    return KnowledgeBase(tuple(merged), scope="session"), remaps


def _merge_dialogues(
    constituents: Sequence[AnnotatedDialogue], session_id: str
) -> AnnotatedDialogue:
    kb, remaps = _merge_session_kbs([c.kb for c in constituents])
    turns: list[TurnRecord] = []
    for constituent, remap in zip(constituents, remaps):
        for turn in constituent.turns:
            ids = turn.gold_record_ids
            if ids is not None:
                ids = tuple(remap.get(rid, rid) for rid in ids)
            turns.append(
                TurnRecord(
                    speaker=turn.speaker,
                    text=turn.text,
                    gold_query=turn.gold_query,
                    gold_record_ids=ids,
                    domain=turn.domain or constituent.domain,
                )
            )
    return AnnotatedDialogue(
        session_id=session_id,
        domain="+".join(c.domain for c in constituents),
        kb=kb,
        turns=tuple(turns),
    )


def _partition_sizes(count: int, split_ratio: Sequence[float]) -> tuple[int, int, int]:
    if len(split_ratio) != 3:
        raise ContractViolation("split_ratio must have three entries")
    total = sum(split_ratio)
    if all(float(x).is_integer() for x in split_ratio) and int(total) == count:
        return tuple(int(x) for x in split_ratio)  # type: ignore[return-value]
    sizes = [math.floor(count * x / total) for x in split_ratio]
    sizes[0] += count - sum(sizes)
    return tuple(sizes)  # type: ignore[return-value]


def build_crossdomain(
    datasets: Sequence[DatasetSplit],
    recipe: Sequence[Sequence[tuple[int, str]]],
    count: int = 600,
    split_ratio: Sequence[float] = (400, 100, 100),
    seed: int = 0,
) -> DatasetSplit:
    """Merge single-domain sessions into multi-domain ones.

    Each recipe element is a sequence of (dataset index, domain) slots;
    output sessions cycle through the recipe elements. Constituents are
    drawn without replacement from the matching partition of the source
    dataset (train feeds train, and so on) and concatenated in a seeded
    random order with their KBs merged and gold record ids remapped.
    """
    if count < 1:
        raise ContractViolation("count must be positive")
    if not recipe or any(not elem for elem in recipe):
        raise ContractViolation("recipe must hold non-empty constituent sequences")
    sizes = dict(zip(("train", "validation", "test"), _partition_sizes(count, split_ratio)))
    rng = Random(seed)

    # Per (partition, dataset, domain) shuffled pools, consumed in order.
    pools: dict[tuple[str, int, str], list[AnnotatedDialogue]] = {}

    def pool(partition: str, source: int, domain: str) -> list[AnnotatedDialogue]:
        key = (partition, source, domain)
        if key not in pools:
            if source < 0 or source >= len(datasets):
                raise ContractViolation(f"recipe references dataset {source}")
            matching = [
                d
                for d in datasets[source].parts()[partition]
                if d.domain == domain
            ]
            rng.shuffle(matching)
            pools[key] = matching
        return pools[key]

    out: dict[str, list[AnnotatedDialogue]] = {"train": [], "validation": [], "test": []}
    for partition, size in sizes.items():
        for i in range(size):
            elem = recipe[i % len(recipe)]
            constituents = []
            for source, domain in elem:
                available = pool(partition, source, domain)
                if not available:
                    raise CapacityError(
                        f"not enough {domain!r} sessions in dataset {source} "
                        f"{partition} partition (needed at session {i})",
                        shortfall=size - i,
                    )
                constituents.append(available.pop())
            order = list(range(len(constituents)))
            rng.shuffle(order)  # "concatenated in a random order"
            merged = _merge_dialogues(
                [constituents[j] for j in order],
                session_id=f"xd_{partition}_{i}_seed{seed}",
            )
            out[partition].append(merged)
    return DatasetSplit(
        train=tuple(out["train"]),
        validation=tuple(out["validation"]),
        test=tuple(out["test"]),
    )


def fewshot_split(
    train: Sequence[AnnotatedDialogue], fraction: float, seed: int = 0
) -> tuple[AnnotatedDialogue, ...]:
    """ceil(fraction * N) whole dialogues via a seeded permutation
    prefix, so smaller fractions nest inside larger ones at equal
    seeds. Original order is preserved."""
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation(f"fraction must be in (0, 1], got {fraction}")
    if not train:
        raise ContractViolation("train partition is empty")
    indices = list(range(len(train)))
    Random(seed).shuffle(indices)
    keep = sorted(indices[: math.ceil(fraction * len(train))])
    return tuple(train[i] for i in keep)


# --- Converters from public corpus formats -------------------------------
#
# Query annotations ride along when the source objects carry them (key
# "gold_query" or "query" on user turns); otherwise strict validation is
# deferred to the caller.


def convert_smd(raw: Sequence[dict], domain_key: str = "task") -> tuple[AnnotatedDialogue, ...]:
    """KVRET-style dialogues: scenario.kb.items + driver/assistant turns."""
    dialogues = []
    for idx, obj in enumerate(raw):
        scenario = obj.get("scenario", {})
        intent = scenario.get(domain_key, {}).get("intent", "unknown")
        items = (scenario.get("kb") or {}).get("items") or []
        kb = kb_from_smd_items(items, f"d{idx}", domain=intent)
        turns: list[TurnRecord] = []
        for raw_turn in obj.get("dialogue", []):
            data = raw_turn.get("data", {})
            text = (data.get("utterance") or "").strip()
            if not text:
                continue
            if raw_turn.get("turn") == "driver":
                turns.append(
                    TurnRecord(
                        speaker=USER,
                        text=text,
                        gold_query=data.get("gold_query") or data.get("query"),
                        gold_record_ids=(
                            tuple(data["gold_record_ids"])
                            if data.get("gold_record_ids")
                            else None
                        ),
                    )
                )
            else:
                if not turns or turns[-1].speaker == SYSTEM:
                    continue  # responses without a user turn are dropped
                turns.append(TurnRecord(speaker=SYSTEM, text=text))
        if turns and turns[-1].speaker == USER:
            turns.pop()  # trailing user turn has no gold response
        if not turns:
            continue
        dialogue = AnnotatedDialogue(
            session_id=str(obj.get("id", f"smd{idx}")),
            domain=intent,
            kb=kb,
            turns=tuple(turns),
        )
        dialogue.validate(strict=False)
        dialogues.append(dialogue)
    return tuple(dialogues)


def convert_camrest(
    raw: Sequence[dict], kb_records: Sequence[dict] | None = None
) -> tuple[AnnotatedDialogue, ...]:
    """CamRest676-style dialogues: dial list of {usr: {transcript}, sys:
    {sent}} turns, with an optional shared restaurant KB."""
    shared_kb = (
        KnowledgeBase(
            tuple(record_from_obj(r, i) for i, r in enumerate(kb_records)),
            scope="session",
        )
        if kb_records
        else KnowledgeBase((), scope="session")
    )
    dialogues = []
    for idx, obj in enumerate(raw):
        turns: list[TurnRecord] = []
        for raw_turn in obj.get("dial", []):
            user_text = ((raw_turn.get("usr") or {}).get("transcript") or "").strip()
            sys_text = ((raw_turn.get("sys") or {}).get("sent") or "").strip()
            if not user_text or not sys_text:
                continue
            usr = raw_turn.get("usr") or {}
            turns.append(
                TurnRecord(
                    speaker=USER,
                    text=user_text,
                    gold_query=usr.get("gold_query") or usr.get("query"),
                )
            )
            turns.append(TurnRecord(speaker=SYSTEM, text=sys_text))
        if not turns:
            continue
        dialogue = AnnotatedDialogue(
            session_id=str(obj.get("dialogue_id", f"camrest{idx}")),
            domain="restaurant",
            kb=shared_kb,
            turns=tuple(turns),
        )
        dialogue.validate(strict=False)
        dialogues.append(dialogue)
    return tuple(dialogues)


def convert_mwoz(raw: Sequence[dict]) -> tuple[AnnotatedDialogue, ...]:
    """MultiWOZ-style single-domain dialogues with per-dialogue kb arrays
    and a flat turn list alternating user/system."""
    dialogues = []
    for idx, obj in enumerate(raw):
        domain = obj.get("domain") or obj.get("type") or "unknown"
        kb = kb_from_smd_items(obj.get("kb") or [], f"d{idx}", domain=domain)
        turns: list[TurnRecord] = []
        raw_turns = obj.get("dialogue") or obj.get("turns") or []
        for raw_turn in raw_turns:
            text = (raw_turn.get("text") or raw_turn.get("utterance") or "").strip()
            if not text:
                continue
            role = raw_turn.get("speaker") or raw_turn.get("role") or ""
            if role in ("user", "usr", "driver"):
                turns.append(
                    TurnRecord(
                        speaker=USER,
                        text=text,
                        gold_query=raw_turn.get("gold_query") or raw_turn.get("query"),
                    )
                )
            elif turns and turns[-1].speaker == USER:
                turns.append(TurnRecord(speaker=SYSTEM, text=text))
        if turns and turns[-1].speaker == USER:
            turns.pop()
        if not turns:
            continue
        dialogue = AnnotatedDialogue(
            session_id=str(obj.get("id", f"mwoz{idx}")),
            domain=domain,
            kb=kb,
            turns=tuple(turns),
        )
        dialogue.validate(strict=False)
        dialogues.append(dialogue)
    return tuple(dialogues)
