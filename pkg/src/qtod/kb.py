"""Knowledge bases: slot-value records, loading, linearization, expansion.

A knowledge base is an immutable collection of records. Records linearize
to the comma-joined value text used as retrieval passages and as the
knowledge segment of response prompts: "ashley hotel, north, moderate,
2 star". The derived entity lexicon (canonicalized slot values) feeds the
entity-F1 metric.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Iterable, Sequence

from .errors import CapacityError, ContractViolation, SchemaError, ValidationError

_PUNCT_RE = re.compile(r"[^\w\s]|_")
_SPACE_RE = re.compile(r"\s+")

SCOPES = ("session", "dataset", "expanded")


def canonicalize(text: str) -> str:
    """Normalize an entity string: lowercase, punctuation and underscores
    to spaces, whitespace collapsed. Idempotent."""
    text = _PUNCT_RE.sub(" ", text.lower())
    return _SPACE_RE.sub(" ", text).strip()


@dataclass(frozen=True)
class KnowledgeRecord:
    """One knowledge-base row: an ordered set of slot-value pairs."""

    record_id: str
    domain: str
    slots: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.record_id:
            raise SchemaError("record_id must be non-empty")
        names = [name for name, _ in self.slots]
        if len(set(names)) != len(names):
            raise SchemaError(
                f"record {self.record_id!r}: duplicate slot names {names}"
            )
        for name, value in self.slots:
            if not canonicalize(value):
                raise SchemaError(
                    f"record {self.record_id!r}: slot {name!r} value "
                    f"{value!r} is empty after normalization"
                )

    @property
    def values(self) -> tuple[str, ...]:
        return tuple(value for _, value in self.slots)

    def dedup_key(self) -> tuple[str, tuple[tuple[str, str], ...]]:
        """Value identity for merging: domain plus canonicalized slots."""
        return (
            self.domain,
            tuple((canonicalize(n), canonicalize(v)) for n, v in self.slots),
        )


def linearize_record(record: KnowledgeRecord, style: str = "values") -> str:
    """Render a record as text. The default joins values in slot order by
    ", "; the "slot=value" style keeps slot names for debugging."""
    if style == "values":
        return ", ".join(record.values)
    if style == "slot=value":
        return ", ".join(f"{name}={value}" for name, value in record.slots)
    raise ContractViolation(f"unknown linearization style {style!r}")


@dataclass(frozen=True)
class KnowledgeBase:
    """An immutable set of records plus the entity lexicon derived from
    their values. Safe to share across threads."""

    records: tuple[KnowledgeRecord, ...]
    scope: str = "session"
    entity_lexicon: frozenset[str] = field(init=False)

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise SchemaError(f"unknown scope {self.scope!r}")
        seen: set[str] = set()
        for record in self.records:
            if record.record_id in seen:
                raise SchemaError(f"duplicate record_id {record.record_id!r}")
            seen.add(record.record_id)
        lexicon = frozenset(
            canonicalize(value) for record in self.records for value in record.values
        )
        object.__setattr__(self, "entity_lexicon", lexicon)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def get(self, record_id: str) -> KnowledgeRecord:
        for record in self.records:
            if record.record_id == record_id:
                return record
        raise KeyError(record_id)

    @property
    def record_ids(self) -> tuple[str, ...]:
        return tuple(record.record_id for record in self.records)


def record_from_obj(obj: dict, index: int) -> KnowledgeRecord:
    """Build one record from its JSON object, reporting the failing record
    index and field on schema violations."""
    if not isinstance(obj, dict):
        raise SchemaError(f"record {index}: expected object, got {type(obj).__name__}")
    for fld in ("id", "domain", "slots"):
        if fld not in obj:
            raise SchemaError(f"record {index}: missing field {fld!r}")
    slots = obj["slots"]
    if not isinstance(slots, list):
        raise SchemaError(f"record {index}: field 'slots' must be a list")
    pairs = []
    for j, pair in enumerate(slots):
        if (
            not isinstance(pair, (list, tuple))
            or len(pair) != 2
            or not all(isinstance(p, str) for p in pair)
        ):
            raise SchemaError(
                f"record {index}: slot {j} must be a [name, value] string pair"
            )
        pairs.append((pair[0], pair[1]))
    try:
        return KnowledgeRecord(str(obj["id"]), str(obj["domain"]), tuple(pairs))
    except ValidationError as exc:
        raise SchemaError(f"record {index}: {exc}") from exc


def kb_from_smd_items(items: list, dialogue_tag: str, domain: str = "") -> KnowledgeBase:
    """Convert a bare per-dialogue kb array (list of slot-value objects)
    into a KnowledgeBase with synthetic ids d{dialogue}_r{index}."""
    records = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise SchemaError(f"record {i}: expected object in bare kb array")
        slots = tuple((str(k), str(v)) for k, v in item.items())
        try:
            records.append(
                KnowledgeRecord(f"{dialogue_tag}_r{i}", domain or "unknown", slots)
            )
        except ValidationError as exc:
            raise SchemaError(f"record {i}: {exc}") from exc
    return KnowledgeBase(tuple(records), scope="session")


def load_kb(path: str | Path, format: str = "session_json") -> KnowledgeBase:
    """Load a knowledge base file.

    Accepts the full schema {"scope": ..., "records": [...]} or a bare
    SMD-style array of slot-value objects (synthetic ids are assigned).
    The format argument supplies the scope for bare arrays and is checked
    against the declared scope otherwise.
    """
    if format not in ("session_json", "dataset_json"):
        raise ContractViolation(f"unknown kb format {format!r}")
    expected_scope = "session" if format == "session_json" else "dataset"
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot load kb file {path}: {exc}") from exc

    if isinstance(payload, list):
        kb = kb_from_smd_items(payload, "d0")
        if expected_scope != "session":
            kb = KnowledgeBase(kb.records, scope=expected_scope)
        return kb
    if not isinstance(payload, dict):
        raise SchemaError(f"kb file {path}: expected object or array at top level")
    scope = payload.get("scope", expected_scope)
    if scope != expected_scope:
        raise SchemaError(
            f"kb file {path}: scope {scope!r} does not match format {format!r}"
        )
    raw_records = payload.get("records")
    if not isinstance(raw_records, list):
        raise SchemaError(f"kb file {path}: missing or non-list 'records'")
    records = tuple(record_from_obj(obj, i) for i, obj in enumerate(raw_records))
    return KnowledgeBase(records, scope=scope)


def save_kb(kb: KnowledgeBase, path: str | Path) -> None:
    """Write a knowledge base under the standard schema."""
    payload = {
        "scope": kb.scope if kb.scope in ("session", "dataset") else "dataset",
        "records": [
            {"id": r.record_id, "domain": r.domain, "slots": [list(p) for p in r.slots]}
            for r in kb.records
        ],
    }
    Path(path).write_text(
        json.dumps(payload, ensure_ascii=False, indent=None, sort_keys=True),
        encoding="utf-8",
    )


def _unique_id(candidate: str, taken: set[str]) -> str:
    if candidate not in taken:
        return candidate
    k = 1
    while f"{candidate}__{k}" in taken:
        k += 1
    return f"{candidate}__{k}"


def merge_to_dataset_level(session_kbs: Sequence[KnowledgeBase]) -> KnowledgeBase:
    """Union session KBs into one dataset-level KB, deduplicating
    value-identical records (same domain, same canonicalized slot list).
    Id collisions between value-distinct records get a deterministic
    "__{k}" suffix."""
    if not session_kbs:
        raise ContractViolation("merge_to_dataset_level needs at least one kb")
    merged: list[KnowledgeRecord] = []
    seen_keys: set = set()
    taken_ids: set[str] = set()
    for kb in session_kbs:
        for record in kb.records:
            key = record.dedup_key()
            if key in seen_keys:
                continue
            seen_keys.add(key)
            rid = _unique_id(record.record_id, taken_ids)
            taken_ids.add(rid)
            if rid != record.record_id:
                record = KnowledgeRecord(rid, record.domain, record.slots)
            merged.append(record)
    return KnowledgeBase(tuple(merged), scope="dataset")


def expand_kb(
    base: KnowledgeBase,
    target_size: int,
    distractor_pool: KnowledgeBase,
    seed: int,
) -> KnowledgeBase:
    """Grow a KB to target_size by seeded uniform sampling without
    replacement from the pool. Every base record is kept verbatim; pool
    records value-identical to a base record (or to an earlier pool
    record) never count toward the target."""
    if target_size < len(base.records):
        raise ContractViolation(
            f"target_size {target_size} is below the base size {len(base.records)}"
        )
    needed = target_size - len(base.records)
    if needed == 0:
        return KnowledgeBase(base.records, scope="expanded")

    base_keys = {record.dedup_key() for record in base.records}
    candidates: list[KnowledgeRecord] = []
    seen: set = set(base_keys)
    for record in distractor_pool.records:
        key = record.dedup_key()
        if key in seen:
            continue
        seen.add(key)
        candidates.append(record)
    if len(candidates) < needed:
        raise CapacityError(
            f"distractor pool has {len(candidates)} usable records, "
            f"need {needed} to reach {target_size}",
            shortfall=needed - len(candidates),
        )
    sampled = Random(seed).sample(candidates, needed)

    taken_ids = set(base.record_ids)
    records = list(base.records)
    for record in sampled:
        rid = _unique_id(record.record_id, taken_ids)
        taken_ids.add(rid)
        if rid != record.record_id:
            record = KnowledgeRecord(rid, record.domain, record.slots)
        records.append(record)
    return KnowledgeBase(tuple(records), scope="expanded")


def union_lexicon(kbs: Iterable[KnowledgeBase]) -> frozenset[str]:
    """Union of entity lexicons across KBs (the dataset-level entity list
    used for evaluation)."""
    out: set[str] = set()
    for kb in kbs:
        out |= kb.entity_lexicon
    return frozenset(out)
