"""Evaluation: micro entity-F1, corpus BLEU-4, retrieval recall, domain
breakdowns, the KB-scaling benchmark, and the top-n ablation.

Entity matching is lexicon-based longest-match over canonicalized text.
Entries are processed entry-major: longest first (ties lexicographic),
each consuming every window still unconsumed, so overlapping shorter
matches are suppressed deterministically. Counts use set semantics per
turn, pooled micro-style; turns whose gold response holds no lexicon
entity are excluded.

BLEU is corpus-level BLEU-4: case-insensitive, punctuation split into
its own tokens, uniform quarter weights, multiplicative brevity penalty,
no smoothing, one reference per prediction. N-gram orders absent from
the whole candidate corpus are skipped as neutral so identity corpora
score 1.0 at any length.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import re
import statistics
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .errors import ContractViolation
from .kb import KnowledgeBase, canonicalize, expand_kb, union_lexicon
from .pipeline import replay_dialogue
from .retriever import build_index

_PUNCT_SPLIT = re.compile(r"([^\w\s])")


def extract_entities(text: str, lexicon: Iterable[str]) -> set[str]:
    """Canonical lexicon entities present in the text, longest match
    wins, each word of the text consumed at most once."""
    words = canonicalize(text).split()
    entries = sorted(
        {canonicalize(e) for e in lexicon if canonicalize(e)},
        key=lambda e: (-len(e.split()), e),
    )
    consumed = [False] * len(words)
    found: set[str] = set()
    for entry in entries:
        entry_words = entry.split()
        width = len(entry_words)
        for start in range(len(words) - width + 1):
            if any(consumed[start : start + width]):
                continue
            if words[start : start + width] == entry_words:
                found.add(entry)
                consumed[start : start + width] = [True] * width
    return found


@dataclass(frozen=True)
class EntityScores:
    """Micro-pooled precision/recall/F1 with their raw counts."""

    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def __add__(self, other: "EntityScores") -> "EntityScores":
        return EntityScores(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def entity_counts(
    pred_texts: Sequence[str], gold_texts: Sequence[str], lexicon: Iterable[str]
) -> EntityScores:
    if len(pred_texts) != len(gold_texts):
        raise ContractViolation(
            f"pred/gold length mismatch: {len(pred_texts)} vs {len(gold_texts)}"
        )
    lexicon = frozenset(canonicalize(e) for e in lexicon)
    tp = fp = fn = 0
    for pred, gold in zip(pred_texts, gold_texts):
        gold_entities = extract_entities(gold, lexicon)
        if not gold_entities:
            continue  # entity-free gold turns stay out of the micro counts
        pred_entities = extract_entities(pred, lexicon)
        tp += len(pred_entities & gold_entities)
        fp += len(pred_entities - gold_entities)
        fn += len(gold_entities - pred_entities)
    return EntityScores(tp, fp, fn)


def entity_f1(
    pred_texts: Sequence[str], gold_texts: Sequence[str], lexicon: Iterable[str]
) -> EntityScores:
    return entity_counts(pred_texts, gold_texts, lexicon)


def bleu_tokenize(text: str) -> list[str]:
    return _PUNCT_SPLIT.sub(r" \1 ", text.lower()).split()


def _ngram_counts(tokens: list[str], order: int) -> Counter:
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def bleu(pred_texts: Sequence[str], ref_texts: Sequence[str]) -> float:
    """Corpus BLEU-4; empty candidate corpus scores 0 by convention."""
    if len(pred_texts) != len(ref_texts):
        raise ContractViolation(
            f"pred/ref length mismatch: {len(pred_texts)} vs {len(ref_texts)}"
        )
    totals = [0, 0, 0, 0]
    clipped = [0, 0, 0, 0]
    cand_len = 0
    ref_len = 0
    for pred, ref in zip(pred_texts, ref_texts):
        pred_tokens = bleu_tokenize(pred)
        ref_tokens = bleu_tokenize(ref)
        cand_len += len(pred_tokens)
        ref_len += len(ref_tokens)
        for order in range(1, 5):
            pred_grams = _ngram_counts(pred_tokens, order)
            ref_grams = _ngram_counts(ref_tokens, order)
            totals[order - 1] += sum(pred_grams.values())
            clipped[order - 1] += sum(
                min(count, ref_grams[gram]) for gram, count in pred_grams.items()
            )
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for order in range(4):
        if totals[order] == 0:
            continue  # order longer than every candidate: neutral
        if clipped[order] == 0:
            return 0.0
        log_sum += 0.25 * math.log(clipped[order] / totals[order])
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return brevity * math.exp(log_sum)


def recall_at_n(
    retrievals: Sequence[Sequence[str]],
    gold_record_ids: Sequence[Sequence[str]],
    n: int,
) -> float:
    """Fraction of gold-bearing turns whose gold ids all sit in the top
    n. Turns without gold ids are excluded; none eligible scores 0."""
    if len(retrievals) != len(gold_record_ids):
        raise ContractViolation("retrievals/gold length mismatch")
    eligible = 0
    hits = 0
    for ranked, gold in zip(retrievals, gold_record_ids):
        gold_set = set(gold or ())
        if not gold_set:
            continue
        eligible += 1
        if gold_set <= set(list(ranked)[:n]):
            hits += 1
    return hits / eligible if eligible else 0.0


class TurnRow(NamedTuple):
    """One evaluated turn, aligned between a run and its gold data."""

    session_id: str
    turn: int
    domain: str
    pred_response: str
    gold_response: str
    retrieved_ids: tuple[str, ...]
    gold_record_ids: tuple[str, ...]
    retrieve_ms: float | None


@dataclass(frozen=True)
class EvalReport:
    entity: EntityScores
    bleu: float
    recall: float
    n: int
    turns: int
    per_domain: dict[str, float] = field(default_factory=dict)
    mean_retrieve_latency_ms: float | None = None

    @property
    def entity_f1(self) -> float:
        return self.entity.f1

    def to_dict(self) -> dict:
        return {
            "entity_f1": self.entity.f1,
            "precision": self.entity.precision,
            "recall": self.entity.recall,
            "bleu": self.bleu,
            f"recall_at_{self.n}": self.recall,
            "counts": {"tp": self.entity.tp, "fp": self.entity.fp, "fn": self.entity.fn},
            "per_domain": dict(sorted(self.per_domain.items())),
            "turns": self.turns,
            "mean_retrieve_latency_ms": self.mean_retrieve_latency_ms,
        }


def evaluate_rows(rows: Sequence[TurnRow], lexicon: Iterable[str], n: int) -> EvalReport:
    """Aggregate aligned turn rows into one report."""
    lexicon = frozenset(canonicalize(e) for e in lexicon)
    preds = [r.pred_response for r in rows]
    golds = [r.gold_response for r in rows]
    scores = entity_counts(preds, golds, lexicon)
    per_domain: dict[str, EntityScores] = {}
    for row in rows:
        domain = row.domain or "other"
        part = entity_counts([row.pred_response], [row.gold_response], lexicon)
        per_domain[domain] = per_domain.get(domain, EntityScores(0, 0, 0)) + part
    latencies = [r.retrieve_ms for r in rows if r.retrieve_ms is not None]
    return EvalReport(
        entity=scores,
        bleu=bleu(preds, golds),
        recall=recall_at_n(
            [r.retrieved_ids for r in rows], [r.gold_record_ids for r in rows], n
        ),
        n=n,
        turns=len(rows),
        per_domain={d: s.f1 for d, s in sorted(per_domain.items())},
        mean_retrieve_latency_ms=statistics.fmean(latencies) if latencies else None,
    )


def rows_from_replay(dialogue, replayed) -> list[TurnRow]:
    rows = []
    for annotated, result in replayed:
        rows.append(
            TurnRow(
                session_id=dialogue.session_id,
                turn=annotated.turn,
                domain=annotated.domain or dialogue.domain,
                pred_response=result.response,
                gold_response=annotated.gold_response,
                retrieved_ids=result.retrieved.record_ids,
                gold_record_ids=tuple(annotated.gold_record_ids or ()),
                # Null-query turns never call retrieve; keep them out of
                # the latency mean.
                retrieve_ms=(
                    result.timings.get("retrieve") if not result.query.is_null else None
                ),
            )
        )
    return rows


def run_split_eval(
    dialogues: Sequence,
    backend,
    mode: str = "qtod",
    n: int = 3,
    retriever: str = "bm25",
    retriever_config: dict | None = None,
    lexicon: Iterable[str] | None = None,
) -> tuple[EvalReport, list[TurnRow]]:
    """Replay every dialogue under one configuration and score it."""
    rows: list[TurnRow] = []
    for dialogue in dialogues:
        replayed = replay_dialogue(
            dialogue, backend, mode=mode, n=n,
            retriever=retriever, retriever_config=retriever_config,
        )
        rows.extend(rows_from_replay(dialogue, replayed))
    if lexicon is None:
        lexicon = union_lexicon(d.kb for d in dialogues)
    return evaluate_rows(rows, lexicon, n), rows


class ScalingPoint(NamedTuple):
    kb_size: int
    entity_f1: float
    recall: float
    mean_retrieve_latency_ms: float


@dataclass(frozen=True)
class ScalingCurve:
    points: tuple[ScalingPoint, ...]
    n: int
    seed: int

    def __post_init__(self):
        sizes = [p.kb_size for p in self.points]
        if any(a >= b for a, b in zip(sizes, sizes[1:])):
            raise ContractViolation(f"kb sizes must strictly increase: {sizes}")


def _expansion_seed(seed: int, session_id: str, size: int) -> int:
    # Stable across processes; Python string hashing is not.
    digest = hashlib.sha256(f"{seed}:{session_id}:{size}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def run_scaling_benchmark(
    dialogues: Sequence,
    backend,
    distractor_pool: KnowledgeBase,
    sizes: Sequence[int],
    seed: int = 0,
    n: int = 3,
    mode: str = "qtod",
) -> ScalingCurve:
    """Evaluate at growing KB sizes: per size, every session KB is
    expanded from the pool (sizes not above the session size are
    no-ops), the index rebuilt, and the split re-scored. The entity
    lexicon stays fixed to the base dataset so distractor values never
    shift the metric."""
    sizes = sorted(set(int(s) for s in sizes))
    lexicon = union_lexicon(d.kb for d in dialogues)
    points = []
    for size in sizes:
        rows: list[TurnRow] = []
        for dialogue in dialogues:
            base = dialogue.kb
            target = max(size, len(base))
            expanded = expand_kb(
                base, target, distractor_pool,
                seed=_expansion_seed(seed, dialogue.session_id, size),
            )
            index = build_index(expanded, "bm25")
            replayed = replay_dialogue(
                dialogue.with_kb(expanded), backend, mode=mode, n=n, index=index
            )
            rows.extend(rows_from_replay(dialogue, replayed))
        report = evaluate_rows(rows, lexicon, n)
        points.append(
            ScalingPoint(
                kb_size=size,
                entity_f1=report.entity_f1,
                recall=report.recall,
                mean_retrieve_latency_ms=report.mean_retrieve_latency_ms or 0.0,
            )
        )
    return ScalingCurve(points=tuple(points), n=n, seed=seed)


def run_topn_ablation(
    dialogues: Sequence,
    backend,
    n_values: Sequence[int] = (1, 3, 5),
    mode: str = "qtod",
    retriever: str = "bm25",
) -> dict[int, EvalReport]:
    """One full evaluation per retrieval depth."""
    lexicon = union_lexicon(d.kb for d in dialogues)
    out: dict[int, EvalReport] = {}
    for n in n_values:
        report, _ = run_split_eval(
            dialogues, backend, mode=mode, n=n, retriever=retriever, lexicon=lexicon
        )
        out[n] = report
    return out


def write_report_json(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
    )


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    data = report.to_dict()
    flat = {
        k: v for k, v in data.items() if not isinstance(v, dict)
    }
    flat.update({f"count_{k}": v for k, v in data["counts"].items()})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(flat))
        writer.writeheader()
        writer.writerow(flat)


def write_scaling_csv(
    curve: ScalingCurve, path: str | Path, metric: str = "entity_f1"
) -> None:
    """Plot-ready CSV: kb_size,metric,latency_ms."""
    if metric not in ("entity_f1", "recall"):
        raise ContractViolation(f"unknown scaling metric {metric!r}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kb_size", "metric", "latency_ms"])
        for point in curve.points:
            writer.writerow(
                [point.kb_size, getattr(point, metric), point.mean_retrieve_latency_ms]
            )


def format_report_table(reports: dict[str, EvalReport]) -> str:
    """Fixed-width console summary, one row per labeled report."""
    header = f"{'run':<16} {'entity_f1':>10} {'precision':>10} {'recall':>10} {'bleu':>8} {'recall@n':>9} {'turns':>6}"
    lines = [header, "-" * len(header)]
    for label, report in reports.items():
        lines.append(
            f"{label:<16} {report.entity_f1:>10.4f} {report.entity.precision:>10.4f} "
            f"{report.entity.recall:>10.4f} {report.bleu:>8.4f} {report.recall:>9.4f} "
            f"{report.turns:>6d}"
        )
    return "\n".join(lines)
