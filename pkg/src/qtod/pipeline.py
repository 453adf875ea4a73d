"""Per-turn orchestration: query generation, top-n retrieval, response
generation, invoked strictly in that order.

Three run modes: the standard pipeline; identity_query, where the
serialized dialogue context itself is the retrieval query and the query
backend is never called; and oracle_knowledge, where retrieval is
replaced by the turn's gold records (the retrieval upper bound).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .backends import GenerationRequest
from .errors import BackendError, ContractViolation
from .kb import KnowledgeBase, KnowledgeRecord, linearize_record
from .prompts import (
    NOTHING_TOKEN,
    SYSTEM,
    USER,
    render_query_prompt_text,
    render_response_prompt_text,
    serialize_turns,
)
from .retriever import RetrievalResult, build_index, records_of, retrieve

DEFAULT_TOP_N = 3
MODES = ("qtod", "identity_query", "oracle_knowledge")


@dataclass(frozen=True)
class DialogueTurn:
    speaker: str
    text: str

    def __post_init__(self):
        if self.speaker not in (USER, SYSTEM):
            raise ContractViolation(f"unknown speaker {self.speaker!r}")
        if not self.text:
            raise ContractViolation("turn text must be non-empty")


@dataclass(frozen=True)
class DialogueContext:
    """User/system turns in strict alternation, starting and ending with
    the user (the state right before a system response is produced)."""

    turns: tuple[DialogueTurn, ...]
    session_id: str = ""

    def __post_init__(self):
        if not self.turns:
            raise ContractViolation("context needs at least one turn")
        for i, turn in enumerate(self.turns):
            expected = USER if i % 2 == 0 else SYSTEM
            if turn.speaker != expected:
                raise ContractViolation(
                    f"turn {i} must be {expected!r}, got {turn.speaker!r}"
                )
        if self.turns[-1].speaker != USER:
            raise ContractViolation("context must end with a user turn")

    def pairs(self) -> list[tuple[str, str]]:
        return [(t.speaker, t.text) for t in self.turns]


def serialize_context(context: DialogueContext, budget_tokens: int | None = None) -> str:
    """Serialize with 'user: '/'system: ' prefixes joined by single
    spaces. With a budget, whole turns are dropped from the front until
    the whitespace-token count fits (the last turn always survives)."""
    turns = context.pairs()
    if budget_tokens is not None:
        while len(turns) > 1 and len(serialize_turns(turns).split()) > budget_tokens:
            turns = turns[1:]
    return serialize_turns(turns)


def render_query_prompt(context: DialogueContext, budget_tokens: int | None = None) -> str:
    return render_query_prompt_text(serialize_context(context, budget_tokens))


def render_response_prompt(
    records: list[KnowledgeRecord],
    context: DialogueContext,
    budget_tokens: int | None = None,
) -> str:
    texts = [linearize_record(r) for r in records]
    return render_response_prompt_text(texts, serialize_context(context, budget_tokens))


@dataclass(frozen=True)
class Query:
    """A generated retrieval query; text=None is the null variant."""

    text: str | None
    raw_generation: str = ""

    @property
    def is_null(self) -> bool:
        return self.text is None

    @classmethod
    def from_generation(cls, raw: str) -> "Query":
        trimmed = raw.strip()
        if trimmed == NOTHING_TOKEN:
            return cls(text=None, raw_generation=raw)
        if not trimmed:
            raise ContractViolation("backend produced an empty query")
        return cls(text=trimmed, raw_generation=raw)

    @classmethod
    def null(cls) -> "Query":
        return cls(text=None, raw_generation=NOTHING_TOKEN)


@dataclass(frozen=True)
class TurnResult:
    query: Query
    retrieved: RetrievalResult
    response: str
    timings: dict[str, float]
    spans: dict[str, tuple[float, float]] = field(default_factory=dict)
    query_prompt: str | None = None
    response_prompt: str = ""

    def to_dict(self) -> dict:
        return {
            "query": self.query.text,
            "query_raw": self.query.raw_generation,
            "retrieved": [[rid, score] for rid, score in self.retrieved.entries],
            "response": self.response,
            "timings": dict(self.timings),
        }


class _Stage:
    """Timed stage scope; records both duration and its absolute span so
    the query->retrieve->response ordering is checkable."""

    def __init__(self, result_timings: dict, result_spans: dict, name: str):
        self.timings, self.spans, self.name = result_timings, result_spans, name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        end = time.perf_counter()
        self.timings[self.name] = (end - self.start) * 1000.0
        self.spans[self.name] = (self.start, end)
        if isinstance(exc, BackendError) and exc.stage is None:
            exc.stage = self.name
        return False


class Session:
    """Single-owner dialogue state bound to one KB, one index, and one
    backend. Distinct sessions may share the index and backend."""

    def __init__(
        self,
        kb: KnowledgeBase,
        backend,
        session_id: str = "session",
        retriever: str = "bm25",
        retriever_config: dict | None = None,
        n: int = DEFAULT_TOP_N,
        mode: str = "qtod",
        index=None,
    ):
        if mode not in MODES:
            raise ContractViolation(f"unknown mode {mode!r}")
        if n < 1:
            raise ContractViolation("n must be >= 1")
        self.kb = kb
        self.backend = backend
        self.session_id = session_id
        self.index = index if index is not None else build_index(kb, retriever, retriever_config)
        self.n = n
        self.mode = mode
        self.turns: list[DialogueTurn] = []
        self.budget = getattr(backend, "input_budget", 1024)

    def reset(self) -> None:
        self.turns.clear()

    def context_with(self, user_utterance: str) -> DialogueContext:
        return DialogueContext(
            turns=tuple(self.turns) + (DialogueTurn(USER, user_utterance),),
            session_id=self.session_id,
        )


def generate_query(backend, context: DialogueContext, budget: int | None = None) -> Query:
    prompt = render_query_prompt(context, budget)
    response = backend.generate(GenerationRequest(task="query", prompt=prompt))
    return Query.from_generation(response.text)


def run_turn(
    session: Session,
    user_utterance: str,
    mode: str | None = None,
    n: int | None = None,
    gold_record_ids: Iterable[str] | None = None,
    history_response: str | None = None,
) -> TurnResult:
    """Run one full turn and append it (with its response) to the session
    history. history_response overrides what goes into the history, so
    evaluation replays can keep gold responses as context."""
    mode = mode or session.mode
    n = n or session.n
    if mode not in MODES:
        raise ContractViolation(f"unknown mode {mode!r}")
    context = session.context_with(user_utterance)
    timings: dict[str, float] = {}
    spans: dict[str, tuple[float, float]] = {}

    query_prompt: str | None = None
    with _Stage(timings, spans, "query"):
        if mode == "identity_query":
            # The serialized context is the query itself, not a prompt.
            text = serialize_context(context, session.budget)
            query = Query(text=text, raw_generation=text)
        else:
            query_prompt = render_query_prompt(context, session.budget)
            generated = session.backend.generate(
                GenerationRequest(task="query", prompt=query_prompt)
            )
            query = Query.from_generation(generated.text)

    with _Stage(timings, spans, "retrieve"):
        if mode == "oracle_knowledge":
            gold_ids = tuple(gold_record_ids or ())
            known = set(session.kb.record_ids)
            missing = [rid for rid in gold_ids if rid not in known]
            if missing:
                raise ContractViolation(f"gold record ids not in kb: {missing}")
            retrieved = RetrievalResult(
                entries=tuple((rid, 1.0) for rid in gold_ids),
                query_echo=query.text or "",
            )
        elif query.is_null or len(session.kb) == 0:
            retrieved = RetrievalResult(entries=(), query_echo=query.text or "")
        else:
            retrieved = retrieve(session.index, query, n)

    with _Stage(timings, spans, "response"):
        records = records_of(session.kb, retrieved)
        response_prompt = render_response_prompt(records, context, session.budget)
        generated = session.backend.generate(
            GenerationRequest(task="response", prompt=response_prompt)
        )
        response = generated.text

    session.turns.append(DialogueTurn(USER, user_utterance))
    session.turns.append(DialogueTurn(SYSTEM, history_response or response))
    return TurnResult(
        query=query,
        retrieved=retrieved,
        response=response,
        timings=timings,
        spans=spans,
        query_prompt=query_prompt,
        response_prompt=response_prompt,
    )


class AnnotatedTurn(NamedTuple):
    """One user turn with its gold annotations (data module protocol)."""

    turn: int
    utterance: str
    gold_query: str | None
    gold_response: str
    gold_record_ids: tuple[str, ...] | None
    domain: str | None


def export_training_pairs(
    dialogue,
    kb: KnowledgeBase | None = None,
    n: int = DEFAULT_TOP_N,
    use_gold_records: bool = False,
    budget_tokens: int = 1024,
    index=None,
) -> tuple[list[dict], int]:
    """Two training pairs per annotated user turn: the query prompt with
    its gold query (or the null token), and the response prompt whose
    knowledge comes from retrieving the gold query (or, with
    use_gold_records, the turn's gold records). Turns lacking a gold
    query are skipped and counted."""
    kb = kb if kb is not None else dialogue.kb
    if index is None and len(kb) > 0:
        index = build_index(kb, "bm25")
    pairs: list[dict] = []
    skipped = 0
    history: list[DialogueTurn] = []
    for annotated in dialogue.iter_annotated_turns():
        context = DialogueContext(
            turns=tuple(history) + (DialogueTurn(USER, annotated.utterance),),
            session_id=dialogue.session_id,
        )
        history.append(DialogueTurn(USER, annotated.utterance))
        history.append(DialogueTurn(SYSTEM, annotated.gold_response))
        if annotated.gold_query is None:
            skipped += 1
            continue
        is_null = annotated.gold_query == NOTHING_TOKEN

        if is_null:
            records: list[KnowledgeRecord] = []
        elif use_gold_records:
            if annotated.gold_record_ids is None:
                skipped += 1
                continue
            records = [kb.get(rid) for rid in annotated.gold_record_ids]
        elif index is not None:
            result = retrieve(index, annotated.gold_query, n)
            records = records_of(kb, result)
        else:
            records = []

        pairs.append(
            {
                "task": "query",
                "prompt": render_query_prompt(context, budget_tokens),
                "target": annotated.gold_query,
                "session_id": dialogue.session_id,
                "turn": annotated.turn,
            }
        )
        pairs.append(
            {
                "task": "response",
                "prompt": render_response_prompt(records, context, budget_tokens),
                "target": annotated.gold_response,
                "session_id": dialogue.session_id,
                "turn": annotated.turn,
            }
        )
    return pairs, skipped


def replay_dialogue(
    dialogue,
    backend,
    mode: str = "qtod",
    n: int = DEFAULT_TOP_N,
    retriever: str = "bm25",
    retriever_config: dict | None = None,
    index=None,
) -> list[tuple[AnnotatedTurn, TurnResult]]:
    """Run every user turn of an annotated dialogue with gold responses
    kept as history (so each turn is conditioned exactly as at
    annotation time), returning per-turn results for evaluation."""
    session = Session(
        dialogue.kb,
        backend,
        session_id=dialogue.session_id,
        retriever=retriever,
        retriever_config=retriever_config,
        n=n,
        mode=mode,
        index=index,
    )
    out = []
    for annotated in dialogue.iter_annotated_turns():
        result = run_turn(
            session,
            annotated.utterance,
            mode=mode,
            n=n,
            gold_record_ids=annotated.gold_record_ids,
            history_response=annotated.gold_response,
        )
        out.append((annotated, result))
    return out
