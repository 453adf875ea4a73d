"""Generation backends behind one contract.

The pipeline only ever sees GenerationRequest -> GenerationResponse plus
a relevance call, so neural decoding stays out of process: the remote
backend speaks the wire protocol, while the scripted and rule backends
make tests and desk-scale runs fully deterministic with no model.

The rule backend understands a small utterance grammar:

    find a/an {price} {category...} {noun} in the {area}
    how about a/an {category...} {noun}?      (category revision)
    how about (in) the {area}?                (area revision)
    how about a/an {price} one?               (price revision)

Later values win per slot; a greeting/thanks final utterance yields the
null-query token; anything else falls back to the last user utterance
verbatim. Responses list the name slot of retrieved records that satisfy
every constraint of the derived query.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass, field

import httpx

from .errors import BackendError, ContractViolation, ServerError, TransportError
from .prompts import (
    NOTHING_TOKEN,
    parse_serialized_context,
    split_response_prompt,
    strip_query_prompt,
)

TASKS = ("query", "response", "relevance")

MATCHED = "MATCHED"
MISMATCHED = "MISMATCHED"

DEFAULT_INPUT_BUDGET = 1024


@dataclass(frozen=True)
class GenerationRequest:
    task: str
    prompt: str
    max_output_tokens: int = 128
    beam_size: int = 4

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractViolation(f"unknown task {self.task!r}")
        if not self.prompt:
            raise ContractViolation("prompt must be non-empty")
        if self.max_output_tokens < 1:
            raise ContractViolation("max_output_tokens must be positive")
        if self.beam_size < 1:
            raise ContractViolation("beam_size must be >= 1")


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    backend_id: str
    latency_ms: float = 0.0


def label_to_score(label: str) -> float:
    if label == MATCHED:
        return 1.0
    if label == MISMATCHED:
        return 0.0
    raise BackendError(f"unknown relevance label {label!r}")


class ScriptedBackend:
    """Fixture lookup: registered prompt -> text, (query, record) -> label."""

    backend_id = "scripted"
    input_budget = DEFAULT_INPUT_BUDGET

    def __init__(
        self,
        outputs: dict[str, str] | None = None,
        relevance_labels: dict[tuple[str, str], str] | None = None,
    ):
        self.outputs = dict(outputs or {})
        self.relevance_labels = dict(relevance_labels or {})

    def register(self, prompt: str, text: str) -> None:
        self.outputs[prompt] = text

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        start = time.perf_counter()
        try:
            text = self.outputs[request.prompt]
        except KeyError:
            raise BackendError(
                f"no scripted output registered for prompt {request.prompt[:80]!r}"
            ) from None
        latency = (time.perf_counter() - start) * 1000.0
        return GenerationResponse(text=text, backend_id=self.backend_id, latency_ms=latency)

    def relevance(self, query_text: str, record_text: str) -> tuple[str, float]:
        try:
            label = self.relevance_labels[(query_text, record_text)]
        except KeyError:
            raise BackendError(
                f"no scripted relevance label for ({query_text!r}, {record_text!r})"
            ) from None
        return label, label_to_score(label)


_FIND_RE = re.compile(r"^find (?:a|an) (.+) in the ([a-z0-9]+)$")
_PRICE_REV_RE = re.compile(r"^how about (?:a|an) ([a-z0-9]+) one$")
_AREA_REV_RE = re.compile(r"^how about (?:in )?the ([a-z0-9]+)$")
_CATEGORY_REV_RE = re.compile(r"^how about (?:a|an) (.+)$")

_GREETING_WORDS = frozenset(
    "hi hello hey thanks thank you bye goodbye ok okay great".split()
)


def _normalize_utterance(text: str) -> str:
    return re.sub(r"[?!.,]+$", "", text.lower().strip()).strip()


def _is_greeting(text: str) -> bool:
    tokens = _normalize_utterance(text).split()
    return bool(tokens) and all(t in _GREETING_WORDS for t in tokens)


def _apply_utterance(slots: dict[str, str], text: str) -> bool:
    """Update the slot state from one in-grammar utterance; False when the
    utterance is outside the grammar."""
    u = _normalize_utterance(text)
    m = _FIND_RE.match(u)
    if m:
        middle = m.group(1).split()
        if len(middle) < 3:
            return False
        slots["price"] = middle[0]
        slots["category"] = " ".join(middle[1:-1])
        slots["noun"] = middle[-1]
        slots["area"] = m.group(2)
        return True
    m = _PRICE_REV_RE.match(u)
    if m:
        slots["price"] = m.group(1)
        return True
    m = _AREA_REV_RE.match(u)
    if m:
        slots["area"] = m.group(1)
        return True
    m = _CATEGORY_REV_RE.match(u)
    if m:
        middle = m.group(1).split()
        if len(middle) < 2:
            return False
        slots["category"] = " ".join(middle[:-1])
        slots["noun"] = middle[-1]
        return True
    return False


def _article(word: str) -> str:
    return "an" if word[:1] in "aeiou" else "a"


def rule_query(turns: list[tuple[str, str]]) -> str:
    """Derive the current query from a dialogue: latest value per slot
    wins. Greeting/thanks final utterances need no retrieval; utterances
    outside the grammar pass through verbatim."""
    user_texts = [text for speaker, text in turns if speaker == "user"]
    if not user_texts:
        return NOTHING_TOKEN
    if _is_greeting(user_texts[-1]):
        return NOTHING_TOKEN
    slots: dict[str, str] = {}
    parsed_last = False
    for text in user_texts:
        parsed_last = _apply_utterance(slots, text)
    if not parsed_last:
        return user_texts[-1]
    if not all(k in slots for k in ("price", "category", "noun", "area")):
        return user_texts[-1]
    return (
        f"find {_article(slots['price'])} {slots['price']} {slots['category']} "
        f"{slots['noun']} in the {slots['area']}"
    )


def _query_constraints(query: str) -> tuple[str, str, str] | None:
    """(price, category, area) from a canonical rule query, or None."""
    m = _FIND_RE.match(query)
    if not m:
        return None
    middle = m.group(1).split()
    if len(middle) < 3:
        return None
    return middle[0], " ".join(middle[1:-1]), m.group(2)


def rule_response(record_values: list[tuple[str, ...]], turns: list[tuple[str, str]]) -> str:
    """List the name (first) value of retrieved records satisfying every
    constraint of the derived query, in rank order."""
    query = rule_query(turns)
    constraints = _query_constraints(query)
    names = []
    for values in record_values:
        if not values:
            continue
        if constraints is not None:
            price, category, area = constraints
            if price not in values or category not in values or area not in values:
                continue
        names.append(values[0])
    if not names:
        return "no matching options"
    return f"there are {len(names)} options: " + " and ".join(names)


class RuleBackend:
    """Deterministic toy generator over the utterance grammar, parsing its
    inputs straight from the prompt text."""

    backend_id = "rule"
    input_budget = DEFAULT_INPUT_BUDGET

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        start = time.perf_counter()
        if request.task == "query":
            turns = parse_serialized_context(strip_query_prompt(request.prompt))
            text = rule_query(turns)
        elif request.task == "response":
            knowledge_texts, context = split_response_prompt(request.prompt)
            turns = parse_serialized_context(context)
            values = [tuple(k.split(", ")) for k in knowledge_texts]
            text = rule_response(values, turns)
        else:
            raise ContractViolation("rule backend serves query/response tasks only")
        latency = (time.perf_counter() - start) * 1000.0
        return GenerationResponse(text=text, backend_id=self.backend_id, latency_ms=latency)

    def relevance(self, query_text: str, record_text: str) -> tuple[str, float]:
        """A record matches when every query constraint appears among its
        values; out-of-grammar queries match nothing."""
        constraints = _query_constraints(_normalize_utterance(query_text))
        values = tuple(record_text.split(", "))
        if constraints is None:
            return MISMATCHED, 0.0
        price, category, area = constraints
        if price in values and category in values and area in values:
            return MATCHED, 1.0
        return MISMATCHED, 0.0


class RemoteBackend:
    """Wire-protocol client. Transport failures are retried (bounded);
    server-reported errors are surfaced immediately."""

    input_budget = DEFAULT_INPUT_BUDGET

    def __init__(self, base_url: str, timeout: float = 60.0, max_retries: int = 2):
        self.base_url = base_url.rstrip("/")
        self.backend_id = f"remote:{self.base_url}"
        self.max_retries = max_retries
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout)

    def _post(self, path: str, payload: dict) -> dict:
        last_exc: Exception | None = None
        for _ in range(self.max_retries + 1):
            try:
                response = self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                last_exc = exc
                continue
            if response.status_code != 200:
                detail = ""
                try:
                    detail = response.json().get("error", "")
                except ValueError:
                    detail = response.text[:200]
                raise ServerError(
                    f"{path} returned {response.status_code}: {detail}"
                )
            try:
                return response.json()
            except ValueError as exc:
                raise ServerError(f"{path} returned non-JSON body") from exc
        raise TransportError(f"{self.base_url}{path} unreachable: {last_exc}")

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        start = time.perf_counter()
        payload = {
            "task": request.task,
            "prompt": request.prompt,
            "max_output_tokens": request.max_output_tokens,
            "beam_size": request.beam_size,
        }
        body = self._post("/generate", payload)
        if "text" not in body or not isinstance(body["text"], str):
            raise ServerError("/generate response missing string 'text'")
        latency = (time.perf_counter() - start) * 1000.0
        return GenerationResponse(
            text=body["text"], backend_id=self.backend_id, latency_ms=latency
        )

    def relevance(self, query_text: str, record_text: str) -> tuple[str, float]:
        body = self._post("/relevance", {"query": query_text, "record": record_text})
        label = body.get("label")
        if label not in (MATCHED, MISMATCHED):
            raise ServerError(f"/relevance returned unknown label {label!r}")
        return label, float(body.get("score", label_to_score(label)))


def make_backend(
    kind: str, url: str | None = None, scripted: ScriptedBackend | None = None
):
    """Resolve a backend spec: scripted | rule | remote (remote needs a URL)."""
    if kind == "scripted":
        return scripted or ScriptedBackend()
    if kind == "rule":
        return RuleBackend()
    if kind == "remote":
        if not url:
            raise ContractViolation("remote backend requires a URL")
        return RemoteBackend(url)
    raise ContractViolation(f"unknown backend kind {kind!r}")


def relevance_fn(backend) -> "callable":
    """Adapt a backend's relevance call to the retriever's rerank contract."""

    def fn(query_text: str, record_text: str) -> float:
        _, score = backend.relevance(query_text, record_text)
        return score

    return fn
