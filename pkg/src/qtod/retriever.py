"""Top-n knowledge retrieval over linearized records.

Two interchangeable index kinds: Okapi BM25 with IDF floored at zero
(so tiny corpora never produce negative scores), and exhaustive dense
scoring against a pluggable embedding provider. Both rank with ties
broken by ascending record id; BM25 drops zero-scoring records.

Scoring accumulates per query token, with multiplicity, in query order,
so results are bit-identical to a per-document reference scorer.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import httpx

from .errors import BackendError, ContractViolation, TransportError
from .kb import KnowledgeBase, KnowledgeRecord, linearize_record

_TOKEN = re.compile(r"[a-z0-9]+")

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75


def tokenize(text: str) -> list[str]:
    """Lowercase word split on non-alphanumerics."""
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class CorpusStats:
    """Document frequencies and length statistics for one index build."""

    n_docs: int
    avgdl: float
    df: dict[str, int]


def bm25_score(
    query_tokens: Sequence[str],
    doc_tokens: Sequence[str],
    stats: CorpusStats,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> float:
    """Okapi BM25 of one document against a query, IDF floored at 0."""
    freqs = Counter(doc_tokens)
    dl = len(doc_tokens)
    score = 0.0
    for term in query_tokens:
        freq = freqs.get(term, 0)
        if freq == 0:
            continue
        df = stats.df.get(term, 0)
        idf = max(0.0, math.log((stats.n_docs - df + 0.5) / (df + 0.5)))
        if stats.avgdl == 0:
            continue
        denom = freq + k1 * (1.0 - b + b * dl / stats.avgdl)
        score += idf * freq * (k1 + 1.0) / denom
    return score


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked (record_id, score) entries for one query."""

    entries: tuple[tuple[str, float], ...]
    query_echo: str

    def __post_init__(self):
        ids = [rid for rid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ContractViolation(f"duplicate record ids in result: {ids}")
        scores = [score for _, score in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ContractViolation(f"scores must be non-increasing: {scores}")

    @property
    def record_ids(self) -> tuple[str, ...]:
        return tuple(rid for rid, _ in self.entries)


class EmbeddingProvider(Protocol):
    """Deterministic text-to-vector contract for dense retrieval."""

    dimension: int

    def embed(self, text: str) -> list[float]: ...


class HashingEmbedder:
    """Token-hash bag-of-words vectors; a deterministic stand-in provider
    so dense-path tests need no model."""

    def __init__(self, dimension: int = 32):
        if dimension < 1:
            raise ContractViolation("dimension must be positive")
        self.dimension = dimension

    def embed(self, text: str) -> list[float]:
        import hashlib

        vec = [0.0] * self.dimension
        for token in tokenize(text):
            digest = hashlib.sha1(token.encode("utf-8")).digest()
            vec[int.from_bytes(digest[:4], "big") % self.dimension] += 1.0
        return vec


class RemoteEmbeddingProvider:
    """Embedding provider backed by a wire service: POST /embed with
    {"texts": [...]} returns {"vectors": [[...]], "dim": int}."""

    def __init__(self, base_url: str, timeout: float = 30.0):
        self._client = httpx.Client(base_url=base_url, timeout=timeout)
        self.dimension = 0  # learned from the first response

    def embed_batch(self, texts: list[str]) -> list[list[float]]:
        try:
            response = self._client.post("/embed", json={"texts": texts})
        except httpx.HTTPError as exc:
            raise TransportError(f"embedding service unreachable: {exc}") from exc
        if response.status_code != 200:
            raise BackendError(
                f"embedding service returned {response.status_code}: {response.text[:200]}"
            )
        payload = response.json()
        vectors = payload["vectors"]
        self.dimension = int(payload["dim"])
        return [[float(x) for x in vec] for vec in vectors]

    def embed(self, text: str) -> list[float]:
        return self.embed_batch([text])[0]


def dense_score(
    query_vec: Sequence[float], doc_vec: Sequence[float], metric: str = "dot"
) -> float:
    """Inner product or cosine similarity; cosine against a zero vector
    is 0 by convention."""
    if len(query_vec) != len(doc_vec):
        raise ContractViolation(
            f"dimension mismatch: {len(query_vec)} vs {len(doc_vec)}"
        )
    dot = sum(q * d for q, d in zip(query_vec, doc_vec))
    if metric == "dot":
        return dot
    if metric == "cosine":
        qn = math.sqrt(sum(q * q for q in query_vec))
        dn = math.sqrt(sum(d * d for d in doc_vec))
        if qn == 0.0 or dn == 0.0:
            return 0.0
        return dot / (qn * dn)
    raise ContractViolation(f"unknown dense metric {metric!r}")


@dataclass
class Bm25Index:
    """Inverted index over one KnowledgeBase snapshot."""

    kind = "bm25"
    record_ids: tuple[str, ...]
    doc_tokens: tuple[tuple[str, ...], ...]
    stats: CorpusStats
    k1: float
    b: float
    postings: dict[str, tuple[int, ...]] = field(repr=False, default_factory=dict)

    def score(self, query_tokens: Sequence[str], doc_index: int) -> float:
        return bm25_score(
            query_tokens, self.doc_tokens[doc_index], self.stats, self.k1, self.b
        )

    def rank(self, query_text: str, n: int) -> list[tuple[str, float]]:
        query_tokens = tokenize(query_text)
        candidates = sorted(
            {i for t in set(query_tokens) for i in self.postings.get(t, ())}
        )
        scored = []
        for i in candidates:
            s = self.score(query_tokens, i)
            if s > 0.0:  # zero-scoring records are excluded
                scored.append((self.record_ids[i], s))
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return scored[:n]


@dataclass
class DenseIndex:
    """Exhaustive dense-scoring index; exact, no ANN structure (corpora in
    scope stay small)."""

    kind = "dense"
    record_ids: tuple[str, ...]
    vectors: tuple[tuple[float, ...], ...]
    provider: EmbeddingProvider
    metric: str = "dot"

    def rank(self, query_text: str, n: int) -> list[tuple[str, float]]:
        query_vec = self.provider.embed(query_text)
        scored = [
            (rid, dense_score(query_vec, vec, self.metric))
            for rid, vec in zip(self.record_ids, self.vectors)
        ]
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        return scored[:n]


RetrieverIndex = Bm25Index | DenseIndex


def build_index(
    kb: KnowledgeBase, kind: str = "bm25", config: dict | None = None
) -> RetrieverIndex:
    """Index every record's linearized text. Config keys: k1/b for bm25;
    provider (EmbeddingProvider, required) and metric for dense."""
    config = dict(config or {})
    texts = [linearize_record(record) for record in kb.records]
    if kind == "bm25":
        doc_tokens = tuple(tuple(tokenize(t)) for t in texts)
        n_docs = len(doc_tokens)
        avgdl = sum(len(d) for d in doc_tokens) / n_docs if n_docs else 0.0
        df: dict[str, int] = {}
        postings: dict[str, list[int]] = {}
        for i, toks in enumerate(doc_tokens):
            for term in set(toks):
                df[term] = df.get(term, 0) + 1
                postings.setdefault(term, []).append(i)
        return Bm25Index(
            record_ids=kb.record_ids,
            doc_tokens=doc_tokens,
            stats=CorpusStats(n_docs=n_docs, avgdl=avgdl, df=df),
            k1=float(config.get("k1", DEFAULT_K1)),
            b=float(config.get("b", DEFAULT_B)),
            postings={t: tuple(ix) for t, ix in postings.items()},
        )
    if kind == "dense":
        provider = config.get("provider")
        if provider is None:
            raise ContractViolation("dense index requires an embedding provider")
        vectors = tuple(tuple(provider.embed(t)) for t in texts)
        return DenseIndex(
            record_ids=kb.record_ids,
            vectors=vectors,
            provider=provider,
            metric=config.get("metric", "dot"),
        )
    raise ContractViolation(f"unknown index kind {kind!r}")


def retrieve(index: RetrieverIndex, query, n: int) -> RetrievalResult:
    """Rank the index against a query and keep the top n. Null queries are
    a caller bug: the pipeline short-circuits them before retrieval."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    query_text = query if isinstance(query, str) else getattr(query, "text", None)
    if query_text is None:
        raise ContractViolation("retrieve called with a null query")
    entries = tuple(index.rank(query_text, n))
    return RetrievalResult(entries=entries, query_echo=query_text)


def rerank(
    query,
    candidates: RetrievalResult,
    relevance_fn: Callable[[str, str], float],
    kb: KnowledgeBase,
) -> RetrievalResult:
    """Re-sort candidates by a [0,1] relevance score over (query text,
    linearized record); ties keep the original rank. Entries carry the
    relevance scores."""
    query_text = query if isinstance(query, str) else getattr(query, "text", None)
    if query_text is None:
        raise ContractViolation("rerank called with a null query")
    rescored = []
    for rank, (rid, _) in enumerate(candidates.entries):
        try:
            relevance = float(relevance_fn(query_text, linearize_record(kb.get(rid))))
        except BackendError as exc:
            # keep the subclass so transport failures stay exit-code 2
            raise type(exc)(
                f"relevance scoring failed on record {rid!r}: {exc}", stage=exc.stage
            ) from exc
        rescored.append((rid, relevance, rank))
    rescored.sort(key=lambda item: (-item[1], item[2]))
    return RetrievalResult(
        entries=tuple((rid, rel) for rid, rel, _ in rescored),
        query_echo=candidates.query_echo,
    )


def record_texts(kb: KnowledgeBase, result: RetrievalResult) -> list[str]:
    """Linearized texts of a result's records, in rank order."""
    return [linearize_record(kb.get(rid)) for rid in result.record_ids]


def records_of(kb: KnowledgeBase, result: RetrievalResult) -> list[KnowledgeRecord]:
    return [kb.get(rid) for rid in result.record_ids]
