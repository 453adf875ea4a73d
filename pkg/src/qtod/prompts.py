"""Prompt prefixes, the null-query token, and context serialization.

Both prompt prefixes are load-bearing string constants: exported training
data and inference must share them byte-for-byte, so everything that
renders or parses prompts goes through this module.
"""

from __future__ import annotations

import re

QUERY_PREFIX = "translate dialogue context to query:"
RESPONSE_PREFIX = "generate system response based on knowledge and dialogue context:"
NOTHING_TOKEN = "[NOTHING]"

USER = "user"
SYSTEM = "system"

_TURN_MARKER = re.compile(r"(?:(?<=^)|(?<= ))(user|system): ")


def serialize_turns(turns: list[tuple[str, str]]) -> str:
    """Render (speaker, text) pairs as 'user: ... system: ...' joined by
    single spaces."""
    return " ".join(f"{speaker}: {text}" for speaker, text in turns)


def parse_serialized_context(text: str) -> list[tuple[str, str]]:
    """Invert serialize_turns. Best-effort: utterances containing literal
    turn markers would split; the synthetic grammar never produces them."""
    markers = list(_TURN_MARKER.finditer(text))
    turns: list[tuple[str, str]] = []
    for i, m in enumerate(markers):
        end = markers[i + 1].start() if i + 1 < len(markers) else len(text)
        segment = text[m.end() : end]
        turns.append((m.group(1), segment.rstrip(" ")))
    return turns


def render_query_prompt_text(serialized_context: str) -> str:
    return f"{QUERY_PREFIX} {serialized_context}"


def render_response_prompt_text(knowledge_texts: list[str], serialized_context: str) -> str:
    knowledge = "; ".join(knowledge_texts) if knowledge_texts else NOTHING_TOKEN
    return f"{RESPONSE_PREFIX} knowledge: {knowledge} context: {serialized_context}"


def strip_query_prompt(prompt: str) -> str:
    """Recover the serialized context from a query prompt."""
    prefix = f"{QUERY_PREFIX} "
    if not prompt.startswith(prefix):
        raise ValueError(f"not a query prompt: {prompt[:60]!r}")
    return prompt[len(prefix):]


def split_response_prompt(prompt: str) -> tuple[list[str], str]:
    """Recover (knowledge texts, serialized context) from a response
    prompt. The null-knowledge marker maps back to an empty list."""
    prefix = f"{RESPONSE_PREFIX} knowledge: "
    if not prompt.startswith(prefix):
        raise ValueError(f"not a response prompt: {prompt[:60]!r}")
    body = prompt[len(prefix):]
    knowledge_part, sep, context_part = body.partition(" context: ")
    if not sep:
        raise ValueError("response prompt lacks a context segment")
    if knowledge_part == NOTHING_TOKEN:
        return [], context_part
    return knowledge_part.split("; "), context_part
