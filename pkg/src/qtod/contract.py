"""Wire-contract checks for generation servers.

Any server claiming to speak the generation protocol (POST /generate,
/relevance, /embed; errors as an HTTP status plus {"error": str}) can be
validated with run_contract_checks. The model-serving component's test
suite runs these same checks, so protocol drift fails on both sides.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import httpx

from .backends import MATCHED, MISMATCHED
from .errors import TransportError
from .prompts import QUERY_PREFIX


class CheckResult(NamedTuple):
    name: str
    ok: bool
    detail: str


DEFAULT_PROMPT = f"{QUERY_PREFIX} user: hi"


def _post(client: httpx.Client, path: str, payload) -> httpx.Response:
    try:
        return client.post(path, json=payload)
    except httpx.HTTPError as exc:
        raise TransportError(f"{path} unreachable: {exc}") from exc


def check_generate_schema(client: httpx.Client, prompt: str) -> CheckResult:
    body = {"task": "query", "prompt": prompt, "max_output_tokens": 32, "beam_size": 1}
    response = _post(client, "/generate", body)
    if response.status_code != 200:
        return CheckResult("generate_schema", False, f"status {response.status_code}")
    payload = response.json()
    if not isinstance(payload.get("text"), str) or not payload["text"]:
        return CheckResult("generate_schema", False, f"bad body {payload!r}")
    return CheckResult("generate_schema", True, f"text={payload['text'][:40]!r}")


def check_beam1_determinism(client: httpx.Client, prompt: str) -> CheckResult:
    body = {"task": "query", "prompt": prompt, "max_output_tokens": 32, "beam_size": 1}
    first = _post(client, "/generate", body)
    second = _post(client, "/generate", body)
    if first.status_code != 200 or second.status_code != 200:
        return CheckResult("beam1_determinism", False, "non-200 status")
    a, b = first.json().get("text"), second.json().get("text")
    if a != b:
        return CheckResult("beam1_determinism", False, f"{a!r} != {b!r}")
    return CheckResult("beam1_determinism", True, "identical outputs")


def check_beam4_valid(client: httpx.Client, prompt: str) -> CheckResult:
    body = {"task": "query", "prompt": prompt, "max_output_tokens": 32, "beam_size": 4}
    response = _post(client, "/generate", body)
    if response.status_code != 200:
        return CheckResult("beam4_valid", False, f"status {response.status_code}")
    text = response.json().get("text")
    if not isinstance(text, str):
        return CheckResult("beam4_valid", False, f"bad text {text!r}")
    return CheckResult("beam4_valid", True, f"text={text[:40]!r}")


def check_malformed_request(client: httpx.Client, prompt: str) -> CheckResult:
    response = _post(client, "/generate", {"task": 123, "beam_size": "wide"})
    if not 400 <= response.status_code < 500:
        return CheckResult(
            "malformed_request", False, f"expected 4xx, got {response.status_code}"
        )
    try:
        payload = response.json()
    except ValueError:
        return CheckResult("malformed_request", False, "non-JSON error body")
    if not isinstance(payload.get("error"), str):
        return CheckResult("malformed_request", False, f"no 'error' field: {payload!r}")
    return CheckResult("malformed_request", True, f"status {response.status_code}")


def check_relevance_schema(client: httpx.Client, prompt: str) -> CheckResult:
    body = {"query": "find a cheap place", "record": "a cheap place, north"}
    response = _post(client, "/relevance", body)
    if response.status_code != 200:
        return CheckResult("relevance_schema", False, f"status {response.status_code}")
    payload = response.json()
    label, score = payload.get("label"), payload.get("score")
    if label not in (MATCHED, MISMATCHED):
        return CheckResult("relevance_schema", False, f"bad label {label!r}")
    if not isinstance(score, (int, float)) or not 0.0 <= float(score) <= 1.0:
        return CheckResult("relevance_schema", False, f"bad score {score!r}")
    return CheckResult("relevance_schema", True, f"label={label} score={score}")


def check_embed_schema(client: httpx.Client, prompt: str) -> CheckResult:
    response = _post(client, "/embed", {"texts": ["hello there", "general query"]})
    if response.status_code != 200:
        return CheckResult("embed_schema", False, f"status {response.status_code}")
    payload = response.json()
    vectors, dim = payload.get("vectors"), payload.get("dim")
    if not isinstance(vectors, list) or len(vectors) != 2:
        return CheckResult("embed_schema", False, f"bad vectors {type(vectors)}")
    if not isinstance(dim, int) or any(len(v) != dim for v in vectors):
        return CheckResult("embed_schema", False, f"dim {dim!r} inconsistent")
    if not all(isinstance(x, (int, float)) for v in vectors for x in v):
        return CheckResult("embed_schema", False, "non-numeric vector entries")
    return CheckResult("embed_schema", True, f"dim={dim}")


ALL_CHECKS: tuple[Callable[[httpx.Client, str], CheckResult], ...] = (
    check_generate_schema,
    check_beam1_determinism,
    check_beam4_valid,
    check_malformed_request,
    check_relevance_schema,
    check_embed_schema,
)


def run_contract_checks(
    base_url: str,
    prompt: str = DEFAULT_PROMPT,
    checks: tuple = ALL_CHECKS,
    timeout: float = 30.0,
    client: httpx.Client | None = None,
) -> list[CheckResult]:
    """Run every check against a live server; transport failures raise."""
    own_client = client is None
    client = client or httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout)
    try:
        return [check(client, prompt) for check in checks]
    finally:
        if own_client:
            client.close()
