import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from qtod.backends import RuleBackend
from qtod.kb import KnowledgeBase, KnowledgeRecord

settings.register_profile(
    "ci", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("ci")

ACCEPTANCE_VERDICTS: list[str] = []


def record_verdict(name: str, ok: bool, detail: str) -> None:
    """Collect one criterion verdict for the end-of-run summary.

    The immediate echo goes to the unbuffered original stderr so it also
    shows up live under `pytest -s`; the summary hook below is what makes
    the verdicts part of the normal (captured) run log.
    """
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_VERDICTS.append(line)
    sys.__stderr__.write("\n" + line + "\n")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.line(line)


def hotel(rid, name, area, price, stars):
    return KnowledgeRecord(
        rid, "hotel",
        (("name", name), ("area", area), ("price", price), ("stars", stars)),
    )


@pytest.fixture(scope="session")
def hotel_kb():
    """Three hotels; two match a moderate 2-star query's tokens."""
    return KnowledgeBase(
        (
            hotel("r_ashley", "ashley hotel", "north", "moderate", "2 star"),
            hotel("r_lovell", "lovell lodge", "north", "moderate", "2 star"),
            hotel("r_aandb", "a and b guest house", "east", "moderate", "4 star"),
        ),
        scope="session",
    )


@pytest.fixture(scope="session")
def restaurant_kb():
    return KnowledgeBase(
        (
            KnowledgeRecord(
                "r1", "restaurant",
                (("name", "peking house"), ("category", "chinese"),
                 ("price", "cheap"), ("area", "north")),
            ),
            KnowledgeRecord(
                "r2", "restaurant",
                (("name", "golden fork"), ("category", "italian"),
                 ("price", "expensive"), ("area", "centre")),
            ),
            KnowledgeRecord(
                "r3", "restaurant",
                (("name", "blue lagoon"), ("category", "seafood"),
                 ("price", "moderate"), ("area", "south")),
            ),
        ),
        scope="session",
    )


@pytest.fixture(scope="session")
def rule_backend():
    return RuleBackend()
