import json

import pytest

from nearline.model import ItemRef, RankLogEvent, ScenarioConfig, TruncatedVisit, VisitItem


def make_event(event_id, user="u1", scenario="s1", t=0, items=3, category="c0"):
    """``items`` is a count (ids i0.. with falling scores) or a list of item ids."""
    if isinstance(items, int):
        items = [f"i{j}" for j in range(items)]
    refs = tuple(ItemRef(i, category, 1.0 - j / 1000) for j, i in enumerate(items))
    return RankLogEvent(event_id, user, scenario, t, refs)


def event_line(event_id, user="u1", scenario="s1", t=0, items=3, **extra):
    if isinstance(items, int):
        items = [{"item_id": f"i{j}", "category_id": "c0", "score": 1.0 - j / 1000} for j in range(items)]
    return json.dumps({"event_id": event_id, "user_id": user, "scenario_id": scenario,
                       "access_time": t, "items": items, **extra})


def make_visit(seq, item_ids, t=0, categories=None):
    categories = categories or ["c0"] * len(item_ids)
    items = tuple(VisitItem(i, c, r) for r, (i, c) in enumerate(zip(item_ids, categories)))
    return TruncatedVisit(t, seq, items, f"e{seq}")


@pytest.fixture
def configs():
    return {
        "s1": ScenarioConfig("s1", truncation=3, queue_capacity=2, k=10, category_cap=10),
        "s2": ScenarioConfig("s2", truncation=5, queue_capacity=4, k=10, category_cap=10),
    }


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
