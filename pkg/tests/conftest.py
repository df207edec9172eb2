import random

import pytest
from hypothesis import HealthCheck, settings, strategies as st

from attackcast.graph import AttackGraph, EntityAttr, EventType, random_graph

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def graphs(draw, min_nodes=1, max_nodes=12, max_extra=6):
    n = draw(st.integers(min_nodes, max_nodes))
    extra = draw(st.integers(0, max_extra))
    seed = draw(st.integers(0, 2**31 - 1))
    return random_graph(random.Random(seed), n, extra)


def make(events, attrs, **kw) -> AttackGraph:
    """Shorthand: events as (src, dst, event-name), attrs as id -> attr name."""
    return AttackGraph.from_events({k: EntityAttr(v) for k, v in attrs.items()},
                                   [(s, d, EventType(e)) for s, d, e in events], **kw)


@pytest.fixture(scope="session")
def templates():
    from attackcast.templates import load_templates
    return load_templates()


ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
