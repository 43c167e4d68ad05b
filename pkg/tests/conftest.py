import numpy as np
import pytest

from rollgcn.dataio import Event, ItemMeta, from_events

_criteria: dict[int, str] = {}
_outcomes: dict[int, list[bool]] = {}
_by_node: dict[str, int] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            n, title = m.args
            _criteria[n] = title
            _by_node[item.nodeid] = n


def pytest_runtest_logreport(report):
    n = _by_node.get(report.nodeid)
    if n is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        res = _outcomes.get(n)
        status = "NOT RUN" if not res else ("PASS" if all(res) else "FAIL")
        terminalreporter.write_line(f"criterion {n:2d}: {status:7s} {_criteria[n]}")


def random_events(rng, n_users=8, n_items=12, n_days=15, n_events=120):
    return [Event(f"u{rng.integers(n_users):02d}", f"i{rng.integers(n_items):02d}", int(rng.integers(n_days)))
            for _ in range(n_events)]


def random_dataset(seed, n_users=8, n_items=12, n_days=15, n_events=120, lifetimes=False):
    """Small random dataset; with ``lifetimes`` items get explicit, partly short availability."""
    rng = np.random.default_rng(seed)
    events = random_events(rng, n_users, n_items, n_days, n_events)
    meta = []
    if lifetimes:
        items = sorted({e.item_id for e in events})
        first = {k: min(e.day for e in events if e.item_id == k) for k in items}
        last = {k: max(e.day for e in events if e.item_id == k) for k in items}
        cats = ["A", "B", "C", ""]
        for k in items:
            labels = [cats[rng.integers(4)] for _ in range(7)]
            meta.append(ItemMeta(k, *labels, first[k], last[k] + int(rng.integers(0, 3))))
    return from_events(events, meta)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
