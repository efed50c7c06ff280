import datetime as dt

import numpy as np
import pytest

from flowentropy import ingest, synth
from flowentropy.ingest import Bars
from flowentropy.session import SessionData, build_session


def bars_from(ts, close, volume) -> Bars:
    return Bars(np.asarray(ts, np.int64), np.asarray(close, float), np.asarray(volume, np.int64))


def sessions_from_market(market) -> list[SessionData]:
    out = []
    for d in market.days:
        kept, _ = ingest.filter_session(d.ticks, d.session)
        out.append(build_session(ingest.aggregate_bars(kept, d.session), d.session.date))
    return out


@pytest.fixture(scope="session")
def small_market():
    cfg = synth.SynthConfig(seed=11, n_days=2, session_s=3600)
    return synth.generate_market(cfg)


@pytest.fixture(scope="session")
def market36():
    """The default 36-day synthetic market (seed 7) and its sessions."""
    market = synth.generate_market(synth.SynthConfig())
    return market, sessions_from_market(market)


@pytest.fixture(scope="session")
def walkforward36(market36):
    from flowentropy import validate
    _, sessions = market36
    return validate.walk_forward(sessions)


@pytest.fixture
def day0():
    return dt.date(2025, 10, 1)


from hypothesis import settings as _settings

_settings.register_profile("repo", derandomize=True, deadline=None)
_settings.load_profile("repo")


# One PASS/FAIL line per acceptance criterion at the end of the run.

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.user_properties.append(("criterion", mark.args))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "setup" and report.outcome != "failed":
        return
    if report.when == "teardown" and report.outcome != "failed":
        return
    number, title = props["criterion"]
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    if report.outcome == "failed" or report.outcome == "skipped":
        entry["ok"] = False
    if report.when == "call" and "detail" in props:
        entry["details"].append(props["detail"])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        detail = "; ".join(e["details"])
        line = f"criterion {number} [{'PASS' if e['ok'] else 'FAIL'}] {e['title']}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
