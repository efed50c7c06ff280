import datetime as dt

import numpy as np
import pytest

from flowentropy import ingest
from flowentropy.ingest import (NS_PER_S, SessionSpec, TickFormatError, Ticks, aggregate_bars,
                                filter_session, parse_ticks, write_ticks)

DAY = dt.date(2025, 10, 15)
SESSION = SessionSpec.regular(DAY)


def write(tmp_path, text, name="t.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_parse_single_line(tmp_path):
    p = write(tmp_path, "ts_ns,price,size\n1760000000123456789,671.2500,100\n")
    ticks, report = parse_ticks(p)
    assert list(ticks) == [ingest.TickRecord(1760000000123456789, 671.25, 100)]
    assert report.n_errors == 0


def test_parse_empty_file(tmp_path):
    ticks, report = parse_ticks(write(tmp_path, ""))
    assert len(ticks) == 0 and report.n_errors == 0


def test_parse_header_only(tmp_path):
    ticks, report = parse_ticks(write(tmp_path, "ts_ns,price,size\n"))
    assert len(ticks) == 0 and report.n_errors == 0


def test_missing_file_is_fatal(tmp_path):
    with pytest.raises(TickFormatError, match="cannot read"):
        parse_ticks(tmp_path / "nope.csv")


def test_bad_rows_reported_with_line_numbers(tmp_path):
    p = write(tmp_path, "ts_ns,price,size\n"
                        "1760000000000000000,100.00,10\n"
                        "1760000000100000000,-1.00,10\n"
                        "1760000000200000000,100.01,0\n"
                        "1760000000300000000,100.02,5\n")
    ticks, report = parse_ticks(p)
    assert len(ticks) == 2
    assert [e.line for e in report.errors] == [3, 4]
    assert report.n_rows == 4


def test_unparseable_row_reported(tmp_path):
    p = write(tmp_path, "ts_ns,price,size\n1760000000000000000,abc,10\n1760000000000000001,1.5,2\n")
    ticks, report = parse_ticks(p)
    assert len(ticks) == 1 and report.errors[0].line == 2


def test_timestamp_regression_beyond_one_second_is_fatal(tmp_path):
    p = write(tmp_path, "ts_ns,price,size\n1760000002000000000,1,1\n1760000000500000000,1,1\n")
    with pytest.raises(TickFormatError):
        parse_ticks(p)


def test_small_regression_tolerated(tmp_path):
    p = write(tmp_path, "ts_ns,price,size\n1760000001000000000,1,1\n1760000000500000000,1,1\n")
    ticks, _ = parse_ticks(p)
    assert len(ticks) == 2


def test_unknown_format_rejected(tmp_path):
    with pytest.raises(ValueError):
        parse_ticks(write(tmp_path, ""), fmt="parquet")


def test_round_trip_million_ticks(tmp_path):
    from flowentropy import synth
    cfg = synth.SynthConfig(seed=3, n_days=1, base_tick_rate=42.0)
    day, _ = synth.generate_day(cfg, 0)
    assert len(day.ticks) >= 1_000_000
    p = write_ticks(tmp_path / "ticks.csv", day.ticks)
    back, report = parse_ticks(p)
    assert report.n_errors == 0
    np.testing.assert_array_equal(back.ts_ns, day.ticks.ts_ns)
    np.testing.assert_array_equal(back.price, day.ticks.price)
    np.testing.assert_array_equal(back.size, day.ticks.size)


def test_provenance_line_is_skipped(tmp_path):
    t = Ticks(np.array([1760000000000000000]), np.array([1.25]), np.array([3]))
    p = write_ticks(tmp_path / "x.csv", t, {"seed": 1})
    assert p.read_text().startswith("# provenance: ")
    back, _ = parse_ticks(p)
    assert list(back) == list(t)


def _tick_at(h, m, s, ns=0, price=100.0, size=1):
    ts = int(dt.datetime(2025, 10, 15, h, m, s, tzinfo=ingest.NEW_YORK).timestamp()) * NS_PER_S + ns
    return ingest.TickRecord(ts, price, size)


def test_filter_session_boundaries():
    ticks = Ticks.from_records([_tick_at(9, 29, 59, 999_000_000), _tick_at(9, 30, 0),
                                _tick_at(15, 59, 59, 999_999_999), _tick_at(16, 0, 0)])
    kept, dropped = filter_session(ticks, SESSION)
    assert len(kept) == 2 and dropped == 2
    assert kept.ts_ns[0] == SESSION.open_s * NS_PER_S


def test_session_spec_validation():
    with pytest.raises(ValueError):
        SessionSpec(DAY, 10, 10)
    with pytest.raises(ValueError):
        SessionSpec(DAY, 0, 23_401)
    assert SESSION.length_s == 23_400


def test_aggregate_example():
    base = 10 * NS_PER_S
    ticks = Ticks.from_records([(base + 100_000_000, 100.00, 10), (base + 700_000_000, 100.02, 20),
                                (base + 900_000_000, 100.01, 30), (12 * NS_PER_S, 100.5, 7)])
    bars = aggregate_bars(ticks)
    assert list(bars) == [ingest.SecondBar(10, 100.01, 60), ingest.SecondBar(12, 100.5, 7)]


def test_aggregate_tie_goes_to_last_in_file():
    ticks = Ticks.from_records([(5 * NS_PER_S, 1.0, 1), (5 * NS_PER_S, 2.0, 1)])
    assert aggregate_bars(ticks).close[0] == 2.0


def test_aggregate_rejects_out_of_session():
    ticks = Ticks.from_records([_tick_at(9, 0, 0)])
    with pytest.raises(ValueError):
        aggregate_bars(ticks, SESSION)


def test_aggregate_idempotent_on_single_tick_seconds():
    bars = aggregate_bars(Ticks.from_records([(s * NS_PER_S, 1.0 + s, s + 1) for s in (3, 4, 9)]))
    again = aggregate_bars(Ticks(bars.ts_s * NS_PER_S, bars.close, bars.volume))
    assert list(again) == list(bars)


def test_synthetic_session_counts_and_conservation(small_market):
    for d in small_market.days:
        kept, dropped = filter_session(d.ticks, d.session)
        assert len(kept) == d.n_in_session
        assert dropped == d.n_pre + d.n_post
        bars = aggregate_bars(kept, d.session)
        assert bars.volume.sum() == kept.size.sum()
        assert len(bars) <= d.session.length_s
        assert np.all(np.diff(bars.ts_s) > 0)
        assert bars.ts_s[0] >= d.session.open_s and bars.ts_s[-1] < d.session.close_s


def test_bars_round_trip(tmp_path, small_market):
    d = small_market.days[0]
    kept, _ = filter_session(d.ticks, d.session)
    bars = aggregate_bars(kept, d.session)
    back = ingest.read_bars(ingest.write_bars(tmp_path / "b.csv", bars, {"x": 1}))
    assert list(back) == list(bars)


def test_load_session(tmp_path, small_market):
    d = small_market.days[0]
    p = write_ticks(tmp_path / "t.csv", d.ticks)
    bars, stats = ingest.load_session(p, d.session)
    assert stats["kept"] == d.n_in_session and stats["row_errors"] == 0
    assert stats["bars"] == len(bars)
