"""Command-line entry point.

Subcommands: synth, ingest, entropy, signal, backtest, walkforward,
validate, report. Exit codes: 0 success, 2 input error, 3 protocol or
insufficient-data error, 4 numerical flag (unconverged stationary
distribution, degenerate placebo null).
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import json
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from ._csvio import read_frame, read_provenance, write_frame
from .backtest import ExitRule, ProtocolError, run_backtest, write_trades
from .config import CONFIG_ENV, ConfigError, RunConfig, load_config
from .ingest import SessionSpec, TickFormatError, load_session, read_bars, write_bars
from .markov import entropy_series, read_entropy, write_entropy
from .session import SessionData
from .signal import (SIGNAL_COLUMNS, InsufficientDataError, SignalEvent, Thresholds, calibrate,
                     generate_signals, write_signals)
from .synth import generate_market, write_market
from . import validate as V

log = logging.getLogger("flowentropy")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PROTOCOL = 3
EXIT_NUMERICAL = 4

_DATED = re.compile(r"^(ticks|bars|entropy)_(\d{4}-\d{2}-\d{2})\.csv$")


class InputError(Exception):
    pass


# ---------------------------------------------------------------- loading

def _dated_files(directory: Path, kind: str) -> dict[dt.date, Path]:
    out = {}
    for p in sorted(directory.glob(f"{kind}_*.csv")):
        m = _DATED.match(p.name)
        if m:
            out[dt.date.fromisoformat(m.group(2))] = p
    return out


def _session_specs(directory: Path) -> dict[dt.date, SessionSpec]:
    meta = directory / "sessions.json"
    if not meta.is_file():
        return {}
    doc = json.loads(meta.read_text(encoding="utf-8"))
    out = {}
    for s in doc.get("sessions", []):
        d = dt.date.fromisoformat(s["date"])
        out[d] = SessionSpec(d, int(s["open_s"]), int(s["close_s"]))
    return out


def _require_dir(path: Path) -> Path:
    if not path.is_dir():
        raise InputError(f"input directory not found: {path}")
    return path


def _ingest_one(args):
    path, spec = args
    return load_session(path, spec)


def load_bars(data: Path, workers: int = 1) -> tuple[dict[dt.date, object], dict]:
    """Bars per date from ``bars_*.csv`` if present, else from ``ticks_*.csv``."""
    _require_dir(data)
    bar_files = _dated_files(data, "bars")
    if bar_files:
        return {d: read_bars(p) for d, p in bar_files.items()}, {}
    tick_files = _dated_files(data, "ticks")
    if not tick_files:
        raise InputError(f"no bars_*.csv or ticks_*.csv files in {data}")
    specs = _session_specs(data)
    jobs = [(p, specs.get(d) or SessionSpec.regular(d)) for d, p in tick_files.items()]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_ingest_one, jobs))
    else:
        done = [_ingest_one(j) for j in jobs]
    dates = list(tick_files)
    return {d: b for d, (b, _) in zip(dates, done)}, {d.isoformat(): s for d, (_, s) in zip(dates, done)}


def _entropy_one(args):
    bars, window_s, min_transitions = args
    return entropy_series(bars, window_s, min_transitions)


def load_sessions(data: Path, cfg: RunConfig, workers: int = 1,
                  entropy_dir: Path | None = None) -> tuple[list[SessionData], int]:
    """Sessions with entropy, plus the count of unconverged entropy points.

    Entropy CSVs are reused when their recorded entropy settings match the
    current config; otherwise entropy is recomputed from the bars.
    """
    bars, _ = load_bars(data, workers)
    cached = _dated_files(entropy_dir or data, "entropy")
    want = dataclasses.asdict(cfg.entropy)
    series, todo = {}, []
    for d, b in bars.items():
        p = cached.get(d)
        prov = read_provenance(p) if p else None
        if prov and prov.get("config", {}).get("entropy") == want:
            series[d] = read_entropy(p)
        else:
            todo.append(d)
    args = [(bars[d], cfg.entropy.window_s, cfg.entropy.min_transitions) for d in todo]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(workers) as pool:
            computed = list(pool.map(_entropy_one, args))
    else:
        computed = [_entropy_one(a) for a in args]
    series.update(zip(todo, computed))
    sessions = [SessionData(d, bars[d], series[d]) for d in sorted(bars)]
    unconverged = sum(series[d].n_unconverged for d in todo)
    return sessions, int(unconverged)


def _date_range(text: str) -> tuple[dt.date, dt.date]:
    try:
        a, b = text.split(":")
        lo, hi = dt.date.fromisoformat(a), dt.date.fromisoformat(b)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected START:END dates, got {text!r}") from exc
    if hi < lo:
        raise argparse.ArgumentTypeError(f"range end precedes start in {text!r}")
    return lo, hi


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(V.dumps(obj) + "\n", encoding="utf-8")
    return path


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> int:
    cfg = cfg.override("synth", n_days=args.days, seed=args.seed)
    market = generate_market(cfg.synth)
    paths = write_market(market, args.out, cfg.provenance(command="synth"))
    log.info("wrote %d tick files and %d bursts to %s", len(paths), len(market.bursts), args.out)
    return EXIT_OK


def cmd_ingest(args, cfg: RunConfig) -> int:
    data = _require_dir(Path(args.data))
    ticks = _dated_files(data, "ticks")
    if not ticks:
        raise InputError(f"no ticks_*.csv files in {data}")
    specs = _session_specs(data)
    jobs = [(p, specs.get(d) or SessionSpec.regular(d)) for d, p in ticks.items()]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            done = list(pool.map(_ingest_one, jobs))
    else:
        done = [_ingest_one(j) for j in jobs]
    out = Path(args.out)
    prov = cfg.provenance(command="ingest")
    stats = {}
    for d, (bars, st) in zip(ticks, done):
        write_bars(out / f"bars_{d.isoformat()}.csv", bars, prov)
        stats[d.isoformat()] = st
    _write_json(out / "ingest_summary.json", {"provenance": prov, "sessions": stats})
    errors = sum(st["row_errors"] for st in stats.values())
    if errors:
        log.warning("%d malformed tick rows were skipped (see ingest_summary.json)", errors)
    return EXIT_OK


def cmd_entropy(args, cfg: RunConfig) -> int:
    data = Path(args.data)
    bars, _ = load_bars(data, args.workers)
    dates = sorted(bars)
    jobs = [(bars[d], cfg.entropy.window_s, cfg.entropy.min_transitions) for d in dates]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            series = list(pool.map(_entropy_one, jobs))
    else:
        series = [_entropy_one(j) for j in jobs]
    out = Path(args.out)
    prov = cfg.provenance(command="entropy")
    summary = {}
    unconverged = 0
    for d, s in zip(dates, series):
        write_entropy(out / f"entropy_{d.isoformat()}.csv", s, prov)
        h = s.h[s.defined]
        summary[d.isoformat()] = {
            "points": len(s), "defined": int(s.defined.sum()),
            "fraction_defined": float(s.defined.mean()) if len(s) else None,
            "percentiles": {str(q): float(np.percentile(h, q)) for q in (5, 20, 50, 80, 95)} if len(h) else None,
            "unconverged": s.n_unconverged}
        unconverged += s.n_unconverged
    _write_json(out / "entropy_summary.json", {"provenance": prov, "sessions": summary})
    if unconverged:
        log.error("%d entropy points used an unconverged stationary distribution", unconverged)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_signal(args, cfg: RunConfig) -> int:
    sessions, unconverged = load_sessions(Path(args.data), cfg, args.workers)
    train = [s for s in sessions if args.train[0] <= s.date <= args.train[1]]
    test = [s for s in sessions if args.test[0] <= s.date <= args.test[1]]
    if not train or not test:
        raise InsufficientDataError("no sessions in the requested train or test range")
    V.audit_fold(train, test)
    th = calibrate(train, cfg.signal, cfg.costs)
    events = generate_signals(test, th, cfg.signal.band, cfg.signal.trailing_s)
    out = Path(args.out)
    prov = cfg.provenance(command="signal", train=[d.isoformat() for d in args.train],
                          test=[d.isoformat() for d in args.test])
    _write_json(out / "thresholds.json", {"provenance": prov, "thresholds": dataclasses.asdict(th)})
    write_signals(out / "signals.csv", events, prov)
    log.info("%d signals; take-profit %g bps", len(events), th.take_profit_bps)
    return EXIT_NUMERICAL if unconverged else EXIT_OK


def _read_thresholds(path: Path) -> Thresholds:
    if not path.is_file():
        raise InputError(f"thresholds file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    return Thresholds(**doc.get("thresholds", doc))


def cmd_backtest(args, cfg: RunConfig) -> int:
    th = _read_thresholds(Path(args.thresholds))
    sig_path = Path(args.signals)
    if not sig_path.is_file():
        raise InputError(f"signals file not found: {sig_path}")
    frame = read_frame(sig_path, SIGNAL_COLUMNS)
    events = [SignalEvent(int(r.ts_s), float(r.h), float(r.trailing_ret_bps), int(r.volume),
                          int(r.direction_hint)) for r in frame.itertuples()]
    bars, _ = load_bars(Path(args.data), args.workers)
    rule = ExitRule(th.take_profit_bps, cfg.signal.stop_bps, cfg.signal.timeout_s)
    days = sorted(bars)
    if th.train_end_s is not None:
        days = [d for d in days if bars[d].ts_s[0] > th.train_end_s]
    result = run_backtest(events, [bars[d] for d in days], rule, cfg.costs)
    out = Path(args.out)
    prov = cfg.provenance(command="backtest", thresholds=dataclasses.asdict(th))
    write_trades(out / "trades.csv", result, prov)
    _write_json(out / "backtest.json", {"provenance": prov, "trades": result.n, "wins": result.n_wins,
                                        "win_rate": result.win_rate, "pnl_bps": result.total_net_bps,
                                        "unfilled": result.n_unfilled})
    return EXIT_OK


def _fold_spec(cfg: RunConfig, sessions) -> V.FoldSpec:
    dates = [s.date for s in sessions]
    n = V.achievable_folds(len(dates), cfg.folds.train_days, cfg.folds.test_days)
    if n == 0:
        raise InsufficientDataError(
            f"{len(dates)} trading days allow 0 complete folds of {cfg.folds.train_days} train + "
            f"{cfg.folds.test_days} test days (achievable folds: 0)")
    return V.make_folds(dates, cfg.folds.train_days, cfg.folds.test_days)


def _write_walkforward(out: Path, wf: V.WalkForward, prov: dict) -> None:
    doc = wf.to_dict()
    for f, fd in zip(wf.folds, doc["folds"]):
        _write_json(out / f"fold_{f.index + 1}.json", {"provenance": prov, **fd})
        write_trades(out / f"trades_fold_{f.index + 1}.csv", f.result, prov)
    _write_json(out / "pooled.json", {"provenance": prov, **doc["pooled"]})
    _write_json(out / "walkforward.json", {"provenance": prov, **doc})
    write_frame(out / "table1.csv", wf.table(), prov)
    write_frame(out / "cumulative_pnl.csv", wf.cumulative_pnl(), prov)


def cmd_walkforward(args, cfg: RunConfig) -> int:
    cfg = cfg.override("folds", train_days=args.train_days, test_days=args.test_days)
    sessions, unconverged = load_sessions(Path(args.data), cfg, args.workers,
                                          Path(args.entropy) if args.entropy else None)
    spec = _fold_spec(cfg, sessions)
    wf = V.walk_forward(sessions, spec, cfg.signal, cfg.costs, cfg.validation.horizon_s,
                        args.workers, cfg.validation.n_tests)
    _write_walkforward(Path(args.out), wf, cfg.provenance(command="walkforward"))
    p = wf.pooled
    log.info("%d folds, %d trades, pooled PnL %.1f bps", spec.n_folds, p.n, p.total_net_bps)
    return EXIT_NUMERICAL if unconverged else EXIT_OK


def _replay(wf_dir: Path, sessions, cfg: RunConfig, workers: int) -> V.WalkForward:
    path = wf_dir / "walkforward.json"
    if not path.is_file():
        raise InputError(f"walk-forward output not found: {path} (run `walkforward` first)")
    doc = json.loads(path.read_text(encoding="utf-8"))
    folds = tuple(((dt.date.fromisoformat(f["train"][0]), dt.date.fromisoformat(f["train"][1])),
                   (dt.date.fromisoformat(f["test"][0]), dt.date.fromisoformat(f["test"][1])))
                  for f in doc["folds"])
    spec = V.FoldSpec(doc["train_days"], doc["test_days"], folds)
    ths = [Thresholds(**f["thresholds"]) for f in doc["folds"]]
    wf = V.walk_forward(sessions, spec, cfg.signal, cfg.costs, cfg.validation.horizon_s,
                        workers, cfg.validation.n_tests, thresholds=ths)
    for f, fd in zip(wf.folds, doc["folds"]):
        if f.result.n != fd["trades"] or abs(f.result.total_net_bps - fd["pnl_bps"]) > 1e-6:
            raise ProtocolError(f"fold {f.index + 1} does not replay to its recorded ledger; "
                                "data or config changed since `walkforward`")
    return wf


def cmd_validate(args, cfg: RunConfig) -> int:
    cfg = cfg.override("validation", seed=args.seed, label_trials=args.label_trials,
                       scramble_trials=args.scramble_trials,
                       random_entry_trials=args.random_entry_trials)
    if args.no_sensitivity:
        cfg = cfg.override("validation", sensitivity=False)
    sessions, unconverged = load_sessions(Path(args.data), cfg, args.workers,
                                          Path(args.entropy) if args.entropy else None)
    wf = _replay(Path(args.walkforward), sessions, cfg, args.workers)
    rep = V.validate(sessions, wf, cfg.validation, args.workers)
    out = Path(args.out)
    prov = cfg.provenance(command="validate")
    _write_json(out / "validate.json", {"provenance": prov, **rep.to_dict(),
                                        "walkforward": wf.to_dict()})
    write_frame(out / "quintiles.csv", rep.magnitude.table(), prov)
    write_frame(out / "direction.csv", _direction_frame(wf, sessions, cfg), prov)
    write_frame(out / "cumulative_pnl.csv", wf.cumulative_pnl(), prov)
    write_frame(out / "attribution.csv", rep.attribution.frame(), prov)
    write_frame(out / "sensitivity.csv", V.sensitivity_frame(rep.sensitivity), prov)
    for name, pl in rep.placebos.items():
        write_frame(out / f"placebo_{name}.csv",
                    pd.DataFrame({"trial": np.arange(pl.trials), "value": pl.null}), prov)
    z = rep.report.placebo_zs
    log.info("ratio %.3f, placebo z %s", rep.report.magnitude_ratio,
             ", ".join(f"{k}={v:.1f}" if v is not None else f"{k}=undefined" for k, v in z.items()))
    if unconverged or any(p.degenerate for p in rep.placebos.values()):
        return EXIT_NUMERICAL
    return EXIT_OK


def _direction_frame(wf: V.WalkForward, sessions, cfg: RunConfig) -> pd.DataFrame:
    rows = []
    for f in wf.folds:
        test = [s for s in sessions if f.test_dates[0] <= s.date <= f.test_dates[1]]
        k, n = V.direction_hits(f.result, test, cfg.validation.horizon_s)
        rows.append({"fold": str(f.index + 1), "hits": k, "n": n,
                     "accuracy": k / n if n else np.nan, "wins": f.result.n_wins,
                     "trades": f.result.n, "win_rate": f.result.win_rate})
    r = wf.pooled_report
    p = wf.pooled
    rows.append({"fold": "pooled", "hits": r.direction_k, "n": r.direction_n,
                 "accuracy": r.direction_k / r.direction_n if r.direction_n else np.nan,
                 "wins": p.n_wins, "trades": p.n, "win_rate": p.win_rate})
    return pd.DataFrame(rows)


def _fmt(x, spec=".3f"):
    return "n/a" if x is None or (isinstance(x, float) and not np.isfinite(x)) else format(x, spec)


def cmd_report(args, cfg: RunConfig) -> int:
    path = Path(args.validate) / "validate.json"
    if not path.is_file():
        raise InputError(f"validation output not found: {path} (run `validate` first)")
    doc = json.loads(path.read_text(encoding="utf-8"))
    st, mag, att = doc["stats"], doc["magnitude"], doc["attribution"]
    wf = doc["walkforward"]
    lines = ["# Order-flow entropy run report", "",
             "| fold | test period | trades | win rate | ratio | t | PnL (bps) |",
             "|---|---|---|---|---|---|---|"]
    for f in wf["folds"]:
        r = f["report"]
        lines.append(f"| {f['fold']} | {f['test'][0]}..{f['test'][1]} | {f['trades']} | "
                     f"{_fmt(f['wins'] / f['trades'] if f['trades'] else None, '.1%')} | "
                     f"{_fmt(r['magnitude_ratio'], '.2f')} | {_fmt(r['welch_t'], '.1f')} | "
                     f"{_fmt(f['pnl_bps'], ',.1f')} |")
    p = wf["pooled"]
    lines.append(f"| pooled | | {p['trades']} | {_fmt(p['win_rate'], '.1%')} | | | "
                 f"{_fmt(p['pnl_bps'], ',.1f')} |")
    lines += ["", "## Magnitude by entropy quintile", "",
              "| quintile | points | mean abs 5-min return (bps) |", "|---|---|---|"]
    for q, (n, m) in enumerate(zip(mag["quintile_n"], mag["quintile_mean"]), start=1):
        lines.append(f"| Q{q} | {n} | {_fmt(m, '.2f')} |")
    lines += ["", f"Q1/Q5 ratio {_fmt(st['magnitude_ratio'], '.3f')} "
                  f"(Welch t {_fmt(st['welch_t'], '.1f')}, block-bootstrap SE "
                  f"{_fmt(mag['block_se'], '.3f')}); low-tail factor {_fmt(mag['low_factor'], '.2f')}.",
              f"Direction: {st['direction_k']} of {st['direction_n']} trades matched the forward "
              f"move (z {_fmt(st['binom_z'], '.2f')}, p {_fmt(st['binom_p'], '.3f')}).",
              f"Bonferroni alpha {_fmt(st['bonferroni_alpha'], '.4f')}.", "", "## Placebos", ""]
    for name, pl in doc["placebos"].items():
        lines.append(f"- {name}: observed {_fmt(pl['observed'], '.3f')}, null "
                     f"{_fmt(pl['null_mean'], '.3f')} +/- {_fmt(pl['null_sd'], '.3f')}, "
                     f"z {_fmt(pl['z'], '.1f')} over {pl['trials']} trials")
    lines += ["", "## Attribution", ""]
    for k in ("timing_share", "payoff_share", "direction_share"):
        lines.append(f"- {k.replace('_share', '')}: {_fmt(att[k], '.1%')}")
    if doc.get("sensitivity"):
        lines += ["", "## Sensitivity", "", "| parameter | level | value | PnL (bps) | change |",
                  "|---|---|---|---|---|"]
        for r in doc["sensitivity"]:
            lines.append(f"| {r['param']} | {r['level']} | {_fmt(r['value'], 'g')} | "
                         f"{_fmt(r['pnl_bps'], ',.1f') if r['valid'] else 'invalid'} | "
                         f"{_fmt(r['pct_change'], '+.1%')} |")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowentropy",
                                 description="Order-flow entropy research pipeline.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--config", help=f"JSON run config (default: ${CONFIG_ENV}, else built-in defaults)")
    ap.add_argument("--workers", type=_positive_int, default=1, help="worker processes (default 1)")
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tick market")
    p.add_argument("--out", required=True)
    p.add_argument("--days", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse tick files into per-second bars")
    p.add_argument("--data", required=True, help="directory of ticks_YYYY-MM-DD.csv files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("entropy", help="rolling entropy series per session")
    p.add_argument("--data", required=True, help="directory of bars_*.csv or ticks_*.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_entropy)

    p = sub.add_parser("signal", help="calibrate on a train range and emit signals for a test range")
    p.add_argument("--data", required=True)
    p.add_argument("--train", required=True, type=_date_range, help="START:END (ISO dates)")
    p.add_argument("--test", required=True, type=_date_range, help="START:END (ISO dates)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_signal)

    p = sub.add_parser("backtest", help="execute a signal file")
    p.add_argument("--data", required=True)
    p.add_argument("--signals", required=True)
    p.add_argument("--thresholds", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("walkforward", help="rolling calibrate/test folds")
    p.add_argument("--data", required=True)
    p.add_argument("--entropy", help="directory of entropy_*.csv to reuse")
    p.add_argument("--out", required=True)
    p.add_argument("--train-days", type=_positive_int)
    p.add_argument("--test-days", type=_positive_int)
    p.set_defaults(func=cmd_walkforward)

    p = sub.add_parser("validate", help="statistics, placebos, attribution and sensitivity")
    p.add_argument("--data", required=True)
    p.add_argument("--entropy", help="directory of entropy_*.csv to reuse")
    p.add_argument("--walkforward", required=True, help="output directory of `walkforward`")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--label-trials", type=_positive_int)
    p.add_argument("--scramble-trials", type=_positive_int)
    p.add_argument("--random-entry-trials", type=_positive_int)
    p.add_argument("--no-sensitivity", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="markdown summary of a validation run")
    p.add_argument("--validate", required=True, help="output directory of `validate`")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, InputError, FileNotFoundError, TickFormatError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (InsufficientDataError, ProtocolError) as exc:
        log.error("%s", exc)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
