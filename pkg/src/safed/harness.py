"""Scenario files, metrics and sweeps.

A scenario is a YAML document::

    schema: safed-scenario/1
    name: detection
    network: {n: 100, o: 3, horizon_s: 40}     # SimConfig fields
    attacks: [{action: tamper-device, count: 10, at_s: 2}]
    grid: {o: [1, 3]}                           # optional cartesian product
    fits: {latency: {x: log2(n), y: latency_mean_s}}
    assertions:
      - {metric: resilience_index, where: {o: 3}, min: 0.99}
      - {metric: proofs_tail, decreasing: o}
      - {metric: fit.latency.r2, min: 0.9}

Every artifact written here carries a ``schema`` field.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
import re
import statistics
import time
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import yaml

from . import invariants as inv
from .simnet import ACTIONS, ScenarioError, SimConfig, SimResult, run as sim_run

SCENARIO_SCHEMA = "safed-scenario/1"
TRACE_SCHEMA = "safed-trace/1"
SNAPSHOT_SCHEMA = "safed-snapshot/1"
SUMMARY_SCHEMA = "safed-summary/1"
METRICS_SCHEMA = "safed-metrics/1"

POINT_COLUMNS = ["schema", "point", "config_digest", "seed", "n", "o", "s", "attest_prob", "horizon_s"]
TOP_KEYS = {"schema", "name", "description", "network", "attacks", "grid", "fits", "assertions", "jobs"}
ASSERT_KEYS = {"metric", "where", "min", "max", "equals", "increasing", "decreasing", "note"}


class FormatError(ValueError):
    """An artifact whose schema this version does not understand."""


class InvalidScenario(ScenarioError):
    def __init__(self, msg: str, source: str = "<scenario>", line: Optional[int] = None):
        self.source, self.line = source, line
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {msg}")


# --- metrics ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    resilience_index: float = 1.0
    lost: int = 0
    recovered: int = 0
    sessions: int = 0
    latency_mean_s: float = math.nan
    latency_p50_s: float = math.nan
    latency_p95_s: float = math.nan
    max_finger_entries: int = 0
    mean_finger_entries: float = 0.0
    max_proofs: int = 0
    max_proofs_holders: int = 0
    proofs_tail: float = 0.0
    memory_max_bytes: int = 0
    memory_mean_bytes: float = 0.0
    memory_mismatches: int = 0
    verdict_healthy: int = 0
    verdict_prover_corrupted: int = 0
    verdict_hosts_corrupted: int = 0
    verdict_network_corrupted: int = 0
    verdict_warning: int = 0
    golden_elected_rate: float = 1.0
    minority_sessions: int = 0
    minority_golden_rate: float = 1.0
    third_sessions: int = 0
    third_network_corrupted: int = 0
    tampered: int = 0
    tampered_flagged: int = 0
    tampered_missed: int = 0
    honest_flagged: int = 0
    detection_delay_max_s: float = 0.0
    removed: int = 0
    removal_alert_coverage: float = 1.0
    alert_delay_max_periods: float = 0.0
    alerts: int = 0
    false_alerts: int = 0
    partitions: int = 0
    messages_total: int = 0
    bytes_total: int = 0
    fsm_violations: int = 0
    session_violations: int = 0
    ring_violations: int = 0
    conservation_violations: int = 0
    # not CSV columns
    proofs_histogram: dict = field(default_factory=dict)
    latency_histogram_ms: dict = field(default_factory=dict)
    message_counts: dict = field(default_factory=dict)
    memory_per_device: list = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}

    def to_json(self) -> dict:
        d = self.row()
        d.update(proofs_histogram=self.proofs_histogram, latency_histogram_ms=self.latency_histogram_ms,
                 message_counts=self.message_counts)
        return d


METRIC_COLUMNS = [f.name for f in fields(MetricsReport)
                  if f.name not in ("proofs_histogram", "latency_histogram_ms", "message_counts",
                                    "memory_per_device")]
CSV_HEADER = POINT_COLUMNS + METRIC_COLUMNS + ["error"]


def _check_schema(trace: list, snapshots: list) -> tuple:
    if trace and trace[0].get("type") == "header":
        if trace[0].get("schema") != TRACE_SCHEMA:
            raise FormatError(f"trace schema {trace[0].get('schema')!r}, expected {TRACE_SCHEMA}")
        trace = trace[1:]
    for rec in trace[:1]:
        if "type" not in rec or "t_us" not in rec:
            raise FormatError("trace records need 'type' and 't_us'")
    out = []
    for snap in snapshots:
        if "schema" in snap and snap["schema"] != SNAPSHOT_SCHEMA:
            raise FormatError(f"snapshot schema {snap['schema']!r}, expected {SNAPSHOT_SCHEMA}")
        if "devices" not in snap:
            raise FormatError("snapshot has no 'devices'")
        out.append(snap)
    return trace, out


def _quantile(xs: list, q: float) -> float:
    if len(xs) == 1:
        return xs[0]
    return statistics.quantiles(xs, n=100, method="inclusive")[int(q * 100) - 1]


def compute_metrics(trace: list, snapshots: list, cfg: SimConfig, stats: Optional[dict] = None) -> MetricsReport:
    """Reduce one run's trace and snapshots to a :class:`MetricsReport`."""
    trace, snapshots = _check_schema(trace, snapshots)
    if not snapshots:
        raise FormatError("at least one snapshot is needed")
    rep = MetricsReport()
    period = cfg.stabilize_ms * 1000

    pending = set()
    tamper_at, removed_at = {}, {}
    corrupt_hosts, halted, flagged_at = set(), set(), {}
    alerts_by = {}
    outcomes = Counter()
    golden, minority = [], []
    lat = []
    for rec in trace:
        t = rec["type"]
        if t == "drop":
            for u, ov in rec["lost"]:
                pending.add((u, ov))
                rep.lost += 1
        elif t == "recovered":
            key = (rec["uid"], rec["overlay"])
            if key in pending:
                pending.discard(key)
                rep.recovered += 1
        elif t == "verdict":
            outcomes[rec["outcome"]] += 1
            if "slots" in rec:
                lat.append(rec["latency_us"])
            if rec.get("elected_golden") is not None:
                golden.append(rec["elected_golden"])
            c = rec.get("corrupt_slots")
            if c is not None and c * 3 < cfg.o:
                minority.append(rec.get("elected_golden") is True)
            elif c is not None:
                rep.third_sessions += 1
                rep.third_network_corrupted += rec["outcome"] == "network-corrupted"
            for a in rec["flagged"]:
                flagged_at.setdefault(a, rec["t_us"])
        elif t == "tamper":
            tamper_at.setdefault(rec["dev"], rec["t_us"])
        elif t == "corrupt-host":
            corrupt_hosts.add(rec["dev"])
        elif t == "remove":
            removed_at.setdefault(rec["dev"], rec["t_us"])
            halted.add(rec["dev"])
        elif t == "quarantine":
            halted.add(rec["dev"])
        elif t == "alert":
            rep.alerts += 1
            alerts_by.setdefault((rec["missing"], rec["overlay"]), rec["t_us"])
            if rec["missing"] not in halted:
                rep.false_alerts += 1
        elif t == "partition":
            rep.partitions += 1

    rep.resilience_index = rep.recovered / rep.lost if rep.lost else 1.0
    rep.sessions = len(lat)
    if lat:
        s = sorted(x / 1e6 for x in lat)
        rep.latency_mean_s = statistics.fmean(s)
        rep.latency_p50_s = _quantile(s, 0.5)
        rep.latency_p95_s = _quantile(s, 0.95)
        rep.latency_histogram_ms = {str(k * 100): v for k, v in sorted(Counter(int(x * 10) for x in s).items())}
    rep.verdict_healthy = outcomes["healthy"]
    rep.verdict_prover_corrupted = outcomes["prover-corrupted"]
    rep.verdict_hosts_corrupted = outcomes["overlay-hosts-corrupted"]
    rep.verdict_network_corrupted = outcomes["network-corrupted"]
    rep.verdict_warning = outcomes["possible-infection-warning"]
    rep.golden_elected_rate = sum(golden) / len(golden) if golden else 1.0
    rep.minority_sessions = len(minority)
    rep.minority_golden_rate = sum(minority) / len(minority) if minority else 1.0

    bad = set(tamper_at) | corrupt_hosts
    rep.tampered = len(tamper_at)
    rep.tampered_flagged = sum(1 for d in tamper_at if d in flagged_at)
    rep.tampered_missed = rep.tampered - rep.tampered_flagged
    rep.honest_flagged = sum(1 for d in flagged_at if d not in bad)
    delays = [flagged_at[d] - t for d, t in tamper_at.items() if d in flagged_at]
    rep.detection_delay_max_s = max(delays) / 1e6 if delays else 0.0

    rep.removed = len(removed_at)
    if removed_at:
        pairs = [(d, ov) for d in removed_at for ov in range(cfg.o)]
        hit = [alerts_by[p] - removed_at[p[0]] for p in pairs if p in alerts_by]
        rep.removal_alert_coverage = len(hit) / len(pairs)
        rep.alert_delay_max_periods = max(hit) / period if hit else math.inf

    final = snapshots[-1]
    live = [d for d in final["devices"] if not d["halted"]]
    fingers = [sum(len(ov["fingers"]) for ov in d["overlays"] if ov) for d in live]
    if fingers:
        rep.max_finger_entries = max(fingers)
        rep.mean_finger_entries = statistics.fmean(fingers)
    proofs = [sum(ov["proofs"] for ov in d["overlays"] if ov) for d in live]
    if proofs:
        rep.max_proofs = max(proofs)
        rep.max_proofs_holders = proofs.count(rep.max_proofs)
        rep.proofs_tail = rep.max_proofs / cfg.o
        rep.proofs_histogram = {str(k): v for k, v in sorted(Counter(proofs).items())}
    rep.memory_per_device = [inv.device_memory(d, cfg.s) for d in final["devices"]]
    rep.memory_max_bytes = max(rep.memory_per_device)
    rep.memory_mean_bytes = statistics.fmean(rep.memory_per_device)
    rep.memory_mismatches = sum(len(inv.check_memory(snap, cfg.s)) for snap in snapshots)

    if stats:
        rep.message_counts = dict(stats.get("messages", {}))
        rep.messages_total = sum(rep.message_counts.values())
        rep.bytes_total = stats.get("bytes", 0)
    rep.fsm_violations = len(inv.check_fsm(trace))
    rep.session_violations = len(inv.check_sessions(trace))
    rep.ring_violations = len(inv.check_ring(final))
    rep.conservation_violations = len(inv.check_conservation(final)) if live else 0
    return rep


def metrics_of(res: SimResult) -> MetricsReport:
    return compute_metrics(res.trace, res.snapshots, res.config, res.stats)


# --- scenario loading --------------------------------------------------------------

class _LineLoader(yaml.SafeLoader):
    """Records the line of every mapping key in ``dict.__lines__``-style side tables."""


class LineDict(dict):
    lines: dict


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = LineDict()
    out.lines = {}
    for k, v in node.value:
        key = loader.construct_object(k, deep=True)
        out[key] = loader.construct_object(v, deep=True)
        out.lines[key] = k.start_mark.line + 1
    out.lines["__self__"] = node.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _line(d, key=None):
    lines = getattr(d, "lines", {})
    return lines.get(key, lines.get("__self__"))


def bundled_scenarios() -> list:
    return sorted(p.name[:-5] for p in resources.files("safed").joinpath("scenarios").iterdir()
                  if p.name.endswith(".yaml"))


def resolve_scenario(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    cand = resources.files("safed").joinpath("scenarios").joinpath(f"{name}.yaml")
    if cand.is_file():
        return Path(str(cand))
    raise InvalidScenario(f"no such scenario file or bundled scenario {name!r}", name)


@dataclass
class Scenario:
    name: str
    base: dict
    grid: dict
    fits: dict
    assertions: list
    source: str = "<scenario>"
    jobs: int = 1
    description: str = ""

    def points(self) -> list:
        keys = list(self.grid)
        out = []
        for combo in itertools.product(*(self.grid[k] for k in keys)):
            d = dict(self.base)
            d["attacks"] = [dict(a) for a in self.base.get("attacks", [])]
            d.update(zip(keys, combo))
            out.append(d)
        return out

    def configs(self) -> list:
        return [SimConfig.from_dict(d) for d in self.points()]


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise InvalidScenario(f"YAML syntax error: {getattr(exc, 'problem', exc)}", source,
                              mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise InvalidScenario("top level must be a mapping", source, 1)
    for k in doc:
        if k not in TOP_KEYS:
            raise InvalidScenario(f"unknown top-level field {k!r}", source, _line(doc, k))
    if doc.get("schema") != SCENARIO_SCHEMA:
        raise InvalidScenario(f"schema must be {SCENARIO_SCHEMA!r}, got {doc.get('schema')!r}", source,
                              _line(doc, "schema") or 1)
    net = doc.get("network") or LineDict()
    if not isinstance(net, dict):
        raise InvalidScenario("network must be a mapping", source, _line(doc, "network"))
    known = {f.name: f for f in fields(SimConfig)}
    for k, v in net.items():
        if k not in known or k == "attacks":
            raise InvalidScenario(f"network.{k}: unknown field", source, _line(net, k))
        _check_type(k, v, known[k], source, _line(net, k))
    attacks = doc.get("attacks") or []
    if not isinstance(attacks, list):
        raise InvalidScenario("attacks must be a list", source, _line(doc, "attacks"))
    for i, a in enumerate(attacks):
        if not isinstance(a, dict) or a.get("action") not in ACTIONS:
            raise InvalidScenario(f"attacks[{i}]: action must be one of {', '.join(ACTIONS)}", source,
                                  _line(a) if isinstance(a, dict) else _line(doc, "attacks"))
    grid = doc.get("grid") or {}
    for k, vals in grid.items():
        if k not in known or k == "attacks":
            raise InvalidScenario(f"grid.{k}: unknown field", source, _line(grid, k))
        if not isinstance(vals, list):
            raise InvalidScenario(f"grid.{k}: expected a list of values", source, _line(grid, k))
        for v in vals:
            _check_type(k, v, known[k], source, _line(grid, k))
    fits = doc.get("fits") or {}
    for name, spec in fits.items():
        if not isinstance(spec, dict) or not {"x", "y"} <= set(spec) <= {"x", "y", "where"}:
            raise InvalidScenario(f"fits.{name}: needs 'x' and 'y' (and optionally 'where')", source,
                                  _line(fits, name))
    asserts = doc.get("assertions") or []
    for i, a in enumerate(asserts):
        if not isinstance(a, dict) or "metric" not in a:
            raise InvalidScenario(f"assertions[{i}]: needs a 'metric'", source, _line(doc, "assertions"))
        extra = set(a) - ASSERT_KEYS
        if extra:
            k = sorted(extra)[0]
            raise InvalidScenario(f"assertions[{i}].{k}: unknown field", source, _line(a, k))
        m = a["metric"]
        if not (m in METRIC_COLUMNS or (m.startswith("fit.") and m.split(".")[1] in fits)):
            raise InvalidScenario(f"assertions[{i}]: unknown metric {m!r}", source, _line(a, "metric"))
    base = {k: v for k, v in net.items()}
    base["attacks"] = attacks
    scen = Scenario(doc.get("name", Path(source).stem), base, dict(grid), dict(fits), list(asserts), source,
                    int(doc.get("jobs", 1)), doc.get("description", ""))
    for d in scen.points():
        try:
            SimConfig.from_dict(d).validate()
        except ScenarioError as exc:
            msg = str(exc)
            line = _line(doc, "network")
            m = re.match(r"attacks\[(\d+)\]", msg)
            if m:
                line = _line(attacks[int(m.group(1))]) or _line(doc, "attacks")
            raise InvalidScenario(msg, source, line) from None
    return scen


def _check_type(key, value, f, source, line):
    want = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str, "bool": bool,
                                                      "list": list}.get(str(f.type))
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return
    if want is not None and (not isinstance(value, want) or (want is int and isinstance(value, bool))):
        raise InvalidScenario(f"network.{key}: expected {want.__name__}, got {value!r}", source, line)


def load_scenario(name: str) -> Scenario:
    path = resolve_scenario(name)
    return parse_scenario(path.read_text(), str(path))


# --- running -----------------------------------------------------------------------

def _run_point(args) -> dict:
    i, cfg_dict, keep = args
    cfg = SimConfig.from_dict(cfg_dict)
    t0 = time.perf_counter()
    row = {"schema": METRICS_SCHEMA, "point": i, "config_digest": cfg.digest(),
           **{k: cfg_dict.get(k, getattr(cfg, k)) for k in POINT_COLUMNS[3:]}, "_cfg": cfg.to_dict()}
    try:
        res = sim_run(cfg)
        rep = metrics_of(res)
    except Exception as exc:  # recorded per point; a sweep keeps going
        row.update({k: "" for k in METRIC_COLUMNS}, error=f"{type(exc).__name__}: {exc}")
        return {"row": row, "report": None, "wall_s": time.perf_counter() - t0, "trace": [], "snapshot": None,
                "digest": None}
    row.update(rep.row(), error="")
    return {"row": row, "report": rep.to_json(), "wall_s": time.perf_counter() - t0, "digest": res.digest,
            "trace": res.trace if keep else [], "snapshot": res.final if keep else None}


def run_points(configs: list, jobs: int = 1, keep: bool = True) -> list:
    work = [(i, c.to_dict(), keep) for i, c in enumerate(configs)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as ex:
            return list(ex.map(_run_point, work))
    return [_run_point(w) for w in work]


def linear_fit(xs: list, ys: list) -> dict:
    slope, intercept = statistics.linear_regression(xs, ys)
    r = statistics.correlation(xs, ys)
    return {"slope": slope, "intercept": intercept, "r2": r * r, "points": len(xs)}


def _axis(expr: str, row: dict) -> float:
    expr = expr.strip()
    if expr.startswith("log2(") and expr.endswith(")"):
        return math.log2(float(row[expr[5:-1]]))
    return float(row[expr])


def compute_fits(fits: dict, rows: list) -> dict:
    out = {}
    for name, spec in fits.items():
        ok = [r for r in rows if not r.get("error")
              and all(r["_cfg"].get(k) == v for k, v in (spec.get("where") or {}).items())]
        xs = [_axis(spec["x"], r) for r in ok]
        ys = [float(r[spec["y"]]) for r in ok]
        if len(xs) < 3 or len(set(xs)) < 2 or len(set(ys)) < 2:
            out[name] = {"slope": math.nan, "intercept": math.nan, "r2": math.nan, "points": len(xs)}
        else:
            out[name] = linear_fit(xs, ys)
    return out


def _monotone(rows: list, metric: str, key: str, strict_up: bool) -> tuple:
    """Rows grouped by every other grid field; within a group ``metric`` must move with ``key``."""
    groups = {}
    for r in rows:
        other = json.dumps({k: v for k, v in r["_cfg"].items() if k != key}, sort_keys=True)
        groups.setdefault(other, []).append(r)
    worst = []
    for g in groups.values():
        g.sort(key=lambda r: r["_cfg"][key])
        vals = [float(r[metric]) for r in g]
        pairs = list(zip(vals, vals[1:]))
        if not pairs:
            continue
        good = all(b > a for a, b in pairs) if strict_up else all(b < a for a, b in pairs)
        worst.append((good, vals))
    return all(g for g, _ in worst) and bool(worst), [v for _, v in worst]


def evaluate_assertions(assertions: list, rows: list, fits: dict) -> list:
    results = []
    for a in assertions:
        m = a["metric"]
        res = {"metric": m, **{k: a[k] for k in a if k != "metric"}}
        if m.startswith("fit."):
            _, name, part = (m.split(".") + ["r2"])[:3]
            values = [fits[name][part]]
        else:
            sel = [r for r in rows if all(r["_cfg"].get(k) == v for k, v in (a.get("where") or {}).items())]
            if any(r.get("error") for r in sel):
                res.update(passed=False, value=[r["error"] for r in sel if r.get("error")])
                results.append(res)
                continue
            if "increasing" in a or "decreasing" in a:
                ok, vals = _monotone(sel, m, a.get("increasing") or a.get("decreasing"), "increasing" in a)
                res.update(passed=ok, value=vals)
                results.append(res)
                continue
            values = [r[m] for r in sel]
        ok = bool(values)
        for v in values:
            v = float(v)
            if math.isnan(v):
                ok = False
            if "min" in a and not v >= a["min"]:
                ok = False
            if "max" in a and not v <= a["max"]:
                ok = False
            if "equals" in a and v != a["equals"]:
                ok = False
        res.update(passed=ok, value=values[0] if len(values) == 1 else values)
        results.append(res)
    return results


def default_out(name: str) -> Path:
    return Path(os.environ.get("SAFED_OUT", "safed-out")) / name


def write_csv(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if r.get("schema") != METRICS_SCHEMA:
            raise FormatError(f"metrics schema {r.get('schema')!r}, expected {METRICS_SCHEMA}")
    return rows


def write_artifacts(out: Path, scen: Scenario, configs: list, results: list, fits: dict, checks: list) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    rows = [r["row"] for r in results]
    write_csv(out / "metrics.csv", rows)
    with open(out / "trace.jsonl", "w") as fh:
        fh.write(json.dumps({"type": "header", "schema": TRACE_SCHEMA, "scenario": scen.name, "t_us": 0}) + "\n")
        for r in results:
            for rec in r["trace"]:
                fh.write(json.dumps({"point": r["row"]["point"], **rec}, sort_keys=True) + "\n")
    snaps = {"schema": SNAPSHOT_SCHEMA, "scenario": scen.name,
             "points": [{"point": r["row"]["point"], "config": c.to_dict(), "snapshot": r["snapshot"]}
                        for r, c in zip(results, configs)]}
    (out / "snapshot.json").write_text(json.dumps(snaps))
    summary = {"schema": SUMMARY_SCHEMA, "scenario": scen.name, "source": scen.source,
               "passed": all(c["passed"] for c in checks), "assertions": checks, "fits": fits,
               "points": [{"config": c.to_dict(), "metrics": r["report"], "trace_digest": r["digest"],
                           "wall_s": round(r["wall_s"], 3), "error": r["row"].get("error", "")}
                          for r, c in zip(results, configs)]}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=str))
    return summary


def load_artifacts(out: Path, point: int = 0) -> tuple:
    """Trace records and final snapshot of one point from a written run directory."""
    lines = (out / "trace.jsonl").read_text().splitlines()
    trace = [json.loads(x) for x in lines]
    head, body = trace[0], [r for r in trace[1:] if r.get("point") == point]
    snaps = json.loads((out / "snapshot.json").read_text())
    if snaps.get("schema") != SNAPSHOT_SCHEMA:
        raise FormatError(f"snapshot schema {snaps.get('schema')!r}, expected {SNAPSHOT_SCHEMA}")
    entry = next(p for p in snaps["points"] if p["point"] == point)
    return [head] + body, [entry["snapshot"]], SimConfig.from_dict(entry["config"])


def execute(scen: Scenario, out: Optional[Path] = None, seed: Optional[int] = None, jobs: Optional[int] = None,
            write: bool = True) -> dict:
    """Run every grid point of ``scen`` and evaluate its assertions."""
    if seed is not None:
        scen.base["seed"] = seed
        scen.grid.pop("seed", None)
    configs = scen.configs()
    results = run_points(configs, jobs or scen.jobs, keep=write)
    rows = [r["row"] for r in results]
    fits = compute_fits(scen.fits, rows)
    checks = evaluate_assertions(scen.assertions, rows, fits)
    if write:
        return write_artifacts(out or default_out(scen.name), scen, configs, results, fits, checks)
    return {"schema": SUMMARY_SCHEMA, "scenario": scen.name, "passed": all(c["passed"] for c in checks),
            "assertions": checks, "fits": fits, "rows": rows,
            "points": [{"metrics": r["report"], "trace_digest": r["digest"], "wall_s": r["wall_s"]} for r in results]}


def run_scenario(path: str, out: Optional[Path] = None, seed: Optional[int] = None,
                 jobs: Optional[int] = None) -> tuple:
    """Exit code (0 pass, 1 assertion failure, 2 invalid scenario) and the summary."""
    try:
        scen = load_scenario(path)
    except ScenarioError as exc:
        return 2, {"error": str(exc)}
    summary = execute(scen, out, seed, jobs)
    return (0 if summary["passed"] else 1), summary


def sweep(path: str, grid: dict, out: Optional[Path] = None, seed: Optional[int] = None,
          jobs: Optional[int] = None) -> tuple:
    """Replace the scenario's grid with ``grid`` and write one aggregated CSV row per point."""
    try:
        scen = load_scenario(path)
        known = {f.name for f in fields(SimConfig)} - {"attacks"}
        for k in grid:
            if k not in known:
                raise InvalidScenario(f"grid field {k!r} is not a network field", path)
        scen.grid = dict(grid)
        scen.assertions = []
        if seed is not None:
            scen.base["seed"] = seed
        configs = scen.configs()
    except ScenarioError as exc:
        return 2, {"error": str(exc)}
    out = out or default_out(scen.name + "-sweep")
    out.mkdir(parents=True, exist_ok=True)
    results = run_points(configs, jobs or scen.jobs, keep=False)
    rows = [r["row"] for r in results]
    write_csv(out / "metrics.csv", rows)
    fits = compute_fits(scen.fits, rows) if rows else {}
    summary = {"schema": SUMMARY_SCHEMA, "scenario": scen.name, "grid": grid, "fits": fits,
               "points": len(rows), "failed": sum(1 for r in rows if r.get("error"))}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True, default=str))
    return 0, summary
