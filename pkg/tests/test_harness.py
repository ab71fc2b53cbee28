import csv
import json
from pathlib import Path

import pytest

from safed import cli, harness
from safed.harness import (CSV_HEADER, FormatError, InvalidScenario, compute_metrics, linear_fit, load_artifacts,
                           metrics_of, parse_scenario)
from safed.invariants import memory_formula
from safed.simnet import SimConfig, run

GOLDEN = Path(__file__).parent / "golden"

SMALL = """\
schema: safed-scenario/1
name: small
network:
  seed: 4
  n: 12
  o: 2
  horizon_s: 6
  attest_prob: 0.5
grid:
  o: [1, 2]
assertions:
  - {metric: fsm_violations, equals: 0}
  - {metric: sessions, min: 1}
"""


def write(tmp_path, text, name="scen.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def snap(devs):
    return {"t_us": 0, "devices": devs}


def dev(addr, fingers=(), proofs=0, halted=False, s=2, o=1):
    ovs = [{"index": i, "status": "member", "rid": addr * 10 + i, "pred": None, "successors": [],
            "fingers": list(fingers), "store": [], "leftovers": {}, "proofs": proofs} for i in range(o)]
    mem = memory_formula(s, len(fingers), proofs, o)
    return {"addr": addr, "uid": f"{addr:016x}", "key": addr, "status": "member-and-running", "halted": halted,
            "corrupt": None, "tampered": False, "overlays": ovs, "storage_bytes": mem}


# --- metric definitions --------------------------------------------------------------------

def test_memory_formula_example():
    assert memory_formula(2, 0, 0, 1) == 2136
    assert memory_formula(2, 5, 3, 3) == 1832 + (168 + 136 + 340 + 384) * 3


def test_zero_drops_is_full_resilience():
    rep = metrics_of(run(SimConfig(n=10, o=2, horizon_s=5)))
    assert rep.lost == 0 and rep.resilience_index == 1.0


def test_metrics_on_synthetic_trace():
    cfg = SimConfig(n=4, o=3)
    trace = [
        {"t_us": 0, "type": "drop", "dev": 1, "lost": [["aa", 0], ["bb", 1]]},
        {"t_us": 1, "type": "recovered", "dev": 2, "overlay": 0, "uid": "aa"},
        {"t_us": 1, "type": "recovered", "dev": 2, "overlay": 0, "uid": "aa"},   # counted once
        {"t_us": 5, "type": "tamper", "dev": 3},
        {"t_us": 2_000_005, "type": "verdict", "verifier": 0, "prover": 3, "outcome": "prover-corrupted",
         "flagged": [3], "slots": [], "latency_us": 400_000, "elected_golden": True, "corrupt_slots": 0},
        {"t_us": 3_000_000, "type": "verdict", "verifier": 1, "prover": 2, "outcome": "healthy",
         "flagged": [], "slots": [], "latency_us": 600_000, "elected_golden": True, "corrupt_slots": 1},
        {"t_us": 4_000_000, "type": "remove", "dev": 2},
        {"t_us": 5_500_000, "type": "alert", "dev": 1, "overlay": 0, "missing": 2},
        {"t_us": 6_000_000, "type": "alert", "dev": 1, "overlay": 1, "missing": 0},
    ]
    devs = [dev(0, fingers=[1, 2], proofs=4, o=3), dev(1, proofs=4, o=3), dev(2, halted=True, o=3),
            dev(3, proofs=1, o=3)]
    rep = compute_metrics(trace, [snap(devs)], cfg)
    assert (rep.lost, rep.recovered, rep.resilience_index) == (2, 1, 0.5)
    assert rep.sessions == 2 and rep.latency_mean_s == pytest.approx(0.5)
    assert rep.verdict_prover_corrupted == 1 and rep.verdict_healthy == 1
    assert (rep.tampered, rep.tampered_flagged, rep.tampered_missed) == (1, 1, 0)
    assert rep.detection_delay_max_s == pytest.approx(2.0)
    assert rep.honest_flagged == 0
    assert rep.minority_sessions == 1 and rep.third_sessions == 1   # 3*1 < 3 fails
    assert rep.removed == 1 and rep.removal_alert_coverage == pytest.approx(1 / 3)
    assert rep.alert_delay_max_periods == pytest.approx(1.5)
    assert rep.alerts == 2 and rep.false_alerts == 1
    # proof and finger statistics come from live devices only
    assert rep.max_proofs == 12 and rep.max_proofs_holders == 2 and rep.proofs_tail == 4
    assert rep.max_finger_entries == 6
    assert rep.memory_mismatches == 0


def test_memory_mismatch_is_counted():
    d = dev(0)
    d["storage_bytes"] += 1
    rep = compute_metrics([], [snap([d])], SimConfig(n=1, o=1))
    assert rep.memory_mismatches == 1


def test_bad_schemas_raise_format_error():
    cfg = SimConfig(n=1, o=1)
    with pytest.raises(FormatError):
        compute_metrics([{"type": "header", "schema": "safed-trace/99", "t_us": 0}], [snap([dev(0)])], cfg)
    with pytest.raises(FormatError):
        compute_metrics([], [{"schema": "nope", "devices": []}], cfg)
    with pytest.raises(FormatError):
        compute_metrics([], [], cfg)
    with pytest.raises(FormatError):
        compute_metrics([{"what": 1}], [snap([dev(0)])], cfg)


def test_linear_fit():
    f = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert f["slope"] == pytest.approx(2) and f["intercept"] == pytest.approx(1) and f["r2"] == pytest.approx(1)


# --- scenario parsing ---------------------------------------------------------------------------

@pytest.mark.parametrize("text,line", [
    ("schema: safed-scenario/1\nname: x\nnetwork:\n  n: 5\n  bogus: 3\n", 5),
    ("schema: safed-scenario/1\nname: x\nnetwork:\n  n: many\n", 4),
    ("schema: safed-scenario/1\nname: x\nextra: 1\n", 3),
    ("schema: safed-scenario/1\nname: x\nassertions:\n  - {metric: nope, min: 1}\n", 4),
    ("schema: safed-scenario/1\nname: x\nattacks:\n  - {action: tamper-device, ids: [77]}\n", 4),
    ("schema: safed-scenario/2\nname: x\n", 1),
])
def test_invalid_scenarios_report_a_line(text, line):
    with pytest.raises(InvalidScenario) as exc:
        parse_scenario(text, "s.yaml")
    assert exc.value.line == line
    assert str(exc.value).startswith(f"s.yaml:{line}:")


def test_not_yaml_is_invalid():
    with pytest.raises(InvalidScenario):
        parse_scenario("network: [unclosed", "s.yaml")


def test_grid_expands_cartesian():
    scen = parse_scenario(SMALL.replace("o: [1, 2]", "o: [1, 2]\n  n: [8, 12, 16]"), "s.yaml")
    cfgs = scen.configs()
    assert len(cfgs) == 6 and {(c.o, c.n) for c in cfgs} == {(o, n) for o in (1, 2) for n in (8, 12, 16)}


def test_bundled_scenarios_parse():
    names = harness.bundled_scenarios()
    assert "removal" in names and "fig-resilience" in names
    for name in names:
        assert harness.load_scenario(name).name == name


# --- running and artifacts ---------------------------------------------------------------------

def test_run_writes_artifacts_with_golden_header(tmp_path):
    code, summary = harness.run_scenario(write(tmp_path, SMALL), tmp_path / "out")
    assert code == 0 and summary["passed"]
    out = tmp_path / "out"
    header = (out / "metrics.csv").read_text().splitlines()[0]
    assert header == (GOLDEN / "metrics_header.csv").read_text().strip()
    assert header.split(",") == CSV_HEADER
    rows = harness.read_csv(out / "metrics.csv")
    assert [int(r["o"]) for r in rows] == [1, 2]
    assert json.loads((out / "summary.json").read_text())["schema"] == "safed-summary/1"


def test_artifacts_recompute_to_the_same_metrics(tmp_path):
    harness.run_scenario(write(tmp_path, SMALL), tmp_path / "out")
    rows = harness.read_csv(tmp_path / "out" / "metrics.csv")
    for point in (0, 1):
        trace, snaps, cfg = load_artifacts(tmp_path / "out", point)
        rep = compute_metrics(trace, snaps, cfg)
        row = rows[point]
        for k in ("sessions", "lost", "max_proofs", "verdict_healthy", "max_finger_entries", "alerts"):
            assert str(getattr(rep, k)) == row[k], k
        assert float(row["latency_mean_s"]) == pytest.approx(rep.latency_mean_s)


def test_seed_makes_csv_reproducible(tmp_path):
    p = write(tmp_path, SMALL)
    harness.run_scenario(p, tmp_path / "a", seed=9)
    harness.run_scenario(p, tmp_path / "b", seed=9)
    harness.run_scenario(p, tmp_path / "c", seed=10)
    a, b, c = ((tmp_path / x / "metrics.csv").read_text() for x in "abc")
    assert a == b and a != c


def test_failed_assertion_exits_one(tmp_path):
    p = write(tmp_path, SMALL.replace("{metric: sessions, min: 1}", "{metric: sessions, min: 100000}"))
    assert cli.main(["check", p]) == 1


def test_invalid_scenario_exits_two(tmp_path, capsys):
    p = write(tmp_path, "schema: safed-scenario/1\nname: x\nnetwork:\n  n: 5\n  bogus: 3\n")
    assert cli.main(["check", p]) == 2
    assert f"{p}:5:" in capsys.readouterr().err


def test_monotone_assertion(tmp_path):
    text = SMALL.replace("assertions:", "assertions:\n  - {metric: max_finger_entries, increasing: o}")
    code, summary = harness.run_scenario(write(tmp_path, text), tmp_path / "out")
    assert code == 0


def test_point_error_is_recorded(tmp_path):
    text = SMALL + "attacks:\n  - {action: remove-device, consecutive: 2, overlay: 5, at_s: 1}\n"
    code, summary = harness.run_scenario(write(tmp_path, text), tmp_path / "out")
    rows = harness.read_csv(tmp_path / "out" / "metrics.csv")
    assert all(r["error"] for r in rows)
    assert code == 1


# --- sweep -----------------------------------------------------------------------------------------

def test_sweep_grid(tmp_path):
    p = write(tmp_path, SMALL)
    assert cli.main(["sweep", p, "--grid", "n=6,9", "--grid", "o=1", "--out", str(tmp_path / "sw")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sw" / "metrics.csv")))
    assert [(r["n"], r["o"]) for r in rows] == [("6", "1"), ("9", "1")]


def test_empty_grid_sweep_writes_header_only(tmp_path):
    p = write(tmp_path, SMALL)
    code, summary = harness.sweep(p, {"n": []}, tmp_path / "sw")
    assert code == 0
    assert (tmp_path / "sw" / "metrics.csv").read_text().strip().split(",") == CSV_HEADER


def test_sweep_unknown_field_is_invalid(tmp_path):
    assert harness.sweep(write(tmp_path, SMALL), {"warp": [1]}, tmp_path / "sw")[0] == 2


def test_cli_list(capsys):
    assert cli.main(["list"]) == 0
    assert "detection" in capsys.readouterr().out.split()


def test_cli_run_prints_checks(tmp_path, capsys):
    assert cli.main(["run", write(tmp_path, SMALL), "--out", str(tmp_path / "o"), "--jobs", "2"]) == 0
    out = capsys.readouterr().out
    assert "PASS  fsm_violations" in out
