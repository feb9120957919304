import json
import os
import subprocess
import sys

import pytest
import yaml
from hypothesis import given, settings, strategies as st

from conftest import SCENARIOS
from ranloop.agents import action_from_dict
from ranloop.checkpoint import (CheckpointError, CheckpointVersionError, CorruptCheckpointError, load_checkpoint,
                                restore, restore_episode, save_checkpoint)
from ranloop.export import ExportError, encode_record, export_records, first_divergence, read_records
from ranloop.loop import Episode, LoopConfig
from ranloop.observer import ObjectiveWeights
from ranloop.scenario import ScenarioError, load_scenario, parse_scenario, serialize_scenario
from ranloop.supervisor import SafetyEnvelope, Supervisor

MINIMAL = "cells:\n  - {position: [500, 500]}\nues: {count: 1}\n"

SHORT = """
name: short
area: {x_min: 0, y_min: 0, x_max: 1000, y_max: 1000}
cells:
  - {cell_id: 0, position: [300, 500]}
  - {cell_id: 1, position: [700, 500]}
ues: {count: 6}
traffic: {mean_offered_load: 5.0e5}
envelope: {shadow_horizon: 100}
loop: {decision_interval: 100, total_ttis: 1200, checkpoint_interval: 3}
"""


# ----- scenarios --------------------------------------------------------------------------------

def test_minimal_document_fills_defaults():
    s = parse_scenario(MINIMAL)
    assert s.cells[0].tx_power == 43.0 and s.cells[0].subband_mask == (True,) * 4
    assert s.envelope == SafetyEnvelope() and s.weights == ObjectiveWeights() and s.loop == LoopConfig()
    assert s.ues.count == 1 and s.subbands == 4 and s.mobility.model == "none"
    doc = yaml.safe_load(serialize_scenario(s))
    assert doc["envelope"]["power_max"] == 46.0 and doc["loop"]["decision_interval"] == 200


def test_power_bound_error_cites_envelope():
    with pytest.raises(ScenarioError, match="envelope max 46") as exc:
        parse_scenario("cells:\n  - {position: [500, 500], tx_power: 99}\n")
    assert any(p.startswith("cells[0]") for p in exc.value.problems)


def test_unknown_keys_listed_together():
    text = MINIMAL + "colour: red\nloop: {speed: 3}\n"
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(text)
    msg = str(exc.value)
    assert "<root>: unknown key(s) colour" in msg and "loop: unknown key(s) speed" in msg


@pytest.mark.parametrize("extra, path", [
    ("ues: {positions: [[5000, 1]]}\n", "ues.positions[0]"),
    ("traffic: {schedule: [{start_tti: 0, end_tti: 10, multiplier: 2}, {start_tti: 5, end_tti: 20, "
     "multiplier: 1}]}\n", "traffic.schedule[0] and [1]"),
    ("faults: [{tti: 5, cell_id: 9, field: tx_power, value: 1}]\n", "faults[0].cell_id"),
    ("faults: [{tti: 5, cell_id: 0, field: colour, value: 1}]\n", "faults[0].field"),
    ("loop: {decision_interval: 0}\n", "loop"),
    ("envelope: {degradation_fraction: 2.0}\n", "envelope"),
])
def test_invariant_violations_name_field_paths(extra, path):
    text = "cells:\n  - {cell_id: 0, position: [500, 500]}\n" + extra
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(text)
    assert any(p.startswith(path) for p in exc.value.problems), exc.value.problems


def test_mixed_carriers_and_malformed_documents_rejected():
    with pytest.raises(ScenarioError, match="n_prb"):
        parse_scenario("cells:\n  - {position: [1, 1], n_prb: 50}\n  - {position: [2, 2], n_prb: 25}\n")
    with pytest.raises(ScenarioError, match="malformed"):
        parse_scenario("cells: [\n")
    with pytest.raises(ScenarioError):
        parse_scenario("- just a list\n")


@pytest.mark.parametrize("name", sorted(p.name for p in SCENARIOS.glob("*.yaml")))
def test_shipped_scenarios_round_trip(name):
    s = load_scenario(SCENARIOS / name)
    assert parse_scenario(serialize_scenario(s)) == s


_cell = st.fixed_dictionaries({
    "position": st.tuples(st.floats(0, 1000), st.floats(0, 1000)).map(list),
    "tx_power": st.floats(0, 46),
    "antenna_gain": st.floats(-5, 20),
    "subband_mask": st.lists(st.integers(0, 1), min_size=4, max_size=4).filter(any),
})


@settings(max_examples=40, deadline=None)
@given(st.lists(_cell, min_size=1, max_size=4), st.integers(1, 20), st.floats(0, 1e7),
       st.sampled_from(AGENTS := ["static", "random", "combined"]), st.booleans())
def test_round_trip_fixpoint(cells, n_ue, load, agent, mobile):
    doc = {"cells": [dict(c, cell_id=i) for i, c in enumerate(cells)], "ues": {"count": n_ue},
           "traffic": {"mean_offered_load": load}, "loop": {"agent": agent}}
    if mobile:
        doc["mobility"] = {"model": "random_waypoint", "speed_min": 1.0, "speed_max": 2.0}
    s = parse_scenario(yaml.safe_dump(doc))
    assert parse_scenario(serialize_scenario(s)) == s


def test_build_twin_places_ues_inside_area():
    s = parse_scenario(SHORT)
    t = s.build_twin(3)
    assert ((t.pos >= 0) & (t.pos <= 1000)).all()
    assert (t.pos == s.build_twin(3).pos).all() and (t.pos != s.build_twin(4).pos).any()


# ----- export -----------------------------------------------------------------------------------

def test_export_formatting(tmp_path):
    rec = {"type": "audit", "z": 1.23456789012345, "b": float("nan"), "a": [float("inf"), -float("inf")],
           "nested": {"y": 2, "x": 0.1}}
    line = encode_record(rec)
    assert line == '{"a":["inf","-inf"],"b":null,"nested":{"x":0.1,"y":2},"type":"audit","z":1.23456789}'
    with pytest.raises(ValueError):
        encode_record({"type": "other"})
    empty = tmp_path / "empty.jsonl"
    assert export_records([], empty) == 0 and empty.read_bytes() == b""


def test_export_io_error_names_path(tmp_path):
    bad = tmp_path / "missing" / "x.jsonl"
    with pytest.raises(ExportError, match="missing"):
        export_records([{"type": "audit"}], bad)


def test_decision_record_round_trip(tmp_path):
    ep = Episode(parse_scenario(SHORT), 3)
    for _ in range(3):
        ep.step_interval()
    path = tmp_path / "e.jsonl"
    export_records(ep.stream, path)
    raw = path.read_bytes()
    assert raw.endswith(b"\n") and b"\r" not in raw
    decisions = [r for r in read_records(path) if r["type"] == "decision"]
    for row, rec in zip(decisions, ep.records):
        assert row["tti"] == rec.tti
        assert row["verdict"]["kind"] == rec.verdict.kind
        back = action_from_dict(row["proposed"])
        assert set(back) == set(rec.proposed)
        for cid, a in rec.proposed.items():
            assert back[cid].subband_mask == a.subband_mask and back[cid].sleep == a.sleep
            assert back[cid].power_delta == pytest.approx(a.power_delta, rel=1e-8)


def test_first_divergence():
    assert first_divergence(b"a\nb\n", b"a\nb\n") is None
    assert first_divergence(b"a\nb\n", b"a\nc\n") == (2, "b", "c")


# ----- checkpoints -------------------------------------------------------------------------------

@pytest.fixture
def trained(tmp_path):
    ep = Episode(parse_scenario(SHORT), 7)
    for _ in range(5):
        ep.step_interval()
    path = tmp_path / "agent.ckpt"
    save_checkpoint(path, ep.agent, ep.supervisor, ep)
    return ep, path


def test_checkpoint_round_trip(trained):
    ep, path = trained
    fresh = Episode(parse_scenario(SHORT), 7)
    restore(load_checkpoint(path), fresh.agent, fresh.supervisor)
    assert fresh.agent.q.table.values == ep.agent.q.table.values
    assert fresh.supervisor.state_dict() == ep.supervisor.state_dict()


def test_truncated_checkpoint_reports_offset(trained, tmp_path):
    _, path = trained
    data = path.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(data[: len(data) - 40])
    with pytest.raises(CorruptCheckpointError, match="byte offset") as exc:
        load_checkpoint(cut)
    assert exc.value.offset > 0
    flipped = bytearray(data)
    flipped[-5] ^= 0x01
    cut.write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpointError, match="digest"):
        load_checkpoint(cut)


def test_checkpoint_version_mismatch(trained, tmp_path):
    _, path = trained
    data = path.read_bytes().replace(b"RANLOOP-CHECKPOINT 1 ", b"RANLOOP-CHECKPOINT 7 ", 1)
    other = tmp_path / "v7.ckpt"
    other.write_bytes(data)
    with pytest.raises(CheckpointVersionError, match="version 7.*version 1"):
        load_checkpoint(other)


def test_resume_continues_identically(trained):
    ep, path = trained
    resumed = Episode(parse_scenario(SHORT), 7)
    restore_episode(load_checkpoint(path), resumed)
    ep.run()
    resumed.run()
    assert resumed.stream == ep.stream
    with pytest.raises(CheckpointError, match="seed"):
        restore_episode(load_checkpoint(path), Episode(parse_scenario(SHORT), 8))


# ----- command line -------------------------------------------------------------------------------

def _cli(*args, env=None):
    e = dict(os.environ, **(env or {}))
    return subprocess.run([sys.executable, "-m", "ranloop.cli", *map(str, args)], capture_output=True,
                          text=True, env=e)


def test_cli_validate(tmp_path):
    assert _cli("validate", "--scenario", SCENARIOS / "example.yaml").returncode == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text("cells:\n  - {position: [1, 1], tx_power: 99}\n")
    r = _cli("validate", "--scenario", bad)
    assert r.returncode == 1 and "envelope max 46" in r.stderr
    assert _cli("validate", "--scenario", tmp_path / "nope.yaml").returncode == 3
    assert _cli("validate").returncode == 1
    assert _cli("validate", "--scenario", SCENARIOS / "example.yaml",
                env={"RANLOOP_LOG_LEVEL": "loud"}).returncode == 1


def test_cli_run_replay_and_checkpoint(tmp_path):
    sc = tmp_path / "short.yaml"
    sc.write_text(SHORT)
    out, ck = tmp_path / "run.jsonl", tmp_path / "run.ckpt"
    r = _cli("run", "--scenario", sc, "--seed", 11, "--export", out, "--ttis", 600, "--checkpoint", ck,
             env={"RANLOOP_LOG_LEVEL": "info"})
    assert r.returncode == 0, r.stderr
    assert ck.exists() and load_checkpoint(ck)["episode"]["tti"] == 600
    assert _cli("replay", "--scenario", sc, "--seed", 11, "--export", out, "--ttis", 600).returncode == 0
    r = _cli("replay", "--scenario", sc, "--seed", 12, "--export", out, "--ttis", 600)
    assert r.returncode == 2 and "diverges at line" in r.stderr
    assert _cli("replay", "--scenario", sc, "--seed", 11, "--export", tmp_path / "none.jsonl").returncode == 3
    assert _cli("run", "--scenario", sc, "--seed", 11, "--export", tmp_path / "no" / "x.jsonl",
                "--ttis", 200).returncode == 3


def test_cli_resume_matches_uninterrupted_run(tmp_path):
    sc = tmp_path / "short.yaml"
    sc.write_text(SHORT)
    full, part, ck = tmp_path / "full.jsonl", tmp_path / "part.jsonl", tmp_path / "half.ckpt"
    assert _cli("run", "--scenario", sc, "--seed", 4, "--export", full).returncode == 0
    assert _cli("run", "--scenario", sc, "--seed", 4, "--export", part, "--until", 500,
                "--checkpoint", ck).returncode == 0
    assert len(read_records(part)) < len(read_records(full))
    assert _cli("run", "--scenario", sc, "--seed", 4, "--export", part, "--resume", ck).returncode == 0
    assert part.read_bytes() == full.read_bytes()


def test_cli_sweep(tmp_path):
    sc = tmp_path / "short.yaml"
    sc.write_text(SHORT)
    out = tmp_path / "sweep"
    r = _cli("sweep", "--scenario", sc, "--seeds", 2, "--workers", 2, "--ttis", 400, "--out", out)
    assert r.returncode == 0, r.stderr
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"static", "combined"} and summary["combined"]["seeds"] == 2
    assert len(list(out.glob("*.jsonl"))) == 4
    assert _cli("sweep", "--scenario", sc, "--seeds", 1, "--agents", "bogus").returncode == 1
