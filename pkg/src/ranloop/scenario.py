"""Scenario documents (YAML with sections) and twin construction.

A scenario is parsed completely or not at all: unknown keys and invariant
violations are collected and raised together as :class:`ScenarioError`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np
import yaml

from .loop import FAULT_FIELDS, FaultEvent, LoopConfig
from .observer import ObjectiveWeights
from .rng import Stream, keyed_generator
from .supervisor import SafetyEnvelope
from .twin import CellConfig, TrafficPhase, TwinParams, TwinState


class ScenarioError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class UeSpec:
    count: int = 1
    placement: str = "uniform"                           # uniform | explicit
    positions: tuple[tuple[float, float], ...] = ()
    noise_figure: float = 9.0


@dataclass(frozen=True)
class MobilitySpec:
    model: str = "none"                                  # none | random_waypoint
    speed_min: float = 0.0
    speed_max: float = 0.0


@dataclass(frozen=True)
class TrafficSpec:
    mean_offered_load: float | tuple[float, ...] = 1.0e6  # bits/s per UE
    packet_bits: float = 12000.0
    schedule: tuple[TrafficPhase, ...] = ()


@dataclass(frozen=True)
class TwinTuning:
    shadowing_sigma: float = 8.0
    coherence_ttis: int = 1000
    reattach_interval: int = 1000
    max_harq_tx: int = 4
    harq_rtt_ms: int = 8
    pf_alpha: float = 0.01


@dataclass(frozen=True)
class Scenario:
    name: str
    bounds: tuple[float, float, float, float]
    cells: tuple[CellConfig, ...]
    ues: UeSpec = field(default_factory=UeSpec)
    subbands: int = 4
    mobility: MobilitySpec = field(default_factory=MobilitySpec)
    traffic: TrafficSpec = field(default_factory=TrafficSpec)
    faults: tuple[FaultEvent, ...] = ()
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    envelope: SafetyEnvelope = field(default_factory=SafetyEnvelope)
    loop: LoopConfig = field(default_factory=LoopConfig)
    twin: TwinTuning = field(default_factory=TwinTuning)

    def twin_params(self) -> TwinParams:
        t = self.twin
        speed = (self.mobility.speed_min, self.mobility.speed_max) if self.mobility.model == "random_waypoint" else None
        return TwinParams(bounds=self.bounds, n_subbands=self.subbands, shadowing_sigma=t.shadowing_sigma,
                          coherence_ttis=t.coherence_ttis, reattach_interval=t.reattach_interval,
                          max_harq_tx=t.max_harq_tx, harq_rtt_ms=t.harq_rtt_ms, pf_alpha=t.pf_alpha,
                          packet_bits=self.traffic.packet_bits, speed_range=speed)

    def ue_positions(self, seed: int) -> np.ndarray:
        if self.ues.placement == "explicit":
            return np.array(self.ues.positions, dtype=float).reshape(-1, 2)
        x0, y0, x1, y1 = self.bounds
        g = keyed_generator(seed, Stream.PLACEMENT, 0)
        n = self.ues.count
        return np.column_stack([g.uniform(x0, x1, n), g.uniform(y0, y1, n)])

    def build_twin(self, seed: int) -> TwinState:
        return TwinState(list(self.cells), list(range(self.ues.count)), self.ue_positions(seed),
                         self.traffic.mean_offered_load, self.twin_params(), seed,
                         noise_figure=self.ues.noise_figure, traffic=self.traffic.schedule)


# ----- parsing ----------------------------------------------------------------------------

_CELL_KEYS = {f.name for f in fields(CellConfig)}
_TOP_KEYS = {"name", "area", "subbands", "cells", "ues", "mobility", "traffic", "faults", "weights",
             "envelope", "loop", "twin"}


def _keys(d: Any, allowed: set[str], path: str, problems: list[str]) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        problems.append(f"{path}: expected a mapping")
        return {}
    unknown = sorted(set(map(str, d)) - allowed)
    if unknown:
        problems.append(f"{path}: unknown key(s) {', '.join(unknown)}")
    return {k: v for k, v in d.items() if k in allowed}


def _build(cls, d: dict, path: str, problems: list[str], **extra):
    try:
        return cls(**d, **extra)
    except (TypeError, ValueError) as exc:
        problems.append(f"{path}: {exc}")
        return None


def _in_bounds(p, bounds) -> bool:
    x0, y0, x1, y1 = bounds
    return x0 <= p[0] <= x1 and y0 <= p[1] <= y1


def parse_scenario_dict(doc: Any) -> Scenario:
    problems: list[str] = []
    top = _keys(doc, _TOP_KEYS, "<root>", problems)
    if not isinstance(doc, dict):
        raise ScenarioError(problems)

    name = str(top.get("name", "unnamed"))
    area = _keys(top.get("area"), {"x_min", "y_min", "x_max", "y_max"}, "area", problems)
    bounds = (float(area.get("x_min", 0.0)), float(area.get("y_min", 0.0)),
              float(area.get("x_max", 1000.0)), float(area.get("y_max", 1000.0)))
    if bounds[0] >= bounds[2] or bounds[1] >= bounds[3]:
        problems.append("area: x_min < x_max and y_min < y_max required")
    subbands = top.get("subbands", 4)
    if not isinstance(subbands, int) or subbands < 1:
        problems.append("subbands: must be a positive integer")
        subbands = 4

    envelope = _build(SafetyEnvelope, _keys(top.get("envelope"), {f.name for f in fields(SafetyEnvelope)},
                                            "envelope", problems), "envelope", problems) or SafetyEnvelope()
    weights = _build(ObjectiveWeights, _keys(top.get("weights"), {f.name for f in fields(ObjectiveWeights)},
                                             "weights", problems), "weights", problems) or ObjectiveWeights()
    loop = _build(LoopConfig, _keys(top.get("loop"), {f.name for f in fields(LoopConfig)}, "loop", problems),
                  "loop", problems) or LoopConfig()
    tuning = _build(TwinTuning, _keys(top.get("twin"), {f.name for f in fields(TwinTuning)}, "twin", problems),
                    "twin", problems) or TwinTuning()

    raw_cells = top.get("cells") or []
    if not isinstance(raw_cells, list) or not raw_cells:
        problems.append("cells: at least one cell required")
        raw_cells = []
    cells = []
    for i, rc in enumerate(raw_cells):
        path = f"cells[{i}]"
        d = _keys(rc, _CELL_KEYS, path, problems)
        d.setdefault("cell_id", i)
        if "position" not in d:
            problems.append(f"{path}.position: required")
            continue
        d.setdefault("subband_mask", [1] * subbands)
        cell = _build(CellConfig, d, path, problems)
        if cell is None:
            continue
        if len(cell.subband_mask) != subbands:
            problems.append(f"{path}.subband_mask: needs {subbands} entries")
        problems.extend(f"{path}: {p}" for p in cell.problems(envelope.power_max))
        if not _in_bounds(cell.position, bounds):
            problems.append(f"{path}.position: outside area")
        cells.append(cell)
    ids = [c.cell_id for c in cells]
    if len(set(ids)) != len(ids):
        problems.append("cells: duplicate cell_id")
    if len({c.n_prb for c in cells}) > 1:
        problems.append("cells: all cells must share the same n_prb")
    if sum(c.active for c in cells) < envelope.min_active_cells and cells:
        problems.append("cells: fewer active cells than envelope.min_active_cells")

    ud = _keys(top.get("ues"), {f.name for f in fields(UeSpec)}, "ues", problems)
    if "positions" in ud:
        ud["positions"] = tuple(tuple(float(v) for v in p) for p in ud["positions"])
        ud.setdefault("placement", "explicit")
        ud.setdefault("count", len(ud["positions"]))
    ues = _build(UeSpec, ud, "ues", problems) or UeSpec()
    if ues.count < 1:
        problems.append("ues.count: at least one UE required")
    if ues.placement not in ("uniform", "explicit"):
        problems.append("ues.placement: must be 'uniform' or 'explicit'")
    if ues.placement == "explicit":
        if len(ues.positions) != ues.count:
            problems.append("ues.positions: length must equal ues.count")
        for j, p in enumerate(ues.positions):
            if len(p) != 2 or not _in_bounds(p, bounds):
                problems.append(f"ues.positions[{j}]: outside area")

    mobility = _build(MobilitySpec, _keys(top.get("mobility"), {f.name for f in fields(MobilitySpec)},
                                          "mobility", problems), "mobility", problems) or MobilitySpec()
    if mobility.model not in ("none", "random_waypoint"):
        problems.append("mobility.model: must be 'none' or 'random_waypoint'")
    elif mobility.model == "random_waypoint" and not 0 < mobility.speed_min <= mobility.speed_max:
        problems.append("mobility: random_waypoint needs 0 < speed_min <= speed_max")

    td = _keys(top.get("traffic"), {"mean_offered_load", "packet_bits", "schedule"}, "traffic", problems)
    load = td.get("mean_offered_load", 1.0e6)
    if isinstance(load, list):
        load = tuple(float(v) for v in load)
        if len(load) != ues.count:
            problems.append("traffic.mean_offered_load: per-UE list must have ues.count entries")
        if any(v < 0 for v in load):
            problems.append("traffic.mean_offered_load: must be >= 0")
    else:
        load = float(load)
        if load < 0:
            problems.append("traffic.mean_offered_load: must be >= 0")
    phases = []
    for j, ph in enumerate(td.get("schedule") or []):
        path = f"traffic.schedule[{j}]"
        pd = _keys(ph, {"start_tti", "end_tti", "multiplier", "ues"}, path, problems)
        if pd.get("ues") is not None:
            pd["ues"] = tuple(int(u) for u in pd["ues"])
        p = _build(TrafficPhase, pd, path, problems)
        if p is None:
            continue
        if not 0 <= p.start_tti < p.end_tti:
            problems.append(f"{path}: need 0 <= start_tti < end_tti")
        if p.multiplier < 0:
            problems.append(f"{path}.multiplier: must be >= 0")
        if p.ues is not None and any(not 0 <= u < ues.count for u in p.ues):
            problems.append(f"{path}.ues: unknown UE id")
        phases.append(p)
    for a in range(len(phases)):
        for b in range(a + 1, len(phases)):
            pa, pb = phases[a], phases[b]
            targets_a = set(range(ues.count)) if pa.ues is None else set(pa.ues)
            targets_b = set(range(ues.count)) if pb.ues is None else set(pb.ues)
            if targets_a & targets_b and pa.start_tti < pb.end_tti and pb.start_tti < pa.end_tti:
                problems.append(f"traffic.schedule[{a}] and [{b}]: overlap for the same UE(s)")
    traffic = TrafficSpec(load, float(td.get("packet_bits", 12000.0)), tuple(phases))
    if traffic.packet_bits <= 0:
        problems.append("traffic.packet_bits: must be > 0")

    faults = []
    for j, fd in enumerate(top.get("faults") or []):
        path = f"faults[{j}]"
        d = _keys(fd, {"tti", "cell_id", "field", "value"}, path, problems)
        if set(d) != {"tti", "cell_id", "field", "value"}:
            problems.append(f"{path}: needs tti, cell_id, field and value")
            continue
        if d["field"] not in FAULT_FIELDS:
            problems.append(f"{path}.field: must be one of {FAULT_FIELDS}")
        if d["cell_id"] not in ids:
            problems.append(f"{path}.cell_id: unknown cell {d['cell_id']}")
        if not isinstance(d["tti"], int) or d["tti"] < 0:
            problems.append(f"{path}.tti: must be a non-negative integer")
        value = tuple(bool(v) for v in d["value"]) if d["field"] == "subband_mask" else d["value"]
        faults.append(FaultEvent(d["tti"], d["cell_id"], d["field"], value))

    if problems:
        raise ScenarioError(problems)
    return Scenario(name=name, bounds=bounds, cells=tuple(cells), ues=ues, subbands=subbands, mobility=mobility,
                    traffic=traffic, faults=tuple(faults), weights=weights, envelope=envelope, loop=loop,
                    twin=tuning)


def parse_scenario(text: str) -> Scenario:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError([f"malformed document: {exc}"]) from None
    return parse_scenario_dict(doc)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# ----- serialisation ------------------------------------------------------------------------

def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def scenario_to_dict(s: Scenario) -> dict:
    x0, y0, x1, y1 = s.bounds
    ues = _plain(s.ues)
    return {
        "name": s.name,
        "area": {"x_min": x0, "y_min": y0, "x_max": x1, "y_max": y1},
        "subbands": s.subbands,
        "cells": [c.to_dict() for c in s.cells],
        "ues": ues,
        "mobility": _plain(s.mobility),
        "traffic": {"mean_offered_load": _plain(s.traffic.mean_offered_load),
                    "packet_bits": s.traffic.packet_bits,
                    "schedule": [_plain(p) for p in s.traffic.schedule]},
        "faults": [{"tti": f.tti, "cell_id": f.cell_id, "field": f.field,
                    "value": [int(b) for b in f.value] if f.field == "subband_mask" else f.value}
                   for f in s.faults],
        "weights": _plain(s.weights),
        "envelope": _plain(s.envelope),
        "loop": _plain(s.loop),
        "twin": _plain(s.twin),
    }


def serialize_scenario(s: Scenario) -> str:
    return yaml.safe_dump(scenario_to_dict(s), sort_keys=False, default_flow_style=None)
