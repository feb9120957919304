"""Safety gate between agents and the twin: bounds, shadow validation, checkpoints, rollback."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .agents import ActionSet, CellAction
from .observer import ObjectiveWeights, aggregate, compute_reward
from .twin import CellConfig


class NoCheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class SafetyEnvelope:
    power_min: float = 0.0
    power_max: float = 46.0
    max_power_step: float = 3.0
    min_coverage_rsrp: float = -115.0
    mad: float = 50.0
    min_active_cells: int = 1
    degradation_fraction: float = 0.15
    degradation_windows: int = 5
    shadow_horizon: int = 500
    shadow_tolerance: float = 0.05

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise ValueError(f"{name} must be finite")
        if self.power_min > self.power_max:
            raise ValueError("power_min must be <= power_max")
        if not 0.0 < self.degradation_fraction < 1.0:
            raise ValueError("degradation_fraction must lie in (0, 1)")
        if self.max_power_step < 0 or self.min_active_cells < 0:
            raise ValueError("max_power_step and min_active_cells must be >= 0")
        if self.degradation_windows < 1 or self.shadow_horizon < 1:
            raise ValueError("degradation_windows and shadow_horizon must be >= 1")


APPROVED, MODIFIED, REJECTED = "approved", "modified", "rejected"


@dataclass(frozen=True)
class Verdict:
    kind: str
    action: ActionSet | None = None          # final action for approved/modified
    adjustments: tuple[str, ...] = ()
    reason: str | None = None                # rejected only
    detail: str = ""

    @property
    def accepted(self) -> bool:
        return self.kind != REJECTED


def _rejected(reason: str, detail: str) -> Verdict:
    return Verdict(REJECTED, reason=reason, detail=detail)


def validate_action(envelope: SafetyEnvelope, current, proposed: ActionSet) -> Verdict:
    """Clamp bound violations (modified) and reject structural ones."""
    if not proposed:
        return Verdict(APPROVED, action={})
    by_id = {c.cell_id: c for c in current}
    unknown = sorted(set(proposed) - set(by_id), key=str)
    if unknown:
        return _rejected("unknown-cell", f"unknown cell(s) {unknown}")

    active = {cid: c.active for cid, c in by_id.items()}
    for cid, a in proposed.items():
        if a.sleep:
            active[cid] = not active[cid]
    n_active = sum(active.values())
    if n_active < envelope.min_active_cells:
        return _rejected("min-active-cells",
                         f"{n_active} active cell(s) after action, need {envelope.min_active_cells}")

    final, notes = {}, []
    for cid in sorted(proposed):
        a, cell = proposed[cid], by_id[cid]
        if a.subband_mask is not None:
            if len(a.subband_mask) != len(cell.subband_mask):
                return _rejected("invalid-mask", f"cell {cid}: mask length {len(a.subband_mask)}")
            if active[cid] and not any(a.subband_mask):
                return _rejected("empty-mask", f"cell {cid}: active cell needs a sub-band")
        elif active[cid] and not any(cell.subband_mask):
            return _rejected("empty-mask", f"cell {cid}: woken cell has no sub-band")
        delta = a.power_delta
        if delta is not None:
            if not math.isfinite(delta):
                return _rejected("invalid-power", f"cell {cid}: power delta {delta}")
            step = min(max(delta, -envelope.max_power_step), envelope.max_power_step)
            if step != delta:
                notes.append(f"cell {cid}: power step {delta:+.3f} dB clamped to {step:+.3f} dB")
            target = min(max(cell.tx_power + step, envelope.power_min), envelope.power_max)
            if target != cell.tx_power + step:
                notes.append(f"cell {cid}: power {cell.tx_power + step:.3f} dBm clamped to {target:.3f} dBm")
            delta = target - cell.tx_power
        final[cid] = replace(a, power_delta=delta)
    if notes:
        return Verdict(MODIFIED, action=final, adjustments=tuple(notes))
    return Verdict(APPROVED, action=final)


def resolve_action(current, action: ActionSet) -> list:
    """Turn a (validated) action set into absolute cell configurations."""
    by_id = {c.cell_id: c for c in current}
    out = []
    for cid in sorted(action):
        a: CellAction = action[cid]
        cell = by_id[cid]
        changes = {}
        if a.power_delta is not None:
            changes["tx_power"] = cell.tx_power + a.power_delta
        if a.subband_mask is not None:
            changes["subband_mask"] = tuple(a.subband_mask)
        if a.sleep:
            changes["active"] = not cell.active
        if changes:
            out.append(replace(cell, **changes))
    return out


@dataclass(frozen=True)
class ShadowResult:
    passed: bool
    reason: str | None
    mean_reward: float
    min_rsrp: float
    p95_delay: float


def shadow_evaluate(live, action: ActionSet, envelope: SafetyEnvelope, weights: ObjectiveWeights,
                    reward_ewma: float | None) -> ShadowResult:
    """Predict the effect of ``action`` on a fork of ``live``; ``live`` is not modified."""
    twin = live.fork()
    twin.apply_config(resolve_action(twin.cells, action))
    stats = twin.advance(envelope.shadow_horizon)
    report = aggregate(stats, cell_ids=[c.cell_id for c in twin.cells])
    reward = compute_reward(report, weights).total
    mins = [c.rsrp_min for c in report.cells if c.rsrp_min is not None]
    min_rsrp = min(mins) if mins else -math.inf
    if min_rsrp < envelope.min_coverage_rsrp:
        reason = "coverage"
    elif report.p95_delay > envelope.mad:
        reason = "mad"
    elif reward_ewma is not None and reward < reward_ewma - envelope.shadow_tolerance:
        reason = "reward"
    else:
        reason = None
    return ShadowResult(reason is None, reason, reward, min_rsrp, report.p95_delay)


@dataclass(frozen=True)
class Checkpoint:
    checkpoint_id: int
    tti: int
    configs: tuple
    baseline_reward: float | None

    def to_dict(self) -> dict:
        return {"checkpoint_id": self.checkpoint_id, "tti": self.tti, "baseline_reward": self.baseline_reward,
                "configs": [c.to_dict() for c in self.configs]}

    @classmethod
    def from_dict(cls, d) -> "Checkpoint":
        return cls(int(d["checkpoint_id"]), int(d["tti"]), tuple(CellConfig.from_dict(c) for c in d["configs"]),
                   None if d["baseline_reward"] is None else float(d["baseline_reward"]))


def make_checkpoint(tti: int, configs, reward_ewma: float | None, checkpoint_id: int) -> Checkpoint:
    # CellConfig is frozen, so a tuple copy is a full snapshot
    return Checkpoint(checkpoint_id, int(tti), tuple(configs), reward_ewma)


def degradation_threshold(baseline: float, fraction: float) -> float:
    if baseline > 0:
        return (1.0 - fraction) * baseline
    return baseline - fraction * abs(baseline) - 1e-6


def should_rollback(history, checkpoint: Checkpoint | None, envelope: SafetyEnvelope) -> bool:
    n = envelope.degradation_windows
    if checkpoint is None or checkpoint.baseline_reward is None or len(history) < n:
        return False
    limit = degradation_threshold(checkpoint.baseline_reward, envelope.degradation_fraction)
    return all(r < limit for r in list(history)[-n:])


def rollback(state, checkpoint: Checkpoint | None):
    """Restore the checkpointed cell configurations; traffic and UE state are not rewound."""
    if checkpoint is None:
        raise NoCheckpointError("no checkpoint")
    before = list(state.cells)
    state.apply_config(checkpoint.configs)
    changed = sorted(a.cell_id for a, b in zip(before, state.cells) if a != b)
    return state, {"kind": "rollback", "tti": state.tti, "checkpoint_id": checkpoint.checkpoint_id,
                   "checkpoint_tti": checkpoint.tti, "cells_changed": changed}


@dataclass
class Supervisor:
    """Owns the reward EWMA, the reward history since the last checkpoint, and the checkpoints."""

    envelope: SafetyEnvelope = field(default_factory=SafetyEnvelope)
    weights: ObjectiveWeights = field(default_factory=ObjectiveWeights)
    ewma_alpha: float = 0.2
    reward_ewma: float | None = None
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    next_id: int = 1

    @property
    def latest(self) -> Checkpoint | None:
        return self.checkpoints[-1] if self.checkpoints else None

    def observe_reward(self, r: float) -> bool:
        """Fold ``r`` into the EWMA and history; True when this completed a pending checkpoint baseline."""
        self.reward_ewma = r if self.reward_ewma is None else \
            (1.0 - self.ewma_alpha) * self.reward_ewma + self.ewma_alpha * r
        self.history.append(r)
        cp = self.latest
        if cp is not None and cp.baseline_reward is None:
            # the tti-0 snapshot has no reward yet; its first interval measures exactly its configs
            self.checkpoints[-1] = replace(cp, baseline_reward=self.reward_ewma)
            return True
        return False

    def validate(self, configs, action) -> Verdict:
        return validate_action(self.envelope, configs, action)

    def shadow(self, live, action) -> ShadowResult:
        return shadow_evaluate(live, action, self.envelope, self.weights, self.reward_ewma)

    def degraded_now(self) -> bool:
        cp = self.latest
        if cp is None or cp.baseline_reward is None or not self.history:
            return False
        return self.history[-1] < degradation_threshold(cp.baseline_reward, self.envelope.degradation_fraction)

    def checkpoint(self, tti: int, configs) -> Checkpoint:
        cp = make_checkpoint(tti, configs, self.reward_ewma, self.next_id)
        self.next_id += 1
        self.checkpoints.append(cp)
        self.history.clear()
        return cp

    def rollback_due(self) -> bool:
        return should_rollback(self.history, self.latest, self.envelope)

    def rollback(self, state):
        state, audit = rollback(state, self.latest)
        self.history.clear()
        return state, audit

    def state_dict(self) -> dict:
        return {"reward_ewma": self.reward_ewma, "history": list(self.history), "next_id": self.next_id,
                "checkpoints": [c.to_dict() for c in self.checkpoints]}

    def load_state_dict(self, d: dict):
        self.reward_ewma = d["reward_ewma"]
        self.history = [float(x) for x in d["history"]]
        self.next_id = int(d["next_id"])
        self.checkpoints = [Checkpoint.from_dict(c) for c in d["checkpoints"]]
