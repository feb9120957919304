"""Closed control loop: observe, reward, learn, propose, supervise, actuate, checkpoint, roll back."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

from .agents import (AGENT_KINDS, Agent, DivergedError, Observation, action_to_dict, make_agent)
from .observer import (AnomalyTracker, RewardSignal, TelemetryReport, aggregate, compute_reward,
                       forecast_load)
from .rng import Stream, keyed_generator
from .supervisor import ShadowResult, Supervisor, Verdict, resolve_action

log = logging.getLogger(__name__)

FAULT_FIELDS = ("tx_power", "active", "subband_mask", "antenna_gain")
ANOMALY_METRICS = ("throughput", "p95_delay", "total_power", "spectral_efficiency")


@dataclass(frozen=True)
class LoopConfig:
    decision_interval: int = 200
    checkpoint_interval: int = 10
    total_ttis: int = 20000
    agent: str = "combined"
    shadow_enabled: bool = True

    def __post_init__(self):
        if self.decision_interval < 1:
            raise ValueError("decision_interval must be >= 1")
        if self.total_ttis < self.decision_interval:
            raise ValueError("total_ttis must be >= decision_interval")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")
        if self.agent not in AGENT_KINDS:
            raise ValueError(f"agent must be one of {AGENT_KINDS}")

    @property
    def telemetry_window(self) -> int:
        return self.decision_interval

    @property
    def n_intervals(self) -> int:
        return math.ceil(self.total_ttis / self.decision_interval)


@dataclass(frozen=True)
class FaultEvent:
    """Exogenous configuration change applied at the start of ``tti``, bypassing the supervisor."""

    tti: int
    cell_id: int
    field: str
    value: object


@dataclass
class RunRecord:
    interval: int
    tti: int
    report: TelemetryReport
    reward: RewardSignal
    proposed: dict
    verdict: Verdict
    shadow: ShadowResult | None
    applied: bool
    rollback: bool
    diagnostics: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        v = self.verdict
        return {
            "type": "decision", "interval": self.interval, "tti": self.tti,
            "window": [self.report.start_tti, self.report.end_tti],
            "reward": {"total": self.reward.total, "se_term": self.reward.se_term,
                       "fairness_term": self.reward.fairness_term,
                       "latency_penalty": self.reward.latency_penalty,
                       "energy_penalty": self.reward.energy_penalty},
            "proposed": action_to_dict(self.proposed),
            "verdict": {"kind": v.kind, "reason": v.reason, "detail": v.detail,
                        "adjustments": list(v.adjustments),
                        "action": None if v.action is None else action_to_dict(v.action)},
            "shadow": None if self.shadow is None else {
                "passed": self.shadow.passed, "reason": self.shadow.reason,
                "mean_reward": self.shadow.mean_reward, "min_rsrp": self.shadow.min_rsrp,
                "p95_delay": self.shadow.p95_delay},
            "applied": self.applied, "rollback": self.rollback, "diagnostics": self.diagnostics,
        }


def apply_fault(twin, fault: FaultEvent):
    cell = twin.cell(fault.cell_id)
    value = fault.value
    if fault.field == "subband_mask":
        value = tuple(bool(b) for b in value)
    elif fault.field == "active":
        value = bool(value)
    else:
        value = float(value)
    twin.apply_config([replace(cell, **{fault.field: value})])


class Episode:
    """One closed-loop run; call :meth:`step_interval` repeatedly or :meth:`run`."""

    def __init__(self, scenario, seed: int, loop: LoopConfig | None = None, envelope=None, weights=None,
                 agent: Agent | None = None):
        self.scenario = scenario
        self.seed = int(seed)
        self.loop = loop or scenario.loop
        self.envelope = envelope or scenario.envelope
        self.weights = weights or scenario.weights
        self.twin = scenario.build_twin(self.seed)
        self.agent = agent or make_agent(self.loop.agent, scenario.subbands,
                                         anneal_steps=max(1, int(0.75 * self.loop.n_intervals)))
        self.supervisor = Supervisor(self.envelope, self.weights)
        self.faults = sorted(scenario.faults, key=lambda f: f.tti)
        self.trackers = {m: AnomalyTracker(m) for m in ANOMALY_METRICS}
        self.load_history: list[float] = []
        self.interval = 0
        self.prev_obs: Observation | None = None
        self.prev_action: dict = {}
        self.records: list[RunRecord] = []
        self.stream: list[dict] = []
        cp = self.supervisor.checkpoint(0, self.twin.cells)
        self._audit("checkpoint", checkpoint_id=cp.checkpoint_id, baseline_reward=cp.baseline_reward)

    @property
    def done(self) -> bool:
        return self.twin.tti >= self.loop.total_ttis

    def _audit(self, kind: str, **fields):
        self.stream.append({"type": "audit", "kind": kind, "tti": self.twin.tti, "interval": self.interval,
                            **fields})

    def _advance(self, n: int) -> list:
        twin = self.twin
        end = twin.tti + n
        stats = []
        while twin.tti < end:
            while self.faults and self.faults[0].tti <= twin.tti:
                f = self.faults.pop(0)
                apply_fault(twin, f)
                self._audit("fault", cell_id=f.cell_id, field=f.field,
                            value=list(f.value) if isinstance(f.value, (list, tuple)) else f.value)
            nxt = self.faults[0].tti if self.faults else end
            stats.extend(twin.advance(min(nxt, end) - twin.tti))
        return stats

    def step_interval(self) -> RunRecord:
        twin, sup, loop = self.twin, self.supervisor, self.loop
        self.interval += 1
        k = self.interval

        # (1) advance the live twin
        n = min(loop.decision_interval, loop.total_ttis - twin.tti)
        stats = self._advance(n)

        # (2) observe and score
        report = aggregate(stats, cell_ids=[c.cell_id for c in twin.cells])
        reward = compute_reward(report, self.weights)
        if sup.observe_reward(reward.total):
            self._audit("checkpoint-baseline", checkpoint_id=sup.latest.checkpoint_id,
                        baseline_reward=sup.latest.baseline_reward)
        self.stream.append({"type": "telemetry", "interval": k, **report.to_dict()})
        for name, tracker in self.trackers.items():
            a = tracker.test(getattr(report, name), (report.start_tti, report.end_tti))
            if a.flagged:
                self._audit("anomaly", metric=name, z=a.z)
        self.load_history.append(report.offered_load)

        # (3) learn from the previous decision
        obs = Observation.build(report, twin.cells, (self.envelope.power_min, self.envelope.power_max))
        if self.prev_obs is not None:
            try:
                self.agent.learn(self.prev_obs, self.prev_action, reward.total, obs)
            except DivergedError as exc:
                log.warning("agent diverged at interval %d: %s", k, exc)
                self.agent.reset()
                self._audit("agent-reset", detail=str(exc))

        # (4) propose from the delayed report
        proposed = self.agent.act(obs, keyed_generator(self.seed, Stream.AGENT, k))

        # (5) supervise
        verdict = sup.validate(twin.cells, proposed)
        shadow = None
        updates = resolve_action(twin.cells, verdict.action) if verdict.accepted else []
        if updates and loop.shadow_enabled:
            # an action that changes nothing has nothing to predict
            shadow = sup.shadow(twin, verdict.action)
        if verdict.kind != "approved" or (shadow is not None and not shadow.passed):
            self._audit("verdict", verdict=verdict.kind, reason=verdict.reason,
                        shadow_reason=None if shadow is None else shadow.reason)

        # (6) actuate
        applied = False
        if updates and (shadow is None or shadow.passed):
            twin.apply_config(updates)
            applied = True

        # (7) checkpoint on cadence, never from a degraded state
        if k % loop.checkpoint_interval == 0 and not sup.degraded_now():
            cp = sup.checkpoint(twin.tti, twin.cells)
            self._audit("checkpoint", checkpoint_id=cp.checkpoint_id, baseline_reward=cp.baseline_reward)

        # (8) degradation check
        rolled = False
        if sup.rollback_due():
            _, audit = sup.rollback(twin)
            self.agent.reset_exploration()
            rolled = True
            self.stream.append({"type": "rollback", "interval": k, **audit})
            log.info("rollback at interval %d to checkpoint %d", k, audit["checkpoint_id"])

        # (9) record
        diag = dict(self.agent.diagnostics())
        if len(self.load_history) >= 2:
            diag["load_forecast"] = forecast_load(self.load_history, 1)
        rec = RunRecord(k, twin.tti, report, reward, proposed, verdict, shadow, applied, rolled, diag)
        self.records.append(rec)
        self.stream.append(rec.to_record())
        self.prev_obs, self.prev_action = obs, proposed
        log.debug("interval %d reward %.4f verdict %s applied %s", k, reward.total, verdict.kind, applied)
        return rec

    def run(self) -> "Episode":
        while not self.done:
            self.step_interval()
        return self


def run_episode(scenario, loop_config: LoopConfig | None = None, envelope=None, weights=None, seed: int = 0,
                agent: Agent | None = None) -> Episode:
    """Run a full episode; the returned episode carries records, export stream and final twin."""
    return Episode(scenario, seed, loop_config, envelope, weights, agent).run()


def final_quarter_reward(records) -> float:
    tail = records[len(records) - max(1, len(records) // 4):]
    return sum(r.reward.total for r in tail) / len(tail)
