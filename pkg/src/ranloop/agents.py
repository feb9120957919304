"""Decision makers: tabular Q-learning for sub-band masks, linear actor-critic for power, baselines.

Per-cell agents share parameters (one Q-table, one actor-critic weight set)
and act on the previous window's telemetry only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .observer import DiscreteState, TelemetryReport, discretize_state

POWER_STEPS = (-3.0, -1.0, 0.0, 1.0, 3.0)
AGENT_KINDS = ("static", "random", "qlearn_subband", "actorcritic_power", "combined")


class InvalidRewardError(ValueError):
    pass


class DivergedError(FloatingPointError):
    pass


class FeatureDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class CellAction:
    power_delta: float | None = None
    subband_mask: tuple[bool, ...] | None = None
    sleep: bool = False                      # True toggles the sleep state

    @property
    def is_noop(self) -> bool:
        return self.power_delta is None and self.subband_mask is None and not self.sleep

    def to_dict(self) -> dict:
        return {"power_delta": self.power_delta,
                "subband_mask": None if self.subband_mask is None else [int(b) for b in self.subband_mask],
                "sleep": self.sleep}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CellAction":
        mask = d.get("subband_mask")
        return cls(power_delta=d.get("power_delta"),
                   subband_mask=None if mask is None else tuple(bool(b) for b in mask),
                   sleep=bool(d.get("sleep", False)))


ActionSet = dict  # cell_id -> CellAction; {} is the explicit no-op


def action_to_dict(action: ActionSet) -> dict:
    return {str(cid): a.to_dict() for cid, a in sorted(action.items())}


def action_from_dict(d: Mapping) -> ActionSet:
    return {int(cid): CellAction.from_dict(a) for cid, a in d.items()}


def mask_catalog(n_subbands: int = 4) -> list[tuple[bool, ...]]:
    """All non-empty masks; action id ``a`` is the mask whose integer value is ``a + 1``."""
    return [tuple(bool((v >> b) & 1) for b in range(n_subbands)) for v in range(1, 2 ** n_subbands)]


# ----- tabular Q-learning ------------------------------------------------------------

@dataclass
class QTable:
    n_actions: int = 15
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon: float = 0.2
    values: dict = field(default_factory=dict)

    def q(self, s, a: int) -> float:
        return self.values.get((s, a), 0.0)

    def row(self, s) -> np.ndarray:
        return np.array([self.values.get((s, a), 0.0) for a in range(self.n_actions)])

    def max_q(self, s) -> float:
        return float(self.row(s).max())


def q_select(state, table: QTable, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice; greedy ties resolve to the lowest action id."""
    if rng.random() < table.epsilon:
        return int(rng.integers(table.n_actions))
    return int(np.argmax(table.row(state)))


def q_update(table: QTable, s, a: int, r: float, s_next) -> QTable:
    if not math.isfinite(r):
        raise InvalidRewardError(f"invalid reward: {r}")
    old = table.q(s, a)
    target = r + table.gamma * table.max_q(s_next)
    new = old + table.alpha * (target - old)
    if new != old or (s, a) in table.values:
        table.values[(s, a)] = new
    return table


# ----- linear actor-critic -------------------------------------------------------------

N_FEATURES = 5


@dataclass(frozen=True)
class ActorCriticParams:
    theta: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    w: np.ndarray = field(default_factory=lambda: np.zeros(N_FEATURES))
    sigma: float = 1.0
    alpha_actor: float = 1e-3
    alpha_critic: float = 1e-2
    gamma: float = 0.9


def _check_dim(params: ActorCriticParams, phi: np.ndarray):
    if phi.shape != params.theta.shape:
        raise FeatureDimensionError(f"feature dimension {phi.shape} does not match parameters {params.theta.shape}")


def ac_act(params: ActorCriticParams, features, rng: np.random.Generator) -> float:
    phi = np.asarray(features, dtype=float)
    _check_dim(params, phi)
    return float(rng.normal(float(params.theta @ phi), params.sigma))


def policy_log_gradient(params: ActorCriticParams, features, a: float) -> np.ndarray:
    """Gradient of log N(a; theta.phi, sigma^2) with respect to theta."""
    phi = np.asarray(features, dtype=float)
    return (a - float(params.theta @ phi)) / params.sigma ** 2 * phi


def ac_update(params: ActorCriticParams, features, a: float, r: float, next_features) -> ActorCriticParams:
    phi = np.asarray(features, dtype=float)
    phi_next = np.asarray(next_features, dtype=float)
    _check_dim(params, phi)
    _check_dim(params, phi_next)
    delta = r + params.gamma * float(params.w @ phi_next) - float(params.w @ phi)
    if not math.isfinite(delta):
        raise DivergedError(f"diverged: TD error {delta}")
    if delta == 0.0:
        return params
    w = params.w + params.alpha_critic * delta * phi
    theta = params.theta + params.alpha_actor * delta * policy_log_gradient(params, phi, a)
    if not (np.isfinite(w).all() and np.isfinite(theta).all()):
        raise DivergedError("diverged: non-finite parameters")
    return replace(params, theta=theta, w=w)


# ----- observations --------------------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    """What an agent sees at a decision point: the last completed window and the live configs."""

    report: TelemetryReport
    configs: tuple
    state: DiscreteState
    power_range: tuple[float, float] = (0.0, 46.0)

    @classmethod
    def build(cls, report: TelemetryReport, configs, power_range=(0.0, 46.0)) -> "Observation":
        configs = tuple(configs)
        return cls(report, configs, discretize_state(report, configs), tuple(power_range))

    def config(self, cell_id: int):
        for c in self.configs:
            if c.cell_id == cell_id:
                return c
        raise KeyError(cell_id)

    def active_cells(self) -> list[int]:
        return [c.cell_id for c in self.configs if c.active]

    def features(self, cell_id: int) -> np.ndarray:
        ct = self.report.cell(cell_id)
        lo, hi = self.power_range
        sinr = 0.0 if ct.sinr_mean is None else min(max(ct.sinr_mean / 30.0, -1.0), 1.0)
        power = (self.config(cell_id).tx_power - lo) / (hi - lo) if hi > lo else 0.0
        return np.array([1.0, ct.prb_utilization, sinr, power, self.report.fairness])


# ----- agents --------------------------------------------------------------------------

class Agent:
    kind = "static"

    def learn(self, prev: Observation, action: ActionSet, reward: float, obs: Observation) -> None:
        pass

    def act(self, obs: Observation, rng: np.random.Generator) -> ActionSet:
        return {}

    def reset_exploration(self) -> None:
        pass

    def reset(self) -> None:
        pass

    def diagnostics(self) -> dict:
        return {}

    def state_dict(self) -> dict:
        return {"kind": self.kind}

    def load_state_dict(self, d: dict) -> None:
        if d.get("kind") != self.kind:
            raise ValueError(f"agent state is for {d.get('kind')!r}, not {self.kind!r}")


class StaticAgent(Agent):
    kind = "static"


def default_catalog(n_subbands: int = 4) -> list[CellAction]:
    out = [CellAction(power_delta=d, subband_mask=m) for m in mask_catalog(n_subbands) for d in POWER_STEPS]
    out.append(CellAction(sleep=True))
    return out


def baseline_act(kind: str, catalog, rng: np.random.Generator, cell_ids=()) -> ActionSet:
    if kind == "static":
        return {}
    if kind != "random":
        raise ValueError(f"unknown baseline {kind!r}")
    catalog = list(catalog)
    return {cid: catalog[int(rng.integers(len(catalog)))] for cid in cell_ids}


class RandomAgent(Agent):
    kind = "random"

    def __init__(self, n_subbands: int = 4, catalog=None):
        self.catalog = list(catalog) if catalog is not None else default_catalog(n_subbands)

    def act(self, obs, rng):
        return baseline_act("random", self.catalog, rng, [c.cell_id for c in obs.configs])


class QSubbandAgent(Agent):
    """Shared tabular Q-learner choosing each active cell's sub-band mask."""

    kind = "qlearn_subband"

    def __init__(self, n_subbands: int = 4, alpha=0.1, gamma=0.9, eps_start=0.2, eps_end=0.01,
                 anneal_steps: int = 75):
        self.masks = mask_catalog(n_subbands)
        self.eps_start, self.eps_end, self.anneal_steps = eps_start, eps_end, max(int(anneal_steps), 1)
        self.table = QTable(len(self.masks), alpha, gamma, eps_start)
        self.steps = 0

    def _anneal(self):
        frac = min(self.steps / self.anneal_steps, 1.0)
        self.table.epsilon = self.eps_start + (self.eps_end - self.eps_start) * frac

    def learn(self, prev, action, reward, obs):
        for cid in prev.active_cells():
            a = action.get(cid)
            if a is None or a.subband_mask is None or cid not in obs.state.cell_ids:
                continue
            q_update(self.table, prev.state.for_cell(cid), self.masks.index(a.subband_mask),
                     reward, obs.state.for_cell(cid))

    def act(self, obs, rng):
        self._anneal()
        out = {cid: CellAction(subband_mask=self.masks[q_select(obs.state.for_cell(cid), self.table, rng)])
               for cid in obs.active_cells()}
        self.steps += 1
        return out

    def reset_exploration(self):
        self.steps = 0
        self._anneal()

    def reset(self):
        self.table.values.clear()
        self.reset_exploration()

    def diagnostics(self):
        vals = list(self.table.values.values())
        return {"epsilon": self.table.epsilon, "max_q": max(vals) if vals else 0.0}

    def state_dict(self):
        return {"kind": self.kind, "steps": self.steps, "epsilon": self.table.epsilon,
                "q": [[list(s), a, v] for (s, a), v in sorted(self.table.values.items())]}

    def load_state_dict(self, d):
        super().load_state_dict(d)
        self.steps = int(d["steps"])
        self.table.epsilon = float(d["epsilon"])
        self.table.values = {(tuple(s), int(a)): float(v) for s, a, v in d["q"]}


class ActorCriticPowerAgent(Agent):
    """Shared linear-Gaussian actor-critic proposing continuous power deltas per active cell."""

    kind = "actorcritic_power"

    def __init__(self, params: ActorCriticParams | None = None):
        self.params = params or ActorCriticParams()
        self._init = self.params

    def learn(self, prev, action, reward, obs):
        for cid in prev.active_cells():
            a = action.get(cid)
            if a is None or a.power_delta is None or cid not in obs.state.cell_ids:
                continue
            self.params = ac_update(self.params, prev.features(cid), a.power_delta, reward, obs.features(cid))

    def act(self, obs, rng):
        return {cid: CellAction(power_delta=ac_act(self.params, obs.features(cid), rng))
                for cid in obs.active_cells()}

    def reset(self):
        self.params = self._init

    def diagnostics(self):
        return {"theta_norm": float(np.linalg.norm(self.params.theta))}

    def state_dict(self):
        return {"kind": self.kind, "theta": self.params.theta.tolist(), "w": self.params.w.tolist()}

    def load_state_dict(self, d):
        super().load_state_dict(d)
        self.params = replace(self.params, theta=np.array(d["theta"], dtype=float), w=np.array(d["w"], dtype=float))


class CombinedAgent(Agent):
    """Q-learning masks plus actor-critic power; the two write disjoint CellAction fields."""

    kind = "combined"

    def __init__(self, n_subbands: int = 4, anneal_steps: int = 75):
        self.q = QSubbandAgent(n_subbands, anneal_steps=anneal_steps)
        self.ac = ActorCriticPowerAgent()

    def learn(self, prev, action, reward, obs):
        self.q.learn(prev, action, reward, obs)
        self.ac.learn(prev, action, reward, obs)

    def act(self, obs, rng):
        masks = self.q.act(obs, rng)
        powers = self.ac.act(obs, rng)
        return {cid: replace(masks[cid], power_delta=powers[cid].power_delta) for cid in masks}

    def reset_exploration(self):
        self.q.reset_exploration()

    def reset(self):
        self.q.reset()
        self.ac.reset()

    def diagnostics(self):
        return {**self.q.diagnostics(), **self.ac.diagnostics()}

    def state_dict(self):
        return {"kind": self.kind, "q": self.q.state_dict(), "ac": self.ac.state_dict()}

    def load_state_dict(self, d):
        super().load_state_dict(d)
        self.q.load_state_dict(d["q"])
        self.ac.load_state_dict(d["ac"])


def make_agent(kind: str, n_subbands: int = 4, anneal_steps: int = 75) -> Agent:
    if kind == "static":
        return StaticAgent()
    if kind == "random":
        return RandomAgent(n_subbands)
    if kind == "qlearn_subband":
        return QSubbandAgent(n_subbands, anneal_steps=anneal_steps)
    if kind == "actorcritic_power":
        return ActorCriticPowerAgent()
    if kind == "combined":
        return CombinedAgent(n_subbands, anneal_steps=anneal_steps)
    raise ValueError(f"unknown agent kind {kind!r}; expected one of {AGENT_KINDS}")
