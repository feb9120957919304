"""Windowed telemetry, reward shaping, anomaly detection, load forecasting and state discretisation."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .radio import PRB_BANDWIDTH_HZ
from .twin import TTI_S, TtiStats


class EmptyWindowError(ValueError):
    pass


class UndefinedFairnessError(ValueError):
    pass


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class CellTelemetry:
    cell_id: int
    rsrp_mean: float | None     # dBm, None when no UE was attached
    rsrp_min: float | None
    sinr_mean: float | None     # dB
    nack_ratio: float
    buffer_bytes: float         # mean per attached UE
    prb_utilization: float
    throughput: float           # bits/s
    energy: float               # joules over the window
    attached_ues: float         # mean count


@dataclass(frozen=True)
class TelemetryReport:
    start_tti: int
    end_tti: int                # exclusive
    cells: tuple[CellTelemetry, ...]
    spectral_efficiency: float  # delivered bits per scheduled PRB-second-Hz
    fairness: float
    p95_delay: float            # ms
    total_power: float          # watts
    throughput: float           # bits/s
    offered_load: float         # bits/s that arrived in the window
    harq_drops: int

    @property
    def duration_s(self) -> float:
        return (self.end_tti - self.start_tti) * TTI_S

    def cell(self, cell_id: int) -> CellTelemetry:
        for c in self.cells:
            if c.cell_id == cell_id:
                return c
        raise KeyError(cell_id)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TelemetryReport":
        d = dict(d)
        d["cells"] = tuple(CellTelemetry(**c) for c in d["cells"])
        return cls(**d)


@dataclass(frozen=True)
class ObjectiveWeights:
    w_se: float = 1.0
    w_fair: float = 0.5
    w_lat: float = 0.5
    w_energy: float = 0.25
    se_ref: float = 3.0
    lat_ref: float = 50.0
    p_ref: float = 1000.0

    def __post_init__(self):
        for name in ("w_se", "w_fair", "w_lat", "w_energy"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("se_ref", "lat_ref", "p_ref"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class RewardSignal:
    total: float
    se_term: float
    fairness_term: float
    latency_penalty: float
    energy_penalty: float


def nearest_rank_percentile(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("no samples")
    rank = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[rank - 1])


def jain_index(throughputs) -> float:
    x = np.asarray(throughputs, dtype=float)
    if x.size == 0:
        raise ValueError("jain_index needs at least one value")
    if (x < 0).any():
        raise ValueError("throughputs must be >= 0")
    peak = float(x.max())
    if peak == 0.0:
        raise UndefinedFairnessError("undefined fairness: all throughputs are zero")
    x = x / peak                      # scale-free; keeps tiny values from underflowing when squared
    return float(x.sum() ** 2 / (x.size * float(np.dot(x, x))))


def _mean_or_none(a: np.ndarray) -> float | None:
    return float(a.mean()) if a.size else None


def aggregate(stats: list[TtiStats], window: int | None = None, cell_ids=None) -> TelemetryReport:
    """Aggregate the last ``window`` TTIs of ``stats`` (all of them when ``window`` is None)."""
    if window is not None:
        if window < 1:
            raise ValueError("window must be >= 1")
        stats = stats[-window:]
    if not stats:
        raise EmptyWindowError("empty window")
    serving = np.stack([s.serving for s in stats])
    delivered = np.stack([s.delivered_bits for s in stats])
    harq_tx = np.stack([s.harq_tx for s in stats])
    nacks = np.stack([s.nacks for s in stats])
    buffers = np.stack([s.buffer_bits for s in stats])
    rsrp = np.stack([s.rsrp for s in stats])
    sinr = np.stack([s.sinr for s in stats])
    prbs_used = np.stack([s.prbs_used for s in stats])
    prbs_avail = np.stack([s.prbs_available for s in stats])
    energy = np.stack([s.energy for s in stats])
    duration = len(stats) * TTI_S
    n_cells = prbs_used.shape[1]
    if cell_ids is None:
        cell_ids = range(n_cells)

    cells = []
    for ci, cid in enumerate(cell_ids):
        m = serving == ci
        r = rsrp[m]
        r = r[~np.isnan(r)]
        s = sinr[m]
        s = s[np.isfinite(s)]
        tx = harq_tx[m].sum()
        avail = prbs_avail[:, ci].sum()
        cells.append(CellTelemetry(
            cell_id=int(cid),
            rsrp_mean=_mean_or_none(r),
            rsrp_min=float(r.min()) if r.size else None,
            sinr_mean=_mean_or_none(s),
            nack_ratio=float(nacks[m].sum() / tx) if tx else 0.0,
            buffer_bytes=float(buffers[m].mean() / 8.0) if m.any() else 0.0,
            prb_utilization=float(prbs_used[:, ci].sum() / avail) if avail else 0.0,
            throughput=float(delivered[m].sum() / duration),
            energy=float(energy[:, ci].sum()),
            attached_ues=float(m.sum() / len(stats)),
        ))

    used = prbs_used.sum()
    se = float(delivered.sum() / (used * PRB_BANDWIDTH_HZ * TTI_S)) if used else 0.0
    per_ue = delivered.sum(axis=0) / duration
    fairness = jain_index(per_ue) if per_ue.any() else 1.0
    delays = [s.packet_delays for s in stats]
    last_age = stats[-1].hol_age
    delays.append(last_age[~np.isnan(last_age)])
    delays = np.concatenate(delays)
    p95 = nearest_rank_percentile(delays, 95) if delays.size else 0.0
    return TelemetryReport(
        start_tti=int(stats[0].tti), end_tti=int(stats[-1].tti) + 1, cells=tuple(cells),
        spectral_efficiency=se, fairness=fairness, p95_delay=p95,
        total_power=float(energy.sum() / duration), throughput=float(delivered.sum() / duration),
        offered_load=float(sum(s.arrived_bits.sum() for s in stats) / duration),
        harq_drops=int(sum(int(s.drops.sum()) for s in stats)),
    )


def _clamp_term(x: float) -> float:
    return min(max(x, 0.0), 2.0)


def compute_reward(report: TelemetryReport, weights: ObjectiveWeights) -> RewardSignal:
    se = weights.w_se * _clamp_term(report.spectral_efficiency / weights.se_ref)
    fair = weights.w_fair * _clamp_term(report.fairness)
    lat = weights.w_lat * _clamp_term(report.p95_delay / weights.lat_ref)
    energy = weights.w_energy * _clamp_term(report.total_power / weights.p_ref)
    return RewardSignal(total=se + fair - lat - energy, se_term=se, fairness_term=fair,
                        latency_penalty=lat, energy_penalty=energy)


@dataclass(frozen=True)
class AnomalyReport:
    metric: str
    z: float
    window: tuple[int, int] | None
    flagged: bool


@dataclass
class AnomalyTracker:
    """EWMA mean/variance detector for one metric stream."""

    metric: str
    alpha: float = 0.05
    threshold: float = 4.0
    warmup: int = 20
    sigma_floor: float = 0.0
    mean: float = 0.0
    var: float = 0.0
    count: int = 0

    def test(self, x: float, window=None) -> AnomalyReport:
        if self.count == 0:
            z = 0.0
        else:
            sigma = max(math.sqrt(self.var), self.sigma_floor)
            dev = x - self.mean
            if sigma == 0.0:
                z = 0.0 if dev == 0.0 else math.copysign(math.inf, dev)
            else:
                z = dev / sigma
        flagged = self.count >= self.warmup and abs(z) > self.threshold
        self._update(x)
        return AnomalyReport(self.metric, z, window, flagged)

    def _update(self, x: float):
        if self.count == 0:
            self.mean, self.var = x, 0.0
        else:
            d = x - self.mean
            self.mean += self.alpha * d
            self.var = (1.0 - self.alpha) * (self.var + self.alpha * d * d)
        self.count += 1


def detect_anomaly(tracker: AnomalyTracker, sample: float, window=None) -> AnomalyReport:
    return tracker.test(sample, window)


def forecast_load(history, horizon: int = 1, alpha: float = 0.3, beta: float = 0.1) -> float:
    """Holt linear-trend forecast ``horizon`` windows ahead, floored at zero."""
    x = [float(v) for v in history]
    if len(x) < 2:
        raise InsufficientHistoryError("insufficient history: need at least 2 points")
    level, trend = x[0], x[1] - x[0]
    for v in x[1:]:
        prev = level
        level = alpha * v + (1.0 - alpha) * (level + trend)
        trend = beta * (level - prev) + (1.0 - beta) * trend
    return max(level + horizon * trend, 0.0)


LOAD_THRESHOLDS = (0.25, 0.5, 0.75)
SINR_THRESHOLDS = (15.0, 8.0, 2.0)


def load_level(utilization: float) -> int:
    return sum(utilization >= t for t in LOAD_THRESHOLDS)


def interference_level(sinr_db: float | None) -> int:
    if sinr_db is None:
        return 0
    return sum(sinr_db < t for t in SINR_THRESHOLDS)


def mask_index(mask) -> int:
    """Catalogue index of a sub-band mask: the mask read as an integer, minus one."""
    return sum(1 << b for b, on in enumerate(mask) if on) - 1


@dataclass(frozen=True)
class DiscreteState:
    cells: tuple[tuple[int, int, int], ...]   # (load_level, interference_level, mask_index) per cell
    cell_ids: tuple[int, ...] = field(default=())

    def for_cell(self, cell_id: int) -> tuple[int, int, int]:
        return self.cells[self.cell_ids.index(cell_id)]


def discretize_state(report: TelemetryReport, configs) -> DiscreteState:
    by_id = {c.cell_id: c for c in configs}
    out = []
    for ct in report.cells:
        out.append((load_level(ct.prb_utilization), interference_level(ct.sinr_mean),
                    mask_index(by_id[ct.cell_id].subband_mask)))
    return DiscreteState(tuple(out), tuple(ct.cell_id for ct in report.cells))
