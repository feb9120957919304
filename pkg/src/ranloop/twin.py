"""Deterministic per-TTI digital twin of a small LTE/NR cell cluster.

The twin keeps UE quantities as numpy arrays indexed by UE position (UEs are
kept sorted by ``ue_id``) and cell quantities indexed by position in
``cells`` (sorted by ``cell_id``). One TTI is 1 ms.
"""
from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import radio
from .rng import Stream, keyed_generator

VALID_N_PRB = (6, 15, 25, 50, 75, 100)
TTI_S = 1e-3
SLEEP_POWER_FRACTION = 0.1
PF_AVG_FLOOR = 1e-3


class UnknownCellError(KeyError):
    def __str__(self):
        return f"unknown cell: {self.args[0]}"


@dataclass(frozen=True)
class CellConfig:
    cell_id: int
    position: tuple[float, float]
    tx_power: float = 43.0
    antenna_gain: float = 15.0
    n_prb: int = 50
    subband_mask: tuple[bool, ...] = (True, True, True, True)
    active: bool = True
    idle_power: float = 130.0
    per_prb_tx_energy: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "subband_mask", tuple(bool(b) for b in self.subband_mask))

    def to_dict(self) -> dict:
        return {"cell_id": self.cell_id, "position": list(self.position), "tx_power": self.tx_power,
                "antenna_gain": self.antenna_gain, "n_prb": self.n_prb,
                "subband_mask": [int(b) for b in self.subband_mask], "active": self.active,
                "idle_power": self.idle_power, "per_prb_tx_energy": self.per_prb_tx_energy}

    @classmethod
    def from_dict(cls, d) -> "CellConfig":
        return cls(**{**d, "position": tuple(d["position"]), "subband_mask": tuple(d["subband_mask"])})

    def problems(self, max_power: float = 46.0) -> list[str]:
        out = []
        if not 0.0 <= self.tx_power <= max_power:
            out.append(f"tx_power {self.tx_power} outside [0, {max_power}] (envelope max {max_power:g})")
        if self.n_prb not in VALID_N_PRB:
            out.append(f"n_prb {self.n_prb} not one of {VALID_N_PRB}")
        if self.active and not any(self.subband_mask):
            out.append("active cell needs at least one sub-band in subband_mask")
        if self.idle_power < 0 or self.per_prb_tx_energy < 0:
            out.append("energy parameters must be >= 0")
        return out


@dataclass(frozen=True)
class UserEquipment:
    """Read-only snapshot of one UE; the twin stores UEs as arrays."""

    ue_id: int
    position: tuple[float, float]
    speed: float
    heading: float
    serving_cell: int | None
    mean_offered_load: float
    buffer: tuple[tuple[int, float], ...]
    avg_throughput: float
    noise_figure: float

    @property
    def buffer_bits(self) -> float:
        return sum(bits for _, bits in self.buffer)


@dataclass(frozen=True)
class TwinParams:
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 1000.0, 1000.0)
    n_subbands: int = 4
    shadowing_sigma: float = 8.0
    coherence_ttis: int = 1000
    reattach_interval: int = 1000
    max_harq_tx: int = radio.DEFAULT_MAX_HARQ_TX
    harq_rtt_ms: int = 8
    pf_alpha: float = 0.01
    packet_bits: float = 12000.0
    speed_range: tuple[float, float] | None = None
    stats_history: int = 1000


@dataclass(frozen=True)
class TrafficPhase:
    """Piecewise-constant load multiplier over ``[start_tti, end_tti)``; ``ues=None`` targets every UE."""

    start_tti: int
    end_tti: int
    multiplier: float
    ues: tuple[int, ...] | None = None


@dataclass
class ChannelState:
    path_loss: np.ndarray      # (C, U) dB
    shadowing: np.ndarray      # (C, U) dB
    rsrp: np.ndarray           # (C, U) dBm, NaN for sleeping cells
    sinr: np.ndarray           # (U, S) dB on the serving cell, NaN where it does not transmit
    cqi: np.ndarray            # (U, S), 0 where NaN
    rate_bits: np.ndarray      # (U, S) bits per TTI for a whole sub-band
    wideband_sinr: np.ndarray  # (U,) dB


@dataclass(frozen=True)
class TtiStats:
    tti: int
    serving: np.ndarray         # (U,) cell index or -1
    arrived_bits: np.ndarray
    delivered_bits: np.ndarray
    harq_tx: np.ndarray
    nacks: np.ndarray
    drops: np.ndarray
    hol_delay: np.ndarray       # ms at service, NaN if not served
    packet_delays: np.ndarray   # ms, completed packets
    buffer_bits: np.ndarray
    rsrp: np.ndarray            # serving RSRP, NaN if detached
    sinr: np.ndarray            # wideband SINR on serving cell
    prbs_used: np.ndarray       # (C,)
    prbs_available: np.ndarray  # (C,)
    energy: np.ndarray          # (C,) joules
    hol_age: np.ndarray         # ms age of head packet after service, NaN if empty


def _mask_array(cells: list[CellConfig], n_subbands: int) -> np.ndarray:
    return np.array([[c.active and c.subband_mask[b] for b in range(n_subbands)] for c in cells], dtype=bool)


def pf_allocate(rates: np.ndarray, avg_throughput: np.ndarray, groups_on: np.ndarray | None = None) -> np.ndarray:
    """Proportional-fair assignment of each resource group to one UE.

    ``rates`` is ``(U, G)`` instantaneous rate in bits/s, ``avg_throughput``
    ``(U,)``. Returns a length-``G`` array of UE positions, -1 for groups that
    are off or when ``U == 0``. Ties go to the lowest position.
    """
    n_ue, n_groups = rates.shape
    out = np.full(n_groups, -1, dtype=np.int64)
    if n_ue == 0:
        return out
    metric = rates / np.maximum(avg_throughput, PF_AVG_FLOOR)[:, None]
    winners = np.argmax(metric, axis=0)
    if groups_on is None:
        return winners
    return np.where(groups_on, winners, -1)


class TwinState:
    """The virtual replica: cells, UEs, channel, TTI counter and keyed random streams."""

    def __init__(self, cells, ue_ids, positions, offered_load, params: TwinParams, seed: int,
                 noise_figure=9.0, traffic: tuple[TrafficPhase, ...] = ()):
        self.params = params
        self.seed = int(seed)
        self.fork_path: tuple[int, ...] = ()
        self._fork_count = 0
        self.tti = 0
        self.cells: list[CellConfig] = sorted(cells, key=lambda c: c.cell_id)
        n_prb = {c.n_prb for c in self.cells}
        if len(n_prb) != 1:
            raise ValueError("all cells must share one carrier (same n_prb)")
        order = np.argsort(ue_ids, kind="stable")
        self.ue_ids = np.asarray(ue_ids, dtype=np.int64)[order]
        n = len(self.ue_ids)
        self.pos = np.asarray(positions, dtype=float).reshape(n, 2)[order].copy()
        load = np.asarray(offered_load, dtype=float)
        self.offered_load = np.full(n, float(load)) if load.ndim == 0 else load[order].copy()
        nf = np.asarray(noise_figure, dtype=float)
        self.noise_figure = np.full(n, float(nf)) if nf.ndim == 0 else nf[order].copy()
        self.traffic = tuple(traffic)
        self.avg_tput = np.zeros(n)
        self.buffers: list[deque] = [deque() for _ in range(n)]
        self.buffer_bits = np.zeros(n)
        self.serving = np.full(n, -1, dtype=np.int64)
        self.stats: deque[TtiStats] = deque(maxlen=params.stats_history)

        g = keyed_generator(self.seed, Stream.PLACEMENT, 1)
        if params.speed_range is not None:
            self.waypoint = self._draw_points(g, n)
            self.speed = g.uniform(*params.speed_range, size=n)
        else:
            self.waypoint = self.pos.copy()
            self.speed = np.zeros(n)

        self._shadow_epoch = 0
        self.shadowing = self._draw_shadowing(0)
        self._refresh_cells()
        self._recompute_channel()
        self._reattach()

    # ----- construction helpers -------------------------------------------------
    def _draw_points(self, g, n):
        x0, y0, x1, y1 = self.params.bounds
        return np.column_stack([g.uniform(x0, x1, n), g.uniform(y0, y1, n)])

    def _draw_shadowing(self, epoch: int) -> np.ndarray:
        shape = (len(self.cells), len(self.ue_ids))
        if self.params.shadowing_sigma == 0:
            return np.zeros(shape)
        g = keyed_generator(self.seed, Stream.SHADOWING, epoch)
        return g.normal(0.0, self.params.shadowing_sigma, shape)

    def _refresh_cells(self):
        cells = self.cells
        self._cell_index = {c.cell_id: i for i, c in enumerate(cells)}
        self._cell_pos = np.array([c.position for c in cells], dtype=float).reshape(-1, 2)
        self._tx = np.array([c.tx_power for c in cells], dtype=float)
        self._gain = np.array([c.antenna_gain for c in cells], dtype=float)
        self._active = np.array([c.active for c in cells], dtype=bool)
        self._n_prb = cells[0].n_prb
        self._tx_on = _mask_array(cells, self.params.n_subbands)
        self._sb_prbs = self._n_prb / self.params.n_subbands
        self._idle = np.array([c.idle_power for c in cells], dtype=float)
        self._per_prb = np.array([c.per_prb_tx_energy for c in cells], dtype=float)

    # ----- channel ---------------------------------------------------------------
    def _recompute_channel(self):
        diff = self._cell_pos[:, None, :] - self.pos[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        pl = radio.path_loss(dist)
        rx_prb_dbm = (self._tx - 10.0 * math.log10(self._n_prb) + self._gain)[:, None] - pl - self.shadowing
        rsrp = rx_prb_dbm - 10.0 * math.log10(radio.SUBCARRIERS_PER_PRB)
        rsrp[~self._active] = np.nan
        self._rx_prb_mw = np.where(self._active[:, None], 10.0 ** (rx_prb_dbm / 10.0), 0.0)
        self._rsrp = rsrp
        self._path_loss = pl
        self._channel_dirty = True

    def _link_quality(self):
        """SINR/CQI/rate for every UE on its serving cell (depends on attachment)."""
        n = len(self.ue_ids)
        S = self.params.n_subbands
        tx_on = self._tx_on.astype(float)
        total = self._rx_prb_mw.T @ tx_on                      # (U, S) per PRB
        noise = 10.0 ** ((radio.THERMAL_NOISE_DBM_HZ + 10.0 * math.log10(radio.PRB_BANDWIDTH_HZ)
                          + self.noise_figure) / 10.0)
        attached = self.serving >= 0
        srv = np.where(attached, self.serving, 0)
        own = self._rx_prb_mw[srv, np.arange(n)]
        on = self._tx_on[srv] & attached[:, None]
        signal = own[:, None] * on
        interference = np.maximum(total - signal, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            sinr_lin = signal / (interference + noise[:, None])
            sinr = np.where(on, 10.0 * np.log10(sinr_lin), np.nan)
            n_on = on.sum(axis=1)
            wb_lin = np.where(n_on > 0, (sinr_lin * on).sum(axis=1) / np.maximum(n_on, 1), np.nan)
            wideband = 10.0 * np.log10(wb_lin)
        se = np.where(on, radio.spectral_efficiency(np.where(on, sinr, -np.inf)), 0.0)
        width_hz = self._sb_prbs * radio.PRB_BANDWIDTH_HZ
        self._sinr = sinr
        self._cqi = radio.map_cqi_array(sinr)
        self._rate_bits = se * width_hz * TTI_S
        self._wideband = wideband
        self._channel_dirty = False

    def _ensure_link(self):
        if self._channel_dirty:
            self._link_quality()

    @property
    def channel(self) -> ChannelState:
        self._ensure_link()
        return ChannelState(self._path_loss.copy(), self.shadowing.copy(), self._rsrp.copy(),
                            self._sinr.copy(), self._cqi.copy(), self._rate_bits.copy(), self._wideband.copy())

    def _reattach(self):
        if not self._active.any():
            self.serving[:] = -1
        else:
            r = np.where(np.isnan(self._rsrp), -np.inf, self._rsrp)
            self.serving = np.argmax(r, axis=0).astype(np.int64)
        self._channel_dirty = True

    # ----- views -----------------------------------------------------------------
    @property
    def rng_cursor(self) -> tuple[int, tuple[int, ...], int]:
        """(seed, fork lineage, tti): draws for TTI t are keyed by (seed, stream, t)."""
        return self.seed, self.fork_path, self.tti

    def cell(self, cell_id: int) -> CellConfig:
        try:
            return self.cells[self._cell_index[cell_id]]
        except KeyError:
            raise UnknownCellError(cell_id) from None

    def cell_index(self, cell_id: int) -> int:
        try:
            return self._cell_index[cell_id]
        except KeyError:
            raise UnknownCellError(cell_id) from None

    def serving_cell_ids(self) -> list[int | None]:
        return [self.cells[s].cell_id if s >= 0 else None for s in self.serving]

    def ue(self, i: int) -> UserEquipment:
        d = self.waypoint[i] - self.pos[i]
        s = int(self.serving[i])
        return UserEquipment(
            ue_id=int(self.ue_ids[i]), position=tuple(self.pos[i]), speed=float(self.speed[i]),
            heading=float(math.atan2(d[1], d[0])), serving_cell=self.cells[s].cell_id if s >= 0 else None,
            mean_offered_load=float(self.offered_load[i]), buffer=tuple(self.buffers[i]),
            avg_throughput=float(self.avg_tput[i]), noise_figure=float(self.noise_figure[i]))

    @property
    def ues(self) -> list[UserEquipment]:
        return [self.ue(i) for i in range(len(self.ue_ids))]

    def rsrp(self, cell_id: int, ue_index: int) -> float | None:
        v = self._rsrp[self.cell_index(cell_id), ue_index]
        return None if np.isnan(v) else float(v)

    def serving_rsrp(self) -> np.ndarray:
        n = len(self.ue_ids)
        out = np.full(n, np.nan)
        ok = self.serving >= 0
        out[ok] = self._rsrp[self.serving[ok], np.arange(n)[ok]]
        return out

    # ----- configuration ---------------------------------------------------------
    def apply_config(self, updates) -> "TwinState":
        """Replace whole cell configurations between TTIs.

        Every UE is re-attached to the strongest active cell afterwards.
        """
        updates = list(updates)
        if not updates:
            return self
        for u in updates:
            if u.cell_id not in self._cell_index:
                raise UnknownCellError(u.cell_id)
        cells = list(self.cells)
        for u in updates:
            if u.n_prb != self._n_prb:
                raise ValueError("n_prb cannot change at run time")
            cells[self._cell_index[u.cell_id]] = u
        self.cells = cells
        self._refresh_cells()
        self._recompute_channel()
        self._reattach()
        return self

    def fork(self) -> "TwinState":
        """Independent copy that evolves identically under identical inputs."""
        child = object.__new__(TwinState)
        child.__dict__.update(self.__dict__)
        self._fork_count += 1
        child.fork_path = self.fork_path + (self._fork_count,)
        child._fork_count = 0
        for name in ("pos", "waypoint", "speed", "offered_load", "noise_figure", "avg_tput",
                     "buffer_bits", "serving", "shadowing"):
            setattr(child, name, getattr(self, name).copy())
        child.buffers = [deque(b) for b in self.buffers]
        child.stats = deque(self.stats, maxlen=self.stats.maxlen)
        child.cells = list(self.cells)
        child._refresh_cells()
        child._recompute_channel()
        if not self._channel_dirty:
            child._link_quality()
        return child

    def state_hash(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.seed, self.tti, self.cells, self._shadow_epoch)).encode())
        for arr in (self.pos, self.waypoint, self.speed, self.offered_load, self.noise_figure,
                    self.avg_tput, self.buffer_bits, self.serving, self.shadowing):
            h.update(np.ascontiguousarray(arr).tobytes())
        for b in self.buffers:
            h.update(repr(tuple(b)).encode())
        h.update(str(len(self.stats)).encode())
        return h.hexdigest()

    # ----- per-TTI dynamics --------------------------------------------------------
    def _load_multiplier(self, tti: int) -> np.ndarray | float:
        if not self.traffic:
            return 1.0
        mult = np.ones(len(self.ue_ids))
        for ph in self.traffic:
            if ph.start_tti <= tti < ph.end_tti:
                if ph.ues is None:
                    mult *= ph.multiplier
                else:
                    mult[np.isin(self.ue_ids, ph.ues)] *= ph.multiplier
        return mult

    def _arrivals(self, tti: int) -> np.ndarray:
        lam = self.offered_load * self._load_multiplier(tti) * TTI_S / self.params.packet_bits
        arrived = np.zeros(len(self.ue_ids))
        if not lam.any():
            return arrived
        counts = keyed_generator(self.seed, Stream.ARRIVALS, tti).poisson(lam)
        pb = self.params.packet_bits
        for i in np.flatnonzero(counts):
            k = int(counts[i])
            self.buffers[i].extend([(tti, pb)] * k)
            arrived[i] = k * pb
        self.buffer_bits += arrived
        return arrived

    def _move(self, tti: int) -> bool:
        if self.params.speed_range is None:
            return False
        d = self.waypoint - self.pos
        dist = np.hypot(d[:, 0], d[:, 1])
        step = self.speed * TTI_S
        arrive = dist <= step
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(arrive, 1.0, step / dist)
        self.pos = self.pos + d * frac[:, None]
        idx = np.flatnonzero(arrive)
        if idx.size:
            g = keyed_generator(self.seed, Stream.MOBILITY, tti)
            self.waypoint[idx] = self._draw_points(g, idx.size)
            self.speed[idx] = g.uniform(*self.params.speed_range, size=idx.size)
        x0, y0, x1, y1 = self.params.bounds
        np.clip(self.pos[:, 0], x0, x1, out=self.pos[:, 0])
        np.clip(self.pos[:, 1], y0, y1, out=self.pos[:, 1])
        return True

    def schedule(self) -> list[tuple[int, int, int]]:
        """PF allocation for the current TTI as ``(cell_index, subband, ue_index)`` triples."""
        self._ensure_link()
        backlog = self.buffer_bits > 0
        if not backlog.any():
            return []
        n_cells = len(self.cells)
        member = (self.serving[None, :] == np.arange(n_cells)[:, None]) & backlog[None, :]
        metric = (self._rate_bits / TTI_S) / np.maximum(self.avg_tput, PF_AVG_FLOOR)[:, None]
        masked = np.where(member[:, :, None], metric[None, :, :], -np.inf)
        winners = np.argmax(masked, axis=1)                     # (C, S), ties -> lowest UE
        valid = self._tx_on & member.any(axis=1)[:, None]
        cis, bs = np.nonzero(valid)
        return [(int(c), int(b), int(winners[c, b])) for c, b in zip(cis, bs)]

    def _serve(self, tti, allocation):
        n = len(self.ue_ids)
        delivered = [0.0] * n
        harq_tx = [0] * n
        nacks = [0] * n
        drops = [0] * n
        hol = [math.nan] * n
        delays = []
        prbs = np.zeros(len(self.cells))
        if allocation:
            ues = np.array([a[2] for a in allocation])
            sbs = np.array([a[1] for a in allocation])
            max_tx = self.params.max_harq_tx
            thr = radio.CQI_THRESHOLDS_DB[self._cqi[ues, sbs] - 1]
            prof = radio.harq_bler_profile(self._sinr[ues, sbs], thr, max_tx)
            u = keyed_generator(self.seed, Stream.HARQ, tti).random((len(allocation), max_tx))
            ks = radio.harq_outcomes(u, prof).tolist()
            caps = self._rate_bits[ues, sbs].tolist()
            rtt = self.params.harq_rtt_ms
            for (ci, _, i), k, cap in zip(allocation, ks, caps):
                prbs[ci] += self._sb_prbs
                buf = self.buffers[i]
                if hol[i] != hol[i] and buf:
                    hol[i] = tti - buf[0][0] + 1
                if k == 0:
                    harq_tx[i] += max_tx
                    nacks[i] += max_tx
                    drops[i] += 1
                    continue
                harq_tx[i] += k
                nacks[i] += k - 1
                extra = (k - 1) * rtt
                got = 0.0
                while cap > 0 and buf:
                    arr, rem = buf[0]
                    if rem <= cap:
                        cap -= rem
                        got += rem
                        buf.popleft()
                        delays.append(tti - arr + 1 + extra)
                    else:
                        buf[0] = (arr, rem - cap)
                        got += cap
                        cap = 0.0
                delivered[i] += got
            served = {a[2] for a in allocation}
            delivered_arr = np.array(delivered)
            self.buffer_bits -= delivered_arr
            for i in served:
                if not self.buffers[i]:
                    self.buffer_bits[i] = 0.0
        else:
            delivered_arr = np.zeros(n)
        a = self.params.pf_alpha
        self.avg_tput = (1.0 - a) * self.avg_tput + a * delivered_arr / TTI_S
        return (delivered_arr, np.array(harq_tx), np.array(nacks), np.array(drops), np.array(hol),
                np.asarray(delays, dtype=float), prbs)

    def step(self) -> TtiStats:
        tti = self.tti
        arrived = self._arrivals(tti)
        moved = self._move(tti)
        epoch = tti // self.params.coherence_ttis
        if epoch != self._shadow_epoch:
            self._shadow_epoch = epoch
            self.shadowing = self._draw_shadowing(epoch)
            moved = True
        if moved:
            self._recompute_channel()
        if tti > 0 and tti % self.params.reattach_interval == 0:
            self._reattach()
        allocation = self.schedule()
        delivered, harq_tx, nacks, drops, hol, delays, prbs = self._serve(tti, allocation)
        available = np.where(self._active, float(self._n_prb), 0.0)
        power = np.where(self._active, self._idle + self._per_prb * prbs, SLEEP_POWER_FRACTION * self._idle)
        hol_age = np.array([tti - b[0][0] + 1 if b else np.nan for b in self.buffers], dtype=float)
        st = TtiStats(
            tti=tti, serving=self.serving.copy(), arrived_bits=arrived, delivered_bits=delivered,
            harq_tx=harq_tx, nacks=nacks, drops=drops, hol_delay=hol, packet_delays=delays,
            buffer_bits=self.buffer_bits.copy(), rsrp=self.serving_rsrp(), sinr=self._wideband.copy(),
            prbs_used=prbs, prbs_available=available, energy=power * TTI_S, hol_age=hol_age)
        self.stats.append(st)
        self.tti += 1
        return st

    def advance(self, n_tti: int) -> list[TtiStats]:
        if n_tti < 1:
            raise ValueError("n_tti must be >= 1")
        return [self.step() for _ in range(n_tti)]


def advance(state: TwinState, n_tti: int) -> list[TtiStats]:
    return state.advance(n_tti)


def fork(state: TwinState) -> TwinState:
    return state.fork()


def apply_config(state: TwinState, updates) -> TwinState:
    return state.apply_config(updates)


def schedule_tti(state: TwinState) -> dict[int, list[tuple[int, float]]]:
    """PF allocation keyed by cell_id: list of ``(ue_id, prbs)`` in sub-band order."""
    per_cell: dict[int, dict[int, float]] = {}
    for ci, _, i in state.schedule():
        prbs = per_cell.setdefault(state.cells[ci].cell_id, {})
        uid = int(state.ue_ids[i])
        prbs[uid] = prbs.get(uid, 0.0) + state._sb_prbs
    return {cid: list(prbs.items()) for cid, prbs in per_cell.items()}
