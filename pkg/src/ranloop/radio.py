"""Link-level radio formulas: propagation, RSRP/RSRQ/SINR, CQI, link abstraction, HARQ.

All powers are in dBm unless the name says ``_mw`` (linear milliwatts).
"""
from __future__ import annotations

import math

import numpy as np

PRB_BANDWIDTH_HZ = 180e3
SUBCARRIERS_PER_PRB = 12
THERMAL_NOISE_DBM_HZ = -174.0
MIN_DISTANCE_M = 35.0

# Lowest SINR (dB) at which each CQI 1..15 is usable.
CQI_THRESHOLDS_DB = np.array(
    [-6.7, -4.7, -2.3, 0.2, 2.4, 4.3, 5.9, 8.1, 10.3, 11.7, 14.1, 16.3, 18.7, 21.0, 22.7]
)

SE_FACTOR = 0.75
SE_CAP = 5.55

BLER_AT_THRESHOLD = 0.1
BLER_FLOOR = 1e-4
DEFAULT_MAX_HARQ_TX = 4
HARQ_COMBINING_GAIN_DB = 3.0


class DegeneratePowerError(ValueError):
    pass


class InvalidChannelSample(ValueError):
    pass


def path_loss(distance):
    """Urban-macro log-distance path loss in dB; distances under 35 m clamp to 35 m."""
    d = np.maximum(np.asarray(distance, dtype=float), MIN_DISTANCE_M)
    pl = 128.1 + 37.6 * np.log10(d / 1000.0)
    return float(pl) if np.ndim(pl) == 0 else pl


def per_re_power(tx_power_dbm: float, n_prb: int) -> float:
    return tx_power_dbm - 10.0 * math.log10(SUBCARRIERS_PER_PRB * n_prb)


def compute_rsrp(cell, path_loss_db: float, shadowing_db: float = 0.0) -> float | None:
    """RSRP in dBm for one (cell, UE) link, or ``None`` when the cell is asleep."""
    if not cell.active:
        return None
    return per_re_power(cell.tx_power, cell.n_prb) + cell.antenna_gain - path_loss_db - shadowing_db


def compute_rsrq(serving_rsrp_dbm: float, rssi_mw: float, n_prb: int) -> float:
    """RSRQ = N * RSRP / RSSI in dB, with RSSI the total received power over the N measured PRBs."""
    if n_prb < 1:
        raise ValueError("n_prb must be >= 1")
    if not rssi_mw > 0.0:
        raise DegeneratePowerError("degenerate power: RSSI must be > 0")
    return 10.0 * math.log10(n_prb * 10.0 ** (serving_rsrp_dbm / 10.0) / rssi_mw)


def thermal_noise_dbm(bandwidth_hz: float, noise_figure_db: float = 9.0) -> float:
    return THERMAL_NOISE_DBM_HZ + 10.0 * math.log10(bandwidth_hz) + noise_figure_db


def subband_noise_dbm(n_prb: int, n_subbands: int, noise_figure_db: float = 9.0) -> float:
    return thermal_noise_dbm(n_prb / n_subbands * PRB_BANDWIDTH_HZ, noise_figure_db)


def compute_sinr(signal_dbm: float | None, interferers_dbm=(), noise_dbm: float = -math.inf) -> float | None:
    """SINR in dB over a sub-band.

    ``signal_dbm`` is ``None`` when the serving cell does not transmit on the
    sub-band; the result is then ``None`` too.
    """
    if signal_dbm is None:
        return None
    s = 10.0 ** (signal_dbm / 10.0)
    i = sum(10.0 ** (p / 10.0) for p in interferers_dbm)
    n = 10.0 ** (noise_dbm / 10.0) if noise_dbm != -math.inf else 0.0
    if i + n == 0.0:
        return math.inf
    return 10.0 * math.log10(s / (i + n))


def map_cqi(sinr_db: float) -> tuple[int, bool]:
    """Return ``(cqi, out_of_range)`` for a SINR sample."""
    if math.isnan(sinr_db):
        raise InvalidChannelSample("invalid channel sample: SINR is NaN")
    idx = int(np.searchsorted(CQI_THRESHOLDS_DB, sinr_db, side="right"))
    if idx == 0:
        return 1, True
    return idx, False


def map_cqi_array(sinr_db: np.ndarray) -> np.ndarray:
    """Vectorised CQI lookup; NaN entries (no transmission) map to 0."""
    cqi = np.searchsorted(CQI_THRESHOLDS_DB, np.nan_to_num(sinr_db, nan=-np.inf), side="right")
    cqi = np.maximum(cqi, 1)
    return np.where(np.isnan(sinr_db), 0, cqi)


def cqi_threshold(cqi: int) -> float:
    if not 1 <= cqi <= 15:
        raise ValueError(f"cqi must be in 1..15, got {cqi}")
    return float(CQI_THRESHOLDS_DB[cqi - 1])


def spectral_efficiency(sinr_db):
    """Truncated-Shannon link abstraction in bits/s/Hz."""
    sinr = np.asarray(sinr_db, dtype=float)
    se = np.minimum(SE_FACTOR * np.log2(1.0 + 10.0 ** (sinr / 10.0)), SE_CAP)
    return float(se) if se.ndim == 0 else se


def bler(sinr_db, threshold_db):
    b = BLER_AT_THRESHOLD * 10.0 ** (-(np.asarray(sinr_db, dtype=float) - threshold_db) / 2.0)
    b = np.clip(b, BLER_FLOOR, 1.0)
    return float(b) if b.ndim == 0 else b


def harq_bler_profile(sinr_db, threshold_db, max_harq_tx: int = DEFAULT_MAX_HARQ_TX):
    """BLER of each transmission attempt, shape ``(..., max_harq_tx)``.

    Attempt k (0-based) sees ``k * 3 dB`` of soft-combining gain.
    """
    gains = HARQ_COMBINING_GAIN_DB * np.arange(max_harq_tx)
    sinr = np.asarray(sinr_db, dtype=float)[..., None] + gains
    return bler(sinr, np.asarray(threshold_db, dtype=float)[..., None])


def harq_outcomes(uniforms: np.ndarray, bler_profile: np.ndarray) -> np.ndarray:
    """Number of transmissions until ACK per row, or 0 for a drop.

    ``uniforms`` and ``bler_profile`` share shape ``(n, max_harq_tx)``.
    """
    ok = uniforms >= bler_profile
    first = np.argmax(ok, axis=-1) + 1
    return np.where(ok.any(axis=-1), first, 0)


def harq_transmit(sinr_db: float, cqi: int, rng: np.random.Generator,
                  max_harq_tx: int = DEFAULT_MAX_HARQ_TX) -> tuple[bool, int]:
    """Simulate one HARQ process.

    Returns ``(acked, transmissions)``. A dropped block reports
    ``(False, max_harq_tx)``. Exactly ``max_harq_tx`` uniforms are consumed
    from ``rng`` so the stream position does not depend on the outcome.
    """
    u = rng.random(max_harq_tx)
    k = int(harq_outcomes(u[None, :], harq_bler_profile(sinr_db, cqi_threshold(cqi), max_harq_tx)[None, :])[0])
    if k == 0:
        return False, max_harq_tx
    return True, k


def harq_ack_probabilities(sinr_db: float, cqi: int, max_harq_tx: int = DEFAULT_MAX_HARQ_TX) -> np.ndarray:
    """Analytic P(ACK on attempt k) for k = 1..max_harq_tx, followed by P(drop)."""
    b = harq_bler_profile(sinr_db, cqi_threshold(cqi), max_harq_tx)
    fail_before = np.concatenate([[1.0], np.cumprod(b)])
    probs = fail_before[:-1] * (1.0 - b)
    return np.append(probs, fail_before[-1])
