"""The ten acceptance criteria, each at its stated tolerance.

Run under pytest (a PASS/FAIL line per criterion is printed in the terminal summary) or directly with
``python tests/test_acceptance.py``.
"""
import dataclasses
import itertools
import math
import statistics
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))
from conftest import ACCEPTANCE_RESULTS, SCENARIOS, make_twin  # noqa: E402

from ranloop import radio  # noqa: E402
from ranloop.agents import ActorCriticParams, CellAction, policy_log_gradient  # noqa: E402
from ranloop.loop import final_quarter_reward, run_episode  # noqa: E402
from ranloop.observer import AnomalyTracker, ObjectiveWeights, jain_index  # noqa: E402
from ranloop.scenario import load_scenario  # noqa: E402
from ranloop.supervisor import SafetyEnvelope, resolve_action, shadow_evaluate, validate_action  # noqa: E402
from ranloop.twin import CellConfig, pf_allocate  # noqa: E402


def _run(*args):
    return subprocess.run([sys.executable, "-m", "ranloop.cli", *map(str, args)], capture_output=True, text=True)


def criterion_1(tmp: Path):
    """run + replay on the 7-cell/50-UE/20 000-TTI scenario; run under 60 s."""
    sc, out = SCENARIOS / "seven_cell.yaml", tmp / "seven.jsonl"
    t0 = time.perf_counter()
    r = _run("run", "--scenario", sc, "--seed", 20240601, "--export", out)
    elapsed = time.perf_counter() - t0
    rep = _run("replay", "--scenario", sc, "--seed", 20240601, "--export", out)
    ok = r.returncode == 0 and rep.returncode == 0 and elapsed < 60.0
    return ok, f"run exit {r.returncode} in {elapsed:.1f} s, replay exit {rep.returncode}"


def criterion_2(tmp=None):
    """Physics oracles."""
    cell = CellConfig(0, (0, 0), tx_power=43.0, antenna_gain=0.0, n_prb=50)
    rsrp = radio.compute_rsrp(cell, 128.1, 0.0)
    rssi = 12 * 50 * 10 ** (rsrp / 10)                     # fully loaded, equal per-RE power, no noise
    rsrq = radio.compute_rsrq(rsrp, rssi, 50)
    noise = radio.subband_noise_dbm(50, 4, 9.0)
    se = radio.spectral_efficiency(0.0)
    ok = (abs(rsrp - (-112.88)) <= 0.005 and abs(rsrq - (-10.79)) <= 0.01 and abs(noise - (-101.48)) <= 0.01
          and abs(se - 0.75) <= 1e-6)
    return ok, f"RSRP {rsrp:.3f} dBm, RSRQ {rsrq:.3f} dB, noise {noise:.3f} dBm, SE(0 dB) {se:.9f}"


def _exhaustive_pf(rates, avg):
    n_ue, n_grp = rates.shape
    metric = rates / np.maximum(avg, 1e-3)[:, None]
    best, best_val = None, -math.inf
    for assign in itertools.product(range(n_ue), repeat=n_grp):   # lexicographic: ties keep lowest ids
        val = sum(metric[u, g] for g, u in enumerate(assign))
        if val > best_val:
            best, best_val = assign, val
    return np.array(best)


def criterion_3(tmp=None):
    """PF allocation equals the exhaustive argmax on 50 random instances of <= 4 UEs x 8 PRBs."""
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(50):
        n_ue, n_prb = int(rng.integers(1, 5)), int(rng.integers(1, 9))
        rates = rng.uniform(0.0, 1e6, (n_ue, n_prb)) * rng.integers(0, 2, (n_ue, n_prb))
        avg = rng.uniform(0.0, 1e6, n_ue) * rng.integers(0, 2, n_ue)
        if not np.array_equal(pf_allocate(rates, avg), _exhaustive_pf(rates, avg)):
            mismatches += 1
    return mismatches == 0, f"{mismatches} mismatches over 50 instances"


def criterion_4(tmp=None):
    """HARQ ACK-by-k frequencies at sinr = T(cqi) within 3 sigma binomial bounds over 1e5 trials."""
    n, worst = 100_000, 0.0
    ok = True
    for cqi in (3, 9, 15):
        t = radio.cqi_threshold(cqi)
        rng = np.random.default_rng(cqi)
        counts = np.zeros(5)
        for _ in range(n):
            acked, k = radio.harq_transmit(t, cqi, rng)
            counts[k - 1 if acked else 4] += 1
        p = radio.harq_ack_probabilities(t, cqi)
        sd = np.sqrt(n * p * (1 - p))
        dev = np.abs(counts - n * p)
        ok &= bool(np.all(dev <= 3 * sd + 1e-9))
        worst = max(worst, float(np.max(np.where(sd > 0, dev / np.maximum(sd, 1e-300), 0.0))))
    return ok, f"largest deviation {worst:.2f} sigma (limit 3)"


def criterion_5(tmp=None):
    """policy_log_gradient vs central finite differences, <= 1e-5 relative error on 100 draws."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        theta, phi = rng.normal(0, 1, 5), rng.normal(0, 1, 5)
        sigma = float(rng.uniform(0.5, 2.0))
        a = float(rng.normal(theta @ phi, sigma))
        p = ActorCriticParams(theta=theta, sigma=sigma)

        def logp(th):
            mu = th @ phi
            return -0.5 * ((a - mu) / sigma) ** 2 - math.log(sigma * math.sqrt(2 * math.pi))

        h = 1e-5
        fd = np.array([(logp(theta + h * e) - logp(theta - h * e)) / (2 * h) for e in np.eye(5)])
        g = policy_log_gradient(p, phi, a)
        rel = np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(rel))
    return worst <= 1e-5, f"max relative error {worst:.2e}"


def criterion_6(tmp=None):
    """10 000 random action sets through validate_action + apply_config: zero envelope violations."""
    env = SafetyEnvelope(power_min=10.0, power_max=46.0, min_active_cells=2)
    cells = [CellConfig(i, (300.0 + 400 * i, 1000.0)) for i in range(4)]
    twin = make_twin(cells, [[500, 1000], [900, 1100], [1400, 900]])
    rng = np.random.default_rng(99)
    specials = [math.nan, math.inf, -math.inf, 1e9, -1e9]
    violations = rejected = 0
    for _ in range(10_000):
        action = {}
        for cid in rng.choice(np.arange(-1, 6), size=int(rng.integers(0, 5)), replace=False):
            delta = None
            u = rng.random()
            if u < 0.1:
                delta = specials[int(rng.integers(len(specials)))]
            elif u < 0.8:
                delta = float(rng.normal(0, 10))
            mask = None
            if rng.random() < 0.5:
                mask = tuple(bool(b) for b in rng.integers(0, 2, int(rng.choice([4, 4, 4, 3, 5]))))
            action[int(cid)] = CellAction(delta, mask, bool(rng.random() < 0.3))
        v = validate_action(env, twin.cells, action)
        if not v.accepted:
            rejected += 1
            continue
        twin.apply_config(resolve_action(twin.cells, v.action))
        c = twin.cells
        if (any(not env.power_min <= x.tx_power <= env.power_max for x in c)
                or sum(x.active for x in c) < env.min_active_cells):
            violations += 1
    return violations == 0, f"{violations} violations ({rejected} rejected, {10_000 - rejected} applied)"


def criterion_7(tmp=None):
    """Exogenous power halving after interval 20 triggers rollback within N+1 intervals, bit-exact restore."""
    sc = load_scenario(SCENARIOS / "fault_rollback.yaml")
    env = sc.envelope
    assert env.degradation_fraction == 0.15 and env.degradation_windows == 5
    fault = sc.faults[0]
    fault_interval = fault.tti // sc.loop.decision_interval           # last interval before the fault
    ep = run_episode(sc, seed=0)
    rb = [r for r in ep.stream if r["type"] == "rollback"]
    if not rb:
        return False, "no rollback"
    first = rb[0]
    cp = next(c for c in ep.supervisor.checkpoints if c.checkpoint_id == first["checkpoint_id"])
    # replay to the rollback point to inspect the configs right after it
    ep2 = run_episode(dataclasses.replace(sc, loop=dataclasses.replace(
        sc.loop, total_ttis=first["interval"] * sc.loop.decision_interval)), seed=0)
    restored = tuple(ep2.twin.cells)
    bit_exact = restored == cp.configs and all(
        repr(dataclasses.astuple(a)) == repr(dataclasses.astuple(b)) for a, b in zip(restored, cp.configs))
    within = first["interval"] - fault_interval <= env.degradation_windows + 1
    ok = within and bit_exact and cp.tti <= fault.tti
    return ok, (f"fault after interval {fault_interval}, rollback at interval {first['interval']} "
                f"to checkpoint {cp.checkpoint_id} (tti {cp.tti}), bit-identical {bit_exact}")


def criterion_8(tmp=None):
    """Live twin state hash unchanged by 1 000 shadow evaluations."""
    sc = load_scenario(SCENARIOS / "three_cell_interference.yaml")
    live = sc.build_twin(1)
    live.advance(300)
    before = live.state_hash()
    env = dataclasses.replace(sc.envelope, shadow_horizon=20)
    rng = np.random.default_rng(8)
    for _ in range(1000):
        cid = int(rng.integers(3))
        mask = tuple(bool(b) for b in rng.integers(0, 2, 4)) if rng.random() < 0.5 else None
        if mask is not None and not any(mask):
            mask = None
        shadow_evaluate(live, {cid: CellAction(float(rng.normal(0, 3)), mask, bool(rng.random() < 0.2))},
                        env, ObjectiveWeights(), 0.5)
    after = live.state_hash()
    return before == after, f"hash {before[:12]} -> {after[:12]}"


def criterion_9(tmp=None):
    """Combined agent >= 10 % above static over the final quarter, median over 5 seeds."""
    sc = load_scenario(SCENARIOS / "three_cell_interference.yaml")
    assert sc.loop.total_ttis == 20_000
    res = {}
    for agent in ("static", "combined"):
        loop = dataclasses.replace(sc.loop, agent=agent)
        res[agent] = [final_quarter_reward(run_episode(sc, loop, seed=s).records) for s in range(5)]
    st, co = statistics.median(res["static"]), statistics.median(res["combined"])
    ok = co >= st + 0.10 * abs(st)
    return ok, (f"median static {st:.4f}, combined {co:.4f} ({(co - st) / abs(st) * 100:+.1f} %); "
                f"per seed static {[round(x, 3) for x in res['static']]} combined "
                f"{[round(x, 3) for x in res['combined']]}")


def criterion_10(tmp=None):
    """Jain index in [1/n, 1] on 1e4 fuzz inputs; anomaly step flagged within 1 sample, never in warm-up."""
    rng = np.random.default_rng(10)
    bad = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 40))
        x = rng.exponential(1.0, n) * rng.integers(0, 2, n) * 10 ** rng.uniform(-6, 6)
        if not x.any():
            x[int(rng.integers(n))] = rng.uniform(1e-9, 1e9)
        j = jain_index(x)
        bad += not (1.0 / n - 1e-12 <= j <= 1.0 + 1e-12)
    missed = warm_flags = 0
    for trial in range(200):
        tr = AnomalyTracker("m")
        g = np.random.default_rng(trial)
        for i in range(tr.warmup):
            warm_flags += tr.test(float(g.normal(0, 1) * (1 + 100 * (i % 3 == 0)))).flagged
        for _ in range(int(g.integers(0, 60))):
            tr.test(float(g.normal(5.0, 1.0)))
        sigma = math.sqrt(tr.var)
        step = tr.mean + float(g.choice([-1, 1])) * float(g.uniform(5.0, 10.0)) * sigma
        missed += not tr.test(step).flagged
    ok = bad == 0 and missed == 0 and warm_flags == 0
    return ok, f"Jain out of range {bad}/10000, steps missed {missed}/200, warm-up flags {warm_flags}"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6, criterion_7,
            criterion_8, criterion_9, criterion_10]


@pytest.mark.parametrize("number", range(1, 11))
def test_acceptance(number, tmp_path):
    ok, detail = CRITERIA[number - 1](tmp_path)
    ACCEPTANCE_RESULTS[number] = (ok, detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    failed = 0
    with tempfile.TemporaryDirectory() as d:
        for k, fn in enumerate(CRITERIA, 1):
            ok, detail = fn(Path(d))
            failed += not ok
            print(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    sys.exit(1 if failed else 0)
