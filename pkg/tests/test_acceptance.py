"""Acceptance criteria, one test per criterion, each printing PASS/FAIL.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they
complete.
"""

import json
import math
import time

import numpy as np
import pytest

from dsbb84 import cli
from dsbb84.channel import ChannelModel, honest_attack_from_channel
from dsbb84.config import load_config, reference_config_text, reference_counts_text
from dsbb84.estimation import (
    DirectSolveContext,
    WorstCasePoint,
    maximize_pa_size,
    pa_moments,
    pa_size,
    security_exponents,
    solve_direct,
)
from dsbb84.harness import parse_counts_doc, run_replay, run_sweep
from dsbb84.photon_source import IntensitySet, poisson_weight, tagged_state_model
from dsbb84.privacy_amplification import draw_seed, toeplitz_hash
from dsbb84.reconciliation import build_code, reconcile_recv, reconcile_send
from dsbb84.rng import RandomService

from test_estimation import honest_counts, resample_insecure_bits

P_D = 3.00e-4


def _verdict(num, ok, detail):
    print(f"ACCEPTANCE {num} {'PASS' if ok else 'FAIL'}: {detail}", flush=True)
    assert ok, detail


@pytest.fixture(scope="module")
def reference():
    cfg = load_config(reference_config_text())
    counts = json.loads(reference_counts_text())
    return cfg, counts


class TestCriterion1ReplayKeySizing:
    def test_reference_replay(self, reference):
        cfg, counts = reference
        t0 = time.perf_counter()
        rep, metrics, keys = run_replay(cfg, counts, seed=1)
        elapsed = time.perf_counter() - t0
        ok = elapsed <= 60.0
        detail = [f"runtime {elapsed:.1f}s"]
        pre_caps = {}
        for basis in ("plus", "times"):
            ba = rep["basis"][basis]
            pre = ba["pre_cap_bits"]
            pre_caps[basis] = pre
            ok &= 1000 <= pre <= 56_000
            detail.append(f"{basis} pre-cap {pre}")
        if all(p >= 4096 for p in pre_caps.values()):
            total = rep["total_final_bits"]
            rate = float(rep["key_rate_bps"])
            ok &= rep["final_bits"] == {"plus": 4096, "times": 4096}
            ok &= total == 8192
            ok &= round(rate) == 196
            detail.append(f"final 4096+4096={total}, {rate:.1f} bps")
        _verdict(1, ok, "; ".join(detail))


class TestCriterion2AbortThreshold:
    def test_qber_sweep_threshold(self, reference):
        cfg, _ = reference
        t0 = time.perf_counter()
        values = [f"{q:.4f}" for q in np.linspace(0.050, 0.090, 11)]
        rows, _ = run_sweep(cfg, "qber", values, seed=3)
        elapsed = time.perf_counter() - t0
        keys = [row["key_bits"] for row in rows]
        threshold = None
        for i, row in enumerate(rows):
            if row["key_bits"] == 0 and all(r["key_bits"] == 0 for r in rows[i:]):
                threshold = float(row["value"])
                break
        ok = (elapsed <= 300.0 and threshold is not None
              and 0.060 <= threshold <= 0.080
              and any(k > 0 for k in keys[:3]))
        _verdict(2, ok,
                 f"runtime {elapsed:.0f}s; keys {keys}; threshold {threshold}")


class TestCriterion3Reconciliation:
    def test_frame_success_and_residual_ber(self):
        code = build_code(10_000, 0.50, RandomService(42).stream("acc3"))
        gen = np.random.Generator(np.random.Philox(300))

        noiseless_ok = 0
        for _ in range(20):
            z = gen.integers(0, 2, code.l).astype(np.uint8)
            xp = gen.integers(0, 2, code.n).astype(np.uint8)
            res = reconcile_recv(code, reconcile_send(code, z, xp), xp, 0.05)
            noiseless_ok += res.ok and np.array_equal(res.bits.bits, z)

        frames = 2100
        first_200_ok = 0
        decoded_bits = 0
        residual_errors = 0
        successes = 0
        for i in range(frames):
            z = gen.integers(0, 2, code.l).astype(np.uint8)
            xp = gen.integers(0, 2, code.n).astype(np.uint8)
            msg = reconcile_send(code, z, xp)
            noise = (gen.random(code.n) < 0.05).astype(np.uint8)
            res = reconcile_recv(code, msg, xp ^ noise, 0.05)
            if res.ok:
                successes += 1
                decoded_bits += code.n
                residual_errors += int(np.count_nonzero(res.bits.bits != z))
                if i < 200:
                    first_200_ok += 1
        ber = residual_errors / max(decoded_bits, 1)
        ok = (noiseless_ok == 20 and first_200_ok >= 190
              and decoded_bits >= 2e7 and ber <= 1e-6)
        _verdict(3, ok,
                 f"noiseless {noiseless_ok}/20; success {first_200_ok}/200; "
                 f"residual BER {ber:.2e} over {decoded_bits:.1e} bits")


class TestCriterion4Universality:
    def test_collision_rate_and_linearity(self):
        l, m, n_seeds = 20, 10, 1_000_000
        gen = np.random.Generator(np.random.Philox(400))
        x = gen.integers(0, 2, l).astype(np.uint8)
        y = x.copy()
        y[[2, 9, 15, 18]] ^= 1
        diff_rev = int("".join(str(b) for b in (x ^ y)), 2)
        seed_bits = l + (l - m) - 1
        seeds = gen.integers(0, 1 << seed_bits, size=n_seeds, dtype=np.uint64)
        collide = np.ones(n_seeds, dtype=bool)
        for i in range(l - m):
            collide &= (np.bitwise_count(seeds & np.uint64(diff_rev << i)) & 1) == 0
        rate = collide.mean()
        p = 2.0 ** -(l - m)
        sigma = math.sqrt(p * (1 - p) / n_seeds)
        coll_ok = abs(rate - p) <= 3 * sigma

        svc = RandomService(41)
        spec = draw_seed(l, m, svc.stream("acc4"))
        lin_ok = True
        for _ in range(10_000):
            a = gen.integers(0, 2, l).astype(np.uint8)
            b = gen.integers(0, 2, l).astype(np.uint8)
            if (toeplitz_hash(spec, a) ^ toeplitz_hash(spec, b)) != \
                    toeplitz_hash(spec, a ^ b):
                lin_ok = False
                break
        _verdict(4, coll_ok and lin_ok,
                 f"collision rate {rate:.6f} vs {p:.6f} (3-sigma {3*sigma:.6f}); "
                 f"linearity on 1e4 pairs {'exact' if lin_ok else 'violated'}")


class TestCriterion5EstimationSelfConsistency:
    def test_roundtrip_maximizer_and_monotonicity(self, reference):
        # Round trip at A_i >= 1e7 against empirical standard errors.
        ch = ChannelModel(5.8e-3, P_D, 0.03)
        model = tagged_state_model(IntensitySet((0.0, 0.07, 0.35, 0.5), 3))
        attack = honest_attack_from_channel(ch, model)
        x_h = (attack.q[4] + attack.q[7]) / math.sqrt(2)
        point = WorstCasePoint(x_h, attack.r[3])
        q1s, r1s = [], []
        for seed in range(25):
            counts, _ = honest_counts(seed=500 + seed, total=2e8, n_raw=20_000)
            sol = solve_direct(point, counts, model, P_D, "plus")
            q1s.append(sol.q1)
            r1s.append(sol.r1)
        counts, _ = honest_counts(seed=777, total=2e8, n_raw=20_000)
        sol = solve_direct(point, counts, model, P_D, "plus")
        dq = abs(sol.q1 - attack.q[1]) / (np.std(q1s) + 1e-15)
        dr = abs(sol.r1 - attack.r[0]) / (np.std(r1s) + 1e-15)
        roundtrip_ok = dq <= 3 and dr <= 3

        # Maximizer property on the deterministic reference counts.
        cfg, counts_doc = reference
        ref_counts = parse_counts_doc(counts_doc)
        deltas = security_exponents(9, 4096)
        res = maximize_pa_size(ref_counts, model, P_D, deltas, "plus")
        ctx = DirectSolveContext(ref_counts, model, P_D, "plus")
        gen = np.random.Generator(np.random.Philox(500))
        probed = violations = 0
        while probed < 1000:
            pt = WorstCasePoint(float(gen.random() * math.sqrt(2) * (1 - P_D)),
                                float(gen.random()))
            sol_p = ctx.solve(pt)
            probed += 1
            if not sol_p.feasible:
                continue
            val = pa_size(pt, ref_counts, model, P_D, deltas, "plus",
                          solution=sol_p)
            if val > res.m_max + 1e-9:
                violations += 1
        maximizer_ok = violations == 0

        m_maxes = [maximize_pa_size(ref_counts, model, P_D,
                                    security_exponents(d, 4096), "plus").m_max
                   for d in (5, 7, 9, 11)]
        mono_ok = all(a < b for a, b in zip(m_maxes, m_maxes[1:]))
        ok = roundtrip_ok and maximizer_ok and mono_ok
        _verdict(5, ok,
                 f"roundtrip ({dq:.2f}, {dr:.2f}) SE; maximizer violations "
                 f"{violations}/1000; m_max over deltas {[f'{m:.0f}' for m in m_maxes]}")


class TestCriterion6MomentsOracle:
    def test_mc_resampling_five_sets(self):
        gen = np.random.Generator(np.random.Philox(600))
        failures = []
        for trial in range(5):
            counts, attack = honest_counts(seed=600 + trial, total=8e8,
                                           n_raw=50_000,
                                           misalignment=float(0.01 + 0.01 * trial))
            q1 = float(attack.q[1] * (0.8 + 0.1 * trial))
            r1 = float(0.005 + 0.012 * trial)
            k = 3
            q = np.zeros(2 * k + 2)
            q[1] = q1
            r = np.zeros(k + 1)
            r[0] = r1
            m_inf, v = pa_moments(q, r, counts, tagged_state_model(
                IntensitySet((0.0, 0.07, 0.35, 0.5), 3)), P_D, "plus")
            mc = resample_insecure_bits(100_000, q1, r1, counts,
                                        tagged_state_model(
                                            IntensitySet((0.0, 0.07, 0.35, 0.5), 3)),
                                        P_D, "plus", seed=6200 + trial)
            se_mean = mc.std(ddof=1) / math.sqrt(mc.size)
            se_var = mc.var(ddof=1) * math.sqrt(2.0 / (mc.size - 1))
            dm = abs(mc.mean() - m_inf) / se_mean
            dv = abs(mc.var(ddof=1) - v) / se_var
            if dm > 3 or dv > 3:
                failures.append((trial, round(dm, 2), round(dv, 2)))
        _verdict(6, not failures,
                 f"5 parameter sets, mean/variance within 3 SE"
                 + (f"; failures {failures}" if failures else ""))


class TestCriterion7DecompositionFidelity:
    def test_poisson_reconstruction(self):
        model = tagged_state_model(IntensitySet((0.0, 0.07, 0.35, 0.5), 3),
                                   n_max=40)
        worst = 0.0
        for c in range(1, 7):
            mu = model.class_intensity(c)
            target = np.array([poisson_weight(mu, n) for n in range(41)])
            worst = max(worst, float(np.max(np.abs(
                model.reconstruct(c) - target))))
        _verdict(7, worst <= 1e-9, f"max Fock residual {worst:.2e} (<= 1e-9)")


class TestCriterion8Determinism:
    SMOKE = """
[session]
raw_key_bits = 4000
max_final_key_bits = 4096
security_exponent = 9
time_slot_s = 4.0
[source]
mu = 0.1
signal_index = 1
pulse_rate_hz = 1e6
[send_prob]
vacuum = 0.2
mu_1 = 0.4
[channel]
transmittance = 0.3
dark_count_prob = 1e-5
misalignment = 0.01
[reconciliation]
block_bits = 2000
[estimation]
grid_points = 24
"""

    def test_byte_identical_outputs(self, tmp_path):
        cfg = tmp_path / "smoke.ini"
        cfg.write_text(self.SMOKE)
        runs = []
        for name in ("one", "two"):
            out = tmp_path / name
            code = cli.main(["simulate", "--config", str(cfg), "--seed", "17",
                             "--out", str(out)])
            assert code == cli.EXIT_KEY
            runs.append(out)
        identical = all(
            (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
            for f in ("report.json", "key_plus.bin", "key_plus.json",
                      "key_times.bin", "key_times.json"))

        # Replay determinism against the recorded counts of the first run.
        counts = json.loads((runs[0] / "report.json").read_text())["counts"]
        counts_path = tmp_path / "counts.json"
        counts_path.write_text(json.dumps(counts))
        reps = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            code = cli.main(["replay", "--config", str(cfg), "--counts",
                             str(counts_path), "--seed", "23", "--out",
                             str(out)])
            assert code == cli.EXIT_KEY
            reps.append(out)
        identical &= (reps[0] / "report.json").read_bytes() == \
            (reps[1] / "report.json").read_bytes()
        identical &= (reps[0] / "key_plus.bin").read_bytes() == \
            (reps[1] / "key_plus.bin").read_bytes()
        _verdict(8, identical, "simulate and replay reruns byte-identical")
