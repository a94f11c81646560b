import math

import numpy as np
import pytest

import dsbb84.estimation as est
from dsbb84.channel import (
    AttackModel,
    ChannelModel,
    SessionCounts,
    expected_rates,
    honest_attack_from_channel,
    sample_session,
)
from dsbb84.estimation import (
    DirectSolveContext,
    EstimationFailure,
    InfeasiblePoint,
    WorstCasePoint,
    clipped_binary_entropy,
    clipped_binary_entropy_deriv,
    maximize_pa_size,
    ml_estimate,
    pa_moments,
    pa_size,
    security_exponents,
    solve_direct,
    std_normal_cdf,
    std_normal_quantile,
)
from dsbb84.photon_source import IntensitySet, tagged_state_model
from dsbb84.rng import RandomService

MODEL = tagged_state_model(IntensitySet((0.0, 0.07, 0.35, 0.5), 3))
P_D = 3e-4
RATIOS = np.array([0.125, 0.1875, 0.0625, 0.1875, 0.1875, 0.0625, 0.1875])


def honest_counts(seed=5, total=2e8, n_raw=20_000, transmittance=5.8e-3,
                  misalignment=0.03):
    """Post-sift counts from an honest channel at reference-like ratios."""
    ch = ChannelModel(transmittance, P_D, misalignment)
    attack = honest_attack_from_channel(ch, MODEL)
    sent = np.round(RATIOS * total).astype(np.int64)
    svc = RandomService(seed)
    counts = sample_session(sent, MODEL, attack, P_D, svc.stream("session"),
                            raw_key_bits=n_raw, time_slot_s=10.0)
    # Signal-class errors are only observed on check bits: subsample.
    gen = svc.stream("checks")
    for kappa in (3, 6):
        e, h = int(counts.sifted[kappa]), int(counts.errors[kappa])
        counts.errors[kappa] = gen.hypergeometric(h, e - h, e - n_raw)
    return counts, attack


class TestSecurityExponents:
    def test_reference_values(self):
        assert security_exponents(9, 2**12) == (22, 23, 23)

    def test_minimal(self):
        assert security_exponents(1, 1) == (2, 3, 3)

    def test_ceiling_bump(self):
        assert security_exponents(9, 2**12 + 1) == (23, 24, 24)

    def test_domain(self):
        with pytest.raises(ValueError):
            security_exponents(0, 16)


class TestNormal:
    def test_cdf_center(self):
        assert std_normal_cdf(0.0) == 0.5

    def test_quantile_center(self):
        assert std_normal_quantile(0.5) == pytest.approx(0.0, abs=1e-15)

    def test_quantile_matches_bisection_oracle(self):
        # Invert the CDF independently by bisection to 1e-12.
        p = 2.0 ** -22
        lo, hi = -10.0, 0.0
        while hi - lo > 1e-12:
            mid = 0.5 * (lo + hi)
            if std_normal_cdf(mid) < p:
                lo = mid
            else:
                hi = mid
        assert std_normal_quantile(p) == pytest.approx(0.5 * (lo + hi), abs=1e-9)

    def test_roundtrip_relative_accuracy(self):
        for p in np.geomspace(1e-10, 0.5, 40):
            err = abs(std_normal_cdf(std_normal_quantile(p)) - p)
            assert err <= 1e-12 * p

    def test_quantile_identity_all_exponents(self):
        for d in range(1, 65):
            p = 2.0 ** -d
            assert std_normal_cdf(std_normal_quantile(p)) == pytest.approx(
                p, rel=1e-12)

    def test_quantile_domain(self):
        with pytest.raises(ValueError):
            std_normal_quantile(0.0)
        with pytest.raises(ValueError):
            std_normal_quantile(1.0)


class TestClippedEntropy:
    def test_limits(self):
        assert clipped_binary_entropy(0.0) == 0.0
        assert clipped_binary_entropy(0.5) == 1.0
        assert clipped_binary_entropy(0.75) == 1.0

    def test_domain(self):
        with pytest.raises(ValueError):
            clipped_binary_entropy(-0.1)
        with pytest.raises(ValueError):
            clipped_binary_entropy(1.1)

    def test_deriv_clipped_branch(self):
        assert clipped_binary_entropy_deriv(0.6) == 0.0
        assert clipped_binary_entropy_deriv(0.5) == 0.0
        assert clipped_binary_entropy_deriv(0.25) == pytest.approx(math.log2(3))


def exact_counts_from_attack(attack, total_per_class=10**14):
    """Counts whose observed ratios match the closed-form rates to ~1e-14."""
    p, s = expected_rates(MODEL, attack, P_D)
    sent = np.full(7, total_per_class, dtype=np.int64)
    received = np.round(p * total_per_class).astype(np.int64)
    sifted = received // 2
    errors = np.array([int(round((s[i] or 0.0) * sifted[i])) for i in range(7)])
    return SessionCounts(sent, received, sifted, errors, 0, 1.0)


def feasible_probe(counts, basis="plus", y=0.0, x_hi=0.12):
    """First scanned x whose direct solve lands inside the box."""
    ctx = DirectSolveContext(counts, MODEL, P_D, basis)
    for x in np.linspace(0.0, x_hi, 481):
        pt = WorstCasePoint(float(x), y)
        if ctx.solve(pt).feasible:
            return pt
    raise AssertionError("no feasible probe point found")


class TestSolveDirect:
    def test_roundtrip_zero_multiphoton_attack(self):
        k = MODEL.k
        q = np.zeros(2 * k + 2)
        q[0], q[1] = 1e-3, 0.3
        r = np.array([0.02, 0.0, 0.0, 0.0])
        attack = AttackModel(q, r, np.array([0.03, 0.0, 0.0, 0.0]))
        counts = exact_counts_from_attack(attack)
        sol = solve_direct(WorstCasePoint(0.0, 0.0), counts, MODEL, P_D, "plus")
        assert sol.feasible
        assert sol.q1 == pytest.approx(0.3, abs=1e-9)
        assert sol.r1 == pytest.approx(0.02, abs=1e-9)

    def test_dark_only_forces_zero(self):
        k = MODEL.k
        sent = np.full(7, 10**12, dtype=np.int64)
        c = np.full(7, int(P_D * 10**12), dtype=np.int64)
        e = c // 2
        h = e // 2
        counts = SessionCounts(sent, c, e, h, 0, 1.0)
        sol = solve_direct(WorstCasePoint(0.0, 0.0), counts, MODEL, P_D, "plus")
        assert sol.q1 == pytest.approx(0.0, abs=1e-9)

    def test_sampled_session_has_feasible_points(self):
        # At three intensities the top-order split is noise-dominated at
        # desk scale (the experiment needed ~1e9 pulses); a single-intensity
        # set is well conditioned and must scan feasible in both bases.
        model = tagged_state_model(IntensitySet((0.0, 0.5), 1))
        ch = ChannelModel(0.3, P_D, 0.01)
        attack = honest_attack_from_channel(ch, model)
        sent = np.round(np.array([0.2, 0.4, 0.4]) * 2e6).astype(np.int64)
        counts = sample_session(sent, model, attack, P_D,
                                RandomService(5).stream("s"),
                                raw_key_bits=20_000, time_slot_s=1.0)
        gen = RandomService(5).stream("checks")
        for kappa in (1, 2):
            e, h = int(counts.sifted[kappa]), int(counts.errors[kappa])
            counts.errors[kappa] = gen.hypergeometric(h, e - h, e - 20_000)
        x_h = float((attack.q[2] + attack.q[3]) / math.sqrt(2))
        for basis in ("plus", "times"):
            ctx = DirectSolveContext(counts, model, P_D, basis)
            feas = [x for x in np.linspace(0.0, 1.4, 567)
                    if ctx.solve(WorstCasePoint(float(x), 0.01)).feasible]
            assert feas, "no feasible attribution found"
            # At the generating point the solve recovers the channel.
            sol = ctx.solve(WorstCasePoint(x_h, 0.01))
            assert sol.feasible
            assert sol.q1 == pytest.approx(attack.q[1], rel=0.05)

    def test_far_point_infeasible(self):
        counts, _ = honest_counts()
        sol = solve_direct(WorstCasePoint(1.2, 0.0), counts, MODEL, P_D, "plus")
        assert not sol.feasible


class TestMlEstimate:
    def test_saturated_at_consistent_counts(self):
        counts, _ = honest_counts()
        point = feasible_probe(counts, "plus", y=0.01)
        q_ml, r_ml, ll, iters = ml_estimate(point, counts, MODEL, P_D, "plus")
        sol = solve_direct(point, counts, MODEL, P_D, "plus")
        assert iters == 0
        np.testing.assert_allclose(q_ml, sol.q, atol=1e-12)

    def test_recovers_known_attack_within_3_se(self):
        # Empirical standard errors from repeated sessions; a fresh session's
        # estimate must sit within 3 SE of the generating attack.
        ch = ChannelModel(5.8e-3, P_D, 0.01)
        attack = honest_attack_from_channel(ch, MODEL)
        x_h = (attack.q[4] + attack.q[7]) / math.sqrt(2)
        point = WorstCasePoint(x_h, attack.r[3])
        q1s, r1s = [], []
        for seed in range(25):
            counts, _ = honest_counts(seed=100 + seed, total=7e7, n_raw=5000)
            sol = solve_direct(point, counts, MODEL, P_D, "plus")
            q1s.append(sol.q1)
            r1s.append(sol.r1)
        counts, _ = honest_counts(seed=999, total=7e7, n_raw=5000)
        sol = solve_direct(point, counts, MODEL, P_D, "plus")
        assert abs(sol.q1 - attack.q[1]) <= 3 * np.std(q1s) + 1e-12
        assert abs(sol.r1 - attack.r[0]) <= 3 * np.std(r1s) + 1e-12

    def test_all_zero_detections(self):
        sent = np.full(7, 10**9, dtype=np.int64)
        zero = np.zeros(7, dtype=np.int64)
        counts = SessionCounts(sent, zero, zero, zero, 0, 1.0)
        with pytest.raises(EstimationFailure):
            # No sifted bits at all: error denominators vanish.
            ml_estimate(WorstCasePoint(0.0, 0.0), counts, MODEL, 0.0, "plus")

    def test_likelihood_beats_clamped_direct(self):
        # Perturb counts so the direct solution leaves the box; the fit must
        # then do at least as well as the clamped direct point.
        counts, attack = honest_counts()
        counts.received[1] = int(counts.received[1] * 0.2)  # starve one decoy
        counts.sifted[1] = counts.received[1] // 2
        counts.errors[1] = min(counts.errors[1], counts.sifted[1])
        x_h = (attack.q[4] + attack.q[7]) / math.sqrt(2)
        point = WorstCasePoint(2.5 * x_h, 0.0)
        sol = solve_direct(point, counts, MODEL, P_D, "plus")
        if sol.feasible:
            pytest.skip("perturbation did not push the solve out of the box")
        q_ml, r_ml, ll, iters = ml_estimate(point, counts, MODEL, P_D, "plus")
        ctx = DirectSolveContext(counts, MODEL, P_D, "plus")
        sol2 = ctx.solve(point)
        # Recompute the clamped-direct likelihood through the same code path.
        q_d, r_d, ll_d, _ = ml_estimate(point, counts, MODEL, P_D, "plus",
                                        max_iter=0)
        assert ll >= ll_d - 1e-9


def resample_insecure_bits(n_draws, q1, r1, counts, model, p_d, basis, seed):
    """MC oracle: redraw every chain fluctuation from its distribution."""
    gen = np.random.Generator(np.random.Philox(seed))
    kappa = model.intensities.signal_class(basis)
    N = counts.raw_key_bits
    A = counts.sent.astype(float)
    a_sig = float(A[kappa])
    e_sig = int(counts.sifted[kappa])
    c_sig = int(counts.received[kappa])
    p1 = float(model.P[kappa, 1])

    m1_total = int(round(float(model.P[:, 1] @ A)))
    a_total = int(A.sum())
    b1 = int(round(p1 * a_sig))

    def hyp(M, K, m):
        M = int(round(M))
        K = np.clip(np.round(np.asarray(K)).astype(np.int64), 0, M)
        m = np.clip(np.asarray(m, dtype=np.int64), 0, M)
        return gen.hypergeometric(K, M - K, m)

    c1 = hyp(m1_total, q1 * m1_total, np.full(n_draws, b1))
    e1 = hyp(c_sig, round(c_sig / 2), c1)
    f1 = hyp(e_sig, e1, np.full(n_draws, N))
    k_err = np.round(r1 * e1).astype(np.int64)
    g1 = gen.hypergeometric(k_err, np.maximum(e1 - k_err, 0), np.minimum(f1, e1))

    cd = hyp(a_total, p_d * a_total, np.full(n_draws, int(a_sig)))
    ed = hyp(c_sig, round(c_sig / 2), cd)
    fd = hyp(e_sig, ed, np.full(n_draws, N))

    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(f1 > 0, g1 / np.maximum(f1, 1), 0.0)
    hbar = np.array([clipped_binary_entropy(min(x, 1.0)) for x in ratio])
    s = f1 * (hbar - 1.0) + N - fd
    return s


class TestPaMoments:
    def test_zeroed_variances(self, monkeypatch):
        counts, attack = honest_counts()
        sol = solve_direct(feasible_probe(counts, "plus", y=0.01), counts,
                           MODEL, P_D, "plus")
        monkeypatch.setattr(est, "_hyper_var", lambda *a: 0.0)
        m_inf, v = pa_moments(sol.q, sol.r, counts, MODEL, P_D, "plus")
        assert v == 0.0
        # Plug-in mean from the chain by hand.
        kappa = 6
        f = counts.raw_key_bits / counts.sifted[kappa]
        f1 = f * 0.5 * sol.q1 * MODEL.P[kappa, 1] * counts.sent[kappa]
        fd = f * 0.5 * P_D * counts.sent[kappa]
        expect = f1 * (clipped_binary_entropy(sol.r1) - 1) + counts.raw_key_bits - fd
        assert m_inf == pytest.approx(expect, rel=1e-12)

    def test_no_error_no_dark_reduction(self):
        # Error-free dark-free channel at model-consistent parameters.
        ch = ChannelModel(5.8e-3, 0.0, 0.0)
        attack = honest_attack_from_channel(ch, MODEL)
        sent = np.round(RATIOS * 2e8).astype(np.int64)
        counts = sample_session(sent, MODEL, attack, 0.0,
                                RandomService(17).stream("s"),
                                raw_key_bits=20_000, time_slot_s=1.0)
        k = MODEL.k
        q = np.zeros(2 * k + 2)
        q[1] = attack.q[1]
        r = np.zeros(k + 1)
        m_inf, v = pa_moments(q, r, counts, MODEL, 0.0, "plus")
        kappa = 6
        f = counts.raw_key_bits / counts.sifted[kappa]
        f1 = f * 0.5 * attack.q[1] * MODEL.P[kappa, 1] * counts.sent[kappa]
        assert m_inf == pytest.approx(counts.raw_key_bits - f1, rel=1e-12)
        mc = resample_insecure_bits(100_000, attack.q[1], 0.0, counts, MODEL,
                                    0.0, "plus", seed=42)
        se = mc.std(ddof=1) / math.sqrt(mc.size)
        assert abs(mc.mean() - m_inf) <= 3 * se

    def test_variance_positive_at_honest_point(self):
        counts, attack = honest_counts()
        sol = solve_direct(feasible_probe(counts, "plus", y=0.01), counts,
                           MODEL, P_D, "plus")
        m_inf, v = pa_moments(sol.q, sol.r, counts, MODEL, P_D, "plus")
        assert v > 0

    def test_infeasible_marker_without_single_photons(self):
        counts, _ = honest_counts()
        q = np.zeros(2 * MODEL.k + 2)
        r = np.zeros(MODEL.k + 1)
        with pytest.raises(InfeasiblePoint):
            pa_moments(q, r, counts, MODEL, P_D, "plus")


class TestPaSize:
    def test_all_fluctuations_zero_gives_mean(self, monkeypatch):
        counts, attack = honest_counts()
        point = feasible_probe(counts, "plus", y=0.01)
        sol = solve_direct(point, counts, MODEL, P_D, "plus")
        m_inf, _ = pa_moments(sol.q, sol.r, counts, MODEL, P_D, "plus")
        monkeypatch.setattr(est, "_hyper_var", lambda *a: 0.0)
        monkeypatch.setattr(est, "std_normal_quantile", lambda p: 0.0)
        got = pa_size(point, counts, MODEL, P_D, (22, 23, 0), "plus")
        assert got == pytest.approx(m_inf, rel=1e-12)

    def test_plugin_consistency_identity(self, monkeypatch):
        counts, attack = honest_counts()
        point = feasible_probe(counts, "plus", y=0.01)
        sol = solve_direct(point, counts, MODEL, P_D, "plus")
        m_inf, _ = pa_moments(sol.q, sol.r, counts, MODEL, P_D, "plus")
        monkeypatch.setattr(est, "_hyper_var", lambda *a: 0.0)
        deltas = (22, 23, 23)
        got = pa_size(point, counts, MODEL, P_D, deltas, "plus")
        kappa = 6
        h = clipped_binary_entropy(sol.r1)
        term1 = (-counts.raw_key_bits * sol.q1 * (h - 1)
                 / counts.received[kappa]
                 * math.sqrt(counts.sent[kappa] * MODEL.P[kappa, 1]
                             * (1 - MODEL.P[kappa, 1]))
                 * -std_normal_quantile(2.0**-22))
        assert got == pytest.approx(m_inf + term1 + 23, rel=1e-12)

    def test_delta_monotone_at_fixed_point(self):
        counts, _ = honest_counts()
        point = feasible_probe(counts, "plus", y=0.01)
        sizes = [pa_size(point, counts, MODEL, P_D, security_exponents(d, 4096),
                         "plus") for d in (5, 7, 9, 11)]
        assert sizes == sorted(sizes)
        assert len(set(sizes)) == len(sizes)


class TestMaximize:
    def test_planted_quadratic_located(self):
        counts, _ = honest_counts()
        x_star, y_star = 0.4, 0.3

        def planted(x, y):
            return 100.0 - (x - x_star) ** 2 - 2.0 * (y - y_star) ** 2

        res = maximize_pa_size(counts, MODEL, P_D, (22, 23, 23), "plus",
                               grid=16, objective=planted)
        assert res.point.x == pytest.approx(x_star, abs=1e-4)
        assert res.point.y == pytest.approx(y_star, abs=1e-4)
        assert res.m_max == pytest.approx(100.0, abs=1e-8)

    def test_constant_objective(self):
        counts, _ = honest_counts()
        res = maximize_pa_size(counts, MODEL, P_D, (22, 23, 23), "plus",
                               grid=8, objective=lambda x, y: 7.5)
        assert res.m_max == 7.5

    def test_grid_dominance_and_probes(self):
        counts, _ = honest_counts()
        deltas = security_exponents(9, 4096)
        res = maximize_pa_size(counts, MODEL, P_D, deltas, "plus", grid=64)
        assert res.m_max >= res.grid_max
        gen = np.random.Generator(np.random.Philox(3))
        ctx = DirectSolveContext(counts, MODEL, P_D, "plus")
        for _ in range(200):
            pt = WorstCasePoint(float(gen.random() * math.sqrt(2) * (1 - P_D)),
                                float(gen.random()))
            sol = ctx.solve(pt)
            if not sol.feasible:
                continue
            assert res.m_max >= pa_size(pt, counts, MODEL, P_D, deltas, "plus",
                                        solution=sol) - 1e-9

    def test_every_point_infeasible_fails(self):
        counts, _ = honest_counts()
        with pytest.raises(EstimationFailure):
            maximize_pa_size(counts, MODEL, P_D, (22, 23, 23), "plus", grid=8,
                             objective=lambda x, y: -math.inf)

    def test_delta_monotone_m_max(self):
        counts, _ = honest_counts()
        sizes = [maximize_pa_size(counts, MODEL, P_D, security_exponents(d, 4096),
                                  "plus", grid=64).m_max for d in (5, 9)]
        assert sizes[0] < sizes[1]

    def test_more_errors_never_more_key(self):
        # End-to-end through the coding-rate table and the removal size:
        # raising the signal-class error count cannot grow the final key.
        from dsbb84.protocol import compute_final_size
        from dsbb84.reconciliation import coding_rate_for

        counts, _ = honest_counts()
        deltas = security_exponents(9, 1 << 20)  # cap out of the way
        kappa = 6
        check_bits = int(counts.sifted[kappa]) - counts.raw_key_bits
        finals = []
        for h in (counts.errors[kappa], int(counts.errors[kappa] * 1.3),
                  int(counts.errors[kappa] * 1.8)):
            c = SessionCounts(counts.sent, counts.received, counts.sifted,
                              counts.errors.copy(), counts.raw_key_bits,
                              counts.time_slot_s)
            c.errors[kappa] = h
            res = maximize_pa_size(c, MODEL, P_D, deltas, "plus", grid=32)
            eta = coding_rate_for(h / check_bits)
            finals.append(compute_final_size(
                round(counts.raw_key_bits * eta), res.m_max, 1 << 20))
        assert finals == sorted(finals, reverse=True)
