"""Finite-statistics security evaluation and privacy-amplification sizing.

Given observed session counts, the adversary's per-state parameters are
only partially determined: the detection and error relations pin most of
them, but the top-order multiphoton states leave a two-dimensional family
(x, y) of consistent attacks.  The privacy-amplification size is the
maximum, over that family, of a mean term plus fluctuation allowances:

    m(x, y) = m_inf
              - N q1(x) [hbar(r1(x,y)) - 1] / C_sig
                * sqrt(A_sig P1 (1 - P1)) * (-quantile(2^-d1))
              + sqrt(v) * (-quantile(2^-d2)) + d3

where m_inf and v are the mean and variance of the insecure-bit count of
the raw key, propagated from the hypergeometric fluctuations of the
sampling chain (state counts -> clicks -> sifting -> raw-key split ->
error marking).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import minimize
from scipy.special import erfcinv

from .channel import SessionCounts
from .photon_source import TaggedStateModel

__all__ = [
    "WorstCasePoint",
    "EstimationResult",
    "EstimationFailure",
    "InfeasiblePoint",
    "security_exponents",
    "std_normal_cdf",
    "std_normal_quantile",
    "clipped_binary_entropy",
    "clipped_binary_entropy_deriv",
    "DirectSolveContext",
    "solve_direct",
    "ml_estimate",
    "pa_moments",
    "pa_size",
    "maximize_pa_size",
]

FEASIBILITY_TOL = 1e-9
FEASIBILITY_SIGMA = 4.0


class EstimationFailure(RuntimeError):
    """No feasible attack parameterization exists for these counts."""


class InfeasiblePoint(ValueError):
    """A probed (x, y) point admits no consistent attack parameters."""


def security_exponents(delta: int, max_final_key_bits: int) -> tuple:
    """The three confidence exponents guaranteeing leakage below 2^-delta."""
    if delta < 1 or max_final_key_bits < 1:
        raise ValueError("delta and the key-size cap must be >= 1")
    bump = (int(max_final_key_bits) - 1).bit_length()  # ceil(log2 cap)
    return (delta + bump + 1, delta + bump + 2, delta + bump + 2)


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def std_normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError("quantile requires p in (0, 1)")
    return float(-math.sqrt(2.0) * erfcinv(2.0 * p))


def clipped_binary_entropy(x: float) -> float:
    """Binary entropy clipped to 1 above ratio 1/2."""
    if x < 0 or x > 1:
        raise ValueError("entropy argument must lie in [0, 1]")
    if x > 0.5:
        return 1.0
    if x == 0.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


def clipped_binary_entropy_deriv(x: float) -> float:
    """Derivative of the clipped entropy; 0 on the clipped branch."""
    if x <= 0.0 or x >= 0.5:
        return 0.0
    return math.log2((1 - x) / x)


@dataclass(frozen=True)
class WorstCasePoint:
    """Coordinates of the undetermined attack family.

    x combines the detection probabilities of the two top-order
    multiphoton states (scaled by 1/sqrt(2)); y is the phase-error
    probability of the diagonal-basis one (bit-error for the mirrored
    rectilinear evaluation).
    """

    x: float
    y: float

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.y > 1:
            raise ValueError("point outside the admissible box")


@dataclass
class DirectSolution:
    q: np.ndarray          # per-state detection probabilities, clamped
    r: np.ndarray          # error params of the evaluated basis, slot 0 = single photon
    feasible: bool
    violation: float       # largest box violation before clamping
    strict_feasible: bool = True   # violation within the bare 1e-9 tolerance

    @property
    def q1(self) -> float:
        return float(self.q[1])

    @property
    def r1(self) -> float:
        return float(self.r[0])


class DirectSolveContext:
    """Prefactored linear systems for one set of counts and one basis.

    The detection system is affine in x and the error system affine in y
    for fixed x, so a full grid scan costs two factorizations plus cheap
    solves.

    Feasibility of a solved point is judged against the statistical scale
    of each component, not the bare numerical tolerance: the solve treats
    the observed ratios as exact, so a component whose true value sits
    near a box edge dips outside by a few standard errors in half the
    sessions.  Excluding those points would abort honest sessions and,
    worse, shrink the maximized removal size below the attacks that remain
    statistically consistent with the data.  A point is therefore kept
    while every box violation stays within ``FEASIBILITY_SIGMA`` propagated
    standard errors (floored at the numerical tolerance) and evaluated at
    the box-projected parameter values.
    """

    def __init__(self, counts: SessionCounts, model: TaggedStateModel,
                 p_D: float, basis: str):
        if basis not in ("plus", "times"):
            raise ValueError("basis must be 'plus' or 'times'")
        self.counts = counts
        self.model = model
        self.p_D = float(p_D)
        self.basis = basis
        k = model.k
        self.k = k
        iset = model.intensities
        self.signal_class = iset.signal_class(basis)

        A = counts.sent.astype(float)
        if (A[: 2 * k + 1] <= 0).any():
            raise EstimationFailure("every pulse class needs sent pulses > 0")
        self.p_obs = counts.received / A

        N = counts.raw_key_bits
        sig_t, sig_p = iset.signal_class("times"), iset.signal_class("plus")
        denom = counts.sifted.astype(float).copy()
        denom[sig_t] -= N
        denom[sig_p] -= N
        if (denom[1:] <= 0).any():
            raise EstimationFailure("error-rate denominators must be positive")
        self.s_obs = np.where(denom > 0, counts.errors / np.where(denom > 0, denom, 1), 0.5)

        self.q0 = float(min(max(self.p_obs[0] - self.p_D, 0.0), 1.0))

        # Detection system over q^1..q^{2k+1} plus the pair-sum constraint.
        m = np.zeros((2 * k + 1, 2 * k + 1))
        m[: 2 * k, :] = model.P[1:, 1:]
        m[2 * k, k] = 1.0       # q^{k+1}
        m[2 * k, 2 * k] = 1.0   # q^{2k+1}
        rhs = np.zeros(2 * k + 1)
        rhs[: 2 * k] = (self.p_obs[1:] - self.p_D - model.P[1:, 0] * self.q0)
        try:
            lu = lu_factor(m)
        except Exception as exc:  # singular decomposition matrix
            raise EstimationFailure(f"degenerate detection system: {exc}") from exc
        self._q_base = lu_solve(lu, rhs)
        unit = np.zeros(2 * k + 1)
        unit[2 * k] = math.sqrt(2.0)
        self._q_dir = lu_solve(lu, unit)

        # Propagated standard error of each solved detection parameter:
        # rhs row i responds to the observed ratios of class i and (through
        # the vacuum attribution) class 0.
        m_inv = np.linalg.inv(m)
        jac = np.zeros((2 * k + 1, 2 * k + 1))
        for i in range(1, 2 * k + 1):
            jac[i - 1, i] = 1.0
            jac[i - 1, 0] = -model.P[i, 0]
        var_p = self.p_obs * (1 - self.p_obs) / A
        cov = (m_inv @ jac) * var_p @ (m_inv @ jac).T
        self.sigma_q = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        self._err_trials = denom

        # Error system: opposite-basis classes estimate this key's phase errors.
        if basis == "plus":
            self.err_classes = list(range(1, k + 1))
            self._err_state_cols = list(range(1, k + 1))   # solve r^1..r^k
            self.fixed_state = k + 1                        # r^{k+1} = y
        else:
            self.err_classes = list(range(k + 1, 2 * k + 1))
            self._err_state_cols = [1] + list(range(k + 2, 2 * k + 1))
            self.fixed_state = 2 * k + 1                    # bit-error of top state
        self._err_rhs0 = np.array([
            self.s_obs[i] * self.p_obs[i]
            - 0.5 * (model.P[i, 0] * self.q0 + self.p_D)
            for i in self.err_classes])

    def q_of_x(self, x: float) -> np.ndarray:
        """Full per-state detection vector at scan coordinate x (unclamped)."""
        sub = self._q_base + x * self._q_dir
        return np.concatenate(([self.q0], sub))

    def solve(self, point: WorstCasePoint) -> DirectSolution:
        k = self.k
        q = self.q_of_x(point.x)
        q_lo = np.maximum(-q[1:], 0.0)
        q_hi = np.maximum(q[1:] - 1.0, 0.0)
        violation = float(max(q_lo.max(), q_hi.max(), 0.0))
        q_tol = np.maximum(FEASIBILITY_SIGMA * self.sigma_q, FEASIBILITY_TOL)
        feasible = bool((q_lo <= q_tol).all() and (q_hi <= q_tol).all())

        P = self.model.P
        a = np.array([[P[i, j] * q[j] for j in self._err_state_cols]
                      for i in self.err_classes])
        rhs = self._err_rhs0 - point.y * np.array(
            [P[i, self.fixed_state] * q[self.fixed_state] for i in self.err_classes])
        sigma_rhs = np.array([
            self.p_obs[i] * math.sqrt(
                max(self.s_obs[i] * (1 - self.s_obs[i]), 1e-12)
                / self._err_trials[i])
            for i in self.err_classes])

        # States with no detections attract no error attribution; drop their
        # columns and require the remaining system to close.
        active = np.abs(a).max(axis=0) > 1e-13
        r_free = np.zeros(len(self._err_state_cols))
        p_scale = float(np.max(self.p_obs) + self.p_D)
        if active.any():
            sub = a[:, active]
            sol, *_ = np.linalg.lstsq(sub, rhs, rcond=None)
            resid = sub @ sol - rhs
            r_free[active] = sol
            pinv = np.linalg.pinv(sub)
            sigma_r = np.sqrt(np.clip(np.diag(
                (pinv * sigma_rhs**2) @ pinv.T), 0.0, None))
            r_tol = np.maximum(FEASIBILITY_SIGMA * sigma_r, FEASIBILITY_TOL)
            r_lo = np.maximum(-sol, 0.0)
            r_hi = np.maximum(sol - 1.0, 0.0)
            resid_norm = float(np.max(np.abs(resid)))
            resid_tol = max(FEASIBILITY_TOL * p_scale,
                            FEASIBILITY_SIGMA * float(sigma_rhs.max()))
            feasible = feasible and bool(
                (r_lo <= r_tol).all() and (r_hi <= r_tol).all()
                and resid_norm <= resid_tol)
            violation = max(violation, float(r_lo.max()), float(r_hi.max()),
                            resid_norm / p_scale)
        else:
            gap = float(np.max(np.abs(rhs)))
            feasible = feasible and gap <= max(
                FEASIBILITY_TOL * p_scale,
                FEASIBILITY_SIGMA * float(sigma_rhs.max()))
            violation = max(violation, gap / p_scale)
        r = np.concatenate((r_free, [point.y]))
        return DirectSolution(np.clip(q, 0, 1), np.clip(r, 0, 1),
                              feasible, violation,
                              strict_feasible=violation <= FEASIBILITY_TOL)


def solve_direct(point: WorstCasePoint, counts: SessionCounts,
                 model: TaggedStateModel, p_D: float,
                 basis: str = "plus") -> DirectSolution:
    """Solve the detection/error relations for the attack at one (x, y)."""
    return DirectSolveContext(counts, model, p_D, basis).solve(point)


def _hyper_var(population: float, successes: float, draws: float) -> float:
    if population <= 1:
        return 0.0
    draws = min(max(draws, 0.0), population)
    p = min(max(successes / population, 0.0), 1.0)
    return draws * p * (1 - p) * (population - draws) / (population - 1)


def pa_moments(q: np.ndarray, r: np.ndarray, counts: SessionCounts,
               model: TaggedStateModel, p_D: float,
               basis: str = "plus") -> tuple:
    """Mean and variance of the raw key's insecure-bit count.

    The mean is the plug-in evaluation at the chain's expected values; the
    variance propagates each stage's hypergeometric fluctuation to first
    order (derivative of the clipped entropy taken as 0 at and beyond the
    clip point).
    """
    kappa = model.intensities.signal_class(basis)
    N = float(counts.raw_key_bits)
    A = counts.sent.astype(float)
    a_sig = A[kappa]
    e_sig = float(counts.sifted[kappa])
    c_sig = float(counts.received[kappa])
    if e_sig <= 0 or N <= 0:
        raise InfeasiblePoint("empty sifted string for the signal class")
    f = N / e_sig

    q1 = float(q[1])
    r1 = float(r[0])
    p1 = float(model.P[kappa, 1])
    b1 = p1 * a_sig
    c1 = q1 * b1
    e1 = 0.5 * c1
    f1 = f * e1
    cd = p_D * a_sig
    ed = 0.5 * cd
    fd = f * ed
    if f1 <= 0:
        raise InfeasiblePoint("no single-photon content in the raw key")

    h = clipped_binary_entropy(min(max(r1, 0.0), 1.0))
    m_inf = f1 * (h - 1.0) + N - fd

    m1_total = float(model.P[:, 1] @ A)
    a_total = float(A.sum())
    var_c1 = _hyper_var(m1_total, q1 * m1_total, b1)
    var_e1 = _hyper_var(c_sig, 0.5 * c_sig, c1)
    var_f1 = _hyper_var(e_sig, e1, N)
    var_g1 = _hyper_var(e1, r1 * e1, f1)
    var_cd = _hyper_var(a_total, p_D * a_total, a_sig)
    var_ed = _hyper_var(c_sig, 0.5 * c_sig, cd)
    var_fd = _hyper_var(e_sig, ed, N)

    w_f = h - 1.0                       # weight of raw-key single-photon drift
    w_g = clipped_binary_entropy_deriv(r1)
    v = (w_f ** 2 * (0.25 * f * f * var_c1 + f * f * var_e1 + var_f1)
         + w_g ** 2 * var_g1
         + 0.25 * f * f * var_cd + f * f * var_ed + var_fd)
    return float(m_inf), float(v)


def pa_size(point: WorstCasePoint, counts: SessionCounts,
            model: TaggedStateModel, p_D: float, deltas: tuple,
            basis: str = "plus", solution: DirectSolution | None = None) -> float:
    """The removal size m(x, y) at one point of the attack family."""
    if solution is None:
        solution = solve_direct(point, counts, model, p_D, basis)
    if not solution.feasible:
        raise InfeasiblePoint(f"box violation {solution.violation:.3g}")
    m_inf, v = pa_moments(solution.q, solution.r, counts, model, p_D, basis)

    kappa = model.intensities.signal_class(basis)
    N = float(counts.raw_key_bits)
    c_sig = float(counts.received[kappa])
    a_sig = float(counts.sent[kappa])
    p1 = float(model.P[kappa, 1])
    d1, d2, d3 = deltas
    z1 = -std_normal_quantile(2.0 ** -d1)
    z2 = -std_normal_quantile(2.0 ** -d2)
    h = clipped_binary_entropy(solution.r1)
    term1 = (-N * solution.q1 * (h - 1.0) / c_sig
             * math.sqrt(a_sig * p1 * (1.0 - p1)) * z1)
    return m_inf + term1 + math.sqrt(max(v, 0.0)) * z2 + d3


@dataclass
class EstimationResult:
    """Worst-case point, its attack parameters, and the removal size."""

    basis: str
    point: WorstCasePoint
    q1: float
    r1: float
    q_ml: np.ndarray
    r_ml: np.ndarray
    m_inf: float
    v: float
    m_max: float
    deltas: tuple
    grid_max: float = -math.inf
    feasible_points: int = 0
    grid_shape: tuple = (0, 0)

    def to_json_dict(self) -> dict:
        return {
            "basis": self.basis,
            "x": f"{self.point.x:.17g}",
            "y": f"{self.point.y:.17g}",
            "q1": f"{self.q1:.17g}",
            "r1": f"{self.r1:.17g}",
            "q_ml": [f"{x:.17g}" for x in self.q_ml],
            "r_ml": [f"{x:.17g}" for x in self.r_ml],
            "m_inf": f"{self.m_inf:.17g}",
            "v": f"{self.v:.17g}",
            "m_max": f"{self.m_max:.17g}",
            "deltas": list(self.deltas),
            "grid_max": f"{self.grid_max:.17g}",
            "feasible_points": self.feasible_points,
            "grid_shape": list(self.grid_shape),
        }


def ml_estimate(point: WorstCasePoint, counts: SessionCounts,
                model: TaggedStateModel, p_D: float, basis: str = "plus",
                max_iter: int = 10_000, tol: float = 1e-10):
    """Box-constrained likelihood fit of the attack parameters at (x, y).

    The likelihood is the product of per-class binomial terms for clicks
    and for observed errors.  The fit starts from the clamped direct
    solution; when that solution already lies inside the box it saturates
    the likelihood and is returned as is.  Otherwise a multiplicative
    (exponentiated-gradient) ascent with backtracking runs until the
    improvement per step drops below tol.

    Returns (q, r, loglik, iterations).
    """
    ctx = DirectSolveContext(counts, model, p_D, basis)
    sol = ctx.solve(point)
    k = model.k

    sig_t = model.intensities.signal_class("times")
    sig_p = model.intensities.signal_class("plus")
    trials = counts.sifted.astype(float).copy()
    trials[sig_t] -= counts.raw_key_bits
    trials[sig_p] -= counts.raw_key_bits
    A = counts.sent.astype(float)
    C = counts.received.astype(float)
    H = counts.errors.astype(float)
    P = model.P

    err_cols = ctx._err_state_cols + [ctx.fixed_state]

    def loglik(q, r_vec):
        p = P @ q + p_D
        p = np.clip(p, 1e-300, 1 - 1e-15)
        ll = float(C @ np.log(p) + (A - C) @ np.log1p(-p))
        num = 0.5 * (P[:, 0] * q[0] + p_D)
        for slot, j in enumerate(err_cols):
            num = num + P[:, j] * q[j] * r_vec[slot]
        s = np.clip(num / p, 1e-300, 1 - 1e-15)
        rows = ctx.err_classes
        ll += float(H[rows] @ np.log(s[rows])
                    + (trials[rows] - H[rows]) @ np.log1p(-s[rows]))
        return ll

    q = sol.q.copy()
    r = sol.r.copy()
    ll = loglik(q, r)
    if sol.feasible:
        # In-box direct solution saturates every binomial factor.
        return q, r, ll, 0

    # Free coordinates: every q except the pair-sum split (handled via t)
    # and every error slot except the fixed scan coordinate.
    sqrt2x = math.sqrt(2.0) * point.x
    pair = (k + 1, 2 * k + 1)
    if sqrt2x > 0:
        t0 = min(max(q[pair[0]] / sqrt2x, 0.0), 1.0)
    else:
        t0 = 0.5
    q_free_idx = [j for j in range(2 * k + 2) if j not in pair]
    r_free_idx = list(range(k))     # last slot is the fixed coordinate

    def unpack(theta):
        qv = q.copy()
        rv = r.copy()
        for pos, j in enumerate(q_free_idx):
            qv[j] = theta[pos]
        t = theta[len(q_free_idx)]
        qv[pair[0]] = sqrt2x * t
        qv[pair[1]] = sqrt2x * (1.0 - t)
        for pos, slot in enumerate(r_free_idx):
            rv[slot] = theta[len(q_free_idx) + 1 + pos]
        return qv, rv

    theta = np.concatenate((q[q_free_idx], [t0], r[r_free_idx]))
    theta = np.clip(theta, 1e-14, 1 - 1e-14)
    if sqrt2x > 0:
        t_hi = min(1.0, 1.0 / sqrt2x)
        t_lo = max(0.0, 1.0 - t_hi)
    else:
        t_lo, t_hi = 0.0, 1.0

    def project(th):
        th = np.clip(th, 0.0, 1.0)
        th[len(q_free_idx)] = min(max(th[len(q_free_idx)], t_lo), t_hi)
        return th

    def ll_of(th):
        qv, rv = unpack(th)
        return loglik(qv, rv)

    ll = ll_of(theta)
    iters = 0
    h_step = 1e-7
    eta = 0.5
    for iters in range(1, max_iter + 1):
        grad = np.zeros_like(theta)
        for d in range(theta.size):
            up = theta.copy()
            dn = theta.copy()
            up[d] = min(up[d] + h_step, 1.0)
            dn[d] = max(dn[d] - h_step, 0.0)
            span = up[d] - dn[d]
            if span > 0:
                grad[d] = (ll_of(project(up)) - ll_of(project(dn))) / span
        scale = np.max(np.abs(grad))
        if scale == 0:
            break
        improved = False
        eta = min(eta * 2.0, 4.0)
        while eta > 1e-12:
            cand = project(theta * np.exp(eta * grad / scale))
            cand_ll = ll_of(cand)
            if cand_ll > ll:
                improved = cand_ll - ll > tol
                theta, ll = cand, cand_ll
                break
            eta *= 0.5
        if not improved:
            break
    q_fit, r_fit = unpack(theta)
    return np.clip(q_fit, 0, 1), np.clip(r_fit, 0, 1), ll, iters


def maximize_pa_size(counts: SessionCounts, model: TaggedStateModel,
                     p_D: float, deltas: tuple, basis: str = "plus",
                     grid: int = 64, objective=None) -> EstimationResult:
    """Scan the (x, y) box on a coarse grid and refine the best cell.

    Infeasible points contribute -inf; if the whole grid is infeasible the
    estimation fails (the protocol aborts with no key).  The returned size
    is the larger of the refined optimum and the best grid value, so grid
    dominance holds exactly.
    """
    ctx = DirectSolveContext(counts, model, p_D, basis)
    x_hi = math.sqrt(2.0) * (1.0 - p_D)

    if objective is None:
        def objective(x, y):
            sol = ctx.solve(WorstCasePoint(x, y))
            if not sol.feasible:
                return -math.inf
            try:
                return pa_size(WorstCasePoint(x, y), counts, model, p_D,
                               deltas, basis, solution=sol)
            except InfeasiblePoint:
                return -math.inf

    xs = np.linspace(0.0, x_hi, grid)
    ys = np.linspace(0.0, 1.0, grid)
    best = (-math.inf, 0.0, 0.0)
    feasible = 0
    for x in xs:
        for y in ys:
            val = objective(float(x), float(y))
            if val > -math.inf:
                feasible += 1
                if val > best[0]:
                    best = (val, float(x), float(y))
    if feasible == 0:
        raise EstimationFailure("every grid point is infeasible")
    grid_max = best[0]

    res = minimize(lambda z: -objective(float(z[0]), float(z[1])),
                   x0=np.array([best[1], best[2]]),
                   method="Nelder-Mead",
                   bounds=[(0.0, x_hi), (0.0, 1.0)],
                   options={"xatol": 1e-6, "fatol": 1e-12, "maxiter": 4000})
    if -res.fun > best[0] and math.isfinite(res.fun):
        best = (float(-res.fun), float(res.x[0]), float(res.x[1]))

    point = WorstCasePoint(best[1], best[2])
    sol = ctx.solve(point)
    if sol.feasible:
        m_inf, v = pa_moments(sol.q, sol.r, counts, model, p_D, basis)
        q_ml, r_ml = sol.q, sol.r
    else:  # the maximizer came from a stubbed objective
        m_inf, v = math.nan, math.nan
        q_ml, r_ml = sol.q, sol.r
    return EstimationResult(
        basis=basis, point=point, q1=sol.q1, r1=sol.r1,
        q_ml=q_ml, r_ml=r_ml, m_inf=m_inf, v=v, m_max=best[0],
        deltas=tuple(deltas), grid_max=grid_max, feasible_points=feasible,
        grid_shape=(grid, grid))
