"""Run orchestration: simulate, replay, sweep, selftest.

This layer owns wall-clock timing, report assembly, and parameter sweeps;
the protocol pipeline itself lives in protocol.run_session.  Everything
here is file-system free so the service can expose it directly; the CLI
does the persisting.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import report as report_mod
from .channel import (
    AttackModel,
    ChannelModel,
    SessionCounts,
    honest_attack_from_channel,
    misalignment_for_error_rate,
)
from .config import ConfigError, RunConfig, load_config
from .photon_source import tagged_state_model
from .protocol import ProtocolAbort, run_session
from .rng import RandomService

__all__ = ["run_simulate", "run_replay", "run_sweep", "run_selftest",
           "parse_counts_doc", "SWEEP_PARAMETERS"]

SWEEP_PARAMETERS = ("time_slot_s", "max_final_key_bits", "send_prob", "qber")


def _attack_for(run_config: RunConfig, model) -> AttackModel:
    """Honest channel mapped to the adversary parameterization, with the
    per-basis misalignments on the matching error slots."""
    base = honest_attack_from_channel(
        ChannelModel(run_config.transmittance,
                     run_config.session.dark_count_prob, 0.0), model)
    k = model.k
    r = np.full(k + 1, run_config.misalignment["times"])
    r_tilde = np.full(k + 1, run_config.misalignment["plus"])
    return AttackModel(base.q, r, r_tilde)


def _finish(mode, seed, run_config, audit, status, abort_reason, timings, keys):
    t0 = time.perf_counter()
    rep = report_mod.build_report(mode, seed, run_config.echo, audit,
                                  status, abort_reason)
    timings["report_s"] = time.perf_counter() - t0
    timings["total_s"] = sum(timings.values())
    metrics = {"timings_s": {k: round(v, 6) for k, v in timings.items()}}
    return rep, metrics, keys


def run_simulate(run_config: RunConfig, seed: int, code_cache: dict | None = None):
    """Sample one session and push it through the whole pipeline.

    Returns (report, metrics, keys) where keys maps basis -> BitString.
    """
    timings = {}
    t0 = time.perf_counter()
    model = tagged_state_model(run_config.session.intensities,
                               run_config.session.fock_cutoff)
    attack = _attack_for(run_config, model)
    timings["model_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    svc = RandomService(seed)
    try:
        out = run_session(run_config.session, model, svc, attack=attack,
                          code_cache=code_cache)
        audit, keys = out.audit, out.keys
        status = "key" if sum(len(k) for k in keys.values()) else "abort"
        reason = None if status == "key" else "no-final-key"
    except ProtocolAbort as abort:
        audit, keys = {"final_bits": {}}, {}
        status, reason = "abort", f"{abort.reason} {abort.detail}"
    timings["session_s"] = time.perf_counter() - t0
    return _finish("simulate", seed, run_config, audit, status, reason,
                   timings, keys)


def parse_counts_doc(doc: dict) -> SessionCounts:
    """Counts-file schema check; errors name the offending field."""
    try:
        return SessionCounts.from_json_dict(doc)
    except (KeyError, TypeError) as exc:
        raise ConfigError([f"counts document: {exc}"]) from exc
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc


def run_replay(run_config: RunConfig, counts_doc: dict, seed: int,
               code_cache: dict | None = None):
    """Recorded counts in, estimation through key extraction out."""
    counts = parse_counts_doc(counts_doc)
    session = run_config.session
    if counts.raw_key_bits and counts.raw_key_bits != session.raw_key_bits:
        raise ConfigError([
            f"counts raw_key_bits {counts.raw_key_bits} disagrees with the "
            f"configured {session.raw_key_bits}"])
    if counts.k != session.intensities.k:
        raise ConfigError([f"counts k={counts.k} disagrees with the "
                           f"configured {session.intensities.k} intensities"])
    timings = {}
    t0 = time.perf_counter()
    model = tagged_state_model(session.intensities, session.fock_cutoff)
    timings["model_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    svc = RandomService(seed)
    try:
        out = run_session(session, model, svc, replay_counts=counts,
                          code_cache=code_cache)
        audit, keys = out.audit, out.keys
        status = "key" if sum(len(k) for k in keys.values()) else "abort"
        reason = None if status == "key" else "no-final-key"
    except ProtocolAbort as abort:
        audit, keys = {"final_bits": {}}, {}
        status, reason = "abort", f"{abort.reason} {abort.detail}"
    timings["session_s"] = time.perf_counter() - t0
    return _finish("replay", seed, run_config, audit, status, reason,
                   timings, keys)


def _apply_sweep_value(run_config: RunConfig, parameter: str, value: str
                       ) -> RunConfig:
    session = run_config.session
    if parameter == "time_slot_s":
        session = replace(session, time_slot_s=float(value))
        return RunConfig(session, run_config.transmittance,
                         run_config.misalignment, run_config.echo)
    if parameter == "max_final_key_bits":
        session = replace(session, max_final_key_bits=int(value))
        return RunConfig(session, run_config.transmittance,
                         run_config.misalignment, run_config.echo)
    if parameter == "send_prob":
        parts = [float(x) for x in value.split(":")]
        k = session.intensities.k
        if len(parts) != k + 1:
            raise ConfigError([f"send_prob profile needs {k + 1} entries"])
        prof = np.array([parts[0], *parts[1:], *parts[1:]], dtype=float)
        prof /= prof.sum()
        session = replace(session, send_prob=prof)
        return RunConfig(session, run_config.transmittance,
                         run_config.misalignment, run_config.echo)
    if parameter == "qber":
        target = float(value)
        model = tagged_state_model(session.intensities, session.fock_cutoff)
        mis = {}
        for basis in ("plus", "times"):
            kappa = session.intensities.signal_class(basis)
            mis[basis] = misalignment_for_error_rate(
                model, run_config.transmittance, session.dark_count_prob,
                kappa, target)
        return RunConfig(session, run_config.transmittance, mis,
                         run_config.echo)
    raise ConfigError([f"unknown sweep parameter {parameter!r}; "
                       f"choose from {', '.join(SWEEP_PARAMETERS)}"])


def _sweep_row(run_config: RunConfig, parameter: str, value: str, seed: int,
               code_cache: dict | None):
    cfg = _apply_sweep_value(run_config, parameter, value)
    rep, _, _ = run_simulate(cfg, seed, code_cache=code_cache)
    basis = rep.get("basis", {})

    def m_max_of(b):
        est = basis.get(b, {}).get("estimation")
        return float(est["m_max"]) if est else float("nan")

    return {
        "value": value,
        "key_bits": rep["total_final_bits"],
        "key_rate_bps": rep["key_rate_bps"],
        "m_max": m_max_of("plus"),
        "abort": rep["status"] == "abort",
        "final_plus": rep["final_bits"].get("plus", 0),
        "final_times": rep["final_bits"].get("times", 0),
        "m_max_times": m_max_of("times"),
    }


def _sweep_worker(args):
    config_text, parameter, value, seed = args
    cfg = load_config(config_text)
    return _sweep_row(cfg, parameter, value, seed, None)


def run_sweep(run_config: RunConfig, parameter: str, values: list, seed: int,
              jobs: int = 1, config_text: str | None = None):
    """One full pipeline run per sweep value; rows in input order.

    Every point reuses the run seed, so rows differ only through the swept
    parameter and each reproduces standalone.
    """
    values = [str(v) for v in values]
    if not values:
        raise ConfigError(["sweep range is empty"])
    if jobs > 1 and config_text is not None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(
                _sweep_worker,
                [(config_text, parameter, v, seed) for v in values]))
    else:
        cache: dict = {}
        rows = [_sweep_row(run_config, parameter, v, seed, cache)
                for v in values]
    header = ["value", "key_bits", "key_rate_bps", "m_max", "abort",
              "final_plus", "final_times", "m_max_times"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[h]) for h in header))
    return rows, "\n".join(lines) + "\n"


def run_selftest() -> list:
    """Fast internal battery; each check reports name, ok, detail."""
    checks = []

    def check(name, fn):
        try:
            detail = fn()
            checks.append({"name": name, "ok": True, "detail": detail or ""})
        except Exception as exc:  # noqa: BLE001 - report, not crash
            checks.append({"name": name, "ok": False, "detail": str(exc)})

    def decomposition():
        from .photon_source import IntensitySet, poisson_weight
        model = tagged_state_model(IntensitySet((0.0, 0.07, 0.35, 0.5), 3))
        worst = 0.0
        for c in range(1, 7):
            mu = model.class_intensity(c)
            target = np.array([poisson_weight(mu, n) for n in range(41)])
            worst = max(worst, float(np.max(np.abs(model.reconstruct(c) - target))))
        assert worst <= 1e-9, f"residual {worst:.2e}"
        return f"max residual {worst:.2e}"

    def quantile_identity():
        from .estimation import std_normal_cdf, std_normal_quantile
        for d in (9, 22, 23, 64):
            p = 2.0 ** -d
            err = abs(std_normal_cdf(std_normal_quantile(p)) - p) / p
            assert err <= 1e-12, f"relative error {err:.2e} at 2^-{d}"
        return "inverse-CDF identity to 1e-12"

    def toeplitz_linear():
        from .privacy_amplification import draw_seed, toeplitz_hash
        svc = RandomService(1)
        spec = draw_seed(64, 30, svc.stream("selftest"))
        gen = np.random.Generator(np.random.Philox(1))
        for _ in range(50):
            a = gen.integers(0, 2, 64).astype(np.uint8)
            b = gen.integers(0, 2, 64).astype(np.uint8)
            lhs = toeplitz_hash(spec, a) ^ toeplitz_hash(spec, b)
            assert lhs == toeplitz_hash(spec, a ^ b)
        return "linearity on 50 pairs"

    def ldpc_roundtrip():
        from .reconciliation import build_code, reconcile_recv, reconcile_send
        svc = RandomService(2)
        code = build_code(200, 0.5, svc.stream("selftest-ldpc"),
                          profile={2: 0.5, 3: 0.5})
        gen = np.random.Generator(np.random.Philox(2))
        z = gen.integers(0, 2, code.l).astype(np.uint8)
        xp = gen.integers(0, 2, code.n).astype(np.uint8)
        res = reconcile_recv(code, reconcile_send(code, z, xp), xp, 0.05)
        assert res.ok and np.array_equal(res.bits.bits, z)
        return "noiseless decode exact"

    def smoke_session():
        from .photon_source import IntensitySet
        from .protocol import SessionConfig
        iset = IntensitySet((0.0, 0.1), 1)
        model = tagged_state_model(iset)
        cfg = SessionConfig(intensities=iset, send_prob=[0.2, 0.4, 0.4],
                            raw_key_bits=2000, max_final_key_bits=4096,
                            time_slot_s=2.0, security_exponent=9,
                            dark_count_prob=1e-5, pulse_rate_hz=1e6,
                            ldpc_block_bits=1000, grid_points=24)
        attack = honest_attack_from_channel(ChannelModel(0.3, 1e-5, 0.01), model)
        out = run_session(cfg, model, RandomService(3), attack=attack)
        total = sum(len(k) for k in out.keys.values())
        assert total > 0, "no key from the smoke session"
        return f"{total} key bits"

    check("decomposition-fidelity", decomposition)
    check("normal-quantile-identity", quantile_identity)
    check("toeplitz-linearity", toeplitz_linear)
    check("ldpc-noiseless-roundtrip", ldpc_roundtrip)
    check("smoke-session", smoke_session)
    return checks
