"""Session state machine: scheduling, sifting, key assembly.

One session runs both bases through the same stages: schedule pulses,
observe counts, permute-and-split the signal strings into raw key and
check bits, bound the adversary from the decoy statistics, reconcile the
raw keys block by block, and hash down to the final keys.  Every
intermediate quantity lands in an audit record sufficient to re-verify
the run offline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import estimation
from .bits import BitString
from .channel import AttackModel, SessionCounts, sample_session
from .photon_source import IntensitySet, TaggedStateModel
from .privacy_amplification import draw_seed, toeplitz_hash
from .reconciliation import (
    DEFAULT_RATE_TABLE,
    build_code,
    coding_rate_for,
    reconcile_recv,
    reconcile_send,
)
from .rng import RandomService, StageStream

__all__ = [
    "SessionConfig",
    "SiftedData",
    "ProtocolAbort",
    "KeyOutput",
    "schedule_pulses",
    "random_permutation",
    "draw_raw_positions",
    "sift_and_split",
    "compute_final_size",
    "run_session",
]


class ProtocolAbort(RuntimeError):
    """The session ended without key material."""

    def __init__(self, reason: str, **detail):
        super().__init__(reason)
        self.reason = reason
        self.detail = detail


@dataclass
class SessionConfig:
    """Protocol-level parameters of one session."""

    intensities: IntensitySet
    send_prob: np.ndarray          # per pulse class 0..2k
    raw_key_bits: int              # block of sifted signal kept as key
    max_final_key_bits: int        # cap applied after hashing
    time_slot_s: float
    security_exponent: int
    dark_count_prob: float
    pulse_rate_hz: float = 1e6
    ldpc_block_bits: int = 10_000
    rate_table: tuple = None
    degree_profile: dict = None
    grid_points: int = 64
    fock_cutoff: int = 40

    def __post_init__(self):
        self.send_prob = np.asarray(self.send_prob, dtype=float)
        problems = self.validate()
        if problems:
            raise ValueError("; ".join(problems))

    def validate(self) -> list:
        problems = []
        k = self.intensities.k
        if self.send_prob.size != 2 * k + 1:
            problems.append(f"send_prob needs {2 * k + 1} entries")
        else:
            if (self.send_prob < 0).any():
                problems.append("send_prob entries must be nonnegative")
            if abs(self.send_prob.sum() - 1.0) > 1e-9:
                problems.append("send_prob must sum to 1")
        if self.raw_key_bits < 1:
            problems.append("raw_key_bits must be >= 1")
        if self.max_final_key_bits < 1:
            problems.append("max_final_key_bits must be >= 1")
        if self.security_exponent < 1:
            problems.append("security_exponent must be >= 1")
        if not 0 <= self.dark_count_prob <= 1:
            problems.append("dark_count_prob must lie in [0, 1]")
        if self.time_slot_s <= 0:
            problems.append("time_slot_s must be positive")
        if self.pulse_rate_hz <= 0:
            problems.append("pulse_rate_hz must be positive")
        if self.ldpc_block_bits >= 100 and self.raw_key_bits % self.ldpc_block_bits:
            problems.append("raw_key_bits must be a multiple of ldpc_block_bits")
        if self.ldpc_block_bits < 100:
            problems.append("ldpc_block_bits must be >= 100")
        return problems

    @property
    def total_pulses(self) -> int:
        return int(round(self.time_slot_s * self.pulse_rate_hz))


@dataclass
class SiftedData:
    """Per-basis raw keys and check strings after permutation and split."""

    raw_alice: dict          # basis -> np.uint8 array of raw_key_bits
    raw_bob: dict
    check_errors: dict       # basis -> observed error count on check bits
    check_sizes: dict        # basis -> number of disclosed check bits


def schedule_pulses(config: SessionConfig, total_pulses: int,
                    stream: StageStream) -> np.ndarray:
    """Multinomial split of the pulse budget over the 2k+1 classes."""
    if total_pulses < 1:
        raise ValueError("total_pulses must be >= 1")
    return stream.multinomial(int(total_pulses), config.send_prob).astype(np.int64)


def random_permutation(bits, stream: StageStream) -> BitString:
    """Uniform random permutation of a bit string.

    Swap indices are drawn by rejection sampling, ceil(log2 m) stream bits
    per attempt, so the exact randomness cost lands in the accounting.
    """
    arr = (bits.bits if isinstance(bits, BitString)
           else np.asarray(bits, np.uint8)).copy()
    for i in range(arr.size - 1, 0, -1):
        j = stream.index_below(i + 1)
        arr[i], arr[j] = arr[j], arr[i]
    return BitString(arr)


def draw_raw_positions(total: int, keep: int, stream: StageStream) -> np.ndarray:
    """Positions of the raw key inside a sifted string.

    The first `keep` entries of a uniform random permutation, produced by
    a partial swap pass so the randomness cost stays near keep*log2(total)
    bits instead of the full permutation's total*log2(total).
    """
    arr = np.arange(total, dtype=np.int64)
    for i in range(keep):
        j = i + stream.index_below(total - i)
        arr[i], arr[j] = arr[j], arr[i]
    return arr[:keep]


def sift_and_split(counts: SessionCounts, signal_bits: dict,
                   config: SessionConfig, svc: RandomService) -> SiftedData:
    """Permute the signal strings and split them into raw key and check bits.

    signal_bits maps each basis to (alice_bits, bob_bits) of length E for
    its signal class.  Aborts when either signal string is too short.
    The returned data carries the check-bit error counts actually observed
    after the split (the raw-key portion stays undisclosed).
    """
    n = config.raw_key_bits
    iset = config.intensities
    for basis in ("plus", "times"):
        e_sig = int(counts.sifted[iset.signal_class(basis)])
        if e_sig <= n:
            raise ProtocolAbort("insufficient-sifted-bits", basis=basis,
                                sifted=e_sig, raw_key_bits=n)
    raw_a, raw_b, errs, sizes = {}, {}, {}, {}
    for basis in ("plus", "times"):
        alice, bob = signal_bits[basis]
        e_sig = alice.size
        stream = svc.stream(f"permutation.{basis}")
        pos = draw_raw_positions(e_sig, n, stream)
        mask = np.zeros(e_sig, dtype=bool)
        mask[pos] = True
        raw_a[basis] = alice[pos]
        raw_b[basis] = bob[pos]
        errs[basis] = int(np.count_nonzero(alice[~mask] != bob[~mask]))
        sizes[basis] = e_sig - n
    return SiftedData(raw_a, raw_b, errs, sizes)


def compute_final_size(reconciled_bits: int, m_max: float,
                       max_final_key_bits: int) -> int:
    """Key length after privacy amplification, floored at 0 and capped.

    The removal size is rounded up before subtraction so at least m_max
    bits of information are always shaved off.
    """
    if reconciled_bits <= 0:
        return 0
    pre_cap = reconciled_bits - int(math.ceil(max(m_max, 0.0)))
    return int(min(max_final_key_bits, max(0, pre_cap)))


@dataclass
class KeyOutput:
    """Final keys plus the audit record of everything that produced them."""

    keys: dict               # basis -> BitString (may be empty)
    audit: dict


def _signal_strings_from_counts(counts: SessionCounts, config: SessionConfig,
                                svc: RandomService, qber_hint: dict | None):
    """Synthesize per-basis signal strings consistent with the counts.

    Used both for sampled sessions (error totals realized by the channel)
    and for replayed counts (errors drawn at the recorded rates).
    """
    iset = config.intensities
    out = {}
    for basis in ("plus", "times"):
        kappa = iset.signal_class(basis)
        e_sig = int(counts.sifted[kappa])
        stream = svc.stream(f"bits.{basis}")
        alice = stream.bits(e_sig)
        if qber_hint is None:
            n_err = int(counts.errors[kappa])
        else:
            n_err = int(round(qber_hint[basis] * e_sig))
        mask = np.zeros(e_sig, dtype=np.uint8)
        if n_err:
            pos = stream.choice_without_replacement(e_sig, n_err)
            mask[pos] = 1
        out[basis] = (alice, alice ^ mask)
    return out


def _reconcile_basis(basis, alice_raw, bob_raw, qber_est, config, svc,
                     code_cache):
    """Reverse reconciliation of one basis's raw key, block by block."""
    table = config.rate_table or DEFAULT_RATE_TABLE
    rate = coding_rate_for(qber_est, table)
    n_blk = config.ldpc_block_bits
    outcome = {"rate": rate, "blocks": [], "reconciled_bits": 0}
    if rate <= 0:
        outcome["skipped"] = "error rate beyond the coding table"
        return None, outcome
    key = (n_blk, rate)
    if key not in code_cache:
        code_cache[key] = build_code(
            n_blk, rate, svc.stream(f"ldpc.n{n_blk}.r{rate}"),
            profile=config.degree_profile)
    code = code_cache[key]
    qber_prior = min(max(qber_est, 1e-4), 0.4999)
    pieces = []
    for b in range(len(alice_raw) // n_blk):
        sl = slice(b * n_blk, (b + 1) * n_blk)
        stream = svc.stream(f"reconcile.{basis}.b{b}")
        z = stream.bits(code.l)
        msg = reconcile_send(code, z, bob_raw[sl], block_id=b)
        res = reconcile_recv(code, msg, alice_raw[sl], qber_prior)
        ok = bool(res.ok and np.array_equal(res.bits.bits, z))
        outcome["blocks"].append({
            "block": b, "decoded": bool(res.ok), "iterations": res.iterations,
            "message_bits": code.n,
        })
        if ok:
            pieces.append(z)
    if not pieces:
        return None, outcome
    rec = np.concatenate(pieces)
    outcome["reconciled_bits"] = int(rec.size)
    return rec, outcome


def run_session(config: SessionConfig, model: TaggedStateModel,
                svc: RandomService,
                attack: AttackModel | None = None,
                replay_counts: SessionCounts | None = None,
                replay_qber: dict | None = None,
                code_cache: dict | None = None) -> KeyOutput:
    """One full session: sample or replay, estimate, reconcile, hash.

    Exactly one of `attack` (sample a fresh session) or `replay_counts`
    (recorded observations) must be given.  With replay_counts the error
    counts are taken as check-bit observations and the raw payloads are
    synthesized at the recorded (or supplied) error rates.
    """
    if (attack is None) == (replay_counts is None):
        raise ValueError("pass exactly one of attack or replay_counts")
    iset = config.intensities
    n = config.raw_key_bits
    audit = {"mode": "replay" if replay_counts is not None else "simulate"}

    if replay_counts is None:
        sent = schedule_pulses(config, config.total_pulses, svc.stream("schedule"))
        counts = sample_session(sent, model, attack, config.dark_count_prob,
                                svc.stream("channel"), n, config.time_slot_s)
        signal_bits = _signal_strings_from_counts(counts, config, svc, None)
        sifted = sift_and_split(counts, signal_bits, config, svc)
        # Downstream sees what the parties see: check errors for the signal
        # classes, whole-string errors for decoys.
        est_counts = SessionCounts(
            counts.sent, counts.received, counts.sifted, counts.errors.copy(),
            n, config.time_slot_s)
        for basis in ("plus", "times"):
            est_counts.errors[iset.signal_class(basis)] = sifted.check_errors[basis]
    else:
        counts = replay_counts
        for basis in ("plus", "times"):
            e_sig = int(counts.sifted[iset.signal_class(basis)])
            if e_sig <= n:
                raise ProtocolAbort("insufficient-sifted-bits", basis=basis,
                                    sifted=e_sig, raw_key_bits=n)
        qber = replay_qber or {
            basis: counts.errors[iset.signal_class(basis)]
            / (counts.sifted[iset.signal_class(basis)] - n)
            for basis in ("plus", "times")
        }
        signal_bits = _signal_strings_from_counts(counts, config, svc, qber)
        sifted = sift_and_split(counts, signal_bits, config, svc)
        est_counts = counts
    audit["counts"] = est_counts.to_json_dict()

    deltas = estimation.security_exponents(config.security_exponent,
                                           config.max_final_key_bits)
    audit["security_exponents"] = list(deltas)

    keys = {}
    code_cache = code_cache if code_cache is not None else {}
    audit["basis"] = {}
    for basis in ("plus", "times"):
        kappa = iset.signal_class(basis)
        check_bits = int(est_counts.sifted[kappa]) - n
        qber_est = est_counts.errors[kappa] / check_bits
        rec_audit: dict = {"qber_estimate": f"{qber_est:.17g}"}
        audit["basis"][basis] = rec_audit

        try:
            est = estimation.maximize_pa_size(
                est_counts, model, config.dark_count_prob, deltas, basis,
                grid=config.grid_points)
            rec_audit["estimation"] = est.to_json_dict()
            m_max = est.m_max
        except estimation.EstimationFailure as exc:
            rec_audit["estimation_failure"] = str(exc)
            keys[basis] = BitString.zeros(0)
            continue

        reconciled, outcome = _reconcile_basis(
            basis, sifted.raw_alice[basis], sifted.raw_bob[basis], qber_est,
            config, svc, code_cache)
        rec_audit["reconciliation"] = outcome
        if reconciled is None:
            keys[basis] = BitString.zeros(0)
            continue

        final_len = compute_final_size(reconciled.size, m_max,
                                       config.max_final_key_bits)
        rec_audit["pre_cap_bits"] = int(reconciled.size
                                        - math.ceil(max(m_max, 0.0)))
        rec_audit["final_bits"] = final_len
        if final_len <= 0:
            keys[basis] = BitString.zeros(0)
            continue
        spec = draw_seed(int(reconciled.size), int(reconciled.size - final_len),
                         svc.stream(f"toeplitz.{basis}"))
        keys[basis] = toeplitz_hash(spec, reconciled)
        rec_audit["toeplitz_seed_hex"] = spec.seed.to_bytes().hex()
        rec_audit["toeplitz_seed_bits"] = len(spec.seed)

    audit["final_bits"] = {b: len(keys[b]) for b in keys}
    audit["randomness_bits"] = svc.accounting()
    return KeyOutput(keys, audit)
