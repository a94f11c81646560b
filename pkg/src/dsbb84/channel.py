"""Session observations: closed-form expected rates and sampled counts.

The adversary parameterization covers both a genuine eavesdropper and a
benign lossy channel (loss mapped to per-state detection probabilities),
so the same detection/error equations generate data either way:

    detection ratio  p_i = sum_j P_i^j q^j + p_D
    error ratio      s_i p_i = sum_j P_i^j q^j r^j + (P_i^0 q^0 + p_D)/2

with r replaced by the bit-error parameters for rectilinear-basis pulse
classes (the mirror of the diagonal-basis equation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .photon_source import TaggedStateModel
from .rng import StageStream

__all__ = [
    "AttackModel",
    "ChannelModel",
    "SessionCounts",
    "honest_attack_from_channel",
    "expected_rates",
    "sample_session",
    "transmittance_for_detection",
    "misalignment_for_error_rate",
]


@dataclass(frozen=True)
class AttackModel:
    """Per-state detection and error probabilities granted to the adversary.

    q[j] is the probability that state j produces a click at the receiver
    (j = 0..2k+1).  r[j-1] is the phase-error probability of state j for
    j = 1..k+1 (single photon plus diagonal-basis multiphoton states).
    r_tilde[0] is the bit-error probability of the single-photon state and
    r_tilde[1..k] those of the rectilinear-basis multiphoton states
    (j = k+2..2k+1).
    """

    q: np.ndarray
    r: np.ndarray
    r_tilde: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        r = np.asarray(self.r, dtype=float)
        rt = np.asarray(self.r_tilde, dtype=float)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "r_tilde", rt)
        if q.size % 2 or q.size < 4:
            raise ValueError("q must cover states 0..2k+1")
        k = q.size // 2 - 1
        if r.size != k + 1 or rt.size != k + 1:
            raise ValueError("r and r_tilde must each cover k+1 states")
        for arr in (q, r, rt):
            if arr.min() < 0 or arr.max() > 1:
                raise ValueError("attack probabilities must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.q.size // 2 - 1

    def phase_err(self, j: int) -> float:
        """Phase-error probability of state j (defined for 1 <= j <= k+1)."""
        return float(self.r[j - 1])

    def bit_err(self, j: int) -> float:
        """Bit-error probability of state j (j = 1 or k+2..2k+1)."""
        if j == 1:
            return float(self.r_tilde[0])
        return float(self.r_tilde[j - self.k - 1])


@dataclass(frozen=True)
class ChannelModel:
    """Benign channel: end-to-end transmittance, dark counts, misalignment."""

    transmittance: float
    dark_count_prob: float
    misalignment: float

    def __post_init__(self):
        for name in ("transmittance", "dark_count_prob", "misalignment"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class SessionCounts:
    """Observed per-class integer counts plus the session frame.

    sent/received/sifted/errors are indexed by pulse class 0..2k.  For the
    two signal classes the error count covers only the disclosed check
    bits; for decoy classes it covers the whole sifted string.
    """

    sent: np.ndarray
    received: np.ndarray
    sifted: np.ndarray
    errors: np.ndarray
    raw_key_bits: int
    time_slot_s: float

    def __post_init__(self):
        for name in ("sent", "received", "sifted", "errors"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        n = self.sent.size
        if any(getattr(self, f).size != n for f in ("received", "sifted", "errors")):
            raise ValueError("count vectors must share one length")
        if n % 2 == 0:
            raise ValueError("count vectors must cover classes 0..2k")
        ok = ((0 <= self.errors) & (self.errors <= self.sifted)
              & (self.sifted <= self.received) & (self.received <= self.sent))
        if not ok.all():
            raise ValueError("count ordering 0 <= H <= E <= C <= A violated")

    @property
    def k(self) -> int:
        return self.sent.size // 2

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "raw_key_bits": int(self.raw_key_bits),
            "time_slot_s": float(self.time_slot_s),
            "sent": [int(x) for x in self.sent],
            "received": [int(x) for x in self.received],
            "sifted": [int(x) for x in self.sifted],
            "errors": [int(x) for x in self.errors],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SessionCounts":
        required = ["k", "raw_key_bits", "time_slot_s",
                    "sent", "received", "sifted", "errors"]
        for key in required:
            if key not in d:
                raise ValueError(f"counts document missing field {key!r}")
        k = int(d["k"])
        vecs = {}
        for key in ("sent", "received", "sifted", "errors"):
            v = d[key]
            if len(v) != 2 * k + 1:
                raise ValueError(f"field {key!r} must have 2k+1 = {2*k+1} entries")
            vecs[key] = np.array(v, dtype=np.int64)
        return cls(vecs["sent"], vecs["received"], vecs["sifted"], vecs["errors"],
                   int(d["raw_key_bits"]), float(d["time_slot_s"]))


def honest_attack_from_channel(channel: ChannelModel,
                               model: TaggedStateModel) -> AttackModel:
    """Map a benign lossy channel onto the adversary parameterization.

    Single photons survive with the transmittance; an n-photon state
    clicks unless every photon is lost (beamsplitter model).  All error
    probabilities equal the optical misalignment.
    """
    k = model.k
    t = channel.transmittance
    q = np.zeros(2 * k + 2)
    q[1] = t
    for idx, rho in enumerate(model.rho):
        ns = np.arange(rho.n_max + 1)
        click = float(np.sum(rho.probs * (1.0 - (1.0 - t) ** ns)))
        q[2 + idx] = click
        q[k + 2 + idx] = click
    r = np.full(k + 1, channel.misalignment)
    r_tilde = np.full(k + 1, channel.misalignment)
    return AttackModel(q, r, r_tilde)


def _error_numerator(model: TaggedStateModel, attack: AttackModel,
                     p_D: float, class_i: int) -> float:
    """Right-hand side of the error relation for one pulse class."""
    k = model.k
    P = model.P[class_i]
    num = 0.5 * (P[0] * attack.q[0] + p_D)
    if class_i == 0:
        return num
    if class_i <= k:
        for j in range(1, k + 2):
            num += P[j] * attack.q[j] * attack.phase_err(j)
    else:
        num += P[1] * attack.q[1] * attack.bit_err(1)
        for j in range(k + 2, 2 * k + 2):
            num += P[j] * attack.q[j] * attack.bit_err(j)
    return num


def expected_rates(model: TaggedStateModel, attack: AttackModel, p_D: float):
    """Exact detection ratios p_i and error ratios s_i per pulse class.

    s_i is None where p_i = 0 (no detections, ratio undefined).
    """
    p = model.P @ attack.q + p_D
    s = []
    for i in range(model.P.shape[0]):
        if p[i] <= 0:
            s.append(None)
        else:
            s.append(_error_numerator(model, attack, p_D, i) / p[i])
    return p, s


def _state_error_prob(attack: AttackModel, class_i: int, j: int, k: int) -> float:
    if j == 0:
        return 0.5
    if class_i <= k:
        return attack.phase_err(j)
    return attack.bit_err(j)


def sample_session(sent_counts, model: TaggedStateModel, attack: AttackModel,
                   p_D: float, stream: StageStream,
                   raw_key_bits: int = 0, time_slot_s: float = 0.0) -> SessionCounts:
    """Draw one session of per-class counts from the channel/adversary model.

    Per class: tagged-state counts are multinomial in the generation
    probabilities; clicks combine adversary detections and dark counts by
    inclusive-or per pulse; basis agreement keeps each click with
    probability 1/2; errors are drawn per state (1/2 for vacuum and
    dark-count clicks).  The error count here covers the whole sifted
    string; the protocol layer recounts signal-class errors on check bits.
    """
    sent = np.asarray(sent_counts, dtype=np.int64)
    k = model.k
    C = np.zeros_like(sent)
    E = np.zeros_like(sent)
    H = np.zeros_like(sent)
    for i in range(sent.size):
        if sent[i] == 0:
            continue
        b = stream.multinomial(int(sent[i]), model.P[i])
        for j in range(2 * k + 2):
            if b[j] == 0:
                continue
            eve = int(stream.binomial(int(b[j]), attack.q[j]))
            dark = int(stream.binomial(int(b[j]) - eve, p_D))
            sift_e = int(stream.binomial(eve, 0.5))
            sift_d = int(stream.binomial(dark, 0.5))
            err = int(stream.binomial(sift_e, _state_error_prob(attack, i, j, k)))
            err += int(stream.binomial(sift_d, 0.5))
            C[i] += eve + dark
            E[i] += sift_e + sift_d
            H[i] += err
    return SessionCounts(sent, C, E, H, raw_key_bits, time_slot_s)


def transmittance_for_detection(model: TaggedStateModel, class_i: int,
                                target_ratio: float, p_D: float,
                                misalignment: float = 0.0) -> float:
    """Transmittance whose honest channel hits a target detection ratio.

    One-dimensional root finding on the detection relation for the given
    pulse class.
    """
    def gap(t):
        ch = ChannelModel(t, p_D, misalignment)
        p, _ = expected_rates(model, honest_attack_from_channel(ch, model), p_D)
        return p[class_i] - target_ratio

    if gap(0.0) > 0:
        raise ValueError("target ratio below the dark-count floor")
    if gap(1.0) < 0:
        raise ValueError("target ratio unreachable at unit transmittance")
    return float(brentq(gap, 0.0, 1.0, xtol=1e-15))


def misalignment_for_error_rate(model: TaggedStateModel, transmittance: float,
                                p_D: float, class_i: int,
                                target_error: float) -> float:
    """Misalignment whose honest channel hits a target error ratio."""
    ch = ChannelModel(transmittance, p_D, 0.0)
    attack = honest_attack_from_channel(ch, model)
    p, _ = expected_rates(model, attack, p_D)
    photon = float(model.P[class_i, 1:] @ attack.q[1:])
    if photon <= 0:
        raise ValueError("no photon detections in this class")
    e = (target_error * p[class_i] - 0.5 * p_D) / photon
    if not 0 <= e <= 1:
        raise ValueError("target error rate unreachable for this channel")
    return float(e)
