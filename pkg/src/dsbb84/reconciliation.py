"""Reverse reconciliation over a binary-symmetric channel with LDPC codes.

The receiver masks a fresh random word with his raw bits and publishes the
mask; the sender subtracts her raw bits and decodes the residual codeword,
so both end up with the fresh word while the public message reveals at
most the code redundancy about the raw strings.

Codes are built by progressive edge growth over a small irregular column
profile and decoded by sum-product belief propagation with early exit on
parity satisfaction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bits import BitString
from .rng import StageStream

__all__ = [
    "LdpcCode",
    "ReconciliationMessage",
    "DecodeResult",
    "DEFAULT_DEGREE_PROFILE",
    "DEFAULT_RATE_TABLE",
    "build_code",
    "encode",
    "reconcile_send",
    "reconcile_recv",
    "coding_rate_for",
    "code_to_json_dict",
    "code_from_json_dict",
]

DEFAULT_DEGREE_PROFILE = {2: 0.40, 3: 0.35, 6: 0.25}
LLR_CLAMP = 30.0
MAX_DECODE_ITERS = 100

# QBER band upper edges and the code rate served in each band; beyond the
# last band no code is offered and the session aborts upstream.
DEFAULT_RATE_TABLE = ((0.025, 0.67), (0.045, 0.60), (0.055, 0.56), (0.075, 0.50))


def coding_rate_for(qber: float, table=DEFAULT_RATE_TABLE) -> float:
    """Code rate available at a given error rate; 0 when uncorrectable."""
    if not 0 <= qber <= 0.5:
        raise ValueError("qber must lie in [0, 0.5]")
    for upper, rate in table:
        if qber <= upper:
            return rate
    return 0.0


@dataclass
class LdpcCode:
    """A parity structure plus the matching systematic encoder."""

    n: int
    l: int
    rate: float
    seed_label: str
    profile: dict
    chk_neighbors: list = field(repr=False)     # per check: np array of vars
    msg_positions: np.ndarray = field(repr=False)
    gen_rows: np.ndarray = field(repr=False)    # (l, words) packed codewords
    _groups: dict = field(default_factory=dict, repr=False)

    @property
    def m(self) -> int:
        return self.n - self.l

    def parity_ok(self, bits: np.ndarray) -> bool:
        ev, ptr = self._edges()
        syn = np.bitwise_xor.reduceat(bits[ev], ptr)
        return not syn.any()

    def _edges(self):
        if "edges" not in self._groups:
            ev = np.concatenate(self.chk_neighbors)
            ptr = np.cumsum([0] + [len(c) for c in self.chk_neighbors[:-1]])
            self._groups["edges"] = (ev, ptr)
        return self._groups["edges"]


def _degree_sequence(n: int, profile: dict) -> np.ndarray:
    degrees = sorted(profile)
    counts = [int(n * profile[d]) for d in degrees]
    counts[-1] += n - sum(counts)
    seq = np.concatenate([np.full(c, d, dtype=np.int32)
                          for d, c in zip(degrees, counts)])
    return np.sort(seq)


def _gather(adj: np.ndarray, cnt: np.ndarray, idx: np.ndarray) -> np.ndarray:
    block = adj[idx]
    mask = np.arange(adj.shape[1]) < cnt[idx][:, None]
    return block[mask]


def _peg_graph(n: int, m: int, seq: np.ndarray, stream: StageStream,
               max_depth: int = 3):
    """Progressive edge growth: per edge, attach to the most distant
    lowest-degree check (breadth-first search over the current graph,
    depth-capped; checks beyond the horizon count as unreachable)."""
    e_total = int(seq.sum())
    vcap = int(seq.max())
    ccap = e_total // m + 4
    var_adj = np.full((n, vcap), -1, dtype=np.int32)
    var_cnt = np.zeros(n, dtype=np.int32)
    chk_adj = np.full((m, ccap), -1, dtype=np.int32)
    chk_cnt = np.zeros(m, dtype=np.int32)
    chk_deg = np.zeros(m, dtype=np.int32)
    seen_c = np.full(m, -1, dtype=np.int64)
    seen_v = np.full(n, -1, dtype=np.int64)
    col_v = np.arange(vcap)
    col_c = np.arange(ccap)

    def grow(v: int, c: int):
        nonlocal chk_adj, col_c
        var_adj[v, var_cnt[v]] = c
        var_cnt[v] += 1
        if chk_cnt[c] == chk_adj.shape[1]:
            chk_adj = np.hstack([chk_adj,
                                 np.full((m, 4), -1, dtype=np.int32)])
            col_c = np.arange(chk_adj.shape[1])
        chk_adj[c, chk_cnt[c]] = v
        chk_cnt[c] += 1
        chk_deg[c] += 1

    def pick(cands: np.ndarray) -> int:
        degs = chk_deg[cands]
        pool = cands[degs == degs.min()]
        if len(pool) == 1:
            return int(pool[0])
        return int(pool[stream.index_below(len(pool))])

    order = np.argsort(seq, kind="stable")
    stamp = 0
    buf_c = np.zeros(m, dtype=bool)
    buf_v = np.zeros(n, dtype=bool)
    for v in order:
        for edge_i in range(seq[v]):
            if edge_i == 0:
                grow(v, pick(np.arange(m)))
                continue
            stamp += 1
            n_reached = 0
            seen_v[v] = stamp
            frontier = np.array([v], dtype=np.int32)
            cands = None
            for _ in range(max_depth):
                # variables -> checks
                block = var_adj[frontier]
                chks = block[col_v < var_cnt[frontier][:, None]]
                fresh = chks[seen_c[chks] != stamp]
                if fresh.size == 0:  # tree saturated, complement unreachable
                    cands = np.nonzero(seen_c != stamp)[0]
                    break
                seen_c[fresh] = stamp
                buf_c[:] = False
                buf_c[fresh] = True
                fresh_u = np.nonzero(buf_c)[0]
                n_reached += fresh_u.size
                if n_reached == m:  # all reached: last layer is farthest
                    cands = fresh_u
                    break
                # checks -> variables
                block = chk_adj[fresh_u]
                vars_ = block[col_c[: chk_adj.shape[1]]
                              < chk_cnt[fresh_u][:, None]]
                nxt = vars_[seen_v[vars_] != stamp]
                if nxt.size == 0:
                    cands = np.nonzero(seen_c != stamp)[0]
                    break
                seen_v[nxt] = stamp
                buf_v[:] = False
                buf_v[nxt] = True
                frontier = np.nonzero(buf_v)[0]
            if cands is None:  # horizon hit: beyond-depth checks are farthest
                cands = np.nonzero(seen_c != stamp)[0]
            grow(v, pick(cands))

    return [chk_adj[c, :chk_cnt[c]].copy() for c in range(m)]


def _pack_rows(chk_neighbors, n: int) -> np.ndarray:
    m = len(chk_neighbors)
    words = (n + 63) // 64
    rows = np.zeros((m, words), dtype=np.uint64)
    for c, vs in enumerate(chk_neighbors):
        np.bitwise_or.at(rows[c], vs >> 6,
                         (np.uint64(1) << (vs & 63).astype(np.uint64)))
    return rows


def _eliminate(rows: np.ndarray, n: int):
    """Reduced row echelon over GF(2); returns pivot column list."""
    m = rows.shape[0]
    pivots = []
    rank = 0
    for col in range(n):
        word, bit = col >> 6, np.uint64(1) << np.uint64(col & 63)
        hits = np.nonzero(rows[rank:, word] & bit)[0]
        if hits.size == 0:
            continue
        piv = rank + int(hits[0])
        if piv != rank:
            rows[[rank, piv]] = rows[[piv, rank]]
        targets = np.nonzero(rows[:, word] & bit)[0]
        targets = targets[targets != rank]
        if targets.size:
            rows[targets] ^= rows[rank]
        pivots.append(col)
        rank += 1
        if rank == m:
            break
    return pivots, rank


def _generator(rows: np.ndarray, pivots: list, n: int):
    """Systematic generator from the echelon form: message bits sit at the
    non-pivot columns, pivot bits are parity functions of them."""
    m = len(pivots)
    piv = np.array(pivots, dtype=np.int64)
    is_piv = np.zeros(n, dtype=bool)
    is_piv[piv] = True
    msg_positions = np.nonzero(~is_piv)[0]
    l = msg_positions.size

    dense = np.unpackbits(rows[:m].view(np.uint8), bitorder="little",
                          axis=1)[:, :n].astype(bool)
    words = (n + 63) // 64
    cw = np.zeros((l, n), dtype=bool)
    cw[np.arange(l), msg_positions] = True
    # pivot bit of row r flips wherever that row covers the message column
    cw[:, piv] = dense[:, msg_positions].T
    packed = np.packbits(cw, axis=1, bitorder="little")
    pad = np.zeros((l, words * 8 - packed.shape[1]), dtype=np.uint8)
    gen_rows = np.hstack([packed, pad]).view(np.uint64)
    return msg_positions, gen_rows


def build_code(n: int, target_rate: float, stream: StageStream,
               profile: dict | None = None, attempts: int = 10) -> LdpcCode:
    """Construct an irregular code of the given length and rate.

    Retries with fresh edges when elimination finds a rank deficiency.
    """
    if n < 100:
        raise ValueError("block length must be at least 100")
    if not 0 < target_rate < 1:
        raise ValueError("target rate must lie in (0, 1)")
    profile = dict(profile or DEFAULT_DEGREE_PROFILE)
    m = round(n * (1 - target_rate))
    seq = _degree_sequence(n, profile)
    last_gap = None
    for _ in range(attempts):
        chk_neighbors = _peg_graph(n, m, seq, stream)
        rows = _pack_rows(chk_neighbors, n)
        pivots, rank = _eliminate(rows, n)
        if rank < m:
            last_gap = m - rank
            continue
        msg_positions, gen_rows = _generator(rows, pivots, n)
        l = n - m
        realized = l / n
        if abs(realized - target_rate) > 0.01:
            raise ValueError(f"realized rate {realized:.3f} misses target")
        return LdpcCode(n=n, l=l, rate=realized, seed_label=stream.label,
                        profile=profile, chk_neighbors=chk_neighbors,
                        msg_positions=msg_positions, gen_rows=gen_rows)
    raise RuntimeError(
        f"parity structure rank-deficient by {last_gap} after {attempts} attempts")


def encode(code: LdpcCode, z) -> BitString:
    """Codeword for an l-bit message over GF(2)."""
    bits = z.bits if isinstance(z, BitString) else np.asarray(z, dtype=np.uint8)
    if bits.size != code.l:
        raise ValueError(f"message must have {code.l} bits")
    sel = code.gen_rows[bits.astype(bool)]
    if sel.shape[0]:
        packed = np.bitwise_xor.reduce(sel, axis=0)
    else:
        packed = np.zeros(code.gen_rows.shape[1], dtype=np.uint64)
    out = np.unpackbits(packed.view(np.uint8), bitorder="little")[: code.n]
    return BitString(out)


@dataclass(frozen=True)
class ReconciliationMessage:
    """The published masked word for one block."""

    payload: BitString
    block_id: int

    def __post_init__(self):
        if not isinstance(self.payload, BitString):
            raise TypeError("payload must be a BitString")


def reconcile_send(code: LdpcCode, z, x_prime, block_id: int = 0
                   ) -> ReconciliationMessage:
    """Mask a fresh message word with the receiver-side raw bits."""
    xp = x_prime.bits if isinstance(x_prime, BitString) else np.asarray(x_prime)
    if xp.size != code.n:
        raise ValueError(f"raw block must have {code.n} bits")
    cw = encode(code, z)
    return ReconciliationMessage(BitString(cw.bits ^ xp.astype(np.uint8)),
                                 block_id)


@dataclass
class DecodeResult:
    ok: bool
    bits: BitString | None
    iterations: int


def _decode_groups(code: LdpcCode):
    if "chk" in code._groups:
        return code._groups["chk"], code._groups["var"], code._groups["evar"]
    degs = np.array([len(c) for c in code.chk_neighbors])
    edge_var = np.concatenate(code.chk_neighbors)
    chk_groups = []
    ptr = np.concatenate([[0], np.cumsum(degs)])
    for d in np.unique(degs):
        rows = np.nonzero(degs == d)[0]
        idx = np.stack([ptr[r] + np.arange(d) for r in rows])
        chk_groups.append(idx)
    var_lists = [[] for _ in range(code.n)]
    for e, v in enumerate(edge_var):
        var_lists[v].append(e)
    vdegs = np.array([len(x) for x in var_lists])
    var_groups = []
    for d in np.unique(vdegs):
        vs = np.nonzero(vdegs == d)[0]
        idx = np.array([var_lists[v] for v in vs])
        var_groups.append((vs, idx))
    code._groups["chk"] = chk_groups
    code._groups["var"] = var_groups
    code._groups["evar"] = edge_var
    return chk_groups, var_groups, edge_var


def reconcile_recv(code: LdpcCode, message: ReconciliationMessage, x,
                   channel_qber: float,
                   max_iters: int = MAX_DECODE_ITERS) -> DecodeResult:
    """Recover the masked message word from the sender-side raw bits.

    Belief propagation on the residual word; a block that fails to satisfy
    all checks within the iteration budget is reported for discard rather
    than returned corrupted.
    """
    if not 0 < channel_qber < 0.5:
        raise ValueError("channel_qber must lie in (0, 0.5)")
    xb = x.bits if isinstance(x, BitString) else np.asarray(x, dtype=np.uint8)
    if xb.size != code.n:
        raise ValueError(f"raw block must have {code.n} bits")
    y = message.payload.bits ^ xb

    chk_groups, var_groups, edge_var = _decode_groups(code)
    llr0 = math.log((1 - channel_qber) / channel_qber)
    llr = (1.0 - 2.0 * y.astype(np.float64)) * llr0
    v2c = llr[edge_var].copy()
    c2v = np.zeros_like(v2c)

    for it in range(1, max_iters + 1):
        for idx in chk_groups:
            t = np.tanh(0.5 * v2c[idx])
            d = idx.shape[1]
            left = np.ones_like(t)
            right = np.ones_like(t)
            for j in range(1, d):
                left[:, j] = left[:, j - 1] * t[:, j - 1]
                right[:, d - 1 - j] = right[:, d - j] * t[:, d - j]
            extr = np.clip(left * right, -1 + 1e-15, 1 - 1e-15)
            c2v[idx] = np.clip(2.0 * np.arctanh(extr), -LLR_CLAMP, LLR_CLAMP)
        post = llr.copy()
        np.add.at(post, edge_var, c2v)
        for vs, idx in var_groups:
            tot = llr[vs, None] + c2v[idx].sum(axis=1, keepdims=True)
            v2c[idx] = np.clip(tot - c2v[idx], -LLR_CLAMP, LLR_CLAMP)
        hard = (post < 0).astype(np.uint8)
        if code.parity_ok(hard):
            return DecodeResult(True, BitString(hard[code.msg_positions]), it)
    return DecodeResult(False, None, max_iters)


def code_to_json_dict(code: LdpcCode) -> dict:
    return {
        "header": {
            "n": code.n, "l": code.l, "rate": code.rate,
            "seed_label": code.seed_label,
            "profile": {str(d): f for d, f in code.profile.items()},
        },
        "check_neighbors": [[int(v) for v in c] for c in code.chk_neighbors],
    }


def code_from_json_dict(d: dict) -> LdpcCode:
    hdr = d["header"]
    n = int(hdr["n"])
    chk = [np.array(c, dtype=np.int32) for c in d["check_neighbors"]]
    rows = _pack_rows(chk, n)
    pivots, rank = _eliminate(rows, n)
    if rank < len(chk):
        raise ValueError("serialized parity structure is rank-deficient")
    msg_positions, gen_rows = _generator(rows, pivots, n)
    return LdpcCode(n=n, l=int(hdr["l"]), rate=float(hdr["rate"]),
                    seed_label=hdr["seed_label"],
                    profile={int(k): v for k, v in hdr["profile"].items()},
                    chk_neighbors=chk, msg_positions=msg_positions,
                    gen_rows=gen_rows)
