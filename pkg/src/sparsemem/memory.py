"""External-memory core: content addressing, LRU writing, write journal.

The memory is a plain real64 slot matrix. Reads attend over the K most
similar rows (cosine similarity, sharpened softmax); writes interpolate
between the previous read locations and the least-recently-used slot,
whose old content is unconditionally evicted. Every mutation of a step
is captured in a journal entry so the backward pass can run the memory
tape in reverse and leave the state bit-identical to where it started.

Two usage statistics are supported: "lru" keeps per-slot timestamps of
the last access above a threshold plus a circular ring ordered by
recency (O(1) eviction choice), and "discounted" keeps an exponentially
decayed sum of read/write weights (linear-scan eviction; the natural
fit for the dense comparator model).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .ann import AnnConfig, AnnIndex
from .sparse import (
    ContractViolation,
    SparseVector,
    sparse_combine,
    sparse_outer_add,
    sparse_weighted_sum,
)


@dataclass
class MemoryConfig:
    slots: int
    word: int = 32
    k: int = 4
    heads: int = 4
    usage: str = "lru"              # lru | discounted
    delta: float = 0.005            # access threshold for the lru statistic
    discount: float = 0.99          # decay for the discounted statistic
    dense: bool = False             # full-softmax comparator mode
    ann: AnnConfig = field(default_factory=AnnConfig)

    def validate(self) -> None:
        if self.slots < 1 or self.word < 1 or self.k < 1 or self.heads < 1:
            raise ContractViolation("slots, word, k and heads must be >= 1")
        if self.usage not in ("lru", "discounted"):
            raise ContractViolation(f"unknown usage mode {self.usage!r}")
        if not 0.0 < self.discount <= 1.0:
            raise ContractViolation("discount must be in (0, 1]")
        if self.delta < 0.0:
            raise ContractViolation("delta must be >= 0")


class UsageRing:
    """Circular doubly-linked list over slots; head = least recently used.

    Accessed slots move to the back. Implemented over two int arrays,
    so moves are O(1) and the whole order serializes as one array.
    """

    __slots__ = ("n", "nxt", "prv", "head")

    def __init__(self, n: int):
        self.n = n
        self.nxt = np.roll(np.arange(n, dtype=np.int64), -1)
        self.prv = np.roll(np.arange(n, dtype=np.int64), 1)
        self.head = 0

    def move_to_back(self, s: int):
        """Mark s most-recently-used; returns an undo record."""
        head = self.head
        rec = (s, int(self.prv[s]), int(self.nxt[s]), head)
        if s == head:
            self.head = int(self.nxt[s])
            return rec
        if s == int(self.prv[head]):
            return rec
        p, n = self.prv[s], self.nxt[s]
        self.nxt[p] = n
        self.prv[n] = p
        back = self.prv[head]
        self.nxt[back] = s
        self.prv[s] = back
        self.nxt[s] = head
        self.prv[head] = s
        return rec

    def undo_move(self, rec) -> None:
        s, op, on, oh = rec
        if int(self.prv[s]) != op or int(self.nxt[s]) != on:
            p, n = self.prv[s], self.nxt[s]
            self.nxt[p] = n
            self.prv[n] = p
            self.nxt[op] = s
            self.prv[s] = op
            self.nxt[s] = on
            self.prv[on] = s
        self.head = oh

    def first(self, h: int) -> list[int]:
        """The h least-recently-used slots, oldest first."""
        out = []
        s = self.head
        for _ in range(min(h, self.n)):
            out.append(int(s))
            s = int(self.nxt[s])
        return out

    def order(self) -> np.ndarray:
        out = np.empty(self.n, dtype=np.int64)
        s = self.head
        for i in range(self.n):
            out[i] = s
            s = int(self.nxt[s])
        return out

    def set_order(self, order: np.ndarray) -> None:
        order = np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(self.n)):
            raise ContractViolation("ring order must be a permutation of all slots")
        self.nxt[order] = np.roll(order, -1)
        self.prv[order] = np.roll(order, 1)
        self.head = int(order[0])

    def check(self) -> None:
        seen = self.order()
        if len(set(seen.tolist())) != self.n:
            raise ContractViolation("ring is not a single cycle")


class MemoryState:
    __slots__ = ("config", "mem", "step", "last_access", "ring", "usage", "index")

    def __init__(self, config: MemoryConfig):
        config.validate()
        self.config = config
        n, m = config.slots, config.word
        self.mem = np.zeros((n, m))
        self.step = 0
        if config.usage == "lru":
            self.last_access = np.zeros(n, dtype=np.int64)
            self.ring = UsageRing(n)
            self.usage = None
        else:
            self.last_access = None
            self.ring = None
            self.usage = np.zeros(n)
        self.index = None
        if not config.dense:
            self.index = AnnIndex(n, m, config.ann)
            # a rebuild inside a journaled episode would pin the whole
            # old structure in one entry; postpone to maintain_index()
            self.index.defer_rebuild = True

    def usage_values(self) -> np.ndarray:
        """Current per-slot usage; smaller = better eviction candidate
        under lru (staleness is step - last_access, larger = staler, so
        this returns last_access where smaller means staler)."""
        if self.config.usage == "lru":
            return self.last_access.astype(np.float64)
        return self.usage.copy()


def init_state(config: MemoryConfig, prefill: np.ndarray | None = None) -> MemoryState:
    state = MemoryState(config)
    if prefill is not None:
        if prefill.shape != state.mem.shape:
            raise ContractViolation("prefill shape mismatch")
        state.mem[:] = prefill
        if state.index is not None:
            state.index.build(state.mem)
    return state


def maintain_index(state: MemoryState) -> bool:
    """Run any index rebuild that came due during journaled episodes.

    Call only between episodes, with no outstanding journal entries.
    """
    if state.index is None:
        return False
    return state.index.maintain()


def lru_slots(state: MemoryState, h: int) -> list[int]:
    """The h distinct least-recently-used slots (ties: lower slot id)."""
    if h > state.config.slots:
        raise ContractViolation("more eviction slots requested than exist")
    if state.config.usage == "lru":
        return state.ring.first(h)
    order = np.lexsort((np.arange(state.config.slots), state.usage))
    return [int(s) for s in order[:h]]


def lru_slot(state: MemoryState) -> int:
    return lru_slots(state, 1)[0]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _cosine_rows(rows: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Cosine of q against each row; zero-norm pairs get similarity 0."""
    qn = float(np.sqrt(q @ q))
    rn = np.sqrt((rows * rows).sum(axis=1))
    denom = qn * rn
    sims = np.zeros(rows.shape[0])
    ok = denom > 0.0
    if qn > 0.0:
        sims[ok] = (rows[ok] @ q) / denom[ok]
    return sims, qn, rn


class ReadResult:
    """One head's content read: support, weights and backward cache."""

    __slots__ = ("slots", "weights", "sims", "fallback")

    def __init__(self, slots, weights, sims, fallback: bool):
        self.slots = slots
        self.weights = weights
        self.sims = sims
        self.fallback = fallback

    def to_sparse(self, dim: int) -> SparseVector:
        return SparseVector(dim, self.slots, self.weights, checked=False)


def content_weights(state: MemoryState, q: np.ndarray, beta: float,
                    k: int | None = None) -> ReadResult:
    """Softmax over the sharpened similarity of the k nearest rows.

    Empty index (or zero-norm query against one) falls back to full
    weight on the least-recently-used slot, with no query gradient.
    """
    k = k or state.config.k
    slots, _ = state.index.query(q, k)
    if slots.size == 0:
        s = lru_slot(state)
        return ReadResult(np.array([s], dtype=np.int64), np.array([1.0]),
                          np.array([0.0]), True)
    slots = np.sort(slots)
    sims, _, _ = _cosine_rows(state.mem[slots], q)
    weights = _softmax(beta * sims)
    return ReadResult(slots, weights, sims, False)


def content_weights_dense(state: MemoryState, q: np.ndarray, beta: float) -> ReadResult:
    """Full-softmax comparator weights over every slot, zero rows included."""
    sims, _, _ = _cosine_rows(state.mem, q)
    weights = _softmax(beta * sims)
    return ReadResult(np.arange(state.config.slots, dtype=np.int64), weights, sims, False)


def sparse_read(state: MemoryState, rr: ReadResult) -> np.ndarray:
    return rr.weights @ state.mem[rr.slots]


def write_weights(state: MemoryState, alpha: float, gamma: float,
                  prev_read: SparseVector, lru: int) -> SparseVector:
    """alpha * (gamma * previous read weights + (1-gamma) at the LRU slot)."""
    parts = [(alpha * gamma, prev_read),
             (alpha * (1.0 - gamma), SparseVector.one_hot(state.config.slots, lru))]
    w = sparse_combine(parts, state.config.slots)
    if w.nnz > state.config.k + 1:
        raise ContractViolation("write weights exceed k+1 nonzeros")
    return w


@dataclass
class HeadWrite:
    w: SparseVector
    add: np.ndarray
    lru: int


class WriteJournalEntry:
    """Everything needed to revert one step bit-exactly.

    Sparse entries use fixed-capacity buffers, so the serialized size
    is a function of (k, word, heads) alone, never of the slot count.
    Dense-mode entries checkpoint the full matrix instead.
    """

    __slots__ = ("step", "dense", "heads",
                 "w_idx", "w_val", "add", "lru",
                 "old_idx", "old_rows", "n_old",
                 "ann_recs", "ring_recs", "ts_idx", "ts_old", "n_ts",
                 "mem_old", "usage_old", "w_dense", "reverted")

    def __init__(self, config: MemoryConfig):
        h, k, m = config.heads, config.k, config.word
        self.dense = config.dense
        self.heads = h
        self.step = -1
        self.reverted = False
        self.ann_recs: list = []
        self.ring_recs: list = []
        self.usage_old = None
        self.add = np.zeros((h, m))
        self.lru = np.full(h, -1, dtype=np.int64)
        if not config.dense:
            r_cap = h * (k + 1)
            a_cap = h * (2 * k + 1)
            self.w_idx = np.full((h, k + 1), -1, dtype=np.int64)
            self.w_val = np.zeros((h, k + 1))
            self.old_idx = np.full(r_cap, -1, dtype=np.int64)
            self.old_rows = np.zeros((r_cap, m))
            self.n_old = 0
            self.ts_idx = np.full(a_cap, -1, dtype=np.int64)
            self.ts_old = np.zeros(a_cap, dtype=np.int64)
            self.n_ts = 0
            self.mem_old = None
            self.w_dense = None
        else:
            self.w_idx = self.w_val = None
            self.old_idx = self.old_rows = None
            self.n_old = 0
            self.ts_idx = self.ts_old = None
            self.n_ts = 0
            self.mem_old = None
            self.w_dense = np.zeros((h, config.slots))

    def head_w(self, h: int, dim: int) -> SparseVector:
        mask = self.w_idx[h] >= 0
        return SparseVector(dim, self.w_idx[h][mask], self.w_val[h][mask], checked=False)

    def nbytes(self) -> int:
        """Serialized size under the fixed-capacity journal layout."""
        if self.dense:
            total = 8 + self.mem_old.nbytes + self.w_dense.nbytes + self.add.nbytes + self.lru.nbytes
            if self.usage_old is not None:
                total += self.usage_old.nbytes
            total += len(self.ring_recs) * 32 + 8
            return total
        m = self.add.shape[1]
        total = 8                                  # step
        total += self.w_idx.nbytes + self.w_val.nbytes
        total += self.add.nbytes + self.lru.nbytes
        total += self.old_idx.nbytes + self.old_rows.nbytes + 8
        total += self.ts_idx.nbytes + self.ts_old.nbytes + 8
        total += self.ts_idx.size * 32               # ring move records, at capacity
        total += 2 * self.old_idx.size * (8 + 8 * m)  # index mutation records, at capacity
        if self.usage_old is not None:
            total += self.usage_old.nbytes
        for rec in self.ann_recs:
            if rec[0] == "rebuild":
                # a retained pre-rebuild structure; deferral keeps these
                # out of engine episodes, but count them when present
                total += rec[1].stored_bytes()
        return total


def apply_write(state: MemoryState, head_writes: list[HeadWrite]) -> WriteJournalEntry:
    """Evict each head's LRU row, add each head's outer product, sync
    the index. Eviction happens for every head even when the write
    gates are closed. Returns the journal entry (accesses and the step
    counter are finalized separately by record_access)."""
    cfg = state.config
    if len(head_writes) != cfg.heads:
        raise ContractViolation("one write per head required")
    entry = WriteJournalEntry(cfg)
    if cfg.dense:
        raise ContractViolation("apply_write is the sparse path; use apply_write_dense")
    touched: list[np.ndarray] = []
    for h, hw in enumerate(head_writes):
        if hw.w.nnz > cfg.k + 1:
            raise ContractViolation("write weights exceed k+1 nonzeros")
        if hw.add.shape != (cfg.word,):
            raise ContractViolation("write word has wrong width")
        entry.w_idx[h, : hw.w.nnz] = hw.w.idx
        entry.w_val[h, : hw.w.nnz] = hw.w.val
        entry.add[h] = hw.add
        entry.lru[h] = hw.lru
        touched.append(hw.w.idx)
        touched.append(np.array([hw.lru], dtype=np.int64))
    rows = np.unique(np.concatenate(touched))
    entry.n_old = rows.size
    entry.old_idx[: rows.size] = rows
    entry.old_rows[: rows.size] = state.mem[rows]
    for h in range(cfg.heads):
        state.mem[entry.lru[h]] = 0.0
    for hw in head_writes:
        sparse_outer_add(state.mem, hw.w, hw.add)
    for slot in rows:
        entry.ann_recs.extend(state.index.update(int(slot), state.mem[slot]))
    return entry


def apply_write_dense(state: MemoryState, weights: np.ndarray,
                      adds: np.ndarray, lru: list[int]) -> WriteJournalEntry:
    """Dense-mode write: full-matrix checkpoint, dense rank-h update."""
    cfg = state.config
    entry = WriteJournalEntry(cfg)
    entry.mem_old = state.mem.copy()
    entry.w_dense[:] = weights
    entry.add[:] = adds
    entry.lru[:] = np.asarray(lru, dtype=np.int64)
    for s in lru:
        state.mem[s] = 0.0
    state.mem += weights.T @ adds
    return entry


def record_access(state: MemoryState, entry: WriteJournalEntry,
                  access: list[tuple]) -> float:
    """Finalize the step: fold this step's read and write weights into
    the usage statistic and advance the step counter.

    access is a list of (write_weights, read_weights) per head, each
    either SparseVector or a dense array matching the mode. Returns the
    smallest distance of any summed access value to the threshold (inf
    in discounted mode), which finite-difference harnesses use to judge
    whether the discrete access set is stable under perturbation.
    """
    cfg = state.config
    if cfg.usage == "discounted":
        entry.usage_old = state.usage.copy()
        state.usage *= cfg.discount
        for ww, wr in access:
            for w in (ww, wr):
                if isinstance(w, SparseVector):
                    if w.nnz:
                        state.usage[w.idx] += w.val
                else:
                    state.usage += w
        state.step += 1
        entry.step = state.step
        return np.inf
    parts = []
    dense_total = None
    for ww, wr in access:
        for w in (ww, wr):
            if isinstance(w, SparseVector):
                parts.append((1.0, w))
            else:
                dense_total = w if dense_total is None else dense_total + w
    margin = np.inf
    if parts:
        total = sparse_combine(parts, cfg.slots)
        hit = total.idx[total.val > cfg.delta]
        if total.nnz:
            margin = float(np.abs(total.val - cfg.delta).min())
    else:
        hit = np.empty(0, dtype=np.int64)
    if dense_total is not None:
        dense_hit = np.flatnonzero(dense_total > cfg.delta)
        hit = np.unique(np.concatenate([hit, dense_hit]))
        margin = min(margin, float(np.abs(dense_total - cfg.delta).min()))
    state.step += 1
    entry.step = state.step
    n = hit.size
    if entry.ts_idx is None:
        entry.ts_idx = hit.astype(np.int64)
        entry.ts_old = state.last_access[hit].copy()
    else:
        if n > entry.ts_idx.size:
            raise ContractViolation("accessed more slots than the journal capacity")
        entry.ts_idx[:n] = hit
        entry.ts_old[:n] = state.last_access[hit]
    entry.n_ts = n
    state.last_access[hit] = state.step
    for s in hit:
        entry.ring_recs.append(state.ring.move_to_back(int(s)))
    return margin


def revert_write(state: MemoryState, entry: WriteJournalEntry) -> None:
    """Undo one journal entry; must be the most recent un-reverted one."""
    if entry.reverted:
        raise ContractViolation("journal entry already reverted")
    if entry.step != state.step:
        raise ContractViolation(
            f"out-of-order journal revert: entry step {entry.step}, state step {state.step}")
    cfg = state.config
    if cfg.usage == "discounted":
        state.usage[:] = entry.usage_old
    else:
        for rec in reversed(entry.ring_recs):
            state.ring.undo_move(rec)
        n = entry.n_ts
        state.last_access[entry.ts_idx[:n]] = entry.ts_old[:n]
    state.step -= 1
    if cfg.dense:
        state.mem[:] = entry.mem_old
    else:
        state.index.undo(entry.ann_recs)
        n = entry.n_old
        state.mem[entry.old_idx[:n]] = entry.old_rows[:n]
    entry.reverted = True


def read_backward(state: MemoryState, rr: ReadResult, q: np.ndarray, beta: float,
                  d_read: np.ndarray, d_w_extra: np.ndarray | None,
                  d_mem: np.ndarray) -> tuple[np.ndarray, float]:
    """Backward through one head's content read.

    d_read is dL/d(read word); d_w_extra is an optional extra dL/dw
    aligned with rr.slots (the next step's write interpolation feeds
    back into these weights). Accumulates dL/dM rows into d_mem and
    returns (dL/dq, dL/dbeta). Gradients do not flow through which
    slots were selected, nor through a fallback read's constant weight.
    """
    slots = rr.slots
    if rr.fallback:
        d_mem[slots[0]] += d_read
        return np.zeros(q.shape[0]), 0.0
    rows = state.mem[slots]
    dv = rows @ d_read
    if d_w_extra is not None:
        dv = dv + d_w_extra
    d_mem[slots] += rr.weights[:, None] * d_read
    w = rr.weights
    dz = w * (dv - float(w @ dv))
    d_beta = float(dz @ rr.sims)
    dsims = beta * dz
    qn = float(np.sqrt(q @ q))
    rn = np.sqrt((rows * rows).sum(axis=1))
    dq = np.zeros(q.shape[0])
    ok = (rn > 0.0) & (qn > 0.0)
    if ok.any():
        inv = 1.0 / (qn * rn[ok])
        dq = ((dsims[ok] * inv) @ rows[ok]) - (dsims[ok] @ rr.sims[ok]) * q / (qn * qn)
        d_mem[slots[ok]] += (dsims[ok] * inv)[:, None] * q \
            - (dsims[ok] * rr.sims[ok] / (rn[ok] ** 2))[:, None] * rows[ok]
    return dq, d_beta


def write_backward_head(entry: WriteJournalEntry, h: int, state_dim: int,
                        prev_read: SparseVector, alpha: float, gamma: float,
                        d_mem: np.ndarray) -> tuple[np.ndarray, float, float, np.ndarray]:
    """Backward through one head's write interpolation.

    Returns (dL/d add, dL/d alpha, dL/d gamma, dL/d prev_read values).
    Gradients flow through the weight values and the written word, not
    through the eviction choice.
    """
    add = entry.add[h]
    lru = int(entry.lru[h])
    w = entry.head_w(h, state_dim)
    if w.nnz:
        d_add = w.val @ d_mem[w.idx]
    else:
        d_add = np.zeros(add.shape[0])
    g_prev = d_mem[prev_read.idx] @ add if prev_read.nnz else np.empty(0)
    g_lru = float(d_mem[lru] @ add)
    s_prev = float(prev_read.val @ g_prev) if prev_read.nnz else 0.0
    d_alpha = gamma * s_prev + (1.0 - gamma) * g_lru
    d_gamma = alpha * (s_prev - g_lru)
    d_prev_vals = alpha * gamma * g_prev
    return d_add, d_alpha, d_gamma, d_prev_vals


def erase_backward(entry: WriteJournalEntry, d_mem: np.ndarray) -> None:
    """dL/dM_{t-1} = dL/dM_t with every evicted row zeroed."""
    for h in range(entry.heads):
        d_mem[int(entry.lru[h])] = 0.0


PROBE_SEED = 0x5EED


def state_fingerprint(state: MemoryState, n_probes: int = 50, k: int | None = None) -> str:
    """SHA-256 over memory, usage, ring order, step and index answers."""
    hsh = hashlib.sha256()
    hsh.update(state.mem.astype("<f8").tobytes())
    hsh.update(np.int64(state.step).tobytes())
    if state.config.usage == "lru":
        hsh.update(state.last_access.astype("<i8").tobytes())
        hsh.update(state.ring.order().astype("<i8").tobytes())
    else:
        hsh.update(state.usage.astype("<f8").tobytes())
    if state.index is not None:
        rng = np.random.default_rng(PROBE_SEED)
        probes = rng.standard_normal((n_probes, state.config.word))
        hsh.update(state.index.probe_answers(probes, k or state.config.k))
    return hsh.hexdigest()


def snapshot_state(state: MemoryState) -> dict:
    sections = {
        "kind": "memory-state",
        "mem": state.mem,
        "step": state.step,
        "usage_mode": state.config.usage,
    }
    if state.config.usage == "lru":
        sections["last_access"] = state.last_access
        sections["ring_order"] = state.ring.order()
    else:
        sections["usage"] = state.usage
    return sections


def restore_state(config: MemoryConfig, sections: dict) -> MemoryState:
    if sections.get("kind") != "memory-state":
        raise ContractViolation("not a memory-state snapshot")
    if sections["usage_mode"] != config.usage:
        raise ContractViolation("usage mode mismatch between snapshot and config")
    state = MemoryState(config)
    if sections["mem"].shape != state.mem.shape:
        raise ContractViolation("snapshot shape mismatch")
    state.mem[:] = sections["mem"]
    state.step = int(sections["step"])
    if config.usage == "lru":
        state.last_access[:] = sections["last_access"]
        state.ring.set_order(sections["ring_order"])
    else:
        state.usage[:] = sections["usage"]
    if state.index is not None:
        state.index.build(state.mem)
    return state
