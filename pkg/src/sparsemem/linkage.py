"""Temporal link matrices over memory slots, row-sparse with a cap.

Two matrices are kept per head: `fwd` approximates "j was written, then
i was written next" mass and `bwd` the reverse direction (it is the
transposed recurrence, stored row-wise so both directions have cheap
row access). A sparse precedence vector carries recent write mass.
Rows are truncated to the k_link largest entries after every update;
the diagonal is kept at zero. No gradients flow through any of this:
the directional read weights are treated as constants by the backward
pass, and the mixing gate still receives exact gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import (
    ContractViolation,
    SparseRowMatrix,
    SparseVector,
    renormalized,
    sparse_combine,
    truncate_top_k,
)


@dataclass
class LinkageConfig:
    k_link: int = 8

    def validate(self) -> None:
        if self.k_link < 1:
            raise ContractViolation("k_link must be >= 1")


class LinkageState:
    __slots__ = ("n_slots", "cfg", "fwd", "bwd", "prec")

    def __init__(self, n_slots: int, cfg: LinkageConfig | None = None):
        self.cfg = cfg or LinkageConfig()
        self.cfg.validate()
        self.n_slots = n_slots
        k = self.cfg.k_link
        self.fwd = SparseRowMatrix(n_slots, n_slots, k, track_columns=True)
        self.bwd = SparseRowMatrix(n_slots, n_slots, k, track_columns=True)
        self.prec = SparseVector(n_slots)


def precedence_update(state: LinkageState, w: SparseVector) -> None:
    """p <- (1 - sum(w)) p + w, truncated to the k_link largest."""
    keep = 1.0 - w.sum()
    p = sparse_combine([(keep, state.prec), (1.0, w)], state.n_slots)
    state.prec = truncate_top_k(p, state.cfg.k_link)


def _merge_row(cols: np.ndarray, vals: np.ndarray, add_cols: np.ndarray,
               add_vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    union = np.unique(np.concatenate([cols, add_cols]))
    out = np.zeros(union.size)
    out[np.searchsorted(union, cols)] = vals
    np.add.at(out, np.searchsorted(union, add_cols), add_vals)
    return union, out


def _truncate_row_arrays(cols: np.ndarray, vals: np.ndarray, cap: int):
    keep = vals != 0.0
    cols, vals = cols[keep], vals[keep]
    if cols.size <= cap:
        return cols, vals
    order = np.lexsort((cols, -vals))[:cap]
    order.sort()
    return cols[order], vals[order]


def linkage_update(state: LinkageState, w: SparseVector) -> int:
    """Fold one write distribution into both link matrices.

    Uses the precedence vector from before this step, so call this
    before precedence_update. Returns the number of stored entries
    touched (decayed or added), which is bounded by the write support,
    the precedence support and current column occupancy, independent
    of the slot count.
    """
    p = state.prec
    touched = 0
    k_cap = state.cfg.k_link
    # forward matrix: rows in supp(w) decay and receive w(i) * p(j)
    for i, wi in zip(w.idx, w.val):
        i = int(i)
        cols, vals = state.fwd.row(i)
        touched += cols.size
        new_vals = vals * (1.0 - wi)
        if p.nnz:
            add_mask = p.idx != i
            add_cols = p.idx[add_mask]
            add_vals = wi * p.val[add_mask]
            touched += add_cols.size
            cols2, vals2 = _merge_row(cols, new_vals, add_cols, add_vals)
        else:
            cols2, vals2 = cols, new_vals
        cols2, vals2 = _truncate_row_arrays(cols2, vals2, k_cap)
        state.fwd.set_row(i, cols2, vals2)
    # backward matrix: columns in supp(w) decay, rows in supp(p) receive
    for j, wj in zip(w.idx, w.val):
        touched += state.bwd.scale_column(int(j), 1.0 - wj)
    if p.nnz and w.nnz:
        for i, pi in zip(p.idx, p.val):
            i = int(i)
            add_mask = w.idx != i
            add_cols = w.idx[add_mask]
            add_vals = w.val[add_mask] * pi
            if add_cols.size == 0:
                continue
            touched += add_cols.size
            cols, vals = state.bwd.row(i)
            cols2, vals2 = _merge_row(cols, vals, add_cols, add_vals)
            cols2, vals2 = _truncate_row_arrays(cols2, vals2, k_cap)
            state.bwd.set_row(i, cols2, vals2)
    return touched


def directional_weights(state: LinkageState, read_prev: SparseVector,
                        k: int) -> tuple[SparseVector, SparseVector]:
    """Push last step's read weights one hop along each direction.

    Returns (forward, backward) weights, each truncated to the k
    largest entries and renormalized when nonzero.
    """
    f = state.fwd.matvec_sparse(read_prev)
    b = state.bwd.matvec_sparse(read_prev)
    f = renormalized(truncate_top_k(f, k))
    b = renormalized(truncate_top_k(b, k))
    return f, b


class MixCache:
    """Forward cache of read_mode_mix for the exact-gradient backward."""

    __slots__ = ("slots", "weights", "u_sum", "content", "f", "b", "modes")

    def __init__(self, slots, weights, u_sum, content, f, b, modes):
        self.slots = slots
        self.weights = weights
        self.u_sum = u_sum
        self.content = content
        self.f = f
        self.b = b
        self.modes = modes


def read_mode_mix(content: SparseVector, f: SparseVector, b: SparseVector,
                  modes: np.ndarray, k: int) -> tuple[SparseVector, MixCache]:
    """Convex mix of content / forward / backward weights.

    modes is a point on the 3-simplex ordered (content, forward,
    backward). The mix is re-truncated to k entries and renormalized.
    """
    if modes.shape != (3,):
        raise ContractViolation("modes must have three components")
    u = sparse_combine(
        [(float(modes[0]), content), (float(modes[1]), f), (float(modes[2]), b)],
        content.dim,
    )
    u = truncate_top_k(u, k)
    s = u.val.sum()
    if s > 0.0:
        w = SparseVector(u.dim, u.idx, u.val / s, checked=False)
    else:
        w = u
    cache = MixCache(u.idx, w.val, s, content, f, b, modes)
    return w, cache


def read_mode_mix_backward(cache: MixCache, d_w: np.ndarray):
    """Backward of read_mode_mix given dL/d(mixed weights) aligned with
    the mixed support. The directional inputs are constants here by
    design; only the content weights and the mode gate get gradients.

    Returns (d_content aligned with content support, d_modes (3,)).
    """
    content, modes = cache.content, cache.modes
    d_content = np.zeros(content.nnz)
    d_modes = np.zeros(3)
    if cache.u_sum <= 0.0 or cache.slots.size == 0:
        return d_content, d_modes
    w = cache.weights
    d_u = (d_w - float(w @ d_w)) / cache.u_sum
    for m_i, vec in ((0, content), (1, cache.f), (2, cache.b)):
        if vec.nnz == 0:
            continue
        pos = np.searchsorted(cache.slots, vec.idx)
        inside = pos < cache.slots.size
        match = np.zeros(vec.nnz, dtype=bool)
        match[inside] = cache.slots[pos[inside]] == vec.idx[inside]
        d_modes[m_i] = float(vec.val[match] @ d_u[pos[match]])
        if m_i == 0:
            d_content[match] = float(modes[0]) * d_u[pos[match]]
    return d_content, d_modes


def dense_linkage_init(n_slots: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((n_slots, n_slots)), np.zeros(n_slots)


def dense_linkage_update(link: np.ndarray, prec: np.ndarray, w: np.ndarray) -> None:
    """Dense comparator recurrence, in place:
    L(i,j) <- (1 - w(i) - w(j)) L(i,j) + w(i) p(j), zero diagonal."""
    link *= 1.0 - w[:, None] - w[None, :]
    link += np.outer(w, prec)
    np.fill_diagonal(link, 0.0)


def dense_precedence_update(prec: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (1.0 - w.sum()) * prec + w
