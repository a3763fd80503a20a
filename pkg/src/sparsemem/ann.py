"""Online nearest-neighbor indexes over memory rows.

Three interchangeable backends sit behind one facade:

  exact      brute-force scan; ground truth for the others
  kd-forest  randomized kd-trees with a shared best-bin-first queue and
             a bounded number of candidate checks per query
  lsh        random-hyperplane signatures, multiple tables

The index stores normalized copies under the cosine metric (raw copies
under euclidean); the memory matrix itself is never touched. All-zero
rows are kept out of the index until first written. Every mutation
returns undo records so a write journal can roll the structure back
bit-exactly, including rebuilds, which fire after a configured number
of insertions and otherwise reuse nothing from the old structure.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .sparse import ContractViolation

_MAX_DEPTH = 64


@dataclass
class AnnConfig:
    backend: str = "exact"          # exact | kd-forest | lsh
    metric: str = "cosine"          # cosine | euclidean
    kd_trees: int = 4
    kd_checks: int = 32
    kd_leaf: int = 4
    lsh_tables: int = 8
    lsh_bits: int = 16
    rebuild_interval: int | None = None   # defaults to the slot count
    seed: int = 0

    def validate(self) -> None:
        if self.backend not in ("exact", "kd-forest", "lsh"):
            raise ContractViolation(f"unknown ann backend {self.backend!r}")
        if self.metric not in ("cosine", "euclidean"):
            raise ContractViolation(f"unknown ann metric {self.metric!r}")
        if self.backend == "lsh" and self.metric != "cosine":
            raise ContractViolation("lsh backend requires the cosine metric")
        if self.lsh_bits > 62:
            raise ContractViolation("lsh signatures limited to 62 bits")


def _top_k_by_sim(slots: np.ndarray, sims: np.ndarray, k: int):
    """Sort by decreasing similarity, ties toward the lower slot id."""
    n = slots.size
    if n == 0:
        return slots.astype(np.int64), sims
    k = min(k, n)
    if n > 64 and k * 4 < n:
        # narrow to the candidates at or above the k-th similarity so the
        # final tie-breaking sort stays small
        part = np.argpartition(-sims, k - 1)
        kth = sims[part[k - 1]]
        cand = np.flatnonzero(sims >= kth)
        slots, sims = slots[cand], sims[cand]
    order = np.lexsort((slots, -sims))[:k]
    return slots[order].astype(np.int64), sims[order]


class _ExactBackend:
    def __init__(self, n_slots: int, dim: int):
        self.mat = np.zeros((n_slots, dim))
        self.live = np.zeros(n_slots, dtype=bool)
        self.count = 0

    def build(self, vectors: dict, rng) -> None:
        self.mat[:] = 0.0
        self.live[:] = False
        for slot, v in vectors.items():
            self.mat[slot] = v
            self.live[slot] = True
        self.count = len(vectors)

    def insert(self, slot: int, vec: np.ndarray, vectors: dict):
        self.mat[slot] = vec
        self.live[slot] = True
        self.count += 1
        return ("i", slot)

    def remove(self, slot: int, vec: np.ndarray):
        old = self.mat[slot].copy()
        self.mat[slot] = 0.0
        self.live[slot] = False
        self.count -= 1
        return ("r", slot, old)

    def undo(self, rec) -> None:
        if rec[0] == "i":
            self.mat[rec[1]] = 0.0
            self.live[rec[1]] = False
            self.count -= 1
        else:
            self.mat[rec[1]] = rec[2]
            self.live[rec[1]] = True
            self.count += 1

    def query(self, q: np.ndarray, k: int, vectors: dict, metric: str):
        if metric == "cosine":
            sims = self.mat @ q
        else:
            sims = -np.sqrt(np.maximum(((self.mat - q) ** 2).sum(axis=1), 0.0))
        sims = np.where(self.live, sims, -np.inf)
        slots = np.flatnonzero(self.live)
        return _top_k_by_sim(slots, sims[slots], k)

    def stored_bytes(self) -> int:
        return self.mat.nbytes + self.live.nbytes


class _KdLeaf:
    __slots__ = ("slots",)

    def __init__(self, slots: list):
        self.slots = slots


class _KdSplit:
    __slots__ = ("dim", "thresh", "left", "right")

    def __init__(self, dim: int, thresh: float, left, right):
        self.dim = dim
        self.thresh = thresh
        self.left = left
        self.right = right


def _split_bucket(slots: list, pts: np.ndarray, rng=None):
    """Split a bucket at the mean of a high-variance dimension.

    Returns None when the bucket is degenerate (all points equal), in
    which case it must stay a leaf. rng picks among the top dimensions
    at build time; insert-time splits stay deterministic functions of
    the bucket content so journal rollback reproduces structure.
    """
    var = pts.var(axis=0)
    if not np.any(var > 0.0):
        return None
    if rng is not None:
        top = np.argsort(-var, kind="stable")[:5]
        top = top[var[top] > 0.0]
        dim = int(top[rng.integers(len(top))])
    else:
        dim = int(np.argmax(var))
    thresh = float(pts[:, dim].mean())
    mask = pts[:, dim] < thresh
    if not mask.any() or mask.all():
        return None
    left = [s for s, m in zip(slots, mask) if m]
    right = [s for s, m in zip(slots, mask) if not m]
    return dim, thresh, left, right


class _KdTree:
    __slots__ = ("root", "leaf_cap")

    def __init__(self, leaf_cap: int):
        self.root = _KdLeaf([])
        self.leaf_cap = leaf_cap

    def build(self, slots: list, vectors: dict, rng) -> None:
        def rec(ids: list, depth: int):
            if len(ids) <= self.leaf_cap or depth >= _MAX_DEPTH:
                return _KdLeaf(list(ids))
            pts = np.array([vectors[s] for s in ids])
            sp = _split_bucket(ids, pts, rng)
            if sp is None:
                return _KdLeaf(list(ids))
            dim, thresh, left, right = sp
            return _KdSplit(dim, thresh, rec(left, depth + 1), rec(right, depth + 1))

        self.root = rec(slots, 0)

    def _descend(self, vec: np.ndarray):
        parent, key, node, depth = None, "root", self.root, 0
        while isinstance(node, _KdSplit):
            parent = node
            if vec[node.dim] < node.thresh:
                key, node = "l", node.left
            else:
                key, node = "r", node.right
            depth += 1
        return parent, key, node, depth

    def _replace(self, parent, key, node) -> None:
        if parent is None:
            self.root = node
        elif key == "l":
            parent.left = node
        else:
            parent.right = node

    def insert(self, slot: int, vec: np.ndarray, vectors: dict):
        parent, key, leaf, depth = self._descend(vec)
        leaf.slots.append(slot)
        if len(leaf.slots) > self.leaf_cap and depth < _MAX_DEPTH:
            pts = np.array([vectors[s] for s in leaf.slots])
            sp = _split_bucket(leaf.slots, pts)
            if sp is not None:
                dim, thresh, left, right = sp
                self._replace(parent, key, _KdSplit(dim, thresh, _KdLeaf(left), _KdLeaf(right)))
                return ("is", parent, key, leaf)
        return ("i", leaf)

    def remove(self, slot: int, vec: np.ndarray):
        _, _, leaf, _ = self._descend(vec)
        pos = leaf.slots.index(slot)
        leaf.slots.pop(pos)
        return ("r", leaf, slot, pos)

    def undo(self, rec) -> None:
        tag = rec[0]
        if tag == "i":
            rec[1].slots.pop()
        elif tag == "is":
            _, parent, key, leaf = rec
            leaf.slots.pop()
            self._replace(parent, key, leaf)
        else:
            _, leaf, slot, pos = rec
            leaf.slots.insert(pos, slot)

    def stored_bytes(self) -> int:
        total = 0
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, _KdSplit):
                total += 32
                stack.append(node.left)
                stack.append(node.right)
            else:
                total += 16 + 8 * len(node.slots)
        return total


class _KdForestBackend:
    def __init__(self, n_trees: int, leaf_cap: int, checks: int):
        self.trees = [_KdTree(leaf_cap) for _ in range(n_trees)]
        self.checks = checks
        self.count = 0

    def build(self, vectors: dict, rng) -> None:
        slots = sorted(vectors)
        for tree in self.trees:
            tree.build(slots, vectors, rng)
        self.count = len(slots)

    def insert(self, slot: int, vec: np.ndarray, vectors: dict):
        self.count += 1
        return [t.insert(slot, vec, vectors) for t in self.trees]

    def remove(self, slot: int, vec: np.ndarray):
        self.count -= 1
        return [t.remove(slot, vec) for t in self.trees]

    def undo(self, recs) -> None:
        for tree, rec in zip(reversed(self.trees), reversed(recs)):
            tree.undo(rec)
        if recs:
            self.count += -1 if recs[0][0] in ("i", "is") else 1

    def query(self, q: np.ndarray, k: int, vectors: dict, metric: str):
        heap = []
        tick = 0
        for tree in self.trees:
            heapq.heappush(heap, (0.0, tick, tree.root))
            tick += 1
        seen = set()
        cands: list[int] = []
        budget = max(self.checks, k)
        while heap and len(cands) < budget:
            _, _, node = heapq.heappop(heap)
            while isinstance(node, _KdSplit):
                off = q[node.dim] - node.thresh
                if off < 0.0:
                    near, far = node.left, node.right
                else:
                    near, far = node.right, node.left
                heapq.heappush(heap, (abs(off), tick, far))
                tick += 1
                node = near
            for slot in node.slots:
                if slot not in seen:
                    seen.add(slot)
                    cands.append(slot)
        if not cands:
            return np.empty(0, dtype=np.int64), np.empty(0)
        slots = np.array(cands, dtype=np.int64)
        pts = np.array([vectors[s] for s in cands])
        if metric == "cosine":
            sims = pts @ q
        else:
            sims = -np.sqrt(np.maximum(((pts - q) ** 2).sum(axis=1), 0.0))
        return _top_k_by_sim(slots, sims, k)

    def stored_bytes(self) -> int:
        return sum(t.stored_bytes() for t in self.trees)


class _LshBackend:
    def __init__(self, n_tables: int, n_bits: int, dim: int):
        self.n_tables = n_tables
        self.n_bits = n_bits
        self.dim = dim
        self.planes = np.zeros((n_tables, n_bits, dim))
        self.tables: list[dict] = [dict() for _ in range(n_tables)]
        self.count = 0
        self._pows = (2 ** np.arange(n_bits)).astype(np.int64)

    def _keys(self, vec: np.ndarray) -> list[int]:
        bits = (self.planes @ vec) >= 0.0
        return [int(bits[t] @ self._pows) for t in range(self.n_tables)]

    def build(self, vectors: dict, rng) -> None:
        self.planes = rng.standard_normal((self.n_tables, self.n_bits, self.dim))
        self.tables = [dict() for _ in range(self.n_tables)]
        self.count = 0
        for slot in sorted(vectors):
            self.insert(slot, vectors[slot], vectors)

    def insert(self, slot: int, vec: np.ndarray, vectors: dict):
        keys = self._keys(vec)
        for t, key in enumerate(keys):
            self.tables[t].setdefault(key, []).append(slot)
        self.count += 1
        return ("i", keys, slot)

    def remove(self, slot: int, vec: np.ndarray):
        keys = self._keys(vec)
        positions = []
        for t, key in enumerate(keys):
            bucket = self.tables[t][key]
            pos = bucket.index(slot)
            bucket.pop(pos)
            positions.append(pos)
            if not bucket:
                del self.tables[t][key]
        self.count -= 1
        return ("r", keys, slot, positions)

    def undo(self, rec) -> None:
        if rec[0] == "i":
            _, keys, slot = rec
            for t, key in enumerate(keys):
                bucket = self.tables[t][key]
                assert bucket[-1] == slot
                bucket.pop()
                if not bucket:
                    del self.tables[t][key]
            self.count -= 1
        else:
            _, keys, slot, positions = rec
            for t, key in enumerate(keys):
                self.tables[t].setdefault(key, []).insert(positions[t], slot)
            self.count += 1

    def query(self, q: np.ndarray, k: int, vectors: dict, metric: str):
        keys = self._keys(q)
        seen = set()
        cands: list[int] = []
        for t, key in enumerate(keys):
            for slot in self.tables[t].get(key, ()):
                if slot not in seen:
                    seen.add(slot)
                    cands.append(slot)
        if not cands:
            return np.empty(0, dtype=np.int64), np.empty(0)
        slots = np.array(cands, dtype=np.int64)
        pts = np.array([vectors[s] for s in cands])
        sims = pts @ q
        return _top_k_by_sim(slots, sims, k)

    def stored_bytes(self) -> int:
        total = self.planes.nbytes
        for table in self.tables:
            for bucket in table.values():
                total += 24 + 8 * len(bucket)
        return total


class AnnIndex:
    """Facade owning the stored copies, the backend and rebuild policy."""

    def __init__(self, n_slots: int, dim: int, config: AnnConfig | None = None):
        self.config = config or AnnConfig()
        self.config.validate()
        self.n_slots = n_slots
        self.dim = dim
        self.vectors: dict[int, np.ndarray] = {}
        self.rebuild_interval = (n_slots if self.config.rebuild_interval is None
                                 else self.config.rebuild_interval)
        if self.rebuild_interval < 1:
            raise ContractViolation("rebuild interval must be >= 1")
        self.since_rebuild = 0
        self.rebuild_count = 0
        # Journaled owners (the memory core) flip this on so a rebuild
        # never lands inside an episode, where its undo record would
        # have to retain the whole previous structure; they run
        # maintain() between episodes instead.
        self.defer_rebuild = False
        self.backend = self._new_backend()
        self.backend.build(self.vectors, self._rng(0))

    def _rng(self, salt: int) -> np.random.Generator:
        return np.random.default_rng(np.random.PCG64(
            [self.config.seed & 0x7FFFFFFF, 0x5A11, salt]))

    def _new_backend(self):
        c = self.config
        if c.backend == "exact":
            return _ExactBackend(self.n_slots, self.dim)
        if c.backend == "kd-forest":
            return _KdForestBackend(c.kd_trees, c.kd_leaf, c.kd_checks)
        return _LshBackend(c.lsh_tables, c.lsh_bits, self.dim)

    def _prep(self, row: np.ndarray) -> np.ndarray | None:
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.dim,):
            raise ContractViolation("row dimension mismatch")
        nrm = float(np.sqrt(row @ row))
        if nrm == 0.0:
            return None
        if self.config.metric == "cosine":
            return row / nrm
        return row.copy()

    @property
    def live_count(self) -> int:
        return len(self.vectors)

    def live_slots(self) -> list[int]:
        return sorted(self.vectors)

    def build(self, rows: np.ndarray) -> None:
        """(Re)index every non-zero row of a full slot matrix."""
        if rows.shape != (self.n_slots, self.dim):
            raise ContractViolation("matrix shape mismatch")
        self.vectors = {}
        for slot in range(self.n_slots):
            v = self._prep(rows[slot])
            if v is not None:
                self.vectors[slot] = v
        self.since_rebuild = 0
        self.backend = self._new_backend()
        self.backend.build(self.vectors, self._rng(self.rebuild_count))

    def query(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Top-k (slots, similarities), decreasing similarity.

        Exact backend returns the true top-k. Approximate backends may
        return fewer or farther rows. Empty index or zero-norm query
        gives empty arrays; the caller decides the fallback.
        """
        if k < 1:
            raise ContractViolation("k must be >= 1")
        qn = self._prep(np.asarray(q, dtype=np.float64))
        if qn is None or not self.vectors:
            return np.empty(0, dtype=np.int64), np.empty(0)
        k = min(k, len(self.vectors))
        return self.backend.query(qn, k, self.vectors, self.config.metric)

    def update(self, slot: int, row: np.ndarray) -> list:
        """Sync one slot with its new memory row. Returns undo records."""
        if not 0 <= slot < self.n_slots:
            raise ContractViolation("slot out of range")
        recs = []
        old = self.vectors.get(slot)
        if old is not None:
            recs.append(("rm", slot, old, self.backend.remove(slot, old)))
            del self.vectors[slot]
        new = self._prep(row)
        if new is not None:
            self.vectors[slot] = new
            recs.append(("ins", slot, self.backend.insert(slot, new, self.vectors)))
            self.since_rebuild += 1
            if self.since_rebuild >= self.rebuild_interval and not self.defer_rebuild:
                recs.append(("rebuild", self.backend, self.since_rebuild, self.rebuild_count))
                self.rebuild_count += 1
                self.since_rebuild = 0
                self.backend = self._new_backend()
                self.backend.build(self.vectors, self._rng(self.rebuild_count))
        return recs

    def maintain(self) -> bool:
        """Run a rebuild that deferral postponed, if one is due.

        Must only be called with no journal entries outstanding: a
        rebuild swaps the whole backend, which entries recorded against
        the old structure cannot undo.
        """
        if self.since_rebuild >= self.rebuild_interval:
            self.rebuild_count += 1
            self.since_rebuild = 0
            self.backend = self._new_backend()
            self.backend.build(self.vectors, self._rng(self.rebuild_count))
            return True
        return False

    def remove(self, slot: int) -> list:
        """Drop a slot; removing a non-indexed slot is a no-op."""
        if not 0 <= slot < self.n_slots:
            raise ContractViolation("slot out of range")
        old = self.vectors.get(slot)
        if old is None:
            return []
        rec = ("rm", slot, old, self.backend.remove(slot, old))
        del self.vectors[slot]
        return [rec]

    def undo(self, recs: list) -> None:
        """Apply undo records last-to-first."""
        for rec in reversed(recs):
            tag = rec[0]
            if tag == "ins":
                _, slot, brec = rec
                self.backend.undo(brec)
                del self.vectors[slot]
                self.since_rebuild -= 1
            elif tag == "rm":
                _, slot, old, brec = rec
                self.backend.undo(brec)
                self.vectors[slot] = old
            elif tag == "rebuild":
                _, backend, since, count = rec
                self.backend = backend
                self.since_rebuild = since
                self.rebuild_count = count
            else:
                raise ContractViolation(f"unknown undo record {tag!r}")

    def probe_answers(self, probes: np.ndarray, k: int) -> bytes:
        """Deterministic byte digest of query answers, for state hashing."""
        parts = []
        for q in probes:
            slots, sims = self.query(q, k)
            parts.append(slots.astype("<i8").tobytes())
            parts.append(sims.astype("<f8").tobytes())
        return b"".join(parts)

    def stored_bytes(self) -> int:
        """Accounting size of the structure plus the stored row copies."""
        total = self.backend.stored_bytes()
        for v in self.vectors.values():
            total += 32 + v.nbytes
        return total
