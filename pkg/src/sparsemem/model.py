"""Assembled sequence model: LSTM controller over an external memory.

Two engines share the controller math and the loss. The sparse engine
keeps one memory state, journal, and (optionally) temporal linkage per
batch sample, touching only the rows the step actually reads or
writes. The dense engine batches the whole (batch, slots, word) memory
block through numpy and checkpoints full matrices each step, which is
the honest cost profile of the full-softmax comparator baselines.

Per step the order of operations is: controller, write (erase the LRU
row of every head, then add every head's outer product), linkage
update, read from the post-write memory, usage update. The backward
pass walks the same order in reverse, reverting each journal entry as
it goes, so after backward every memory state is bit-identical to its
starting point.

Gradient conventions: no gradient flows through slot selection (top-K,
LRU choice, usage, ring), through directional linkage weights, or
through a fallback read's constant weight. Finite-difference checks
must freeze the directional weights (see directional_override) to be
comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ann import AnnConfig
from .controller import (
    ControllerConfig,
    init_params,
    interface_backward,
    interface_project,
    lstm_backward,
    lstm_step,
    output_backward,
    output_combine,
    zeros_like_params,
)
from .linkage import (
    LinkageConfig,
    LinkageState,
    directional_weights,
    linkage_update,
    precedence_update,
    read_mode_mix,
    read_mode_mix_backward,
)
from .memory import (
    HeadWrite,
    MemoryConfig,
    MemoryState,
    apply_write,
    content_weights,
    erase_backward,
    init_state,
    lru_slots,
    maintain_index,
    read_backward,
    record_access,
    revert_write,
    sparse_read,
    write_backward_head,
    write_weights,
)
from .sparse import ContractViolation, SparseVector, sparse_combine, sparse_weighted_sum

LN2 = float(np.log(2.0))

MODEL_NAMES = (
    "sam", "sam-exact", "sam-ann", "sam-lsh",
    "dam", "ntm-dense", "sdnc", "dnc-dense",
)


@dataclass
class ModelConfig:
    name: str
    controller: ControllerConfig
    memory: MemoryConfig
    linkage: LinkageConfig | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.name not in MODEL_NAMES:
            raise ContractViolation(f"unknown model name {self.name!r}")
        self.memory.validate()
        if self.controller.heads != self.memory.heads:
            raise ContractViolation("controller and memory head counts differ")
        if self.controller.word != self.memory.word:
            raise ContractViolation("controller and memory word sizes differ")
        if self.linkage is not None:
            self.linkage.validate()
            if not self.controller.read_modes:
                raise ContractViolation("linkage models need the read-mode head")
        elif self.controller.read_modes:
            raise ContractViolation("read-mode head configured without linkage")
        if self.memory.dense and self.memory.usage != "discounted":
            raise ContractViolation(
                "the batched dense engine uses the discounted usage statistic")


def build_model(name: str, input_width: int, output_width: int, slots: int, *,
                hidden: int = 100, word: int = 32, k: int = 4, heads: int = 4,
                k_link: int = 8, seed: int = 0, ann_backend: str | None = None,
                rebuild_interval: int | None = None) -> "Model":
    """Construct a model by its benchmark name.

    sam / sam-exact  sparse reads, exact index, LRU usage
    sam-ann          sparse reads, randomized kd-forest index
    sam-lsh          sparse reads, hyperplane LSH index
    sdnc             sam-exact plus sparse temporal linkage
    dam / ntm-dense  full-softmax comparator, discounted usage
    dnc-dense        dense comparator plus dense temporal linkage
    """
    name = name.lower()
    if name not in MODEL_NAMES:
        raise ContractViolation(f"unknown model name {name!r}")
    dense = name in ("dam", "ntm-dense", "dnc-dense")
    linked = name in ("sdnc", "dnc-dense")
    default_backend = {"sam-ann": "kd-forest", "sam-lsh": "lsh"}.get(name, "exact")
    ann = AnnConfig(backend=ann_backend or default_backend,
                    rebuild_interval=rebuild_interval, seed=seed)
    memory = MemoryConfig(slots=slots, word=word, k=k, heads=heads,
                          usage="discounted" if dense else "lru",
                          dense=dense, ann=ann)
    ctrl = ControllerConfig(input_width=input_width, output_width=output_width,
                            hidden=hidden, heads=heads, word=word,
                            read_modes=linked)
    link = LinkageConfig(k_link=k_link) if linked else None
    return Model(ModelConfig(name, ctrl, memory, link, seed))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _usage_gap(usage: np.ndarray, heads: int) -> float:
    """Smallest positive gap among the heads+1 lowest usage values.

    The eviction argsort only flips under perturbation where two
    competing values differ by less than the perturbation; bitwise
    ties come from identical arithmetic and stay tied, so they are
    not counted as zero margin.
    """
    low = np.sort(np.partition(usage, heads, axis=-1)[..., :heads + 1], axis=-1)
    gaps = np.diff(low, axis=-1)
    pos = gaps[gaps > 0.0]
    return float(pos.min()) if pos.size else np.inf


class StepTape:
    """Per-step forward cache shared by both engines; per_sample holds
    the sparse engine's per-replica records, extra the dense engine's
    batched arrays."""

    __slots__ = ("lcache", "iface", "h", "reads", "probs", "per_sample", "extra")

    def __init__(self, lcache, iface, h, reads, probs, per_sample=None, extra=None):
        self.lcache = lcache
        self.iface = iface
        self.h = h
        self.reads = reads
        self.probs = probs
        self.per_sample = per_sample
        self.extra = extra

    def nbytes(self) -> int:
        total = sum(a.nbytes for a in self.lcache)
        total += self.iface.raw.nbytes + self.h.nbytes
        total += self.reads.nbytes + self.probs.nbytes
        if self.per_sample is not None:
            for ss in self.per_sample:
                total += ss.nbytes()
        if self.extra is not None:
            for v in self.extra.values():
                if isinstance(v, np.ndarray):
                    total += v.nbytes
        return total


class _SampleStep:
    """One replica's memory-side cache for one step (sparse engine)."""

    __slots__ = ("entry", "rrs", "mixes", "read_ws", "prev_ws")

    def __init__(self, entry, rrs, mixes, read_ws, prev_ws):
        self.entry = entry
        self.rrs = rrs
        self.mixes = mixes
        self.read_ws = read_ws
        self.prev_ws = prev_ws

    def nbytes(self) -> int:
        total = 0
        for rr in self.rrs:
            total += rr.slots.nbytes + rr.weights.nbytes + rr.sims.nbytes
        for w in self.read_ws:
            total += w.idx.nbytes + w.val.nbytes
        return total


class Forward:
    """Everything the backward pass and the caller's metrics need."""

    __slots__ = ("loss", "denom", "bit_errors", "masked_bits", "tape",
                 "inputs", "targets", "mask", "states", "journals",
                 "outputs", "stats")

    def __init__(self, loss, denom, bit_errors, masked_bits, tape, inputs,
                 targets, mask, states, journals, outputs, stats):
        self.loss = loss
        self.denom = denom
        self.bit_errors = bit_errors
        self.masked_bits = masked_bits
        self.tape = tape
        self.inputs = inputs
        self.targets = targets
        self.mask = mask
        self.states = states
        self.journals = journals
        self.outputs = outputs
        self.stats = stats


def _check_episode(ctrl: ControllerConfig, inputs, targets, mask):
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if inputs.ndim != 3 or inputs.shape[2] != ctrl.input_width:
        raise ContractViolation("inputs must be (batch, steps, input_width)")
    B, T = inputs.shape[:2]
    if B < 1 or T < 1:
        raise ContractViolation("episode batch must be non-empty")
    if targets.shape != (B, T, ctrl.output_width):
        raise ContractViolation("targets shape mismatch")
    if mask.shape != (B, T):
        raise ContractViolation("mask must be (batch, steps)")
    return inputs, targets, mask


class Margins:
    """Smallest observed distances to every discrete decision boundary.

    sim:    gap between the k-th and (k+1)-th retained similarity
    access: distance of summed access weights to the usage threshold
    mix:    gap at the truncation boundary of the read-mode mix
    usage:  gap between the two smallest discounted usage values
    """

    __slots__ = ("sim", "access", "mix", "usage")

    def __init__(self):
        self.sim = np.inf
        self.access = np.inf
        self.mix = np.inf
        self.usage = np.inf

    def minimum(self) -> float:
        return min(self.sim, self.access, self.mix, self.usage)


class SparseEngine:
    """Per-sample sparse memory episodes behind a batched controller."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init_states(self, batch: int, prefill: np.ndarray | None = None):
        return [init_state(self.cfg.memory, prefill) for _ in range(batch)]

    def forward(self, params, inputs, targets, mask, states=None, *,
                want_tape=True, want_outputs=False, margins: Margins | None = None,
                directional_override=None, capture_directional=False) -> Forward:
        cfg = self.cfg
        ctrl, mem = cfg.controller, cfg.memory
        inputs, targets, mask = _check_episode(ctrl, inputs, targets, mask)
        B, T = inputs.shape[:2]
        N, Hd, M = mem.slots, mem.heads, mem.word
        if states is None:
            states = self.init_states(B)
        elif len(states) != B:
            raise ContractViolation("one memory state per batch sample required")
        link = None
        if cfg.linkage is not None and directional_override is None:
            link = [[LinkageState(N, cfg.linkage) for _ in range(Hd)]
                    for _ in range(B)]
        captured = [] if capture_directional else None
        h = np.zeros((B, ctrl.hidden))
        c = np.zeros((B, ctrl.hidden))
        reads = np.zeros((B, ctrl.read_width))
        prev_w = [[SparseVector(N) for _ in range(Hd)] for _ in range(B)]
        journals: list[list] = [[] for _ in range(B)]
        denom = float(mask.sum())
        denom_safe = denom if denom > 0.0 else 1.0
        loss = 0.0
        bit_errors = 0
        masked_bits = 0
        journal_bytes = 0
        tape_bytes = 0
        tape = [] if want_tape else None
        outputs = np.zeros((B, T, ctrl.output_width)) if want_outputs else None
        for t in range(T):
            x_cat = np.concatenate([inputs[:, t, :], reads], axis=1)
            h, c, lcache = lstm_step(params, x_cat, h, c)
            iface = interface_project(ctrl, params, h)
            new_reads = np.zeros((B, ctrl.read_width))
            per_sample = [] if want_tape else None
            step_capture = [] if capture_directional else None
            for b in range(B):
                st = states[b]
                lrus = lru_slots(st, Hd)
                hws = []
                for hd in range(Hd):
                    w = write_weights(st, float(iface.alpha[b, hd]),
                                      float(iface.gamma[b, hd]),
                                      prev_w[b][hd], lrus[hd])
                    hws.append(HeadWrite(w, iface.a[b, hd].copy(), lrus[hd]))
                entry = apply_write(st, hws)
                fb = None
                if cfg.linkage is not None:
                    if directional_override is not None:
                        fb = directional_override[t][b]
                    else:
                        fb = []
                        for hd in range(Hd):
                            ls = link[b][hd]
                            linkage_update(ls, hws[hd].w)
                            pair = directional_weights(ls, prev_w[b][hd], mem.k)
                            precedence_update(ls, hws[hd].w)
                            fb.append(pair)
                    if capture_directional:
                        step_capture.append(fb)
                rrs, mixes, read_ws, access = [], [], [], []
                for hd in range(Hd):
                    q = iface.q[b, hd]
                    beta = float(iface.beta[b, hd])
                    rr = content_weights(st, q, beta)
                    if margins is not None and not rr.fallback:
                        s2, v2 = st.index.query(q, mem.k + 1)
                        if s2.size > mem.k:
                            margins.sim = min(margins.sim,
                                              float(v2[mem.k - 1] - v2[mem.k]))
                    if fb is not None:
                        cw = rr.to_sparse(N)
                        wmix, mcache = read_mode_mix(cw, fb[hd][0], fb[hd][1],
                                                     iface.modes[b, hd], mem.k)
                        if margins is not None:
                            u = sparse_combine(
                                [(float(iface.modes[b, hd, 0]), cw),
                                 (float(iface.modes[b, hd, 1]), fb[hd][0]),
                                 (float(iface.modes[b, hd, 2]), fb[hd][1])], N)
                            if u.nnz > mem.k:
                                vals = np.sort(u.val)[::-1]
                                margins.mix = min(margins.mix,
                                                  float(vals[mem.k - 1] - vals[mem.k]))
                        rw = wmix
                        word = (sparse_weighted_sum(wmix, st.mem)
                                if wmix.nnz else np.zeros(M))
                        mixes.append(mcache)
                    else:
                        rw = rr.to_sparse(N)
                        word = sparse_read(st, rr)
                        mixes.append(None)
                    rrs.append(rr)
                    read_ws.append(rw)
                    new_reads[b, hd * M:(hd + 1) * M] = word
                    access.append((hws[hd].w, rw))
                acc_margin = record_access(st, entry, access)
                if margins is not None:
                    margins.access = min(margins.access, acc_margin)
                    if mem.usage == "discounted" and N > Hd:
                        margins.usage = min(margins.usage,
                                            _usage_gap(st.usage[None, :], Hd))
                journals[b].append(entry)
                journal_bytes += entry.nbytes()
                if want_tape:
                    per_sample.append(
                        _SampleStep(entry, rrs, mixes, read_ws, list(prev_w[b])))
                prev_w[b] = read_ws
            if capture_directional:
                captured.append(step_capture)
            y = output_combine(ctrl, params, h, new_reads)
            probs = _sigmoid(y)
            xe = np.logaddexp(0.0, y) - targets[:, t, :] * y
            loss += float((xe.sum(axis=1) * mask[:, t]).sum()) / LN2
            hot = mask[:, t] > 0
            if hot.any():
                tg = targets[:, t, :][hot] > 0.5
                pr = probs[hot] > 0.5
                bit_errors += int((tg != pr).sum())
                masked_bits += int(tg.size)
            if want_outputs:
                outputs[:, t, :] = probs
            if want_tape:
                st_tape = StepTape(lcache, iface, h, new_reads, probs, per_sample)
                tape_bytes += st_tape.nbytes()
                tape.append(st_tape)
            reads = new_reads
        stats = {
            "journal_bytes": journal_bytes,
            "journal_bytes_per_step": journal_bytes / (B * T),
            "tape_bytes": tape_bytes,
        }
        if capture_directional:
            stats["directional"] = captured
        return Forward(loss / denom_safe, denom_safe, bit_errors, masked_bits,
                       tape, inputs, targets, mask, states, journals,
                       outputs, stats)

    def backward(self, params, fw: Forward) -> dict:
        cfg = self.cfg
        ctrl, mem = cfg.controller, cfg.memory
        if fw.tape is None:
            raise ContractViolation("backward requires a forward tape")
        B, T = fw.inputs.shape[:2]
        N, Hd, M = mem.slots, mem.heads, mem.word
        X = ctrl.input_width
        grads = zeros_like_params(params)
        d_h = np.zeros((B, ctrl.hidden))
        d_c = np.zeros((B, ctrl.hidden))
        d_reads_carry = np.zeros((B, ctrl.read_width))
        d_mem = [np.zeros((N, M)) for _ in range(B)]
        stash: list[list] = [[None] * Hd for _ in range(B)]
        accum_rows = 0
        for t in range(T - 1, -1, -1):
            stp = fw.tape[t]
            iface = stp.iface
            d_y = (stp.probs - fw.targets[:, t, :]) \
                * (fw.mask[:, t][:, None] / (LN2 * fw.denom))
            d_h_out, d_reads = output_backward(ctrl, params, stp.h, stp.reads,
                                               d_y, grads)
            d_h = d_h + d_h_out
            d_reads = d_reads + d_reads_carry
            d_q = np.zeros((B, Hd, M))
            d_a = np.zeros((B, Hd, M))
            d_alpha = np.zeros((B, Hd))
            d_gamma = np.zeros((B, Hd))
            d_beta = np.zeros((B, Hd))
            d_modes = np.zeros((B, Hd, 3)) if ctrl.read_modes else None
            for b in range(B):
                st = fw.states[b]
                ss = stp.per_sample[b]
                dm = d_mem[b]
                for hd in range(Hd):
                    d_word = d_reads[b, hd * M:(hd + 1) * M]
                    extra = stash[b][hd]
                    rr = ss.rrs[hd]
                    q = iface.q[b, hd]
                    beta = float(iface.beta[b, hd])
                    if ss.mixes[hd] is not None:
                        rw = ss.read_ws[hd]
                        if rw.nnz:
                            dv = st.mem[rw.idx] @ d_word
                            if extra is not None:
                                dv = dv + extra
                            dm[rw.idx] += np.outer(rw.val, d_word)
                            accum_rows += rw.nnz
                        else:
                            dv = np.zeros(0)
                        d_cont, dmod = read_mode_mix_backward(ss.mixes[hd], dv)
                        d_modes[b, hd] = dmod
                        dq, dbe = read_backward(st, rr, q, beta,
                                                np.zeros(M), d_cont, dm)
                    else:
                        dq, dbe = read_backward(st, rr, q, beta,
                                                d_word, extra, dm)
                    accum_rows += rr.slots.size
                    d_q[b, hd] = dq
                    d_beta[b, hd] = dbe
                new_stash = []
                for hd in range(Hd):
                    dadd, dal, dga, dprev = write_backward_head(
                        ss.entry, hd, N, ss.prev_ws[hd],
                        float(iface.alpha[b, hd]), float(iface.gamma[b, hd]), dm)
                    d_a[b, hd] = dadd
                    d_alpha[b, hd] = dal
                    d_gamma[b, hd] = dga
                    new_stash.append(dprev)
                stash[b] = new_stash
                erase_backward(ss.entry, dm)
                revert_write(st, ss.entry)
            d_h = d_h + interface_backward(ctrl, params, stp.h, iface, d_q, d_a,
                                           d_alpha, d_gamma, d_beta, d_modes,
                                           grads)
            d_x_cat, d_h, d_c = lstm_backward(params, stp.lcache, d_h, d_c, grads)
            d_reads_carry = d_x_cat[:, X:]
        fw.stats["backward_row_touches"] = accum_rows
        return grads


class DenseBatchState:
    """Batched dense memory: one (batch, slots, word) block plus usage."""

    __slots__ = ("mem", "usage", "step")

    def __init__(self, batch: int, slots: int, word: int):
        self.mem = np.zeros((batch, slots, word))
        self.usage = np.zeros((batch, slots))
        self.step = 0


class _DenseStepRecord:
    """Full-matrix checkpoint: the dense comparator's rollback cost."""

    __slots__ = ("step", "mem_old", "usage_old")

    def __init__(self, step, mem_old, usage_old):
        self.step = step
        self.mem_old = mem_old
        self.usage_old = usage_old

    def nbytes(self) -> int:
        return 8 + self.mem_old.nbytes + self.usage_old.nbytes


class DenseEngine:
    """Fully batched dense comparator (full-N softmax reads)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    def init_states(self, batch: int, prefill: np.ndarray | None = None):
        mem = self.cfg.memory
        st = DenseBatchState(batch, mem.slots, mem.word)
        if prefill is not None:
            if prefill.shape != (mem.slots, mem.word):
                raise ContractViolation("prefill shape mismatch")
            st.mem[:] = prefill
        return st

    def forward(self, params, inputs, targets, mask, states=None, *,
                want_tape=True, want_outputs=False, margins: Margins | None = None,
                directional_override=None, capture_directional=False) -> Forward:
        cfg = self.cfg
        ctrl, mem = cfg.controller, cfg.memory
        inputs, targets, mask = _check_episode(ctrl, inputs, targets, mask)
        B, T = inputs.shape[:2]
        N, Hd, M = mem.slots, mem.heads, mem.word
        lam = mem.discount
        if states is None:
            states = self.init_states(B)
        elif states.mem.shape != (B, N, M):
            raise ContractViolation("state batch shape mismatch")
        linked = cfg.linkage is not None
        if linked and directional_override is None:
            lmat = np.zeros((B, Hd, N, N))
            prec = np.zeros((B, Hd, N))
        captured = [] if capture_directional else None
        diag = np.arange(N)
        rows_b = np.arange(B)[:, None]
        h = np.zeros((B, ctrl.hidden))
        c = np.zeros((B, ctrl.hidden))
        reads = np.zeros((B, ctrl.read_width))
        prev_read = np.zeros((B, Hd, N))
        journal: list[_DenseStepRecord] = []
        denom = float(mask.sum())
        denom_safe = denom if denom > 0.0 else 1.0
        loss = 0.0
        bit_errors = 0
        masked_bits = 0
        journal_bytes = 0
        tape_bytes = 0
        tape = [] if want_tape else None
        outputs = np.zeros((B, T, ctrl.output_width)) if want_outputs else None
        for t in range(T):
            x_cat = np.concatenate([inputs[:, t, :], reads], axis=1)
            h, c, lcache = lstm_step(params, x_cat, h, c)
            iface = interface_project(ctrl, params, h)
            if margins is not None and N > Hd:
                margins.usage = min(margins.usage, _usage_gap(states.usage, Hd))
            order = np.argsort(states.usage, axis=1, kind="stable")
            lru = order[:, :Hd]
            onehot = np.zeros((B, Hd, N))
            onehot[np.arange(B)[:, None], np.arange(Hd)[None, :], lru] = 1.0
            w_write = iface.alpha[..., None] * (
                iface.gamma[..., None] * prev_read
                + (1.0 - iface.gamma)[..., None] * onehot)
            rec = _DenseStepRecord(states.step + 1, states.mem.copy(),
                                   states.usage.copy())
            states.mem[rows_b, lru] = 0.0
            states.mem += np.einsum("bhn,bhm->bnm", w_write, iface.a)
            fb = None
            if linked:
                if directional_override is not None:
                    fwd, bwd = directional_override[t]
                else:
                    lmat *= 1.0 - w_write[..., :, None] - w_write[..., None, :]
                    lmat += w_write[..., :, None] * prec[..., None, :]
                    lmat[:, :, diag, diag] = 0.0
                    fwd = np.einsum("bhij,bhj->bhi", lmat, prev_read)
                    bwd = np.einsum("bhji,bhj->bhi", lmat, prev_read)
                    prec = (1.0 - w_write.sum(axis=2, keepdims=True)) * prec + w_write
                if capture_directional:
                    captured.append((fwd, bwd))
                fb = (fwd, bwd)
            rn = np.sqrt(np.einsum("bnm,bnm->bn", states.mem, states.mem))
            qn = np.sqrt(np.einsum("bhm,bhm->bh", iface.q, iface.q))
            dots = np.einsum("bhm,bnm->bhn", iface.q, states.mem)
            den = qn[..., None] * rn[:, None, :]
            sims = np.divide(dots, den, out=np.zeros_like(dots), where=den > 0)
            z = iface.beta[..., None] * sims
            z = z - z.max(axis=2, keepdims=True)
            e = np.exp(z)
            w_content = e / e.sum(axis=2, keepdims=True)
            if linked:
                m = iface.modes
                read_w = (m[..., 0:1] * w_content
                          + m[..., 1:2] * fb[0] + m[..., 2:3] * fb[1])
            else:
                read_w = w_content
            words = np.einsum("bhn,bnm->bhm", read_w, states.mem)
            new_reads = words.reshape(B, ctrl.read_width)
            states.usage *= lam
            states.usage += (w_write + read_w).sum(axis=1)
            states.step += 1
            journal.append(rec)
            journal_bytes += rec.nbytes()
            y = output_combine(ctrl, params, h, new_reads)
            probs = _sigmoid(y)
            xe = np.logaddexp(0.0, y) - targets[:, t, :] * y
            loss += float((xe.sum(axis=1) * mask[:, t]).sum()) / LN2
            hot = mask[:, t] > 0
            if hot.any():
                tg = targets[:, t, :][hot] > 0.5
                pr = probs[hot] > 0.5
                bit_errors += int((tg != pr).sum())
                masked_bits += int(tg.size)
            if want_outputs:
                outputs[:, t, :] = probs
            if want_tape:
                extra = {"w_write": w_write, "lru": lru, "prev_read": prev_read,
                         "w_content": w_content, "sims": sims, "rn": rn,
                         "qn": qn, "read_w": read_w}
                if linked:
                    extra["f"] = fb[0]
                    extra["b"] = fb[1]
                st_tape = StepTape(lcache, iface, h, new_reads, probs, None, extra)
                tape_bytes += st_tape.nbytes()
                tape.append(st_tape)
            prev_read = read_w
            reads = new_reads
        stats = {
            "journal_bytes": journal_bytes,
            "journal_bytes_per_step": journal_bytes / (B * T),
            "tape_bytes": tape_bytes,
        }
        if capture_directional:
            stats["directional"] = captured
        return Forward(loss / denom_safe, denom_safe, bit_errors, masked_bits,
                       tape, inputs, targets, mask, states, journal,
                       outputs, stats)

    def backward(self, params, fw: Forward) -> dict:
        cfg = self.cfg
        ctrl, mem = cfg.controller, cfg.memory
        if fw.tape is None:
            raise ContractViolation("backward requires a forward tape")
        B, T = fw.inputs.shape[:2]
        N, Hd, M = mem.slots, mem.heads, mem.word
        X = ctrl.input_width
        states = fw.states
        journal = fw.journals
        grads = zeros_like_params(params)
        d_h = np.zeros((B, ctrl.hidden))
        d_c = np.zeros((B, ctrl.hidden))
        d_reads_carry = np.zeros((B, ctrl.read_width))
        d_mem = np.zeros((B, N, M))
        stash = np.zeros((B, Hd, N))
        rows_b = np.arange(B)[:, None]
        linked = cfg.linkage is not None
        for t in range(T - 1, -1, -1):
            stp = fw.tape[t]
            iface = stp.iface
            ex = stp.extra
            rec = journal[t]
            if rec.step != states.step:
                raise ContractViolation(
                    f"out-of-order journal revert: entry step {rec.step}, "
                    f"state step {states.step}")
            d_y = (stp.probs - fw.targets[:, t, :]) \
                * (fw.mask[:, t][:, None] / (LN2 * fw.denom))
            d_h_out, d_reads = output_backward(ctrl, params, stp.h, stp.reads,
                                               d_y, grads)
            d_h = d_h + d_h_out
            d_reads = d_reads + d_reads_carry
            d_word = d_reads.reshape(B, Hd, M)
            read_w = ex["read_w"]
            d_read_w = np.einsum("bnm,bhm->bhn", states.mem, d_word)
            d_mem += np.einsum("bhn,bhm->bnm", read_w, d_word)
            d_read_w += stash
            d_modes = None
            if linked:
                w_content = ex["w_content"]
                d_modes = np.stack(
                    [(w_content * d_read_w).sum(axis=2),
                     (ex["f"] * d_read_w).sum(axis=2),
                     (ex["b"] * d_read_w).sum(axis=2)], axis=2)
                d_content = iface.modes[..., 0:1] * d_read_w
            else:
                w_content = ex["w_content"]
                d_content = d_read_w
            inner = (w_content * d_content).sum(axis=2, keepdims=True)
            dz = w_content * (d_content - inner)
            d_beta = (dz * ex["sims"]).sum(axis=2)
            dsims = iface.beta[..., None] * dz
            qn, rn, sims = ex["qn"], ex["rn"], ex["sims"]
            den = qn[..., None] * rn[:, None, :]
            d_dots = np.divide(dsims, den, out=np.zeros_like(dsims), where=den > 0)
            d_q = np.einsum("bhn,bnm->bhm", d_dots, states.mem)
            ssum = (dsims * sims).sum(axis=2)
            qn2 = qn * qn
            coefq = np.divide(ssum, qn2, out=np.zeros_like(ssum), where=qn2 > 0)
            d_q -= coefq[..., None] * iface.q
            d_mem += np.einsum("bhn,bhm->bnm", d_dots, iface.q)
            rn2 = rn * rn
            coefr = (dsims * sims).sum(axis=1)
            coefr = np.divide(coefr, rn2, out=np.zeros_like(coefr), where=rn2 > 0)
            d_mem -= coefr[..., None] * states.mem
            w_write, lru, prev_read = ex["w_write"], ex["lru"], ex["prev_read"]
            d_a = np.einsum("bhn,bnm->bhm", w_write, d_mem)
            d_w_write = np.einsum("bnm,bhm->bhn", d_mem, iface.a)
            prev_dot = (d_w_write * prev_read).sum(axis=2)
            lru_val = np.take_along_axis(d_w_write, lru[:, :, None], axis=2)[..., 0]
            d_alpha = iface.gamma * prev_dot + (1.0 - iface.gamma) * lru_val
            d_gamma = iface.alpha * (prev_dot - lru_val)
            stash = iface.alpha[..., None] * iface.gamma[..., None] * d_w_write
            d_mem[rows_b, lru] = 0.0
            states.mem[:] = rec.mem_old
            states.usage[:] = rec.usage_old
            states.step -= 1
            d_h = d_h + interface_backward(ctrl, params, stp.h, iface, d_q, d_a,
                                           d_alpha, d_gamma, d_beta, d_modes,
                                           grads)
            d_x_cat, d_h, d_c = lstm_backward(params, stp.lcache, d_h, d_c, grads)
            d_reads_carry = d_x_cat[:, X:]
        return grads


class Model:
    """Config, parameters, and the engine matched to the memory mode."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.params = init_params(cfg.controller, cfg.seed)
        self.engine = DenseEngine(cfg) if cfg.memory.dense else SparseEngine(cfg)

    @property
    def name(self) -> str:
        return self.cfg.name

    def init_states(self, batch: int, prefill: np.ndarray | None = None):
        return self.engine.init_states(batch, prefill)

    def forward(self, inputs, targets, mask, states=None, **kw) -> Forward:
        return self.engine.forward(self.params, inputs, targets, mask,
                                   states, **kw)

    def backward(self, fw: Forward) -> dict:
        return self.engine.backward(self.params, fw)

    def loss_only(self, inputs, targets, mask, **kw) -> float:
        """Loss on fresh per-call memory states; used by finite differences."""
        return self.forward(inputs, targets, mask, want_tape=False, **kw).loss

    def run(self, inputs, targets, mask, states=None, **kw):
        """One full forward+backward; memory states end where they began."""
        fw = self.forward(inputs, targets, mask, states, **kw)
        grads = self.backward(fw)
        return fw, grads

    def maintain(self, states) -> None:
        """Between-episode index maintenance for persistent sparse states."""
        if isinstance(states, list):
            for st in states:
                if isinstance(st, MemoryState):
                    maintain_index(st)
