"""Time and space benchmark sweeps over memory size.

Each (model, N) cell builds a model with a prefilled memory, runs one
untimed warmup episode, then times forward+backward over several
trials and reports the median. Because backward reverts every journal
entry, the same states are reused across trials without drift.

Space is accounted, not sampled from the OS: journal bytes come from
the entries' own fixed layouts, tape and state bytes from the arrays
held, so the numbers are exact and reproducible. Dense models report
their full-matrix checkpoint cost, which is the point of comparison:
it grows with N while the sparse journal does not.

Dense comparator models are skipped above a configurable slot ceiling;
models carrying dense temporal linkage (an N x N matrix per head per
sample) hit their own much lower ceiling. Cells whose projected
working set exceeds the memory budget are recorded as skipped rather
than risking the process.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import Model, build_model
from .sparse import ContractViolation

BENCH_SCHEMA = "sparsemem-bench-v1"
BENCH_HEADER = ("model,n_slots,time_ms,time_ms_per_step,"
                "journal_bytes_per_step,peak_bytes,status")

BENCH_MODELS = ("sam-exact", "sam-ann", "sam-lsh", "dam", "ntm-dense",
                "sdnc", "dnc-dense")

_DENSE = ("dam", "ntm-dense", "dnc-dense")


@dataclass
class BenchResult:
    model: str
    n_slots: int
    time_ms: float
    time_ms_per_step: float
    journal_bytes_per_step: float
    peak_bytes: int
    status: str = "ok"

    def csv_row(self) -> str:
        if self.status != "ok":
            return f"{self.model},{self.n_slots},,,,,{self.status}"
        return (f"{self.model},{self.n_slots},{self.time_ms:.3f},"
                f"{self.time_ms_per_step:.4f},{self.journal_bytes_per_step:.1f},"
                f"{self.peak_bytes},{self.status}")


def projected_bytes(name: str, n: int, *, word: int, heads: int,
                    minibatch: int, steps: int) -> int:
    """Upper-bound working set for one bench cell, for the OOM guard."""
    B = minibatch
    state = B * n * word * 8
    if name in _DENSE:
        journal = steps * B * (n * word + n) * 8
        dmem = B * n * word * 8
        link = 2 * B * heads * n * n * 8 if name == "dnc-dense" else 0
        return 2 * state + journal + dmem + link
    index = 3 * n * (word * 8 + 64)             # rows plus tree/bucket overhead
    return 2 * state + B * index + steps * B * 4096


def _episode_data(rng, minibatch: int, steps: int, in_w: int, out_w: int):
    inputs = rng.normal(size=(minibatch, steps, in_w))
    targets = (rng.random((minibatch, steps, out_w)) > 0.5).astype(np.float64)
    mask = np.ones((minibatch, steps))
    return inputs, targets, mask


def _state_bytes(model: Model, states) -> int:
    if model.cfg.memory.dense:
        return states.mem.nbytes + states.usage.nbytes
    total = 0
    for st in states:
        total += st.mem.nbytes
        if st.index is not None:
            total += st.index.stored_bytes()
        if st.usage is not None:
            total += st.usage.nbytes
        else:
            total += st.last_access.nbytes + 2 * st.ring.order().nbytes
    return total


def bench_cell(name: str, n: int, *, steps: int = 10, minibatch: int = 8,
               trials: int = 5, hidden: int = 100, word: int = 32, k: int = 4,
               heads: int = 4, k_link: int = 8, in_w: int = 8, out_w: int = 8,
               seed: int = 0) -> BenchResult:
    """Median forward+backward time and accounted space for one cell."""
    if trials < 1:
        raise ContractViolation("at least one trial required")
    rng = np.random.default_rng((seed, n))
    model = build_model(name, in_w, out_w, n, hidden=hidden, word=word, k=k,
                        heads=heads, k_link=k_link, seed=seed)
    prefill = rng.normal(size=(n, word))
    states = model.init_states(minibatch, prefill)
    inputs, targets, mask = _episode_data(rng, minibatch, steps, in_w, out_w)
    base_bytes = _state_bytes(model, states)

    times = []
    journal_bps = 0.0
    episode_bytes = 0
    for trial in range(trials + 1):
        t0 = time.perf_counter()
        fw = model.forward(inputs, targets, mask, states)
        grads = model.backward(fw)
        dt = time.perf_counter() - t0
        if trial == 0:
            continue                      # warmup: excludes first-touch costs
        times.append(dt)
        journal_bps = fw.stats["journal_bytes_per_step"]
        touched = fw.stats.get("backward_row_touches", 0) * word * 8
        if model.cfg.memory.dense:
            touched = states.mem.nbytes    # dense backward holds a full d_mem
        episode_bytes = (fw.stats["journal_bytes"] + fw.stats["tape_bytes"]
                         + touched)
    med = float(np.median(times))
    return BenchResult(name, n, med * 1e3, med * 1e3 / steps, journal_bps,
                       base_bytes + episode_bytes, "ok")


def run_bench(models, n_values, *, steps: int = 10, minibatch: int = 8,
              trials: int = 5, dense_ceiling: int = 2 ** 14,
              linkage_ceiling: int = 2 ** 11, budget_bytes: int | None = None,
              seed: int = 0, hidden: int = 100, word: int = 32, k: int = 4,
              heads: int = 4, progress=None) -> list[BenchResult]:
    if budget_bytes is None:
        budget_bytes = 3 * 2 ** 30
    out = []
    for name in models:
        if name not in BENCH_MODELS:
            raise ContractViolation(f"not a benchmark model: {name!r}")
        for n in n_values:
            ceiling = None
            if name == "dnc-dense":
                ceiling = min(dense_ceiling, linkage_ceiling)
            elif name in _DENSE:
                ceiling = dense_ceiling
            if ceiling is not None and n > ceiling:
                res = BenchResult(name, n, 0.0, 0.0, 0.0, 0, "skipped-ceiling")
            elif projected_bytes(name, n, word=word, heads=heads,
                                 minibatch=minibatch,
                                 steps=steps) > budget_bytes:
                res = BenchResult(name, n, 0.0, 0.0, 0.0, 0, "skipped-oom")
            else:
                try:
                    res = bench_cell(name, n, steps=steps,
                                     minibatch=minibatch, trials=trials,
                                     hidden=hidden, word=word, k=k,
                                     heads=heads, seed=seed)
                except MemoryError:
                    res = BenchResult(name, n, 0.0, 0.0, 0.0, 0, "skipped-oom")
            out.append(res)
            if progress is not None:
                progress(res)
    return out


def fit_exponent(results, model: str) -> tuple[float, int]:
    """Least-squares slope of log(time) against log(N) over the ok rows.

    Returns (exponent, points). Needs at least two points.
    """
    xs, ys = [], []
    for r in results:
        if r.model == model and r.status == "ok" and r.time_ms > 0:
            xs.append(np.log(r.n_slots))
            ys.append(np.log(r.time_ms))
    if len(xs) < 2:
        raise ContractViolation(f"not enough points to fit {model!r}")
    slope = float(np.polyfit(np.array(xs), np.array(ys), 1)[0])
    return slope, len(xs)


def results_to_csv(results) -> str:
    lines = [f"# {BENCH_SCHEMA}", BENCH_HEADER]
    lines.extend(r.csv_row() for r in results)
    return "\n".join(lines) + "\n"
