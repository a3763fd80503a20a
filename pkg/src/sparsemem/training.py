"""Episode training: BPTT with journal rollback, RMSProp, curriculum.

The trainer is serial by default for reproducibility; setting workers
above one runs hogwild-style threads that share the parameter arrays
and the optimizer's second-moment accumulators without locks, each
with a private memory state, journal, and momentum buffer. The serial
path is bit-deterministic for a fixed seed.

Loss is sigmoid cross-entropy per output bit in units of bits, masked
to answer steps; gradients are clipped by global norm.
"""

from __future__ import annotations

import json
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, fields, replace

import numpy as np

from .container import load_file, save_file
from .controller import lstm_backward, lstm_step
from .model import LN2, Forward, Margins, Model, build_model
from .sparse import ContractViolation
from .tasks import TaskConfig, batch_episodes, input_width, output_width


class TrainingAbort(RuntimeError):
    """Raised when the run cannot continue (NaN gradients and the like)."""


@dataclass
class TrainConfig:
    task: str = "copy"
    model: str = "sam"
    slots: int = 64
    task_word: int = 8
    lr: float = 1e-5
    minibatch: int = 8
    workers: int = 8
    rms_decay: float = 0.9
    rms_eps: float = 1e-6
    rms_momentum: float = 0.9
    grad_clip: float = 10.0
    threshold: float = 0.01      # curriculum: bits/step to trigger doubling
    patience: int = 100          # curriculum: window length in minibatches
    h0: int = 1                  # curriculum: starting max level
    episodes: int = 20000        # minibatch budget
    hidden: int = 100
    mem_word: int = 32
    mem_k: int = 4
    heads: int = 4
    k_link: int = 8
    seed: int = 0
    checkpoint_every: int = 1000

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractViolation("learning-rate must be > 0")
        if self.minibatch < 1:
            raise ContractViolation("minibatch must be >= 1")
        if self.workers < 1:
            raise ContractViolation("workers must be >= 1")
        if self.h0 < 1:
            raise ContractViolation("initial curriculum level must be >= 1")
        if self.patience < 1:
            raise ContractViolation("patience must be >= 1")


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def load_train_config(path: str) -> TrainConfig:
    """Parse a key=value config file. Unknown keys are usage errors."""
    cfg = TrainConfig()
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(
                    f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in _CONFIG_TYPES:
                raise ContractViolation(f"unknown config key {key!r}")
            kind = _CONFIG_TYPES[key]
            if kind == "int":
                values[key] = int(raw)
            elif kind == "float":
                values[key] = float(raw)
            else:
                values[key] = raw
    cfg = replace(cfg, **values)
    cfg.validate()
    return cfg


def build_from_config(cfg: TrainConfig) -> tuple[Model, TaskConfig]:
    cfg.validate()
    tcfg = TaskConfig(cfg.task, max(cfg.h0, 1), word=cfg.task_word)
    model = build_model(cfg.model, input_width(tcfg), output_width(tcfg),
                        cfg.slots, hidden=cfg.hidden, word=cfg.mem_word,
                        k=cfg.mem_k, heads=cfg.heads, k_link=cfg.k_link,
                        seed=cfg.seed)
    return model, tcfg


# ---------------------------------------------------------------- optimizer

class OptState:
    """RMSProp state. `sq` is shared across hogwild workers; each worker
    passes its own momentum dict."""

    def __init__(self, params: dict):
        self.sq = {k: np.zeros_like(v) for k, v in params.items()}
        self.updates = 0

    def new_momentum(self, params: dict) -> dict:
        return {k: np.zeros_like(v) for k, v in params.items()}


def clip_global_norm(grads: dict, limit: float) -> float:
    """Scale grads in place to the given global l2 norm; returns the
    pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if limit > 0 and norm > limit:
        scale = limit / norm
        for g in grads.values():
            g *= scale
    return norm


def rmsprop_update(params: dict, grads: dict, opt: OptState, momentum: dict,
                   *, lr: float, decay: float = 0.9, eps: float = 1e-6,
                   beta: float = 0.9) -> None:
    """Moving-average-of-squares step with heavy-ball momentum:

        sq   <- decay sq + (1 - decay) g^2
        mom  <- beta mom + lr g / sqrt(sq + eps)
        p    <- p - mom

    A NaN anywhere in the gradients aborts with a diagnostic naming the
    parameter block, because continuing would silently poison sq.
    """
    for key, g in grads.items():
        bad = np.isnan(g).sum()
        if bad:
            raise TrainingAbort(
                f"NaN gradient in block {key!r} ({int(bad)} of {g.size} "
                f"entries) at update {opt.updates}; aborting")
    for key, g in grads.items():
        sq = opt.sq[key]
        sq *= decay
        sq += (1.0 - decay) * g * g
        m = momentum[key]
        m *= beta
        m += lr * g / np.sqrt(sq + eps)
        params[key] -= m
    opt.updates += 1


# --------------------------------------------------------------- curriculum

class CurriculumState:
    """Max difficulty h plus the recent-loss window that can double it."""

    __slots__ = ("h", "window", "patience", "threshold", "episodes_at_level")

    def __init__(self, h0: int = 1, threshold: float = 0.01, patience: int = 100):
        if h0 < 1:
            raise ContractViolation("h must start >= 1")
        self.h = h0
        self.threshold = threshold
        self.patience = patience
        self.window = deque(maxlen=patience)
        self.episodes_at_level = 0


def curriculum_step(cur: CurriculumState, batch_loss: float,
                    rng: np.random.Generator) -> int:
    """Fold one minibatch loss into the window, double h when the full
    window's average is below the threshold, then sample the next level
    uniformly from the integers {0..h}."""
    cur.window.append(float(batch_loss))
    cur.episodes_at_level += 1
    if (len(cur.window) == cur.patience
            and sum(cur.window) / cur.patience < cur.threshold):
        cur.h *= 2
        cur.window.clear()
        cur.episodes_at_level = 0
    return int(rng.integers(0, cur.h + 1))


# ------------------------------------------------------------ episode runner

def run_episode(model: Model, inputs, targets, mask, states=None,
                *, debug_hash: bool = False) -> tuple[float, dict, Forward]:
    """Forward + backward over one episode batch.

    The backward pass reverts every journal entry, so the memory states
    it was given end identical to how they started; with debug_hash the
    sparse engine verifies that with a full state fingerprint.
    """
    before = None
    if debug_hash and not model.cfg.memory.dense:
        from .memory import state_fingerprint
        if states is None:
            states = model.init_states(np.asarray(inputs).shape[0])
        before = [state_fingerprint(st) for st in states]
    fw = model.forward(inputs, targets, mask, states)
    grads = model.backward(fw)
    if before is not None:
        from .memory import state_fingerprint
        after = [state_fingerprint(st) for st in fw.states]
        if after != before:
            raise ContractViolation("memory state hash changed across an episode")
    return fw.loss, grads, fw


# ------------------------------------------------------------ gradient check

def _fd_probe(loss_fn, flat: np.ndarray, i: int, eps: float) -> float:
    keep = flat[i]
    flat[i] = keep + eps
    lp = loss_fn()
    flat[i] = keep - eps
    lm = loss_fn()
    flat[i] = keep
    return (lp - lm) / (2.0 * eps)


def gradient_check(model, inputs, targets, mask, *, eps: float = 1e-5,
                   tolerance: float = 1e-5) -> dict:
    """Central-difference check of the full analytic gradient.

    For models with temporal linkage the directional read weights are
    captured once and replayed frozen, matching the backward pass's
    stop-gradient convention. When a coordinate's difference quotient
    contradicts the analytic value, it is re-probed at smaller step
    sizes: a quotient that settles to the analytic value as the step
    shrinks had a discrete decision boundary (slot choice, eviction
    order) inside the original probe window, not a gradient bug. A
    genuinely wrong backward pass is self-consistent across step sizes
    and fails regardless.

    Returns a report dict; `ok` is the norm-based verdict.
    """
    override = None
    if getattr(model, "cfg", None) is not None and model.cfg.linkage is not None:
        probe = model.forward(inputs, targets, mask, want_tape=False,
                              capture_directional=True)
        override = probe.stats["directional"]

    def loss_fn():
        return model.loss_only(inputs, targets, mask,
                               directional_override=override)

    margins = Margins()
    fw = model.forward(inputs, targets, mask, margins=margins,
                       directional_override=override)
    grads = model.backward(fw)
    keys = sorted(grads)
    ga = np.concatenate([grads[k].reshape(-1) for k in keys])
    gf = np.empty_like(ga)
    unstable = 0
    pos = 0
    for key in keys:
        flat = model.params[key].reshape(-1)
        an = grads[key].reshape(-1)
        for i in range(flat.size):
            fd = _fd_probe(loss_fn, flat, i, eps)
            if abs(fd - an[i]) > 1e-3 * max(abs(fd), abs(an[i]), 1e-4):
                fd_half = _fd_probe(loss_fn, flat, i, eps / 2.0)
                fd_q = _fd_probe(loss_fn, flat, i, eps / 4.0)
                if abs(fd_half - fd_q) <= 1e-3 * max(abs(fd_half),
                                                     abs(fd_q), 1e-4):
                    fd = fd_q
                else:
                    unstable += 1
            gf[pos] = fd
            pos += 1
    num = float(np.linalg.norm(ga - gf))
    den = max(float(np.linalg.norm(ga)), float(np.linalg.norm(gf)), 1e-300)
    rel = num / den
    scale = np.maximum(np.maximum(np.abs(ga), np.abs(gf)), 1e-4)
    entry_rel = float(np.max(np.abs(ga - gf) / scale))
    return {
        "ok": bool(rel <= tolerance and unstable == 0),
        "rel_error": rel,
        "entry_rel_error": entry_rel,
        "tolerance": tolerance,
        "unstable": unstable,
        "n_params": int(ga.size),
        "margins": {"sim": margins.sim, "access": margins.access,
                    "mix": margins.mix, "usage": margins.usage},
        "loss": fw.loss,
    }


class LstmOnly:
    """Memory-disabled reference model: plain LSTM plus an output head.

    Exists so the gradient checker has a baseline whose every path is
    textbook; it mirrors the Model interface the checker needs.
    """

    def __init__(self, input_width: int, output_width: int, hidden: int = 16,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        H = hidden
        self.hidden = H
        self.cfg = None
        self.params = {
            "wx": rng.uniform(-0.1, 0.1, (input_width, 4 * H)),
            "wh": rng.uniform(-0.1, 0.1, (H, 4 * H)),
            "b": np.zeros(4 * H),
            "wy": rng.uniform(-0.1, 0.1, (H, output_width)),
            "by": np.zeros(output_width),
        }
        self.params["b"][H:2 * H] = 1.0

    def _run(self, inputs, targets, mask, want_tape):
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        B, T, _ = inputs.shape
        H = self.hidden
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        denom = float(mask.sum()) or 1.0
        loss = 0.0
        tape = []
        for t in range(T):
            h, c, cache = lstm_step(self.params, inputs[:, t], h, c)
            y = h @ self.params["wy"] + self.params["by"]
            xe = np.logaddexp(0.0, y) - targets[:, t] * y
            loss += float((xe.sum(axis=1) * mask[:, t]).sum()) / LN2
            if want_tape:
                tape.append((cache, h, 1.0 / (1.0 + np.exp(-y))))
        return loss / denom, denom, tape, targets, mask

    def forward(self, inputs, targets, mask, states=None, **kw):
        loss, denom, tape, targets, mask = self._run(inputs, targets, mask, True)
        fw = Forward(loss, denom, 0, 0, tape, np.asarray(inputs, dtype=np.float64),
                     targets, mask, None, None, None, {})
        return fw

    def loss_only(self, inputs, targets, mask, **kw):
        return self._run(inputs, targets, mask, False)[0]

    def backward(self, fw):
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        B, T, _ = fw.inputs.shape
        H = self.hidden
        d_h = np.zeros((B, H))
        d_c = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            cache, h, probs = fw.tape[t]
            d_y = (probs - fw.targets[:, t]) \
                * (fw.mask[:, t][:, None] / (LN2 * fw.denom))
            grads["wy"] += h.T @ d_y
            grads["by"] += d_y.sum(axis=0)
            d_h = d_h + d_y @ self.params["wy"].T
            _, d_h, d_c = lstm_backward(self.params, cache, d_h, d_c, grads)
        return grads


# ------------------------------------------------------------------ trainer

def _metrics_line(episode: int, level: int, loss: float, wall: float,
                  journal_bytes: float) -> str:
    return json.dumps({"episode": episode, "level": level, "loss": loss,
                       "wall_time": wall, "journal_bytes": journal_bytes},
                      sort_keys=True) + "\n"


class Trainer:
    """Owns the model, optimizer, curriculum, and metrics stream."""

    def __init__(self, cfg: TrainConfig, out_dir: str):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.model, self.task = build_from_config(cfg)
        self.opt = OptState(self.model.params)
        self.momentum = self.opt.new_momentum(self.model.params)
        self.curriculum = CurriculumState(cfg.h0, cfg.threshold, cfg.patience)
        self.rng = np.random.default_rng(cfg.seed)
        self.episode = 0
        self.next_level = None
        self._lock = threading.Lock()
        self._abort: BaseException | None = None

    # -- persistence --------------------------------------------------

    def checkpoint_path(self) -> str:
        return os.path.join(self.out_dir, "checkpoint.spmem")

    def metrics_path(self) -> str:
        return os.path.join(self.out_dir, "metrics.ndjson")

    def save_checkpoint(self) -> None:
        sections = {"format": "sparsemem-checkpoint-v1",
                    "config": {f.name: getattr(self.cfg, f.name)
                               for f in fields(TrainConfig)},
                    "episode": self.episode,
                    "opt_updates": self.opt.updates,
                    "curriculum": {"h": self.curriculum.h,
                                   "episodes_at_level":
                                       self.curriculum.episodes_at_level,
                                   "window": list(self.curriculum.window)},
                    "rng_state": self.rng.bit_generator.state,
                    "next_level": -1 if self.next_level is None
                                  else int(self.next_level)}
        for k, v in self.model.params.items():
            sections["param_" + k] = v
        for k, v in self.opt.sq.items():
            sections["sq_" + k] = v
        for k, v in self.momentum.items():
            sections["mom_" + k] = v
        save_file(self.checkpoint_path(), sections)

    @classmethod
    def resume(cls, out_dir: str) -> "Trainer":
        sections = load_file(os.path.join(out_dir, "checkpoint.spmem"))
        if sections.get("format") != "sparsemem-checkpoint-v1":
            raise ContractViolation("not a training checkpoint")
        cfg = TrainConfig(**sections["config"])
        tr = cls(cfg, out_dir)
        for k in tr.model.params:
            tr.model.params[k][:] = sections["param_" + k]
            tr.opt.sq[k][:] = sections["sq_" + k]
            tr.momentum[k][:] = sections["mom_" + k]
        tr.episode = int(sections["episode"])
        tr.opt.updates = int(sections["opt_updates"])
        cur = sections["curriculum"]
        tr.curriculum.h = int(cur["h"])
        tr.curriculum.episodes_at_level = int(cur["episodes_at_level"])
        tr.curriculum.window.extend(cur["window"])
        tr.rng.bit_generator.state = sections["rng_state"]
        nl = int(sections["next_level"])
        tr.next_level = None if nl < 0 else nl
        tr._truncate_metrics()
        return tr

    def _truncate_metrics(self) -> None:
        """Drop metric records past the checkpointed episode so a resumed
        run reproduces the uninterrupted stream."""
        path = self.metrics_path()
        if not os.path.exists(path):
            return
        kept = []
        with open(path) as fh:
            for line in fh:
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if rec.get("episode", 0) <= self.episode:
                    kept.append(line)
        with open(path, "w") as fh:
            fh.writelines(kept)

    # -- core loop ----------------------------------------------------

    def _one_minibatch(self, level: int, seeds, metrics_fh) -> float:
        t0 = time.perf_counter()
        tcfg = replace(self.task, level=max(1, level))
        inputs, targets, mask, _ = batch_episodes(tcfg, seeds)
        loss, grads, fw = run_episode(self.model, inputs, targets, mask)
        clip_global_norm(grads, self.cfg.grad_clip)
        rmsprop_update(self.model.params, grads, self.opt, self.momentum,
                       lr=self.cfg.lr, decay=self.cfg.rms_decay,
                       eps=self.cfg.rms_eps, beta=self.cfg.rms_momentum)
        wall = time.perf_counter() - t0
        with self._lock:
            self.episode += 1
            line = _metrics_line(self.episode, max(1, level), loss, wall,
                                 fw.stats["journal_bytes_per_step"])
            metrics_fh.write(line)
            metrics_fh.flush()
        return loss

    def train(self, *, episodes: int | None = None,
              stop_fn=None) -> dict:
        """Run up to `episodes` minibatches (default: config budget).

        stop_fn, when given, is called with (trainer, loss_window) after
        every minibatch and may return True to stop early. Returns a
        summary dict.
        """
        budget = episodes if episodes is not None else self.cfg.episodes
        recent = deque(maxlen=100)
        with open(self.metrics_path(), "a") as metrics_fh:
            if self.cfg.workers == 1:
                while self.episode < budget:
                    if self.next_level is None:
                        self.next_level = int(
                            self.rng.integers(0, self.curriculum.h + 1))
                    level = self.next_level
                    seeds = [int(s) for s in
                             self.rng.integers(0, 2 ** 62,
                                               size=self.cfg.minibatch)]
                    loss = self._one_minibatch(level, seeds, metrics_fh)
                    recent.append(loss)
                    self.next_level = curriculum_step(self.curriculum, loss,
                                                      self.rng)
                    if self.episode % self.cfg.checkpoint_every == 0:
                        self.save_checkpoint()
                    if stop_fn is not None and stop_fn(self, recent):
                        break
            else:
                self._train_hogwild(budget, recent, metrics_fh, stop_fn)
        self.save_checkpoint()
        return {"episodes": self.episode, "h": self.curriculum.h,
                "mean_recent_loss": float(np.mean(recent)) if recent else None}

    def _train_hogwild(self, budget, recent, metrics_fh, stop_fn) -> None:
        stop = threading.Event()

        def worker(wid: int) -> None:
            rng = np.random.default_rng((self.cfg.seed, wid))
            momentum = self.opt.new_momentum(self.model.params)
            try:
                while not stop.is_set():
                    with self._lock:
                        if self.episode >= budget:
                            break
                        level = int(rng.integers(0, self.curriculum.h + 1))
                    seeds = [int(s) for s in rng.integers(0, 2 ** 62,
                                                          size=self.cfg.minibatch)]
                    tcfg = replace(self.task, level=max(1, level))
                    inputs, targets, mask, _ = batch_episodes(tcfg, seeds)
                    t0 = time.perf_counter()
                    loss, grads, fw = run_episode(self.model, inputs,
                                                  targets, mask)
                    clip_global_norm(grads, self.cfg.grad_clip)
                    rmsprop_update(self.model.params, grads, self.opt,
                                   momentum, lr=self.cfg.lr,
                                   decay=self.cfg.rms_decay,
                                   eps=self.cfg.rms_eps,
                                   beta=self.cfg.rms_momentum)
                    wall = time.perf_counter() - t0
                    with self._lock:
                        self.episode += 1
                        ep = self.episode
                        metrics_fh.write(_metrics_line(
                            ep, max(1, level), loss, wall,
                            fw.stats["journal_bytes_per_step"]))
                        metrics_fh.flush()
                        recent.append(loss)
                        curriculum_step(self.curriculum, loss, self.rng)
                        if stop_fn is not None and stop_fn(self, recent):
                            stop.set()
            except BaseException as exc:    # propagate to the main thread
                self._abort = exc
                stop.set()

        threads = [threading.Thread(target=worker, args=(w,), daemon=True)
                   for w in range(self.cfg.workers)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if self._abort is not None:
            raise self._abort


def evaluate(model: Model, task: TaskConfig, levels, *, episodes: int = 20,
             seed: int = 12345) -> list[dict]:
    """Mean per-bit error at each difficulty level. Pure evaluation:
    parameters are never touched."""
    rows = []
    rng = np.random.default_rng(seed)
    for level in levels:
        if level < 1:
            raise ContractViolation(
                "level 0 would make an empty-answer episode; levels start at 1")
        tcfg = replace(task, level=int(level))
        errors = 0
        bits = 0
        for _ in range(episodes):
            seeds = [int(rng.integers(0, 2 ** 62))]
            inputs, targets, mask, eps = batch_episodes(tcfg, seeds)
            fw = model.forward(inputs, targets, mask, want_tape=False,
                               want_outputs=True)
            out = fw.outputs[0]
            hot = mask[0] > 0
            pred = out[hot] > 0.5
            want = targets[0][hot] > 0.5
            errors += int((pred != want).sum())
            bits += int(want.size)
        rows.append({"level": int(level),
                     "mean_bit_error": errors / bits if bits else 0.0,
                     "episodes": episodes})
    return rows
