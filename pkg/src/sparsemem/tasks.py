"""Synthetic episode generators: copy, associative recall, priority sort.

Episodes are binary word sequences on 8-bit data channels with a small
number of flag channels appended (delimiter, cue, priority). Targets
are masked so only answer steps contribute to the loss. Every
generator is a pure function of (config, seed): the same pair always
yields byte-identical arrays.

Encodings, since these are conventions rather than given facts:

copy    level L words, then a delimiter pulse, then L answer steps.
        input channels = word + 1 delimiter. T = 2L + 1.
recall  level P (key, value) pairs presented as alternating key/value
        steps; keys are pairwise distinct. A cue step replays one key
        (uniformly chosen) with the cue flag up; one answer step wants
        that key's value. Channels: pair-start flag + cue flag.
        T = 2P + 2.
sort    level n keys, each with a priority drawn from Uniform[-1, 1]
        (ties resampled) on a dedicated real channel; after a
        delimiter, the top m keys by descending priority are the
        answers. m defaults to ceil(0.8 n). T = n + 1 + m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import dump, load
from .sparse import ContractViolation

TASK_NAMES = ("copy", "recall", "sort")


@dataclass
class TaskConfig:
    task: str
    level: int
    word: int = 8
    seed: int = 0
    sort_m: int | None = None    # explicit answer count for sort; default ceil(0.8 n)

    def validate(self) -> None:
        if self.task not in TASK_NAMES:
            raise ContractViolation(f"unknown task {self.task!r}")
        if self.level < 1:
            raise ContractViolation("level must be >= 1 (no empty-answer episodes)")
        if self.word < 1:
            raise ContractViolation("word width must be >= 1")
        if self.task == "recall" and self.level > 2 ** self.word:
            raise ContractViolation(
                "more pairs than distinct keys exist at this word width")
        if self.sort_m is not None:
            if self.task != "sort":
                raise ContractViolation("sort_m only applies to the sort task")
            if not 1 <= self.sort_m <= self.level:
                raise ContractViolation("sort_m must be in [1, level]")


def input_width(cfg: TaskConfig) -> int:
    if cfg.task == "copy":
        return cfg.word + 1           # data + delimiter
    if cfg.task == "recall":
        return cfg.word + 2           # data + pair-start + cue
    return cfg.word + 2               # data + priority + delimiter


def output_width(cfg: TaskConfig) -> int:
    return cfg.word


@dataclass
class Episode:
    inputs: np.ndarray                # (T, input_width)
    targets: np.ndarray               # (T, output_width)
    mask: np.ndarray                  # (T,)
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]


def _rng(cfg: TaskConfig, seed) -> np.random.Generator:
    return np.random.default_rng(cfg.seed if seed is None else seed)


def gen_copy(cfg: TaskConfig, seed: int | None = None) -> Episode:
    cfg.validate()
    if cfg.task != "copy":
        raise ContractViolation("config is not for the copy task")
    rng = _rng(cfg, seed)
    L, W = cfg.level, cfg.word
    T = 2 * L + 1
    inputs = np.zeros((T, W + 1))
    targets = np.zeros((T, W))
    mask = np.zeros(T)
    words = (rng.random((L, W)) > 0.5).astype(np.float64)
    inputs[:L, :W] = words
    inputs[L, W] = 1.0
    targets[L + 1:, :] = words
    mask[L + 1:] = 1.0
    return Episode(inputs, targets, mask, {"task": "copy", "level": L,
                                           "words": words})


def _distinct_words(rng: np.random.Generator, n: int, width: int) -> np.ndarray:
    """n pairwise-distinct random bit words, resampling collisions."""
    seen = set()
    out = np.zeros((n, width))
    i = 0
    while i < n:
        w = (rng.random(width) > 0.5).astype(np.float64)
        key = w.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out[i] = w
        i += 1
    return out


def gen_recall(cfg: TaskConfig, seed: int | None = None) -> Episode:
    cfg.validate()
    if cfg.task != "recall":
        raise ContractViolation("config is not for the recall task")
    rng = _rng(cfg, seed)
    P, W = cfg.level, cfg.word
    T = 2 * P + 2
    inputs = np.zeros((T, W + 2))
    targets = np.zeros((T, W))
    mask = np.zeros(T)
    keys = _distinct_words(rng, P, W)
    values = (rng.random((P, W)) > 0.5).astype(np.float64)
    for p in range(P):
        inputs[2 * p, :W] = keys[p]
        inputs[2 * p, W] = 1.0        # pair-start flag on the key step
        inputs[2 * p + 1, :W] = values[p]
    cue = int(rng.integers(P))
    inputs[2 * P, :W] = keys[cue]
    inputs[2 * P, W + 1] = 1.0        # cue flag
    targets[2 * P + 1, :] = values[cue]
    mask[2 * P + 1] = 1.0
    return Episode(inputs, targets, mask,
                   {"task": "recall", "level": P, "keys": keys,
                    "values": values, "cue": cue})


def sort_answer_count(n: int, explicit: int | None = None) -> int:
    return explicit if explicit is not None else math.ceil(0.8 * n)


def gen_sort(cfg: TaskConfig, seed: int | None = None) -> Episode:
    cfg.validate()
    if cfg.task != "sort":
        raise ContractViolation("config is not for the sort task")
    rng = _rng(cfg, seed)
    n, W = cfg.level, cfg.word
    m = sort_answer_count(n, cfg.sort_m)
    T = n + 1 + m
    inputs = np.zeros((T, W + 2))
    targets = np.zeros((T, W))
    mask = np.zeros(T)
    keys = (rng.random((n, W)) > 0.5).astype(np.float64)
    while True:
        prio = rng.uniform(-1.0, 1.0, n)
        if np.unique(prio).size == n:
            break
    inputs[:n, :W] = keys
    inputs[:n, W] = prio
    inputs[n, W + 1] = 1.0            # delimiter
    order = np.argsort(-prio, kind="stable")[:m]
    targets[n + 1:, :] = keys[order]
    mask[n + 1:] = 1.0
    return Episode(inputs, targets, mask,
                   {"task": "sort", "level": n, "m": m, "keys": keys,
                    "priorities": prio})


_GENERATORS = {"copy": gen_copy, "recall": gen_recall, "sort": gen_sort}


def generate(cfg: TaskConfig, seed: int | None = None) -> Episode:
    cfg.validate()
    return _GENERATORS[cfg.task](cfg, seed)


def batch_episodes(cfg: TaskConfig, seeds) -> tuple[np.ndarray, np.ndarray, np.ndarray, list]:
    """Stack same-config episodes into (inputs, targets, mask) batch arrays."""
    eps = [generate(cfg, int(s)) for s in seeds]
    inputs = np.stack([e.inputs for e in eps])
    targets = np.stack([e.targets for e in eps])
    mask = np.stack([e.mask for e in eps])
    return inputs, targets, mask, eps


def bit_error(outputs: np.ndarray, episode: Episode) -> int:
    """Hamming distance between thresholded outputs and targets, masked."""
    if outputs.shape != episode.targets.shape:
        raise ContractViolation("outputs shape does not match targets")
    hot = episode.mask > 0
    pred = outputs[hot] > 0.5
    want = episode.targets[hot] > 0.5
    return int((pred != want).sum())


def masked_bits(episode: Episode) -> int:
    return int((episode.mask > 0).sum()) * episode.targets.shape[1]


def episode_to_record(ep: Episode) -> bytes:
    """Self-describing binary snapshot for regression fixtures."""
    meta = {}
    arrays = {}
    for k, v in ep.meta.items():
        if isinstance(v, np.ndarray):
            arrays["meta_" + k] = v
        else:
            meta[k] = v
    return dump({"inputs": ep.inputs, "targets": ep.targets, "mask": ep.mask,
                 "meta": meta, **arrays})


def record_to_episode(blob: bytes) -> Episode:
    sections = load(blob)
    meta = dict(sections["meta"])
    for k, v in sections.items():
        if k.startswith("meta_"):
            meta[k[5:]] = v
    return Episode(sections["inputs"], sections["targets"], sections["mask"], meta)
