"""Shared helpers for the test suite."""

import numpy as np
import pytest


def random_episode(rng, batch, steps, in_w, out_w):
    """Random real inputs, binary targets, all-steps mask."""
    inputs = rng.normal(size=(batch, steps, in_w))
    targets = (rng.random((batch, steps, out_w)) > 0.5).astype(np.float64)
    mask = np.ones((batch, steps))
    return inputs, targets, mask


def dense_softmax_read(mem, live, q, beta, k):
    """Reference content read: full softmax over live rows, keep the k
    largest weights, renormalize. Returns (slots sorted, weights)."""
    live = np.asarray(sorted(live), dtype=np.int64)
    rows = mem[live]
    qn = np.sqrt(q @ q)
    rn = np.sqrt((rows * rows).sum(axis=1))
    sims = np.zeros(live.size)
    ok = (rn > 0) & (qn > 0)
    sims[ok] = (rows[ok] @ q) / (qn * rn[ok])
    z = beta * sims
    z = z - z.max()
    e = np.exp(z)
    w = e / e.sum()
    if live.size > k:
        keep = np.argsort(-w, kind="stable")[:k]
        keep.sort()
        live, w = live[keep], w[keep]
    return live, w / w.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
