"""Recurrent controller: one LSTM layer, a linear interface projection
per head, and an output layer over [hidden; read words].

All forward functions take a leading batch dimension and return the
caches their backward twins need. Parameters live in a plain dict of
real64 arrays so optimizers and finite-difference checks can iterate
them generically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import ContractViolation


@dataclass
class ControllerConfig:
    input_width: int
    output_width: int
    hidden: int = 100
    heads: int = 4
    word: int = 32
    read_modes: bool = False    # adds a 3-way read-mode head for linkage models

    @property
    def read_width(self) -> int:
        return self.heads * self.word

    @property
    def per_head(self) -> int:
        return 2 * self.word + 3 + (3 if self.read_modes else 0)

    @property
    def iface_width(self) -> int:
        return self.heads * self.per_head


def init_params(cfg: ControllerConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform(-0.1, 0.1) weights, zero biases, forget-gate bias +1."""
    rng = np.random.default_rng(seed)
    H = cfg.hidden
    X = cfg.input_width + cfg.read_width
    params = {
        "wx": rng.uniform(-0.1, 0.1, (X, 4 * H)),
        "wh": rng.uniform(-0.1, 0.1, (H, 4 * H)),
        "b": np.zeros(4 * H),
        "wp": rng.uniform(-0.1, 0.1, (H, cfg.iface_width)),
        "bp": np.zeros(cfg.iface_width),
        "wy": rng.uniform(-0.1, 0.1, (H + cfg.read_width, cfg.output_width)),
        "by": np.zeros(cfg.output_width),
    }
    params["b"][H : 2 * H] = 1.0
    return params


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def lstm_step(params: dict, x_cat: np.ndarray, h: np.ndarray, c: np.ndarray):
    """Standard LSTM cell. Returns (h', c', cache)."""
    H = h.shape[1]
    pre = x_cat @ params["wx"] + h @ params["wh"] + params["b"]
    i = _sigmoid(pre[:, :H])
    f = _sigmoid(pre[:, H : 2 * H])
    g = np.tanh(pre[:, 2 * H : 3 * H])
    o = _sigmoid(pre[:, 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    cache = (x_cat, h, c, i, f, g, o, tc)
    return h_new, c_new, cache


def lstm_backward(params: dict, cache, d_h: np.ndarray, d_c: np.ndarray, grads: dict):
    """Backward of lstm_step; accumulates into grads. Returns
    (d_x_cat, d_h_prev, d_c_prev)."""
    x_cat, h_prev, c_prev, i, f, g, o, tc = cache
    d_o = d_h * tc
    d_cn = d_c + d_h * o * (1.0 - tc * tc)
    d_f = d_cn * c_prev
    d_c_prev = d_cn * f
    d_i = d_cn * g
    d_g = d_cn * i
    d_pre = np.concatenate(
        [
            d_i * i * (1.0 - i),
            d_f * f * (1.0 - f),
            d_g * (1.0 - g * g),
            d_o * o * (1.0 - o),
        ],
        axis=1,
    )
    grads["wx"] += x_cat.T @ d_pre
    grads["wh"] += h_prev.T @ d_pre
    grads["b"] += d_pre.sum(axis=0)
    d_x_cat = d_pre @ params["wx"].T
    d_h_prev = d_pre @ params["wh"].T
    return d_x_cat, d_h_prev, d_c_prev


class Interface:
    """Squashed per-head control values for one step.

    q, a: (B, heads, word); alpha, gamma, beta: (B, heads);
    modes: (B, heads, 3) on the simplex, or None.
    """

    __slots__ = ("raw", "q", "a", "alpha", "gamma", "beta", "modes", "beta_raw")

    def __init__(self, raw, q, a, alpha, gamma, beta, modes, beta_raw):
        self.raw = raw
        self.q = q
        self.a = a
        self.alpha = alpha
        self.gamma = gamma
        self.beta = beta
        self.modes = modes
        self.beta_raw = beta_raw


def interface_project(cfg: ControllerConfig, params: dict, h: np.ndarray) -> Interface:
    """Project hidden state to per-head (query, word, gates, sharpness)."""
    raw = h @ params["wp"] + params["bp"]
    B = h.shape[0]
    M, Hn = cfg.word, cfg.heads
    per = cfg.per_head
    r = raw.reshape(B, Hn, per)
    q = r[:, :, :M].copy()
    a = r[:, :, M : 2 * M].copy()
    alpha = _sigmoid(r[:, :, 2 * M])
    gamma = _sigmoid(r[:, :, 2 * M + 1])
    beta_raw = r[:, :, 2 * M + 2]
    beta = _softplus(beta_raw) + 1e-6
    modes = None
    if cfg.read_modes:
        z = r[:, :, 2 * M + 3 : 2 * M + 6]
        z = z - z.max(axis=2, keepdims=True)
        e = np.exp(z)
        modes = e / e.sum(axis=2, keepdims=True)
    return Interface(raw, q, a, alpha, gamma, beta, modes, beta_raw)


def interface_backward(cfg: ControllerConfig, params: dict, h: np.ndarray,
                       iface: Interface, d_q, d_a, d_alpha, d_gamma, d_beta,
                       d_modes, grads: dict) -> np.ndarray:
    """Backward of interface_project; returns dL/dh."""
    B = h.shape[0]
    M, Hn = cfg.word, cfg.heads
    d_raw = np.zeros((B, Hn, cfg.per_head))
    d_raw[:, :, :M] = d_q
    d_raw[:, :, M : 2 * M] = d_a
    d_raw[:, :, 2 * M] = d_alpha * iface.alpha * (1.0 - iface.alpha)
    d_raw[:, :, 2 * M + 1] = d_gamma * iface.gamma * (1.0 - iface.gamma)
    d_raw[:, :, 2 * M + 2] = d_beta * _sigmoid(iface.beta_raw)
    if cfg.read_modes and d_modes is not None:
        m = iface.modes
        inner = (d_modes * m).sum(axis=2, keepdims=True)
        d_raw[:, :, 2 * M + 3 : 2 * M + 6] = m * (d_modes - inner)
    d_flat = d_raw.reshape(B, cfg.iface_width)
    grads["wp"] += h.T @ d_flat
    grads["bp"] += d_flat.sum(axis=0)
    return d_flat @ params["wp"].T


def output_combine(cfg: ControllerConfig, params: dict, h: np.ndarray,
                   reads: np.ndarray) -> np.ndarray:
    """y = affine([hidden; read words])."""
    if reads.shape[1] != cfg.read_width:
        raise ContractViolation("read width mismatch")
    return np.concatenate([h, reads], axis=1) @ params["wy"] + params["by"]


def output_backward(cfg: ControllerConfig, params: dict, h: np.ndarray,
                    reads: np.ndarray, d_y: np.ndarray, grads: dict):
    """Returns (dL/dh, dL/dreads)."""
    hr = np.concatenate([h, reads], axis=1)
    grads["wy"] += hr.T @ d_y
    grads["by"] += d_y.sum(axis=0)
    d_hr = d_y @ params["wy"].T
    H = h.shape[1]
    return d_hr[:, :H], d_hr[:, H:]
