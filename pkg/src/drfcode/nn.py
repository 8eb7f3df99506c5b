"""Layers built from the autodiff primitives: LSTM, bi-LSTM, batch norm, dense."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


def param(data, name: str) -> Tensor:
    return Tensor(np.array(data, dtype=ad.DTYPE), requires_grad=True, name=name)


@dataclass
class LSTMWeights:
    """Fused gate weights; columns are ordered input, forget, cell, output."""

    W: Tensor  # (d_in + H, 4H)
    b: Tensor  # (4H,)

    @property
    def hidden(self) -> int:
        return self.b.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[0] - self.hidden

    @classmethod
    def init(cls, d_in: int, hidden: int, rng: np.random.Generator, name: str) -> "LSTMWeights":
        bound = 1.0 / np.sqrt(hidden)
        W = rng.uniform(-bound, bound, size=(d_in + hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        return cls(param(W, f"{name}.W"), param(b, f"{name}.b"))

    def parameters(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, w: LSTMWeights) -> tuple[Tensor, Tensor]:
    H = w.hidden
    if x.shape[-1] != w.input_dim or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise DimensionError("lstm_cell", x.shape, h_prev.shape, c_prev.shape, w.W.shape)
    z = ad.add(ad.matmul(ad.concat([x, h_prev], axis=1), w.W), w.b)
    i = ad.sigmoid(z[:, 0:H])
    f = ad.sigmoid(z[:, H:2 * H])
    g = ad.tanh(z[:, 2 * H:3 * H])
    o = ad.sigmoid(z[:, 3 * H:4 * H])
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


def zero_state(batch: int, hidden: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden)))


def lstm_layer(sequence: list[Tensor], w: LSTMWeights, reverse: bool = False) -> list[Tensor]:
    """Run a unidirectional LSTM over a list of (B, d) tensors."""
    if not sequence:
        raise DimensionError("lstm_layer")
    h, c = zero_state(sequence[0].shape[0], w.hidden)
    steps = range(len(sequence) - 1, -1, -1) if reverse else range(len(sequence))
    out: list[Tensor | None] = [None] * len(sequence)
    for t in steps:
        h, c = lstm_cell(sequence[t], h, c, w)
        out[t] = h
    return out  # type: ignore[return-value]


def bilstm_layer(sequence: list[Tensor], fw: LSTMWeights, bw: LSTMWeights) -> list[Tensor]:
    """Per step, forward hidden state concatenated with the time-reversed pass: width 2H."""
    if fw.hidden != bw.hidden or fw.input_dim != bw.input_dim:
        raise DimensionError("bilstm_layer", fw.W.shape, bw.W.shape)
    hf = lstm_layer(sequence, fw)
    hb = lstm_layer(sequence, bw, reverse=True)
    return [ad.concat([a, b], axis=1) for a, b in zip(hf, hb)]


class BatchNorm:
    """Per-feature batch normalization over all (batch, time) rows.

    ``momentum`` weights the old running value: running = m*running + (1-m)*batch.
    """

    def __init__(self, features: int, name: str, momentum: float = 0.9, eps: float = 1e-5):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = param(np.ones(features), f"{name}.gamma")
        self.beta = param(np.zeros(features), f"{name}.beta")
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    def parameters(self) -> dict[str, Tensor]:
        return {self.gamma.name: self.gamma, self.beta.name: self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def load_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        self.running_mean = np.array(bufs[f"{self.name}.running_mean"])
        self.running_var = np.array(bufs[f"{self.name}.running_var"])

    def __call__(self, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
        if training:
            mu = ad.mean(x, axis=0, keepdims=True)
            centered = ad.sub(x, mu)
            var = ad.mean(ad.mul(centered, centered), axis=0, keepdims=True)
            xhat = ad.div(centered, ad.sqrt(ad.add(var, self.eps)))
            if update_stats:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1 - m) * mu.data[0]
                self.running_var = m * self.running_var + (1 - m) * var.data[0]
        else:
            xhat = ad.div(ad.sub(x, self.running_mean), np.sqrt(self.running_var + self.eps))
        return ad.add(ad.mul(xhat, self.gamma), self.beta)

    def sequence(self, seq: list[Tensor], training: bool, update_stats: bool = True) -> list[Tensor]:
        B = seq[0].shape[0]
        y = self(ad.concat(seq, axis=0), training, update_stats)
        return [y[t * B:(t + 1) * B] for t in range(len(seq))]


@dataclass
class Dense:
    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, name: str) -> "Dense":
        bound = np.sqrt(6.0 / (d_in + d_out))
        return cls(param(rng.uniform(-bound, bound, size=(d_in, d_out)), f"{name}.W"),
                   param(np.zeros(d_out), f"{name}.b"))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)

    def parameters(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}
