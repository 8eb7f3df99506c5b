"""Bi-LSTM decoder with SNR-aware attention over the extracted features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channel import block_length
from .csi import receiver_compensate
from .nn import BatchNorm, Dense, LSTMWeights, bilstm_layer


class SNRAttention:
    """Two sigmoid layers mapping (sigma_n^2, sigma_m^2) to K x 2H coefficients."""

    def __init__(self, K: int, hidden: int, rng: np.random.Generator, name: str):
        self.K, self.H = K, hidden
        n_out = 2 * hidden * K
        self.fc1 = Dense.init(2, 2 * n_out, rng, f"{name}.fc1")
        self.fc2 = Dense.init(2 * n_out, n_out, rng, f"{name}.fc2")

    def parameters(self) -> dict[str, Tensor]:
        return {**self.fc1.parameters(), **self.fc2.parameters()}

    def __call__(self, v: Tensor) -> Tensor:
        a = ad.sigmoid(self.fc2(ad.sigmoid(self.fc1(v))))
        return ad.reshape(a, (v.shape[0], self.K, 2 * self.H))


def noise_side_info(sigma_n2, sigma_m2) -> np.ndarray:
    """(n, 2) attention input from scalar or per-sample variances."""
    sn = np.atleast_1d(np.asarray(sigma_n2, dtype=float))
    sm = np.atleast_1d(np.asarray(sigma_m2, dtype=float))
    if np.any(sn < 0) or np.any(sm < 0):
        raise ValueError("noise variances must be non-negative")
    sn, sm = np.broadcast_arrays(sn, sm)
    return np.column_stack([sn, sm])


def attention_weights(sigma_n2, sigma_m2, attention: SNRAttention) -> Tensor:
    return attention(Tensor(noise_side_info(sigma_n2, sigma_m2)))


@dataclass
class DecoderConfig:
    K: int
    hidden: int | None = None
    attention: bool = True
    rcsi: bool = False

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = self.K


class DRFDecoder:
    def __init__(self, config: DecoderConfig, rng: np.random.Generator, name: str = "decoder"):
        self.config = config
        self.name = name
        H = config.hidden
        self.l1 = (LSTMWeights.init(3, H, rng, f"{name}.l1.fw"), LSTMWeights.init(3, H, rng, f"{name}.l1.bw"))
        self.bn1 = BatchNorm(2 * H, f"{name}.bn1")
        self.l2 = (LSTMWeights.init(2 * H, H, rng, f"{name}.l2.fw"), LSTMWeights.init(2 * H, H, rng, f"{name}.l2.bw"))
        self.bn2 = BatchNorm(2 * H, f"{name}.bn2")
        self.attention = SNRAttention(config.K, H, rng, f"{name}.att") if config.attention else None
        self.head = Dense.init(2 * H, 1, rng, f"{name}.head")

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for w in (*self.l1, *self.l2):
            out.update(w.parameters())
        out.update(self.bn1.parameters())
        out.update(self.bn2.parameters())
        if self.attention is not None:
            out.update(self.attention.parameters())
        out.update(self.head.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {**self.bn1.buffers(), **self.bn2.buffers()}

    def load_buffers(self, bufs) -> None:
        self.bn1.load_buffers(bufs)
        self.bn2.load_buffers(bufs)

    def features(self, y: Tensor, training: bool, update_stats: bool = True) -> list[Tensor]:
        K = self.config.K
        seq = [y[:, [k, K + 1 + k, 2 * K + 2 + k]] for k in range(K + 1)]
        f = self.bn1.sequence(bilstm_layer(seq, *self.l1), training, update_stats)
        return self.bn2.sequence(bilstm_layer(f, *self.l2), training, update_stats)

    def decode(self, y, sigma_n2, sigma_m2, training: bool = False, alpha=None,
               update_stats: bool = True, unit_attention: bool = False) -> Tensor:
        """Bit probabilities (B, K) from received blocks y (B, L).

        ``sigma_n2``/``sigma_m2`` feed the attention network (scalars or
        per-sample arrays).  With ``rcsi`` enabled the received symbols are
        LMMSE-compensated with ``alpha`` first.  ``unit_attention`` replaces
        the coefficients by ones (ablation).
        """
        K, H = self.config.K, self.config.hidden
        y = ad.as_tensor(y)
        if y.data.ndim != 2 or y.shape[1] != block_length(K):
            raise ValueError(f"received block must have shape (B, {block_length(K)}), got {y.shape}")
        if self.config.rcsi:
            if alpha is None:
                raise ValueError("rcsi decoder needs fading amplitudes")
            y = receiver_compensate(y, alpha, float(np.mean(sigma_n2)))
        B = y.shape[0]
        F = self.features(y, training, update_stats)
        feats = ad.stack(F[:K], axis=1)  # (B, K, 2H)
        if self.attention is not None and not unit_attention:
            feats = ad.mul(feats, attention_weights(sigma_n2, sigma_m2, self.attention))
        else:
            noise_side_info(sigma_n2, sigma_m2)  # validates inputs
        logits = self.head(ad.reshape(feats, (B * K, 2 * H)))
        return ad.sigmoid(ad.reshape(logits, (B, K)))


def harden(probs) -> np.ndarray:
    """Threshold at 0.5, ties to 1."""
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (p >= 0.5).astype(np.int8)


def bit_errors(bits_hat, bits) -> tuple[np.ndarray, np.ndarray]:
    """Per-block bit-error counts and block-error indicators."""
    diff = np.atleast_2d(bits_hat) != np.atleast_2d(bits)
    per_block = diff.sum(axis=1)
    return per_block, per_block > 0


def error_rates(bits_hat, bits) -> tuple[float, float]:
    per_block, blocks = bit_errors(bits_hat, bits)
    K = np.atleast_2d(bits).shape[1]
    return float(per_block.sum() / (K * per_block.size)), float(blocks.mean())
