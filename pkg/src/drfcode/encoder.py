"""Two-phase DRF encoder.

Phase I sends the zero-padded message antipodally.  Phase II runs a
unidirectional LSTM for K+1 steps; step k emits one symbol on each parity
stream.  Codeword layout (0-based positions)::

    [ phase I: 0..K | parity 1: K+1..2K+1 | parity 2: 2K+2..3K+2 ]

Transmission order is phase I first, then for each step k the parity-1
symbol followed by the parity-2 symbol.  With that order every feature the
LSTM consumes at step k has already been fed back, which the interleaving
guarantees and :class:`CausalityError` enforces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .channel import block_length
from .csi import FadingPrior, causal_estimates
from .nn import Dense, LSTMWeights, lstm_cell, param


class CausalityError(RuntimeError):
    pass


def phase_positions(K: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = K + 1
    return np.arange(0, n), np.arange(n, 2 * n), np.arange(2 * n, 3 * n)


def transmission_order(K: int) -> np.ndarray:
    """Codeword positions sorted by the channel use in which they are sent."""
    p1, s1, s2 = phase_positions(K)
    return np.concatenate([p1, np.column_stack([s1, s2]).ravel()])


def transmission_time(K: int) -> np.ndarray:
    """Inverse of :func:`transmission_order`: channel use index of each position."""
    order = transmission_order(K)
    t = np.empty_like(order)
    t[order] = np.arange(order.size)
    return t


def antipodal_padded(bits) -> np.ndarray:
    """[b, 0] mapped to 2b-1; accepts (K,) or (B, K)."""
    b = np.asarray(bits)
    if not np.all((b == 0) | (b == 1)):
        raise ValueError("message must be binary")
    b = np.atleast_2d(b).astype(float)
    padded = np.concatenate([b, np.zeros((b.shape[0], 1))], axis=1)
    return 2.0 * padded - 1.0


def input_dim(fading: str, receivers: int = 1) -> int:
    if receivers == 2:
        return 1 + 2 + 4
    return 4 if fading == "awgn" else 7


def power_reallocate(c, w, second_moment):
    """x = w*c / kappa with kappa = sqrt(second_moment * mean(w^2)) per position.

    ``c`` is (B, L) and ``w`` (L,); ``second_moment`` is the per-position
    E[c^2] (batch statistic or a frozen running value).
    """
    c = np.asarray(c, dtype=float)
    w = np.asarray(w, dtype=float)
    return w * c / np.sqrt(np.asarray(second_moment) * np.mean(w * w))


class PowerReallocation:
    """Learned per-position weights with unit average codeword power.

    Training mode normalizes each position by its batch second moment and
    tracks a running copy; eval mode uses the frozen running values.
    """

    def __init__(self, L: int, name: str = "encoder.power", momentum: float = 0.9):
        self.w = param(np.ones(L), f"{name}.w")
        self.running_m2 = np.ones(L)
        self.momentum = momentum
        self.name = name

    def parameters(self) -> dict[str, Tensor]:
        return {self.w.name: self.w}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_m2": self.running_m2}

    def load_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        self.running_m2 = np.array(bufs[f"{self.name}.running_m2"])

    def __call__(self, c: Tensor, positions, training: bool, update_stats: bool = True) -> Tensor:
        if np.any(self.w.data <= 0):
            raise ValueError("power weights must be strictly positive")
        positions = np.asarray(positions)
        if training:
            m2 = ad.mean(ad.mul(c, c), axis=0, keepdims=True)
            if np.any(m2.data == 0):
                raise ValueError("zero batch power at a codeword position")
            if update_stats:
                mom = self.momentum
                self.running_m2[positions] = mom * self.running_m2[positions] + (1 - mom) * m2.data[0]
            scale = ad.sqrt(m2)
        else:
            scale = np.sqrt(self.running_m2[positions])
        w = self.w
        rms_w = ad.sqrt(ad.mean(ad.mul(w, w)))
        w_pos = w[positions.tolist()]
        return ad.div(ad.mul(ad.div(c, scale), w_pos), rms_w)


@dataclass
class EncoderConfig:
    K: int
    hidden: int | None = None
    fading: str = "awgn"
    receivers: int = 1
    csi: str = "exact"
    zero_feedback: bool = False

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = self.K
        if self.csi not in ("exact", "estimated"):
            raise ValueError(f"csi must be 'exact' or 'estimated', got {self.csi!r}")
        if self.receivers not in (1, 2):
            raise ValueError("only one or two receivers are supported")

    @property
    def L(self) -> int:
        return block_length(self.K)


class DRFEncoder:
    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        d_in = input_dim(config.fading, config.receivers)
        self.lstm = LSTMWeights.init(d_in, config.hidden, rng, "encoder.lstm")
        self.out = Dense.init(config.hidden, 2, rng, "encoder.out")
        self.power = PowerReallocation(config.L)

    def parameters(self) -> dict[str, Tensor]:
        return {**self.lstm.parameters(), **self.out.parameters(), **self.power.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        return self.power.buffers()

    def load_buffers(self, bufs) -> None:
        self.power.load_buffers(bufs)

    def session(self, bits, training: bool = False, update_stats: bool = True,
                sigma_n2: float = 0.0, sigma_m2: float = 0.0,
                prior: FadingPrior | None = None) -> "EncoderSession":
        return EncoderSession(self, bits, training, update_stats, sigma_n2, sigma_m2, prior)


def encode_phase1(bits, power: PowerReallocation, training: bool = False,
                  update_stats: bool = True) -> tuple[np.ndarray, Tensor]:
    c = antipodal_padded(bits)
    K = c.shape[1] - 1
    return c, power(Tensor(c), phase_positions(K)[0], training, update_stats)


class EncoderSession:
    """Stepwise transducer: alternate :meth:`emit` and :meth:`consume`.

    ``emit`` returns ``(positions, x)`` for the next block of channel uses
    (the whole of phase I first, then two parity symbols per step).
    ``consume`` takes the fed-back observations of exactly those symbols,
    one (B, n) array or tensor per receiver, plus the fading amplitudes of
    those positions when the encoder is given exact CSI.
    """

    def __init__(self, enc: DRFEncoder, bits, training, update_stats, sigma_n2, sigma_m2, prior):
        self.enc = enc
        cfg = enc.config
        self.K = cfg.K
        self.training = training
        self.update_stats = update_stats
        self.fading = cfg.fading
        self.sigma_n2, self.sigma_m2 = sigma_n2, sigma_m2
        self.prior = prior or FadingPrior.for_mode(cfg.fading)
        self.c_I = antipodal_padded(bits)
        self.B = self.c_I.shape[0]
        H = cfg.hidden
        self.h = Tensor(np.zeros((self.B, H)))
        self.c = Tensor(np.zeros((self.B, H)))
        self.step = -1  # -1: phase I pending
        self._pending: np.ndarray | None = None
        self._pending_x: Tensor | None = None
        # per position: noise-estimate tensors per receiver, and fading feature
        self.noise: dict[int, list[Tensor]] = {}
        self.alpha_feat: dict[int, np.ndarray] = {}
        self._slow_xz = np.zeros(self.B)
        self._slow_xx = np.zeros(self.B)
        self.emitted: list[tuple[np.ndarray, Tensor]] = []

    @property
    def done(self) -> bool:
        return self.step > self.K and self._pending is None

    def emit(self) -> tuple[np.ndarray, Tensor]:
        if self._pending is not None:
            raise CausalityError("previous symbols have not been fed back yet")
        if self.step > self.K:
            raise RuntimeError("codeword already complete")
        if self.step < 0:
            pos = phase_positions(self.K)[0]
            x = self.enc.power(Tensor(self.c_I), pos, self.training, self.update_stats)
        else:
            k = self.step
            feats = self.features(k)
            self.h, self.c = lstm_cell(feats, self.h, self.c, self.enc.lstm)
            par = ad.sigmoid(self.enc.out(self.h))
            par = ad.sub(ad.mul(par, 2.0), 1.0)
            _, s1, s2 = phase_positions(self.K)
            pos = np.array([s1[k], s2[k]])
            x = self.enc.power(par, pos, self.training, self.update_stats)
        self._pending, self._pending_x = pos, x
        self.emitted.append((pos, x))
        return pos, x

    def consume(self, feedback, alpha=None) -> None:
        if self._pending is None:
            raise CausalityError("nothing was emitted")
        pos, x = self._pending, self._pending_x
        if isinstance(feedback, (Tensor, np.ndarray)):
            feedback = [feedback]
        if len(feedback) != self.enc.config.receivers:
            raise ValueError("one feedback stream per receiver expected")
        a = self._fading_for(pos, x, feedback[0], alpha)
        for j, p in enumerate(pos.tolist()):
            self.alpha_feat[p] = a[:, j:j + 1]
        if self.enc.config.zero_feedback:
            est = [Tensor(np.zeros((self.B, len(pos)))) for _ in feedback]
        else:
            est = [ad.sub(z, ad.mul(x, a)) for z in feedback]
        for j, p in enumerate(pos.tolist()):
            self.noise[p] = [e[:, j:j + 1] for e in est]
        self._pending = self._pending_x = None
        self.step += 1

    def _fading_for(self, pos, x: Tensor, z, alpha) -> np.ndarray:
        if self.fading == "awgn":
            return np.ones((self.B, len(pos)))
        if self.enc.config.csi == "exact":
            if alpha is None:
                raise ValueError("exact-CSI encoder needs the fading amplitudes")
            return np.asarray(alpha, dtype=float).reshape(self.B, len(pos))
        xd = x.data
        zd = z.data if isinstance(z, Tensor) else np.asarray(z)
        if self.fading == "fast_rayleigh":
            return causal_estimates(xd, zd, self.prior, self.sigma_n2, self.sigma_m2, slow=False)
        xz = self._slow_xz[:, None] + np.cumsum(xd * zd, axis=1)
        xx = self._slow_xx[:, None] + np.cumsum(xd * xd, axis=1)
        self._slow_xz, self._slow_xx = xz[:, -1], xx[:, -1]
        s = self.sigma_n2 + self.sigma_m2
        den = self.prior.var * xx + s
        return np.where(den == 0, self.prior.mean,
                        (self.prior.var * xz + s * self.prior.mean) / np.where(den == 0, 1.0, den))

    def _noise(self, p: int) -> list[Tensor]:
        if p not in self.noise:
            raise CausalityError(f"feedback for position {p} is not available yet")
        return self.noise[p]

    def features(self, k: int) -> Tensor:
        """LSTM input at phase-II step k (0-based)."""
        K = self.K
        p1, s1, s2 = phase_positions(K)
        zeros = Tensor(np.zeros((self.B, 1)))
        cols: list = [Tensor(self.c_I[:, k:k + 1])]
        nI = self._noise(int(p1[k]))
        if k == 0:
            d1 = [zeros] * len(nI)
            d2 = [zeros] * len(nI)
        else:
            d1 = self._noise(int(s1[k - 1]))
            d2 = self._noise(int(s2[k - 1]))
        if len(nI) == 1:
            cols += [nI[0], d1[0], d2[0]]
        else:
            cols += list(nI) + [d1[0], d2[0], d1[1], d2[1]]
        if self.fading != "awgn":
            zero = np.zeros((self.B, 1))
            cols += [Tensor(self.alpha_feat[int(p1[k])]),
                     Tensor(zero if k == 0 else self.alpha_feat[int(s1[k - 1])]),
                     Tensor(zero if k == 0 else self.alpha_feat[int(s2[k - 1])])]
        return ad.concat(cols, axis=1)

    def codeword(self) -> Tensor:
        """Emitted symbols assembled in layout order, shape (B, L)."""
        if not self.done:
            raise RuntimeError("codeword is incomplete")
        x_I = self.emitted[0][1]
        steps = ad.stack([x for _, x in self.emitted[1:]], axis=1)  # (B, K+1, 2)
        return ad.concat([x_I, steps[:, :, 0], steps[:, :, 1]], axis=1)


def build_phase2_inputs(bits, z, x, alpha=None, fading: str = "awgn") -> list[Tensor]:
    """Feature sequence for all K+1 phase-II steps from complete streams.

    ``z``, ``x`` and ``alpha`` are (B, L) arrays in layout order; ``z[:, p]``
    is the fed-back observation of position p.  Feature columns per step:
    message symbol, phase-I noise estimate, delayed noise estimates of both
    parity streams and, for fading channels, the phase-I amplitude and the
    delayed parity amplitudes.  Delayed entries are zero at the first step.
    """
    c = antipodal_padded(bits)
    B, n = c.shape
    K = n - 1
    z, x = np.atleast_2d(z), np.atleast_2d(x)
    if z.shape[1] != block_length(K) or x.shape != z.shape:
        raise ValueError(f"streams must be (B, {block_length(K)})")
    a = np.ones_like(x) if alpha is None else np.atleast_2d(alpha)
    est = z - a * x
    p1, s1, s2 = phase_positions(K)

    def delayed(v, idx):
        return np.concatenate([np.zeros((B, 1)), v[:, idx[:-1]]], axis=1)

    cols = [c, est[:, p1], delayed(est, s1), delayed(est, s2)]
    if fading != "awgn":
        cols += [a[:, p1], delayed(a, s1), delayed(a, s2)]
    F = np.stack(cols, axis=2)  # (B, K+1, d)
    return [Tensor(F[:, k, :]) for k in range(n)]
