"""Forward fading channel, delayed noisy feedback link and sample generation.

Noise, fading and feedback-noise arrays are indexed by codeword position
(``0 .. L-1`` in the ``[phase I | parity 1 | parity 2]`` layout).  The
feedback noise stored at position ``p`` is the noise added when ``y_p`` is
returned to the transmitter one channel use later.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FADING_MODES = ("awgn", "slow_rayleigh", "fast_rayleigh")
NOISELESS = math.inf


def snr_db_to_variance(snr_db: float) -> float:
    """Noise variance for a unit-power signal; an infinite SNR (noiseless) maps to 0."""
    if isinstance(snr_db, str):
        snr_db = parse_snr(snr_db)
    if snr_db == math.inf:
        return 0.0
    return float(10.0 ** (-snr_db / 10.0))


def variance_to_snr_db(variance: float) -> float:
    if variance == 0:
        return NOISELESS
    return float(-10.0 * math.log10(variance))


def parse_snr(value) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("noiseless", "inf", "infinity"):
            return NOISELESS
        return float(value)
    return float(value)


@dataclass(frozen=True)
class MulticastSpec:
    forward_snr_db: tuple[float, float]
    feedback_snr_db: tuple[float, float] = (NOISELESS, NOISELESS)
    correlation: float = 0.0

    def __post_init__(self):
        if not -1.0 <= self.correlation <= 1.0:
            raise ValueError(f"noise correlation must lie in [-1, 1], got {self.correlation}")

    @property
    def sigma_n2(self) -> tuple[float, float]:
        return tuple(snr_db_to_variance(s) for s in self.forward_snr_db)  # type: ignore[return-value]

    @property
    def sigma_m2(self) -> tuple[float, float]:
        return tuple(snr_db_to_variance(s) for s in self.feedback_snr_db)  # type: ignore[return-value]


@dataclass(frozen=True)
class ChannelSpec:
    forward_snr_db: float = 0.0
    feedback_snr_db: float = NOISELESS
    fading: str = "awgn"
    rayleigh_omega: float = 1.0
    multicast: MulticastSpec | None = None

    def __post_init__(self):
        if self.fading not in FADING_MODES:
            raise ValueError(f"unknown fading mode {self.fading!r}; expected one of {FADING_MODES}")
        if self.rayleigh_omega <= 0:
            raise ValueError("rayleigh_omega must be positive")
        if self.multicast is not None and self.fading != "awgn":
            raise ValueError("multicast is only defined for the AWGN channel")

    @property
    def sigma_n2(self) -> float:
        return snr_db_to_variance(self.forward_snr_db)

    @property
    def sigma_m2(self) -> float:
        return snr_db_to_variance(self.feedback_snr_db)

    @property
    def rayleigh_sigma(self) -> float:
        return math.sqrt(self.rayleigh_omega / 2.0)

    def with_forward_snr(self, snr_db: float) -> "ChannelSpec":
        return ChannelSpec(snr_db, self.feedback_snr_db, self.fading, self.rayleigh_omega, self.multicast)


# ---------------------------------------------------------------------------
# channel maps


def forward_channel(x, alpha, n):
    """y = alpha * x + n (works on arrays and on autodiff tensors)."""
    if isinstance(x, Tensor):
        return ad.add(ad.mul(x, alpha), n)
    return np.asarray(alpha) * np.asarray(x) + np.asarray(n)


def feedback_channel(y_prev, m):
    """z_i = y_{i-1} + m_i; pass ``y_prev=0`` for the first channel use."""
    if isinstance(y_prev, Tensor):
        return ad.add(y_prev, m)
    return np.asarray(y_prev) + np.asarray(m)


def feedback_sequence(y: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Time-indexed feedback for a sequence of outputs: z_1 = m_1, z_i = y_{i-1} + m_i."""
    y = np.asarray(y, dtype=float)
    prev = np.concatenate([np.zeros_like(y[..., :1]), y[..., :-1]], axis=-1)
    return prev + np.asarray(m)


def rayleigh_from_uniform(u, sigma: float):
    """Inverse CDF of the Rayleigh law for u in (0, 1]."""
    return sigma * np.sqrt(-2.0 * np.log(u))


def sample_rayleigh(sigma: float, rng: np.random.Generator, size=None):
    if sigma <= 0:
        raise ValueError("Rayleigh scale must be positive")
    u = 1.0 - rng.random(size)  # (0, 1]
    return rayleigh_from_uniform(u, sigma)


def rayleigh_moments(sigma: float) -> tuple[float, float]:
    """Mean and variance of a Rayleigh(sigma) amplitude."""
    return sigma * math.sqrt(math.pi / 2.0), (2.0 - math.pi / 2.0) * sigma ** 2


def correlate_noise(g1, g2, sigma1: float, sigma2: float, eps: float):
    if abs(eps) > 1:
        raise ValueError(f"correlation coefficient must satisfy |eps| <= 1, got {eps}")
    n1 = sigma1 * np.asarray(g1)
    n2 = sigma2 * (eps * np.asarray(g1) + math.sqrt(1.0 - eps * eps) * np.asarray(g2))
    return n1, n2


def sample_correlated_noise(sigma1: float, sigma2: float, eps: float,
                            rng: np.random.Generator, size=None):
    if abs(eps) > 1:
        raise ValueError(f"correlation coefficient must satisfy |eps| <= 1, got {eps}")
    g1 = rng.standard_normal(size)
    g2 = rng.standard_normal(size)
    return correlate_noise(g1, g2, sigma1, sigma2, eps)


# ---------------------------------------------------------------------------
# samples


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream for one sample, keyed by (experiment seed, epoch, index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


@dataclass
class Sample:
    bits: np.ndarray
    alpha: np.ndarray
    n: np.ndarray
    m: np.ndarray
    n2: np.ndarray | None = None
    m2: np.ndarray | None = None


@dataclass
class SampleBatch:
    """Column-stacked samples; indexing yields :class:`Sample` views."""

    bits: np.ndarray   # (B, K) in {0, 1}
    alpha: np.ndarray  # (B, L)
    n: np.ndarray      # (B, L)
    m: np.ndarray      # (B, L)
    n2: np.ndarray | None = None
    m2: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.bits.shape[0]

    def __getitem__(self, i: int) -> Sample:
        opt = (lambda a: None if a is None else a[i])
        return Sample(self.bits[i], self.alpha[i], self.n[i], self.m[i], opt(self.n2), opt(self.m2))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    @property
    def K(self) -> int:
        return self.bits.shape[1]

    @property
    def L(self) -> int:
        return self.alpha.shape[1]

    @property
    def multicast(self) -> bool:
        return self.n2 is not None

    def subset(self, sl: slice) -> "SampleBatch":
        opt = (lambda a: None if a is None else a[sl])
        return SampleBatch(self.bits[sl], self.alpha[sl], self.n[sl], self.m[sl],
                           opt(self.n2), opt(self.m2), dict(self.meta))


def block_length(K: int) -> int:
    return 3 * K + 3


def _draw_one(spec: ChannelSpec, K: int, L: int, rng: np.random.Generator):
    bits = rng.integers(0, 2, K)
    u = 1.0 - rng.random(L)
    g_n = rng.standard_normal(L)
    g_m = rng.standard_normal(L)
    if spec.fading == "awgn":
        alpha = np.ones(L)
    elif spec.fading == "slow_rayleigh":
        alpha = np.full(L, rayleigh_from_uniform(u[0], spec.rayleigh_sigma))
    else:
        alpha = rayleigh_from_uniform(u, spec.rayleigh_sigma)
    if spec.multicast is None:
        return bits, alpha, math.sqrt(spec.sigma_n2) * g_n, math.sqrt(spec.sigma_m2) * g_m, None, None
    mc = spec.multicast
    g_n2 = rng.standard_normal(L)
    g_m2 = rng.standard_normal(L)
    s1, s2 = (math.sqrt(v) for v in mc.sigma_n2)
    n1, n2 = correlate_noise(g_n, g_n2, s1, s2, mc.correlation)
    f1, f2 = (math.sqrt(v) for v in mc.sigma_m2)
    return bits, alpha, n1, f1 * g_m, n2, f2 * g_m2


def generate_dataset(spec: ChannelSpec, K: int, count: int, seed: int,
                     epoch: int = 0, start: int = 0) -> SampleBatch:
    """``count`` i.i.d. samples with indices ``start .. start+count-1``.

    Sample ``i`` depends only on ``(seed, epoch, i)``, so any slice can be
    regenerated bit-exactly on its own.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    L = block_length(K)
    cols = [[] for _ in range(6)]
    for i in range(start, start + count):
        for col, v in zip(cols, _draw_one(spec, K, L, sample_rng(seed, epoch, i))):
            col.append(v)
    bits, alpha, n, m, n2, m2 = (None if c[0] is None else np.stack(c) for c in cols)
    return SampleBatch(bits.astype(np.int8), alpha, n, m, n2, m2,
                       {"seed": seed, "epoch": epoch, "start": start, "mode": spec.fading})


# ---------------------------------------------------------------------------
# binary dataset dump
#
#   8 bytes magic b"DRFDATA\0", uint32 version, uint64 header length N,
#   N bytes JSON header {"K", "L", "mode", "seed", "epoch", "start", "count",
#   "multicast"}, then per sample: K uint8 bits followed by float64 LE arrays
#   alpha[L], n[L], m[L] and, for multicast records, n2[L], m2[L].

DATA_MAGIC = b"DRFDATA\x00"
DATA_VERSION = 1


def dump_dataset(path, batch: SampleBatch) -> None:
    header = {"K": batch.K, "L": batch.L, "mode": batch.meta.get("mode", "awgn"),
              "seed": batch.meta.get("seed"), "epoch": batch.meta.get("epoch", 0),
              "start": batch.meta.get("start", 0), "count": len(batch),
              "multicast": batch.multicast}
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<IQ", DATA_VERSION, len(hb)))
        fh.write(hb)
        for s in batch:
            fh.write(np.asarray(s.bits, dtype=np.uint8).tobytes())
            arrays = [s.alpha, s.n, s.m] + ([s.n2, s.m2] if batch.multicast else [])
            for a in arrays:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_dataset(path) -> SampleBatch:
    raw = Path(path).read_bytes()
    if raw[:8] != DATA_MAGIC:
        raise ValueError(f"{path}: not a dataset file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != DATA_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    h = json.loads(raw[20:20 + hlen])
    K, L, count = h["K"], h["L"], h["count"]
    nf = 5 if h["multicast"] else 3
    rec = np.dtype([("bits", "u1", (K,)), ("f", "<f8", (nf, L))])
    recs = np.frombuffer(raw, dtype=rec, count=count, offset=20 + hlen)
    f = recs["f"].astype(np.float64)
    extra = (f[:, 3], f[:, 4]) if h["multicast"] else (None, None)
    meta = {k: h[k] for k in ("seed", "epoch", "start", "mode")}
    return SampleBatch(recs["bits"].astype(np.int8), f[:, 0], f[:, 1], f[:, 2], *extra, meta)
