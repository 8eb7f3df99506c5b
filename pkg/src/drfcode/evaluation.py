"""Monte-Carlo error-rate estimation, SNR-mismatch sweeps and multicast tables."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from .channel import ChannelSpec, MulticastSpec, generate_dataset, snr_db_to_variance
from .decoder import bit_errors, harden
from .encoder import phase_positions
from .model import DRFModel

CSV_SCHEMA = "drf-results-1"
MIN_ERRORS = 100
MIN_SWEEP_SAMPLES = 10_000
EVAL_EPOCH = 0  # training epochs start at 1, so evaluation streams never collide with them
Z95 = 1.959963984540054


@dataclass
class ErrorEstimate:
    metric: str
    estimate: float
    half_width: float
    samples: int   # Bernoulli trials: bits for BER, blocks for BLER
    errors: int
    censored: bool

    @classmethod
    def from_counts(cls, metric: str, errors: int, trials: int, min_errors: int = MIN_ERRORS) -> "ErrorEstimate":
        p = errors / trials
        return cls(metric, p, Z95 * math.sqrt(p * (1 - p) / trials), trials, errors, errors < min_errors)

    @property
    def interval(self) -> tuple[float, float]:
        return self.estimate - self.half_width, self.estimate + self.half_width


@dataclass
class _Counts:
    bit_errors: int = 0
    block_errors: int = 0
    blocks: int = 0

    def add(self, other: "_Counts") -> None:
        self.bit_errors += other.bit_errors
        self.block_errors += other.block_errors
        self.blocks += other.blocks


def _shards(samples: int, shard_size: int) -> list[tuple[int, int]]:
    return [(s, min(shard_size, samples - s)) for s in range(0, samples, shard_size)]


def _run_shards(fn, samples: int, shard_size: int, workers: int, min_errors: int | None,
                n_out: int = 1) -> list[_Counts]:
    """Evaluate shards in order and reduce them deterministically.

    With ``min_errors`` set, stops after the first shard boundary at which
    every output has seen that many bit and block errors.
    """
    totals = [_Counts() for _ in range(n_out)]
    shards = _shards(samples, shard_size)
    step = max(1, workers)
    with ThreadPoolExecutor(max_workers=step) as pool:
        for i in range(0, len(shards), step):
            for res in pool.map(lambda sh: fn(*sh), shards[i:i + step]):
                for t, r in zip(totals, res):
                    t.add(r)
            if min_errors is not None and all(
                    t.bit_errors >= min_errors and t.block_errors >= min_errors for t in totals):
                break
    return totals


def _estimates(c: _Counts, K: int, min_errors: int) -> tuple[ErrorEstimate, ErrorEstimate]:
    return (ErrorEstimate.from_counts("BER", c.bit_errors, c.blocks * K, min_errors),
            ErrorEstimate.from_counts("BLER", c.block_errors, c.blocks, min_errors))


def _count(probs, bits) -> _Counts:
    per_block, blocks = bit_errors(harden(probs), bits)
    return _Counts(int(per_block.sum()), int(blocks.sum()), int(per_block.size))


def estimate_error(model: DRFModel, channel: ChannelSpec, samples: int = 1_000_000, seed: int = 0,
                   shard_size: int = 10_000, workers: int = 1, side_info=None,
                   unit_attention: bool = False, stop_at_errors: int | None = None,
                   min_errors: int = MIN_ERRORS) -> list[tuple[ErrorEstimate, ErrorEstimate]]:
    """(BER, BLER) per receiver over ``samples`` fresh blocks.

    Sample ``i`` is drawn from the stream keyed ``(seed, 0, i)``; shards are
    reduced in index order, so results do not depend on ``workers``.
    Estimates with fewer than ``min_errors`` errors are flagged censored.
    """
    K = model.config.K

    def shard(start, count):
        batch = generate_dataset(channel, K, count, seed, epoch=EVAL_EPOCH, start=start)
        res = model.forward(batch, channel, training=False, side_info=side_info,
                            unit_attention=unit_attention)
        return [_count(p, batch.bits) for p in res.probs]

    totals = _run_shards(shard, samples, shard_size, workers, stop_at_errors, model.config.receivers)
    return [_estimates(t, K, min_errors) for t in totals]


def uncoded_error(channel: ChannelSpec, K: int, samples: int, seed: int = 0,
                  shard_size: int = 10_000, min_errors: int = MIN_ERRORS) -> tuple[ErrorEstimate, ErrorEstimate]:
    """Antipodal signalling of the K message bits with sign detection (no parity, no feedback).

    Uses the phase-I positions of the same sample streams as :func:`estimate_error`.
    """
    pos = phase_positions(K)[0][:K]

    def shard(start, count):
        b = generate_dataset(channel, K, count, seed, epoch=EVAL_EPOCH, start=start)
        y = b.alpha[:, pos] * (2.0 * b.bits - 1.0) + b.n[:, pos]
        return [_count((y >= 0).astype(float), b.bits)]

    return _estimates(_run_shards(shard, samples, shard_size, 1, None)[0], K, min_errors)


def q_function(x: float) -> float:
    return float(norm.sf(x))


def uncoded_ber_awgn(snr_db: float) -> float:
    return q_function(1.0 / math.sqrt(snr_db_to_variance(snr_db)))


def spectral_efficiency(K: int, L: int, bler: float) -> float:
    if not 0.0 <= bler <= 1.0:
        raise ValueError("BLER must lie in [0, 1]")
    return K * (1.0 - bler) / L


def grid(spec: str | Sequence[float]) -> list[float]:
    """Parse ``start:stop:step`` (inclusive) or a comma list into floats."""
    if not isinstance(spec, str):
        return [float(v) for v in spec]
    if ":" in spec:
        start, stop, step = (float(v) for v in spec.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(v) for v in spec.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# result tables


SWEEP_COLUMNS = ("snr_db", "delta_db", "assumed_snr_db", "feedback_snr_db", "samples",
                 "ber", "ber_ci", "ber_errors", "bler", "bler_ci", "bler_errors", "censored")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "inf" if v == math.inf else repr(v)
    return str(v)


def mismatch_sweep(model: DRFModel, channel: ChannelSpec, snrs: Iterable[float], deltas: Iterable[float],
                   samples: int, seed: int = 0, shard_size: int = 10_000, workers: int = 1,
                   unit_attention: bool = False) -> list[dict]:
    """Channel at each test SNR; decoder attention told ``snr - delta``.

    Every grid point reuses the same sample streams (common random numbers).
    """
    snrs, deltas = list(snrs), list(deltas)
    if not snrs or not deltas:
        raise ValueError("sweep grids must not be empty")
    if samples < MIN_SWEEP_SAMPLES:
        raise ValueError(f"sample cap must be at least {MIN_SWEEP_SAMPLES}")
    rows = []
    sm2 = channel.sigma_m2
    for snr in snrs:
        ch = channel.with_forward_snr(snr)
        for delta in deltas:
            assumed = snr - delta
            side = [(snr_db_to_variance(assumed), sm2)]
            ber, bler = estimate_error(model, ch, samples, seed, shard_size, workers, side_info=side,
                                       unit_attention=unit_attention)[0]
            rows.append({"snr_db": float(snr), "delta_db": float(delta), "assumed_snr_db": float(assumed),
                         "feedback_snr_db": float(channel.feedback_snr_db), "samples": bler.samples,
                         "ber": ber.estimate, "ber_ci": ber.half_width, "ber_errors": ber.errors,
                         "bler": bler.estimate, "bler_ci": bler.half_width, "bler_errors": bler.errors,
                         "censored": ber.censored or bler.censored})
    return rows


MULTICAST_COLUMNS = ("snr1_db", "snr2_db", "correlation", "samples", "ber1", "ber2",
                     "bler1", "bler1_ci", "bler2", "bler2_ci", "se1", "se2", "censored")


def multicast_eval(model: DRFModel, channel: ChannelSpec, samples: int, seed: int = 0,
                   shard_size: int = 10_000, workers: int = 1) -> dict:
    if model.config.receivers != 2 or channel.multicast is None:
        raise ValueError("multicast evaluation needs a two-receiver model and channel")
    (ber1, bler1), (ber2, bler2) = estimate_error(model, channel, samples, seed, shard_size, workers)
    K, L = model.config.K, model.config.L
    mc = channel.multicast
    return {"snr1_db": float(mc.forward_snr_db[0]), "snr2_db": float(mc.forward_snr_db[1]),
            "correlation": float(mc.correlation), "samples": bler1.samples,
            "ber1": ber1.estimate, "ber2": ber2.estimate,
            "bler1": bler1.estimate, "bler1_ci": bler1.half_width,
            "bler2": bler2.estimate, "bler2_ci": bler2.half_width,
            "se1": spectral_efficiency(K, L, bler1.estimate), "se2": spectral_efficiency(K, L, bler2.estimate),
            "censored": bler1.censored or bler2.censored}


def multicast_channel(snr_pair, correlation: float, feedback_pair=(math.inf, math.inf)) -> ChannelSpec:
    return ChannelSpec(forward_snr_db=float(snr_pair[0]),
                       multicast=MulticastSpec(tuple(float(s) for s in snr_pair),
                                               tuple(float(s) for s in feedback_pair), float(correlation)))


def estimate_row(snr_db: float, feedback_snr_db: float, ber: ErrorEstimate, bler: ErrorEstimate) -> dict:
    return {"snr_db": float(snr_db), "delta_db": 0.0, "assumed_snr_db": float(snr_db),
            "feedback_snr_db": float(feedback_snr_db), "samples": bler.samples,
            "ber": ber.estimate, "ber_ci": ber.half_width, "ber_errors": ber.errors,
            "bler": bler.estimate, "bler_ci": bler.half_width, "bler_errors": bler.errors,
            "censored": ber.censored or bler.censored}


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()
