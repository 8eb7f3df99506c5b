"""Channel-in-the-loop training with batch-size adaptation and SNR scheduling."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .channel import ChannelSpec, MulticastSpec, generate_dataset
from .model import DRFModel

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
STALL_RULES = ("algorithm", "prose")


class TrainingAborted(RuntimeError):
    pass


def bce_loss(probs, bits) -> Tensor:
    """Binary cross entropy in bits: summed over positions, averaged over the batch."""
    p = ad.clip(ad.as_tensor(probs), PROB_CLAMP, 1.0 - PROB_CLAMP)
    if not np.all((p.data > 0) & (p.data < 1)):
        raise ValueError("probabilities outside (0, 1) after clamping")
    b = np.atleast_2d(np.asarray(bits, dtype=float))
    if p.data.ndim == 1:
        p = ad.reshape(p, (1, -1))
    ll = ad.add(ad.mul(ad.log(p), b), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - b))
    per_sample = ad.sum_(ll, axis=1)
    return ad.mul(ad.mean(per_sample), -1.0 / math.log(2.0))


def multicast_loss(probs1, probs2, bits, weights: tuple[float, float] = (1.0, 1.0)) -> Tensor:
    return ad.add(ad.mul(bce_loss(probs1, bits), weights[0]), ad.mul(bce_loss(probs2, bits), weights[1]))


def schedule_from_entries(entries: Sequence[float], epochs_per_entry: int) -> tuple[float, ...]:
    return tuple(float(e) for e in entries for _ in range(epochs_per_entry))


@dataclass
class TrainPlan:
    snr_schedule: tuple[float, ...] = schedule_from_entries((-1, -1, 0, 1, 2), 3)
    batch_size: int = 1000
    max_batch: int = 16000
    zeta: int = 100
    stall_factor: float = 2.0   # lambda
    growth: float = 2.0         # kappa
    lr: float = 1e-3
    seed: int = 0
    stall_rule: str = "algorithm"
    clip_norm: float = 1.0
    calibration_samples: int = 4000

    def __post_init__(self):
        self.snr_schedule = tuple(float(s) for s in self.snr_schedule)
        if not self.snr_schedule:
            raise ValueError("SNR schedule must not be empty")
        if any(b < a for a, b in zip(self.snr_schedule, self.snr_schedule[1:])):
            raise ValueError(f"SNR schedule must be non-decreasing: {self.snr_schedule}")
        if not 1 <= self.batch_size <= self.max_batch:
            raise ValueError("need 1 <= batch_size <= max_batch")
        if self.growth <= 1:
            raise ValueError("batch growth factor must exceed 1")
        if self.stall_factor < 1:
            raise ValueError("stall factor must be >= 1")
        if self.zeta < 1:
            raise ValueError("zeta must be >= 1")
        if self.stall_rule not in STALL_RULES:
            raise ValueError(f"stall_rule must be one of {STALL_RULES}")

    @property
    def epochs(self) -> int:
        return len(self.snr_schedule)

    @classmethod
    def paper_default(cls, **overrides) -> "TrainPlan":
        return cls(**overrides)


@dataclass
class EpochReport:
    epoch: int
    batch_size: int
    snr_db: float
    loss: float
    mean_loss: float
    wall_time: float
    checksum: str


@dataclass
class TrainResult:
    model: DRFModel
    reports: list[EpochReport] = field(default_factory=list)
    halted: bool = False


def update_batch_size(loss: float, prev_loss: float, batch: int, stall_factor: float,
                      growth: float, max_batch: int, rule: str = "algorithm") -> int:
    """Grow the batch by ``growth`` when the loss stalls, never beyond ``max_batch``.

    ``rule="algorithm"`` stalls when ``loss >= stall_factor * prev_loss``;
    ``rule="prose"`` when the loss fails to shrink by the factor,
    ``loss >= prev_loss / stall_factor``.  ``prev_loss`` is ``inf`` before
    the first epoch.
    """
    if batch < 1:
        raise ValueError("batch size must be positive")
    if rule == "algorithm":
        stalled = loss >= stall_factor * prev_loss
    elif rule == "prose":
        stalled = loss >= prev_loss / stall_factor
    else:
        raise ValueError(f"unknown stall rule {rule!r}")
    if stalled and batch < max_batch:
        return int(min(round(growth * batch), max_batch))
    return batch


def batch_trace(losses: Sequence[float], plan: TrainPlan) -> list[int]:
    """Batch size used in each epoch for a given sequence of final epoch losses."""
    sizes, batch, prev = [], plan.batch_size, math.inf
    for loss in losses:
        sizes.append(batch)
        batch = update_batch_size(loss, prev, batch, plan.stall_factor, plan.growth,
                                  plan.max_batch, plan.stall_rule)
        prev = loss
    return sizes


def channel_for_epoch(channel: ChannelSpec, snr_db: float, final_snr_db: float) -> ChannelSpec:
    """Channel used for one epoch of the schedule.

    Single-receiver channels run at the scheduled SNR.  For multicast the
    schedule shifts both receivers together so the last epoch lands on the
    configured SNR pair.
    """
    if channel.multicast is None:
        return channel.with_forward_snr(snr_db)
    mc = channel.multicast
    shift = snr_db - final_snr_db
    pair = tuple(s + shift for s in mc.forward_snr_db)
    return replace(channel, multicast=MulticastSpec(pair, mc.feedback_snr_db, mc.correlation))


def compute_loss(model: DRFModel, result, bits, weights=(1.0, 1.0)) -> Tensor:
    if model.config.receivers == 2:
        return multicast_loss(result.probs[0], result.probs[1], bits, weights)
    return bce_loss(result.probs[0], bits)


def train_step(model: DRFModel, batch, channel: ChannelSpec, state: AdamState,
               clip_norm: float | None = 1.0, loss_weights=(1.0, 1.0)) -> float:
    params = model.parameters()
    ad.zero_grads(params)
    with ad.Tape() as tape:
        res = model.forward(batch, channel, training=True)
        loss = compute_loss(model, res, batch.bits, loss_weights)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite loss {value} at optimizer step {state.t + 1}")
    ad.backward(tape, loss)
    grads = ad.collect_grads(params)
    if clip_norm:
        ad.clip_grad_norm(grads, clip_norm)
    ad.adam_step(params, grads, state)
    ad.zero_grads(params)
    return value


def run_epoch(model: DRFModel, plan: TrainPlan, u: int, state: AdamState,
              channel: ChannelSpec, batch_size: int, loss_weights=(1.0, 1.0)) -> EpochReport:
    """One epoch: ``zeta`` fresh batches at the epoch's SNR, one Adam step each."""
    if not 1 <= u <= plan.epochs:
        raise ValueError(f"epoch {u} outside 1..{plan.epochs}")
    snr = plan.snr_schedule[u - 1]
    ch = channel_for_epoch(channel, snr, plan.snr_schedule[-1])
    t0 = time.perf_counter()
    losses = []
    for j in range(plan.zeta):
        batch = generate_dataset(ch, model.config.K, batch_size, plan.seed, epoch=u, start=j * batch_size)
        losses.append(train_step(model, batch, ch, state, plan.clip_norm, loss_weights))
    return EpochReport(u, batch_size, snr, losses[-1], float(np.mean(losses)),
                       time.perf_counter() - t0, model.checksum())


def calibrate(model: DRFModel, channel: ChannelSpec, count: int, seed: int, epoch: int) -> None:
    """Freeze the power normalizer to the exact statistics of one large batch.

    Batch-norm running statistics are left untouched.
    """
    batch = generate_dataset(channel, model.config.K, count, seed, epoch=epoch)
    power = model.encoder.power
    bn = [b for d in model.decoders for b in (d.bn1, d.bn2)]
    saved_bn = [(b.running_mean.copy(), b.running_var.copy()) for b in bn]
    saved_momentum, power.momentum = power.momentum, 0.0
    try:
        model.forward(batch, channel, training=True, update_stats=True)
    finally:
        power.momentum = saved_momentum
        for b, (m, v) in zip(bn, saved_bn):
            b.running_mean, b.running_var = m, v


LOG_COLUMNS = ("epoch", "snr_db", "batch_size", "loss", "mean_loss", "checksum")


def train(model: DRFModel, plan: TrainPlan, channel: ChannelSpec, out_dir: str | Path | None = None,
          loss_weights=(1.0, 1.0), on_epoch: Callable[[EpochReport], None] | None = None) -> TrainResult:
    """Algorithm-1 loop: scheduled SNR per epoch, batch grown on stalled loss."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = AdamState(lr=plan.lr)
    result = TrainResult(model)
    batch, prev = plan.batch_size, math.inf
    initial = None
    bad_epochs = 0
    good_state = model.state_dict()
    best = math.inf
    for u in range(1, plan.epochs + 1):
        try:
            rep = run_epoch(model, plan, u, state, channel, batch, loss_weights)
        except (TrainingAborted, ad.NonFiniteGradientError) as exc:
            log.error("epoch %d aborted: %s", u, exc)
            model.load_state_dict(good_state)
            result.halted = True
            break
        result.reports.append(rep)
        log.info("epoch %d snr %.2f dB batch %d loss %.4g", u, rep.snr_db, rep.batch_size, rep.loss)
        if initial is None:
            initial = rep.loss
        if rep.loss > 10 * initial:
            bad_epochs += 1
            if bad_epochs >= 2:
                log.error("training diverged; restoring last good parameters")
                model.load_state_dict(good_state)
                result.halted = True
                break
        else:
            bad_epochs = 0
            good_state = model.state_dict()
        if out is not None:
            model.save(out / f"epoch_{u:03d}.ckpt", {"epoch": u})
            if rep.loss < best:
                best = rep.loss
                model.save(out / "best.ckpt", {"epoch": u})
        if on_epoch:
            on_epoch(rep)
        batch = update_batch_size(rep.loss, prev, batch, plan.stall_factor, plan.growth,
                                  plan.max_batch, plan.stall_rule)
        prev = rep.loss
    final_ch = channel_for_epoch(channel, plan.snr_schedule[-1], plan.snr_schedule[-1])
    if plan.calibration_samples:
        calibrate(model, final_ch, plan.calibration_samples, plan.seed, plan.epochs + 1)
    if out is not None:
        model.save(out / "final.ckpt", {"epochs": len(result.reports)})
        write_train_log(out / "train_log.csv", result.reports)
    return result


def write_train_log(path, reports: Sequence[EpochReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in reports:
            w.writerow([r.epoch, f"{r.snr_db:g}", r.batch_size, repr(r.loss), repr(r.mean_loss), r.checksum])
