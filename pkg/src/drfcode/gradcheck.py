"""End-to-end finite-difference check of the model gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel import ChannelSpec, generate_dataset
from .model import DRFModel, ModelConfig
from .trainer import compute_loss

TINY_GRAD = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    checked: int
    per_param: dict[str, float]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def grad_error(analytic: float, numeric: float) -> float:
    """Relative error, or absolute error when both values are below ``TINY_GRAD``."""
    scale = max(abs(analytic), abs(numeric))
    diff = abs(analytic - numeric)
    return diff if scale < TINY_GRAD else diff / scale


def check_model_gradients(model: DRFModel, channel: ChannelSpec, batch_size: int = 8,
                          seed: int = 0, step: float = 1e-5,
                          max_per_param: int | None = None) -> GradCheckReport:
    """Compare backprop gradients to central differences on one fixed batch.

    The loss is evaluated in training mode without touching running
    statistics, so repeated evaluations are a pure function of the weights.
    ``max_per_param`` limits the number of entries probed per tensor
    (chosen by a seeded generator); ``None`` checks every entry.
    """
    batch = generate_dataset(channel, model.config.K, batch_size, seed, epoch=0)
    params = model.parameters()

    def loss_value() -> float:
        res = model.forward(batch, channel, training=True, update_stats=False)
        return float(compute_loss(model, res, batch.bits).data)

    ad.zero_grads(params)
    with ad.Tape() as tape:
        res = model.forward(batch, channel, training=True, update_stats=False)
        loss = compute_loss(model, res, batch.bits)
    ad.backward(tape, loss)
    grads = ad.collect_grads(params)
    ad.zero_grads(params)

    pick = np.random.default_rng(seed)
    worst, where, checked, per_param = 0.0, ("", ()), 0, {}
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(pick.choice(flat.size, max_per_param, replace=False))
        g = grads[name].reshape(-1)
        local = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            err = grad_error(g[i], (up - down) / (2 * step))
            checked += 1
            if err > local:
                local = err
            if err > worst:
                worst, where = err, (name, np.unravel_index(i, p.shape))
        per_param[name] = local
    return GradCheckReport(worst, where[0], tuple(int(v) for v in where[1]), checked, per_param)


def default_gradcheck(K: int = 4, seed: int = 0, **kwargs) -> GradCheckReport:
    """Untrained AWGN model with noisy feedback, attention enabled."""
    model = DRFModel(ModelConfig(K=K, init_seed=seed))
    channel = ChannelSpec(forward_snr_db=0.0, feedback_snr_db=10.0)
    return check_model_gradients(model, channel, seed=seed, **kwargs)
