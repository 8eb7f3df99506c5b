"""Encoder, channel and decoder(s) wired into one differentiable pass."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .channel import ChannelSpec, SampleBatch, block_length, snr_db_to_variance
from .csi import FadingPrior
from .decoder import DecoderConfig, DRFDecoder
from .encoder import DRFEncoder, EncoderConfig

MODEL_FORMAT = "drf-model-1"


@dataclass
class ModelConfig:
    K: int
    hidden: int | None = None
    fading: str = "awgn"
    csi: str = "exact"
    attention: bool = True
    rcsi: bool = False
    receivers: int = 1
    init_seed: int = 0

    def __post_init__(self):
        if self.hidden is None:
            self.hidden = self.K
        if self.receivers == 2 and self.fading != "awgn":
            raise ValueError("the two-receiver model is defined for AWGN only")

    @property
    def L(self) -> int:
        return block_length(self.K)


@dataclass
class ForwardResult:
    probs: list[Tensor]
    x: Tensor
    y: list[Tensor] = field(default_factory=list)


class DRFModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        self.encoder = DRFEncoder(EncoderConfig(config.K, config.hidden, config.fading,
                                                config.receivers, config.csi), rng)
        dcfg = DecoderConfig(config.K, config.hidden, config.attention, config.rcsi)
        if config.receivers == 1:
            self.decoders = [DRFDecoder(dcfg, rng, "decoder")]
        else:
            self.decoders = [DRFDecoder(dcfg, rng, f"decoder{r + 1}") for r in range(config.receivers)]

    # -- parameters and persistence

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.encoder.parameters())
        for d in self.decoders:
            out.update(d.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.buffers())
        for d in self.decoders:
            out.update(d.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.parameters().items()}
        state.update({f"buffer.{k}": v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ckpt.CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ckpt.CheckpointError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        bufs = {k[len("buffer."):]: v for k, v in state.items() if k.startswith("buffer.")}
        self.encoder.load_buffers(bufs)
        for d in self.decoders:
            d.load_buffers(bufs)

    def checksum(self) -> str:
        return ckpt.checksum(self.state_dict())

    def save(self, path, meta: dict | None = None) -> str:
        m = {"format": MODEL_FORMAT, "model": asdict(self.config)}
        if meta:
            m.update(meta)
        return ckpt.save(path, self.state_dict(), m)

    @classmethod
    def load(cls, path) -> tuple["DRFModel", dict]:
        state, meta = ckpt.load(path)
        if meta.get("format") != MODEL_FORMAT:
            raise ckpt.CheckpointError(f"{path}: expected model format {MODEL_FORMAT}, got {meta.get('format')}")
        model = cls(ModelConfig(**meta["model"]))
        model.load_state_dict(state)
        return model, meta

    def copy(self) -> "DRFModel":
        other = DRFModel(self.config)
        other.load_state_dict(self.state_dict())
        return other

    # -- forward pass

    def forward(self, batch: SampleBatch, channel: ChannelSpec, training: bool = False,
                update_stats: bool = True, side_info: tuple | None = None,
                unit_attention: bool = False) -> ForwardResult:
        """Run the closed loop: encoder -> forward channel -> feedback -> decoder(s).

        ``side_info`` overrides the (sigma_n^2, sigma_m^2) given to each
        decoder's attention (one pair per receiver); by default the true
        channel variances are used.
        """
        cfg = self.config
        if batch.K != cfg.K:
            raise ValueError(f"batch has K={batch.K}, model expects K={cfg.K}")
        receivers = cfg.receivers
        if receivers == 2:
            if channel.multicast is None or not batch.multicast:
                raise ValueError("two-receiver model needs a multicast channel and samples")
            noises = [batch.n, batch.n2]
            fb = [batch.m, batch.m2]
            sn2, sm2 = channel.multicast.sigma_n2, channel.multicast.sigma_m2
        else:
            noises, fb = [batch.n], [batch.m]
            sn2, sm2 = (channel.sigma_n2,), (channel.sigma_m2,)
        alpha = batch.alpha
        exact = cfg.fading != "awgn" and cfg.csi == "exact"
        prior = FadingPrior.for_mode(cfg.fading, channel.rayleigh_omega)
        session = self.encoder.session(batch.bits, training, update_stats,
                                       sigma_n2=sn2[0], sigma_m2=sm2[0], prior=prior)
        ys: list[list[Tensor]] = [[] for _ in range(receivers)]
        while not session.done:
            pos, x = session.emit()
            a = alpha[:, pos]
            zs = []
            for r in range(receivers):
                y = ad.add(ad.mul(x, a), noises[r][:, pos])
                ys[r].append(y)
                zs.append(ad.add(y, fb[r][:, pos]))
            session.consume(zs, alpha=a if exact else None)
        x_full = session.codeword()
        probs, y_full = [], []
        for r, dec in enumerate(self.decoders):
            yr = _assemble(ys[r])
            y_full.append(yr)
            s = side_info[r] if side_info is not None else (sn2[r], sm2[r])
            probs.append(dec.decode(yr, s[0], s[1], training, alpha=alpha if cfg.rcsi else None,
                                    update_stats=update_stats, unit_attention=unit_attention))
        return ForwardResult(probs, x_full, y_full)


def _assemble(blocks: list[Tensor]) -> Tensor:
    steps = ad.stack(blocks[1:], axis=1)  # (B, K+1, 2)
    return ad.concat([blocks[0], steps[:, :, 0], steps[:, :, 1]], axis=1)


def side_info_for(snr_db: float, feedback_snr_db: float = math.inf) -> tuple[float, float]:
    return snr_db_to_variance(snr_db), snr_db_to_variance(feedback_snr_db)
