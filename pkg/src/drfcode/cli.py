"""Command-line front end: ``drf {train,eval,sweep,multicast,gradcheck,baseline}``.

Every command writes into a run directory (``--out``, or
``$DRF_RUN_DIR/<timestamp>-seed<seed>``, default root ``runs``): a CSV
table, ``run.jsonl`` metadata and, for training, checkpoints.  CSV files
contain no timestamps, so equal seeds give byte-identical tables.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import re
import subprocess
import sys
import time
from importlib import metadata
from pathlib import Path

from . import checkpoint as ckpt
from .channel import ChannelSpec, parse_snr
from .config import Config, ConfigError, load_config
from .evaluation import (MULTICAST_COLUMNS, SWEEP_COLUMNS, estimate_error, estimate_row, grid,
                         mismatch_sweep, multicast_channel, multicast_eval, to_csv, uncoded_ber_awgn,
                         uncoded_error)
from .gradcheck import default_gradcheck
from .model import DRFModel
from .trainer import train

log = logging.getLogger("drfcode")

RUN_DIR_ENV = "DRF_RUN_DIR"
BASELINE_COLUMNS = ("snr_db", "fading", "samples", "ber", "ber_ci", "ber_errors", "bler", "bler_ci",
                    "bler_errors", "ber_closed_form", "censored")
GRADCHECK_COLUMNS = ("parameter", "max_rel_error")


class CLIError(RuntimeError):
    pass


def version_string() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{base}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Run directory plus its JSONL metadata log."""

    def __init__(self, args, cfg: Config, seed: int):
        if args.out:
            self.path = Path(args.out)
        else:
            root = Path(os.environ.get(RUN_DIR_ENV, "runs"))
            stamp = time.strftime("%Y%m%d-%H%M%S")
            self.path = root / f"{stamp}-seed{seed}"
            n = 1
            while self.path.exists():
                self.path = root / f"{stamp}-seed{seed}-{n}"
                n += 1
        self.path.mkdir(parents=True, exist_ok=True)
        self.t0 = time.perf_counter()
        self.outputs: dict[str, str] = {}
        (self.path / "config.toml").write_text(cfg.to_toml())
        self.event("start", command=args.command, argv=getattr(args, "argv", None), seed=seed,
                   config_hash=cfg.digest(), version=version_string(),
                   started=time.strftime("%Y-%m-%dT%H:%M:%S%z"))

    def event(self, kind: str, **fields) -> None:
        with open(self.path / "run.jsonl", "a") as fh:
            fh.write(json.dumps({"event": kind, **fields}, sort_keys=True, default=str) + "\n")

    def write_csv(self, name: str, text: str) -> Path:
        target = self.path / name
        tmp = target.with_suffix(".csv.tmp")
        tmp.write_text(text)
        os.replace(tmp, target)
        self.outputs[name] = hashlib.sha256(text.encode()).hexdigest()
        return target

    def finish(self, **fields) -> None:
        self.event("end", wall_time=round(time.perf_counter() - self.t0, 3), outputs=self.outputs, **fields)


def _load_checkpoint(args, cfg: Config) -> DRFModel:
    path = args.checkpoint or cfg["eval"].get("checkpoint")
    if not path:
        raise CLIError("no checkpoint given (use --checkpoint or eval.checkpoint)")
    model, _ = DRFModel.load(path)
    return model


def _eval_seed(args, cfg: Config) -> int:
    return args.seed if args.seed is not None else cfg["eval"]["seed"]


def _samples(args, cfg: Config) -> int:
    return args.samples if args.samples is not None else cfg["eval"]["samples"]


def _feedback(args, cfg: Config) -> float:
    raw = args.feedback_snr if args.feedback_snr is not None else cfg["channel"]["feedback_snr_db"]
    return parse_snr(raw)


def _single_channel(model: DRFModel, args, cfg: Config) -> ChannelSpec:
    if model.config.receivers != 1:
        raise CLIError("this command needs a single-receiver checkpoint; use `multicast`")
    return ChannelSpec(0.0, _feedback(args, cfg), model.config.fading, float(cfg["channel"]["rayleigh_omega"]))


# -- commands


def cmd_train(args, cfg: Config) -> int:
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    plan = cfg.plan()
    model = DRFModel(cfg.model_config())
    run = Run(args, cfg, plan.seed)

    def on_epoch(rep):
        run.event("epoch", epoch=rep.epoch, snr_db=rep.snr_db, batch_size=rep.batch_size, loss=rep.loss,
                  wall_time=round(rep.wall_time, 3), checksum=rep.checksum)
        print(f"epoch {rep.epoch:3d}  snr {rep.snr_db:+.1f} dB  batch {rep.batch_size:6d}  loss {rep.loss:.4g}",
              flush=True)

    result = train(model, plan, cfg.channel(), run.path, tuple(cfg["train"]["loss_weights"]), on_epoch)
    run.outputs["train_log.csv"] = sha256_file(run.path / "train_log.csv")
    checksum = model.checksum()
    run.finish(halted=result.halted, checksum=checksum)
    print(f"final checkpoint {run.path / 'final.ckpt'}  checksum {checksum}")
    return 1 if result.halted else 0


def cmd_eval(args, cfg: Config) -> int:
    model = _load_checkpoint(args, cfg)
    base = _single_channel(model, args, cfg)
    snrs = grid(args.snr if args.snr is not None else cfg["eval"]["snr"])
    seed, samples = _eval_seed(args, cfg), _samples(args, cfg)
    rows = []
    run = Run(args, cfg, seed)
    for snr in snrs:
        ber, bler = estimate_error(model, base.with_forward_snr(snr), samples, seed,
                                   cfg["eval"]["shard_size"], args.workers or cfg["eval"]["workers"],
                                   unit_attention=args.unit_attention)[0]
        rows.append(estimate_row(snr, base.feedback_snr_db, ber, bler))
    run.write_csv("eval.csv", to_csv(rows, SWEEP_COLUMNS))
    run.finish()
    print(to_csv(rows, SWEEP_COLUMNS), end="")
    return 0


def cmd_sweep(args, cfg: Config) -> int:
    model = _load_checkpoint(args, cfg)
    base = _single_channel(model, args, cfg)
    snrs = grid(args.snr if args.snr is not None else cfg["eval"]["snr"])
    deltas = grid(args.delta if args.delta is not None else cfg["eval"]["delta"])
    seed = _eval_seed(args, cfg)
    run = Run(args, cfg, seed)
    rows = mismatch_sweep(model, base, snrs, deltas, _samples(args, cfg), seed, cfg["eval"]["shard_size"],
                          args.workers or cfg["eval"]["workers"], unit_attention=args.unit_attention)
    run.write_csv("sweep.csv", to_csv(rows, SWEEP_COLUMNS))
    run.finish(rows=len(rows))
    print(f"{len(rows)} rows -> {run.path / 'sweep.csv'}")
    return 0


def _pairs(text: str) -> list[tuple[float, float]]:
    out = []
    for chunk in text.split(";"):
        a, b = (float(v) for v in chunk.split(","))
        out.append((a, b))
    return out


def cmd_multicast(args, cfg: Config) -> int:
    model = _load_checkpoint(args, cfg)
    if model.config.receivers != 2:
        raise CLIError("multicast needs a two-receiver checkpoint")
    ch = cfg["channel"]
    pairs = _pairs(args.pairs) if args.pairs else [tuple(ch.get("snr_pair", [ch["forward_snr_db"]] * 2))]
    corrs = grid(args.correlation) if args.correlation else [float(c) for c in cfg["eval"]["correlations"]]
    fb = tuple(parse_snr(v) for v in ch.get("feedback_pair", [ch["feedback_snr_db"]] * 2))
    seed = _eval_seed(args, cfg)
    run = Run(args, cfg, seed)
    rows = [multicast_eval(model, multicast_channel(pair, eps, fb), _samples(args, cfg), seed,
                           cfg["eval"]["shard_size"], args.workers or cfg["eval"]["workers"])
            for eps in corrs for pair in pairs]
    run.write_csv("multicast.csv", to_csv(rows, MULTICAST_COLUMNS))
    run.finish()
    print(to_csv(rows, MULTICAST_COLUMNS), end="")
    return 0


def cmd_gradcheck(args, cfg: Config) -> int:
    seed = args.seed if args.seed is not None else 0
    run = Run(args, cfg, seed)
    report = default_gradcheck(K=args.k, seed=seed)
    rows = [{"parameter": k, "max_rel_error": v} for k, v in sorted(report.per_param.items())]
    run.write_csv("gradcheck.csv", to_csv(rows, GRADCHECK_COLUMNS))
    ok = report.passed(args.tol)
    run.finish(max_rel_error=report.max_rel_error, passed=ok)
    print(f"max relative error {report.max_rel_error:.3e} at {report.worst_param}{list(report.worst_index)} "
          f"over {report.checked} entries: {'PASS' if ok else 'FAIL'} (tol {args.tol:g})")
    return 0 if ok else 1


def cmd_baseline(args, cfg: Config) -> int:
    snrs = grid(args.snr if args.snr is not None else cfg["eval"]["snr"])
    fading = args.fading or cfg["channel"]["fading"]
    seed, samples = _eval_seed(args, cfg), _samples(args, cfg)
    run = Run(args, cfg, seed)
    rows = []
    for snr in snrs:
        ch = ChannelSpec(snr, math.inf, fading, float(cfg["channel"]["rayleigh_omega"]))
        ber, bler = uncoded_error(ch, args.k, samples, seed, cfg["eval"]["shard_size"])
        rows.append({"snr_db": float(snr), "fading": fading, "samples": bler.samples,
                     "ber": ber.estimate, "ber_ci": ber.half_width, "ber_errors": ber.errors,
                     "bler": bler.estimate, "bler_ci": bler.half_width, "bler_errors": bler.errors,
                     "ber_closed_form": uncoded_ber_awgn(snr) if fading == "awgn" else math.nan,
                     "censored": ber.censored or bler.censored})
    run.write_csv("baseline.csv", to_csv(rows, BASELINE_COLUMNS))
    run.finish()
    print(to_csv(rows, BASELINE_COLUMNS), end="")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "multicast": cmd_multicast,
            "gradcheck": cmd_gradcheck, "baseline": cmd_baseline}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--out", help=f"run directory (default: ${RUN_DIR_ENV} or ./runs, plus timestamp-seed)")
    common.add_argument("--seed", type=int, help="overrides train.seed / eval.seed")
    common.add_argument("-v", "--verbose", action="store_true")

    evalopts = argparse.ArgumentParser(add_help=False)
    evalopts.add_argument("--checkpoint")
    evalopts.add_argument("--samples", type=int)
    evalopts.add_argument("--workers", type=int)
    evalopts.add_argument("--feedback-snr", help="feedback SNR in dB or 'noiseless'")

    p = argparse.ArgumentParser(prog="drf", description="Deep SNR-robust feedback codes")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a model from a config")
    pe = sub.add_parser("eval", parents=[common, evalopts], help="BER/BLER at matched SNRs")
    pe.add_argument("--snr", help="grid a:b:step or comma list (dB)")
    pe.add_argument("--unit-attention", action="store_true", help="force attention weights to one")
    ps = sub.add_parser("sweep", parents=[common, evalopts], help="SNR-mismatch sweep")
    ps.add_argument("--snr", help="test SNR grid (dB)")
    ps.add_argument("--delta", help="mismatch grid (dB); attention is told snr - delta")
    ps.add_argument("--unit-attention", action="store_true")
    pm = sub.add_parser("multicast", parents=[common, evalopts], help="two-receiver BLER table")
    pm.add_argument("--pairs", help="SNR pairs 'a,b;c,d' (dB)")
    pm.add_argument("--correlation", help="noise correlations, comma list")
    pg = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    pg.add_argument("--k", type=int, default=4)
    pg.add_argument("--tol", type=float, default=1e-4)
    pb = sub.add_parser("baseline", parents=[common], help="uncoded antipodal reference")
    pb.add_argument("--snr", help="SNR grid (dB)")
    pb.add_argument("--k", type=int, default=50)
    pb.add_argument("--samples", type=int)
    pb.add_argument("--fading", choices=("awgn", "slow_rayleigh", "fast_rayleigh"))
    return p


GRID_OPTIONS = ("--snr", "--delta", "--correlation", "--pairs")
_NUMERIC = re.compile(r"^-[0-9.]")


def _join_negative_values(argv: list[str]) -> list[str]:
    """Let grid flags take values such as ``-1:2:1`` without ``=``."""
    out, i = [], 0
    while i < len(argv):
        tok = argv[i]
        if tok in GRID_OPTIONS and i + 1 < len(argv) and _NUMERIC.match(argv[i + 1]):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_negative_values(argv))
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"drf: config error: {exc}", file=sys.stderr)
        return 2
    except (CLIError, ckpt.CheckpointError, ValueError, OSError) as exc:
        print(f"drf: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
