"""Training loop over the method variants, with checkpointing and logging.

Each step samples a fresh batch (geometric future sampling), evaluates the
configured objective, and applies one Adam update under the linear-warmup
schedule. The per-step RNG stream is keyed by (seed, step), so resuming
from a checkpoint replays the exact same batches: training to N steps in
one run or in two resumed segments is bit-for-bit identical.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import losses, nn
from .data import Batch, Dataset, sample_batch
from .envs import VOCAB_SIZE

METHODS = ("tra", "grif", "gcbc", "lcbc", "gcbc_phi", "tra_goal",
           "awr_tra", "awr_grif")

_BATCH_STREAM = 0xBA7C4


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


@dataclass
class TrainConfig:
    method: str = "tra"
    gamma: float = 0.95
    align_coef: float = 1.0
    beta: float = 1.0
    base_lr: float = 3e-4
    warmup_steps: int = 2000
    total_steps: int = 20000
    batch_size: int = 128
    seed: int = 0
    emb: int = 32
    hidden: tuple[int, ...] = (64, 64, 64)
    latent: int = 64
    policy_hidden: tuple[int, ...] = (64, 64, 64)
    temperature: float | None = None
    l2_normalize: bool = False
    dataset: str | None = None       # path, used by the CLI
    out_dir: str | None = None       # checkpoints + log land here if set
    checkpoint_every: int = 2000
    keep_checkpoints: int = 3

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; "
                              f"expected one of {METHODS}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("step counts must be >= 0")
        if self.align_coef < 0:
            raise ConfigError("align_coef must be >= 0")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["policy_hidden"] = list(self.policy_hidden)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("hidden", "policy_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return TrainConfig(**d)


def encoder_dims_for(cfg: TrainConfig, ds: Dataset) -> nn.EncoderDims:
    return nn.EncoderDims(
        d_s=ds.d_s, d_a=ds.d_a, vocab=VOCAB_SIZE, emb=cfg.emb,
        hidden=cfg.hidden, latent=cfg.latent,
        policy_hidden=cfg.policy_hidden,
        encode_state=cfg.method in ("gcbc_phi", "tra_goal"))


@dataclass
class LogRow:
    step: int
    total: float
    bc_goal: float
    bc_lang: float
    nce_temporal: float
    nce_task: float
    lr: float


LOG_COLUMNS = ("step", "total", "bc_goal", "bc_lang", "nce_temporal",
               "nce_task", "lr")


def write_log(rows: list[LogRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.step, repr(r.total), repr(r.bc_goal),
                        repr(r.bc_lang), repr(r.nce_temporal),
                        repr(r.nce_task), repr(r.lr)])


def read_log(path) -> list[LogRow]:
    rows = []
    with open(path) as f:
        for rec in csv.DictReader(f):
            rows.append(LogRow(int(rec["step"]), float(rec["total"]),
                               float(rec["bc_goal"]), float(rec["bc_lang"]),
                               float(rec["nce_temporal"]),
                               float(rec["nce_task"]), float(rec["lr"])))
    return rows


def _checkpoint_path(out_dir, step) -> str:
    return os.path.join(out_dir, f"ckpt_{step:07d}.trackpt")


def _prune_checkpoints(out_dir, keep: int) -> None:
    ckpts = sorted(p for p in os.listdir(out_dir)
                   if p.startswith("ckpt_") and p.endswith(".trackpt")
                   and p != "ckpt_final.trackpt")
    for p in ckpts[:-keep] if keep > 0 else ckpts:
        os.remove(os.path.join(out_dir, p))


def _dump_bad_batch(out_dir, step: int, batch: Batch) -> str | None:
    if not out_dir:
        return None
    path = os.path.join(out_dir, f"bad_batch_step{step}.npz")
    np.savez(path, s=batch.s, a=batch.a, s_plus=batch.s_plus,
             s_next=batch.s_next, g=batch.g, tokens=batch.tokens,
             lengths=batch.lengths)
    return path


def train(cfg: TrainConfig, ds: Dataset,
          theta: nn.Theta | None = None,
          opt: nn.OptState | None = None) -> tuple[nn.Theta, list[LogRow]]:
    """Run Algorithm-style joint training from scratch or from a restored
    (theta, opt) pair; returns the final parameters and the per-step log."""
    cfg.validate()
    if theta is None:
        theta = nn.init_theta(cfg.seed, encoder_dims_for(cfg, ds))
        opt = nn.init_opt(theta)
    expected = encoder_dims_for(cfg, ds)
    if theta.dims != expected:
        raise ConfigError(f"theta dims {theta.dims} do not match config/"
                          f"dataset dims {expected}")
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)

    log: list[LogRow] = []
    for step in range(opt.step, cfg.total_steps):
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _BATCH_STREAM, step]))
        batch = sample_batch(ds, cfg.batch_size, cfg.gamma, rng)
        try:
            rep = losses.tra_loss(batch, theta, cfg.align_coef, cfg.method,
                                  cfg.temperature, cfg.l2_normalize, cfg.beta)
            lr = nn.lr_schedule(step, cfg.base_lr, cfg.warmup_steps)
            theta, opt = nn.adam_step(theta, rep.grads, opt, lr)
        except nn.NonFiniteError as e:
            dump = _dump_bad_batch(cfg.out_dir, step, batch)
            raise nn.NonFiniteError(
                f"{e} (step {step}; offending batch dumped to {dump})") from e
        log.append(LogRow(step, rep.total, rep.bc_goal, rep.bc_lang,
                          rep.nce_temporal, rep.nce_task, lr))
        if cfg.out_dir and cfg.checkpoint_every > 0 \
                and opt.step % cfg.checkpoint_every == 0:
            nn.save_checkpoint(_checkpoint_path(cfg.out_dir, opt.step),
                               theta, opt, cfg.method)
            _prune_checkpoints(cfg.out_dir, cfg.keep_checkpoints)

    if cfg.out_dir:
        nn.save_checkpoint(os.path.join(cfg.out_dir, "ckpt_final.trackpt"),
                           theta, opt, cfg.method)
        write_log(log, os.path.join(cfg.out_dir, "log.csv"))
        with open(os.path.join(cfg.out_dir, "config.json"), "w") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
    return theta, log


def resume(checkpoint_path, cfg: TrainConfig,
           ds: Dataset) -> tuple[nn.Theta, list[LogRow]]:
    """Continue training from a checkpoint; refuses config mismatches."""
    cfg.validate()
    theta, opt, meta = nn.load_checkpoint(checkpoint_path)
    if meta.get("method") != cfg.method:
        raise ConfigError(f"checkpoint was trained with method "
                          f"{meta.get('method')!r}, config says "
                          f"{cfg.method!r}")
    expected = encoder_dims_for(cfg, ds)
    if theta.dims != expected:
        raise ConfigError(f"checkpoint dims {theta.dims} do not match "
                          f"config/dataset dims {expected}")
    if opt.step > cfg.total_steps:
        raise ConfigError(f"checkpoint is at step {opt.step}, beyond "
                          f"total_steps {cfg.total_steps}")
    return train(cfg, ds, theta, opt)
