"""Optimiser, per-batch objective assembly and the epoch loop with early stopping."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import NormStats, TimeSeries, sliding_windows, zscore
from .errors import ConfigError, DataError, NumericError
from .losses import cad, contrastive_loss, recon_loss
from .model import AmadParams, ModelConfig, init_params, model_forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 3.0
    tau: float = 0.35
    lr: float = 0.02
    lr_decay: float = 0.5
    batch_size: int = 16
    max_epochs: int = 10
    patience: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.2
    train_stride: int = 1
    halve_recon: bool = True
    enable_min: bool = True
    enable_max: bool = True
    enable_contrastive: bool = True
    enable_automask: bool = True

    @property
    def uses_cad(self) -> bool:
        return self.enable_automask and (self.enable_min or self.enable_max)

    @property
    def uses_contrastive(self) -> bool:
        return self.enable_automask and self.enable_contrastive

    def validate(self) -> "TrainConfig":
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.uses_contrastive and self.batch_size < 2:
            raise ConfigError("contrastive training needs batch_size >= 2")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1:
            raise ConfigError(f"bad learning-rate schedule lr={self.lr} decay={self.lr_decay}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class LossBreakdown:
    recon: float = 0.0
    cad_l1: float = 0.0
    contrastive: float = 0.0
    total_min: float = 0.0
    total_max: float = 0.0


@dataclass
class EpochLog:
    epoch: int
    losses: LossBreakdown
    val_recon: float
    lr: float


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping."""

    def __init__(self, params: AmadParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.named()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.named()}

    def step(self, params: AmadParams, lr: float) -> None:
        for k, p in params.named():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter {k!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.named():
            g = p.grad if p.grad is not None else 0.0
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: AmadParams, state: Adam, lr: float) -> None:
    state.step(params, lr)


def batch_objectives(x: T.Tensor, out, tcfg: TrainConfig) -> tuple[list[T.Tensor], LossBreakdown]:
    """Losses to back-propagate for one batch, in order, plus their values.

    With both phases on, each phase carries half the reconstruction term
    (``halve_recon``) so the two accumulated backward passes add up to one
    reconstruction gradient.
    """
    B = x.shape[0]
    lam = tcfg.lam
    bd = LossBreakdown()
    losses = []
    both = tcfg.uses_cad and tcfg.enable_min and tcfg.enable_max
    rw = 0.5 if both and tcfg.halve_recon else 1.0
    bd.recon = float(T.frobenius_sq(x.data - out.recon.data).item()) / B
    if tcfg.uses_cad:
        if tcfg.enable_min:
            c_min = cad(out.attn, detach_s=True)
            losses.append(recon_loss(x, out.recon, c_min, -lam, rw))
            bd.cad_l1 = float(np.abs(c_min.data).sum()) / B
        if tcfg.enable_max:
            c_max = cad(out.attn, detach_a=True)
            losses.append(recon_loss(x, out.recon, c_max, lam, rw))
            bd.cad_l1 = float(np.abs(c_max.data).sum()) / B
    else:
        losses.append(recon_loss(x, out.recon))
    bd.total_min = losses[0].item()
    bd.total_max = losses[-1].item()
    if tcfg.uses_contrastive:
        con = contrastive_loss(out.attn, tcfg.tau)
        bd.contrastive = con.item()
        losses[-1] = losses[-1] + con
    for loss in losses:
        if not np.isfinite(loss.data).all():
            raise NumericError("non-finite training loss")
    return losses, bd


def train_step(params: AmadParams, xb: np.ndarray, tcfg: TrainConfig, opt: Adam, lr: float) -> LossBreakdown:
    x = T.Tensor(xb)
    out = model_forward(x, params, automask=tcfg.enable_automask)
    losses, bd = batch_objectives(x, out, tcfg)
    params.zero_grad()
    for loss in losses:
        T.backward(loss)
    opt.step(params, lr)
    return bd


def recon_error(params: AmadParams, windows: np.ndarray, automask: bool = True, batch: int = 256) -> float:
    """Mean per-window squared reconstruction error."""
    total = 0.0
    with T.no_grad():
        for i in range(0, len(windows), batch):
            xb = windows[i:i + batch]
            out = model_forward(xb, params, automask=automask)
            total += float(((xb - out.recon.data) ** 2).sum())
    return total / max(len(windows), 1)


@dataclass
class FitResult:
    params: AmadParams
    stats: NormStats
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def early_stop_epoch(val_losses, patience: int) -> int | None:
    """Epoch (1-based) at which training halts for the given validation curve, or None."""
    best = np.inf
    bad = 0
    for epoch, v in enumerate(val_losses, start=1):
        if v < best:
            best, bad = v, 0
        else:
            bad += 1
            if bad >= patience:
                return epoch
    return None


def fit(train: TimeSeries, cfg: ModelConfig, tcfg: TrainConfig, seed: int | None = None) -> FitResult:
    cfg.validate()
    tcfg.validate()
    seed = cfg.deterministic_seed if seed is None else seed
    if train.dims != cfg.input_dim:
        raise ConfigError(f"series has {train.dims} channels, model expects {cfg.input_dim}")
    if len(train) < cfg.window_len:
        raise DataError(f"training series ({len(train)} rows) is shorter than one window")
    stats = NormStats.fit(train)
    wins = sliding_windows(zscore(train.values, stats), cfg.window_len, tcfg.train_stride, stats).windows
    n_val = max(1, int(round(tcfg.val_fraction * len(wins))))
    if len(wins) - n_val < 1:
        raise DataError("not enough windows for a train/validation split")
    # time-ordered holdout: the last windows validate
    tr, val = np.ascontiguousarray(wins[:-n_val]), np.ascontiguousarray(wins[-n_val:])

    params = init_params(cfg, seed)
    opt = Adam(params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    rng = np.random.default_rng(seed)
    min_batch = 2 if tcfg.uses_contrastive else 1
    result = FitResult(params.copy(), stats)
    best, bad = np.inf, 0
    lr = tcfg.lr
    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(len(tr))
        sums = LossBreakdown()
        n_batches = 0
        for i in range(0, len(order), tcfg.batch_size):
            idx = order[i:i + tcfg.batch_size]
            if len(idx) < min_batch:
                continue
            bd = train_step(params, tr[idx], tcfg, opt, lr)
            for k in vars(sums):
                setattr(sums, k, getattr(sums, k) + getattr(bd, k))
            n_batches += 1
        means = LossBreakdown(**{k: v / max(n_batches, 1) for k, v in vars(sums).items()})
        val_recon = recon_error(params, val, tcfg.enable_automask)
        if not np.isfinite(val_recon):
            raise NumericError(f"validation error became non-finite at epoch {epoch}")
        result.log.append(EpochLog(epoch, means, val_recon, lr))
        log.info("epoch %d recon=%.5f cad=%.5f con=%.5f val=%.5f lr=%.4g",
                 epoch, means.recon, means.cad_l1, means.contrastive, val_recon, lr)
        if val_recon < best:
            best, bad = val_recon, 0
            result.params = params.copy()
            result.best_epoch = epoch
        else:
            bad += 1
            if bad >= tcfg.patience:
                result.stopped_early = True
                break
        lr *= tcfg.lr_decay
    return result


LOG_COLUMNS = ("epoch", "recon", "cad_l1", "contrastive", "val_recon", "lr")


def write_log_csv(path, entries: list[EpochLog]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for e in entries:
            w.writerow([e.epoch, repr(e.losses.recon), repr(e.losses.cad_l1), repr(e.losses.contrastive),
                        repr(e.val_recon), repr(e.lr)])
