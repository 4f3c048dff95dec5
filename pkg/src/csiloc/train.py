"""Reconstruction pretraining and position finetuning with early stopping.

Both procedures follow the same loop: Adam on mini-batches, one full pass
over the validation split per epoch, the best-validation weights kept and
restored at the end, and an early stop after ``patience`` epochs without
improvement.  Epoch 0 in the log is the untrained model.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint, make_checkpoint
from .data import (FINETUNE_RATIOS, PRETRAIN_RATIOS, LabeledDataset, UnlabeledDataset, batches,
                   fit_standardizer, split)
from .errors import ConfigurationError, NumericError
from .models import Autoencoder, Localizer
from .nn import Adam, mse_loss

log = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-7
    seed: int = 0
    split_seed: int = 0
    encoder_frozen: bool = True
    standardize_features: bool = False
    standardize_targets: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("batch_size, max_epochs and patience must be positive")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if self.patience > self.max_epochs:
            raise ConfigurationError(
                f"patience {self.patience} exceeds max_epochs {self.max_epochs}"
            )
        if self.min_delta < 0:
            raise ConfigurationError("min_delta must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch].val_loss

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_loss)), f"{r.seconds:.3f}"])
        return buf.getvalue()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: TrainLog
    splits: dict


def _finite(x: float) -> bool:
    return math.isfinite(x)


def _mean_loss(forward, target_of, dataset, batch_size: int = EVAL_BATCH) -> float:
    """Per-element MSE over a whole dataset, accumulated batch by batch."""
    total, count = 0.0, 0
    for b in batches(dataset, batch_size):
        pred = forward(b.features)
        loss, _ = mse_loss(pred, target_of(b))
        total += loss * pred.size
        count += pred.size
    return total / count


def _fit(model, params, train_ds, val_ds, cfg: TrainConfig, step_loss, eval_loss,
         on_batch=None, checkpoint_extra=None) -> tuple[Checkpoint, TrainLog]:
    if train_ds.tag == "test" or val_ds.tag == "test":
        raise ConfigurationError("refusing to train or validate on a test split")
    cfg_hash = cfg.hash()
    t0 = time.perf_counter()
    tlog = TrainLog()
    v0 = eval_loss(val_ds)
    tlog.records.append(EpochRecord(0, eval_loss(train_ds), v0, time.perf_counter() - t0))
    if not _finite(v0):
        raise NumericError("validation loss of the untrained model is not finite")
    best_val, best_state, stale = v0, model.state_dict(), 0

    def best_checkpoint():
        return make_checkpoint(model, epoch=tlog.best_epoch, val_loss=best_val, config_hash=cfg_hash,
                               state=best_state, extra=checkpoint_extra)

    opt = Adam(params, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    for epoch in range(1, cfg.max_epochs + 1):
        total, count = 0.0, 0
        for b in batches(train_ds, cfg.batch_size, seed=cfg.seed, epoch=epoch):
            if on_batch is not None:
                on_batch(train_ds.tag, b.indices)
            opt.zero_grad()
            loss = step_loss(b)
            if not _finite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}", best_checkpoint())
            try:
                opt.step()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}", best_checkpoint()) from exc
            total += loss * len(b.indices)
            count += len(b.indices)
        val = eval_loss(val_ds)
        if not _finite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}", best_checkpoint())
        tlog.records.append(EpochRecord(epoch, total / count, val, time.perf_counter() - t0))
        log.debug("epoch %d train %.6g val %.6g", epoch, total / count, val)
        if val < best_val - cfg.min_delta:
            best_val, best_state, stale = val, model.state_dict(), 0
            tlog.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                tlog.stopped_early = True
                break
    model.load_state_dict(best_state)
    return best_checkpoint(), tlog


def pretrain(ae: Autoencoder, unlabeled: UnlabeledDataset, cfg: TrainConfig,
             on_batch=None) -> TrainResult:
    """Minimize reconstruction MSE on an 8:2 train/validation split.

    ``on_batch(tag, indices)`` is called with the original sample indices of
    every training batch.  On return ``ae`` holds the best-validation weights.
    """
    train_ds, val_ds = split(unlabeled, PRETRAIN_RATIOS, cfg.split_seed)
    scaler = fit_standardizer(train_ds.features, enabled=cfg.standardize_features)
    ae.feature_scaler = scaler if cfg.standardize_features else None
    train_ds = train_ds.subset(np.arange(len(train_ds)))
    train_ds.features = scaler.apply(train_ds.features)
    val_ds = val_ds.subset(np.arange(len(val_ds)))
    val_ds.features = scaler.apply(val_ds.features)

    def step_loss(b):
        pred = ae.forward(b.features)
        loss, g = mse_loss(pred, ae.prepare(b.features))
        ae.backward(g)
        return loss

    def eval_loss(ds):
        return _mean_loss(ae.forward, lambda b: ae.prepare(b.features), ds)

    ckpt, tlog = _fit(ae, ae.parameters(), train_ds, val_ds, cfg, step_loss, eval_loss, on_batch)
    return TrainResult(ckpt, tlog, {"train": train_ds, "val": val_ds})


def encode_dataset(loc: Localizer, ds, batch_size: int = EVAL_BATCH):
    """Run the (frozen) encoder once over ``ds``; returns a copy holding latents."""
    z = np.concatenate([loc.encode(b.features) for b in batches(ds, batch_size)])
    out = ds.subset(np.arange(len(ds)))
    out.features = z
    return out


def finetune(loc: Localizer, labeled: LabeledDataset, cfg: TrainConfig, on_batch=None) -> TrainResult:
    """Fit the position head (and the encoder unless frozen) on a 90:5:5 split.

    The test split is returned untouched in ``result.splits["test"]``.
    """
    loc.encoder_frozen = cfg.encoder_frozen
    train_ds, val_ds, test_ds = split(labeled, FINETUNE_RATIOS, cfg.split_seed)
    fscale = fit_standardizer(train_ds.features, enabled=cfg.standardize_features)
    tscale = fit_standardizer(train_ds.positions, enabled=cfg.standardize_targets)
    loc.feature_scaler = fscale if cfg.standardize_features else None
    loc.target_scaler = tscale if cfg.standardize_targets else None

    def prepared(ds):
        out = ds.subset(np.arange(len(ds)))
        out.features = fscale.apply(out.features)
        out.positions = tscale.apply(out.positions.astype(loc.dtype))
        return out

    tr, va = prepared(train_ds), prepared(val_ds)
    if loc.has_encoder and loc.encoder_frozen:
        # frozen encoder: latents never change, so compute them once
        tr, va = encode_dataset(loc, tr), encode_dataset(loc, va)
        forward = loc.head.forward
        backward = loc.head.backward
    else:
        forward, backward = loc.forward, loc.backward

    def step_loss(b):
        pred = forward(b.features)
        loss, g = mse_loss(pred, b.positions)
        backward(g)
        return loss

    def eval_loss(ds):
        return _mean_loss(forward, lambda b: b.positions, ds)

    ckpt, tlog = _fit(loc, loc.trainable_parameters(), tr, va, cfg, step_loss, eval_loss, on_batch)
    return TrainResult(ckpt, tlog, {"train": train_ds, "val": val_ds, "test": test_ds})


def eval_threads() -> int:
    raw = os.environ.get("CSILOC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"CSILOC_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"CSILOC_THREADS must be >= 1, got {n}")
    return n


def evaluate(loc: Localizer, dataset, batch_size: int = EVAL_BATCH, threads: int | None = None) -> np.ndarray:
    """Forward-only position estimates in meters, ``[n, 3]``.

    Chunks are fixed by ``batch_size`` and concatenated in order, so the
    result does not depend on ``threads`` (default: ``CSILOC_THREADS``).
    """
    threads = eval_threads() if threads is None else threads
    chunks = [b.features for b in batches(dataset, batch_size)]
    if threads == 1 or len(chunks) == 1:
        outs = _predict_chunks(loc, chunks)
    else:
        # layers cache activations, so every worker runs its own model copy
        groups = [g for g in np.array_split(np.arange(len(chunks)), threads) if len(g)]
        with ThreadPoolExecutor(max_workers=len(groups)) as pool:
            parts = pool.map(lambda g: _predict_chunks(copy.deepcopy(loc), [chunks[i] for i in g]),
                             groups)
        outs = [y for part in parts for y in part]
    return np.concatenate(outs).astype(np.float64)


def _predict_chunks(loc: Localizer, chunks) -> list[np.ndarray]:
    fscale, tscale = loc.feature_scaler, loc.target_scaler
    outs = []
    for x in chunks:
        if fscale is not None:
            x = fscale.apply(x)
        y = loc.forward(x)
        outs.append(tscale.inverse(y) if tscale is not None else y)
    return outs
