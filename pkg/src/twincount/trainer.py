"""Training loop, early stopping, checkpoint selection and checkpoint files."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .datapipe import (AugmentConfig, RatioSampler, format_ratio, make_batches, parse_ratio,
                       stratified_split)
from .evalkit import evaluate
from .nncore import Optimizer
from .nncore import checkpoint as ckpt_io
from .nncore.checkpoint import CheckpointError, CheckpointShapeError
from .twinvae import GROUPS, LossWeights, ModelConfig, TwinVAE, loss_terms

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "loss_total", "loss_reco", "loss_regr", "loss_kld",
                   "val_mae", "val_mre", "val_acc", "seconds")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch, batch_index, terms):
        self.epoch, self.batch_index, self.terms = epoch, batch_index, terms
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}: {terms}")


@dataclass
class TrainConfig:
    max_epochs: int = 50000
    learning_rate: float = 1.3e-4
    weight_decay_per_epoch: float = 1e-5
    batch_size: int = 64
    optimizer: str = "radam"
    regressor_delay_epochs: int = 100
    eval_every: int = 10
    patience: int = 200
    min_delta: float = 1e-3
    checkpoint_criterion: str = "min_mae"
    ratio: float = 1.0          # synthetic:natural items per batch
    val_fraction: float = 0.15
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    augment_synthetic: bool = True
    lr_schedule: str = "constant"
    lr_step_epochs: int = 1000
    lr_step_gamma: float = 0.5
    strict_deterministic: bool = False

    def __post_init__(self):
        self.ratio = parse_ratio(self.ratio)
        if isinstance(self.loss, dict):
            self.loss = LossWeights.from_dict(self.loss)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be nonnegative")
        if self.learning_rate <= 0 or self.weight_decay_per_epoch < 0:
            raise ValueError("learning rate must be positive and weight decay nonnegative")
        if self.batch_size < 1 or self.eval_every < 1 or self.patience < 1:
            raise ValueError("batch_size, eval_every and patience must be positive")
        if self.regressor_delay_epochs < 0:
            raise ValueError("regressor_delay_epochs must be nonnegative")
        if self.checkpoint_criterion not in ("min_mae", "max_accuracy"):
            raise ValueError("checkpoint_criterion must be 'min_mae' or 'max_accuracy'")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError("lr_schedule must be 'constant' or 'step'")
        if self.optimizer not in ("adam", "radam"):
            raise ValueError("optimizer must be 'adam' or 'radam'")

    @classmethod
    def for_modality(cls, modality="pc_like", **overrides):
        """Batch size / optimizer / reconstruction loss as tuned per modality."""
        if modality == "pc_like":
            base = dict(batch_size=128, optimizer="adam", loss=LossWeights(reco_loss_kind="mse"))
        else:
            base = dict(batch_size=64, optimizer="radam", loss=LossWeights(reco_loss_kind="bce"))
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["ratio"] = format_ratio(self.ratio)
        return d

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("augment") is not None and not isinstance(d["augment"], AugmentConfig):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)

    def lr_at(self, epoch):
        if self.lr_schedule == "step":
            return self.learning_rate * self.lr_step_gamma ** (epoch // self.lr_step_epochs)
        return self.learning_rate


# ---------------------------------------------------------------- history

@dataclass
class HistoryRecord:
    epoch: int
    loss_total: float
    loss_reco: float
    loss_regr: float
    loss_kld: float
    val_mae: float | None = None
    val_mre: float | None = None
    val_acc: float | None = None
    seconds: float | None = None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


class TrainingHistory:
    def __init__(self):
        self.records = []
        self.epoch_losses = []   # (epoch, mean loss per item, mean regr term) for every epoch

    def add(self, record):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("history epochs must be strictly increasing")
        self.records.append(record)

    def val_maes(self):
        return [r.val_mae for r in self.records if r.val_mae is not None]

    def shifted(self, offset):
        h = TrainingHistory()
        for r in self.records:
            h.records.append(HistoryRecord(**{**asdict(r), "epoch": r.epoch + offset}))
        h.epoch_losses = [(e + offset, *rest) for e, *rest in self.epoch_losses]
        return h

    def extend(self, other):
        for r in other.records:
            self.add(r)
        self.epoch_losses.extend(other.epoch_losses)

    def csv_row(self, r):
        return [_fmt(getattr(r, c)) for c in HISTORY_COLUMNS]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow(self.csv_row(r))

    @classmethod
    def from_csv(cls, path):
        h = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {k: (None if row[k] == "" else float(row[k])) for k in HISTORY_COLUMNS}
                vals["epoch"] = int(vals["epoch"])
                h.records.append(HistoryRecord(**vals))
        return h


def early_stop_check(history, patience, min_delta=0.0):
    """'stop' once the best validation MAE has not improved by ``min_delta`` for ``patience`` evaluations."""
    maes = history.val_maes() if hasattr(history, "val_maes") else list(history)
    if not maes:
        raise ValueError("early stopping needs at least one validation record")
    best = maes[0]
    stale = 0
    for m in maes[1:]:
        if m < best - min_delta:
            best = m
            stale = 0
        else:
            stale += 1
    return "stop" if stale >= patience else "continue"


@dataclass
class CheckpointPolicy:
    criterion: str = "min_mae"
    best_value: float | None = None
    best_epoch: int | None = None
    best_state: dict | None = None
    path: str | None = None

    def score(self, metrics):
        return metrics.mae if self.criterion == "min_mae" else metrics.acc

    def improves(self, metrics):
        if self.best_value is None:
            return True
        v = self.score(metrics)
        return v < self.best_value if self.criterion == "min_mae" else v > self.best_value

    def update(self, metrics, epoch, model, optimizer=None):
        if not self.improves(metrics):
            return False
        self.best_value = self.score(metrics)
        self.best_epoch = epoch
        self.best_state = model.state_arrays()
        if self.path:
            save_checkpoint(model, optimizer, self.path, meta={"epoch": epoch})
        return True


# ---------------------------------------------------------------- checkpoint files

def config_hash(model_config):
    raw = json.dumps(model_config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(raw).hexdigest()[:16]


def save_checkpoint(model, optimizer, path, meta=None):
    tensors = []
    buffers = {}
    for group, name, arr in model.named_buffers():
        buffers.setdefault(group, []).append((name, arr))
    params_by_group = {g: model.groups[g].parameters() for g in GROUPS}
    moment_index = {}
    if optimizer is not None:
        moment_index = {p.name: i for i, p in enumerate(optimizer.params)}
    for g in GROUPS:
        for p in params_by_group[g]:
            tensors.append({"name": p.name, "group": g, "kind": "param", "array": p.data})
        for name, arr in buffers.get(g, []):
            tensors.append({"name": name, "group": g, "kind": "buffer", "array": arr})
        if optimizer is not None:
            for p in params_by_group[g]:
                i = moment_index[p.name]
                tensors.append({"name": p.name, "group": g, "kind": "m", "array": optimizer.m[i]})
                tensors.append({"name": p.name, "group": g, "kind": "v", "array": optimizer.v[i]})
    header = {
        "format": "twincount-checkpoint",
        "package_version": __version__,
        "groups": list(GROUPS),
        "model_config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "meta": meta or {},
    }
    ckpt_io.write(path, tensors, header)


def load_checkpoint(path, model=None, optimizer=None, check_hash=True):
    """Load ``path`` into ``model`` (built from the stored config when None).

    Returns ``(model, header)``; optimizer moments are restored when an optimizer
    is given and the file carries them. All checks run before any state changes.
    """
    header, tensors = ckpt_io.read(path)
    stored_cfg = ModelConfig.from_dict(header["model_config"])
    if model is None:
        model = TwinVAE(stored_cfg)
    params = {p.name: p for p in model.parameters()}
    buffers = {name: arr for _, name, arr in model.named_buffers()}
    stored_names = {name for kind, name in tensors if kind == "param"}
    for entry in header["tensors"]:
        kind, name, group = entry["kind"], entry["name"], entry["group"]
        if kind in ("param", "m", "v"):
            target = params.get(name)
        else:
            target = buffers.get(name)
        if target is None:
            raise CheckpointShapeError(f"group {group}: tensor {name} does not exist in the model")
        shape = target.shape
        if tuple(entry["shape"]) != tuple(shape):
            raise CheckpointShapeError(
                f"group {group}: tensor {name} has shape {tuple(entry['shape'])} in checkpoint, "
                f"model expects {tuple(shape)}"
            )
    missing = set(params) - stored_names
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    if check_hash and header["config_hash"] != config_hash(model.config):
        raise CheckpointError(
            f"{path}: model config hash {header['config_hash']} does not match {config_hash(model.config)}"
        )
    for (kind, name), arr in tensors.items():
        if kind == "param":
            params[name].data = arr.astype(params[name].data.dtype)
        elif kind == "buffer":
            buffers[name][...] = arr
    if optimizer is not None and header.get("optimizer"):
        index = {p.name: i for i, p in enumerate(optimizer.params)}
        for (kind, name), arr in tensors.items():
            if kind in ("m", "v") and name in index:
                getattr(optimizer, kind)[index[name]] = arr.astype(optimizer.params[index[name]].data.dtype)
        optimizer.step_count = int(header["optimizer"]["step"])
    return model, header


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: TwinVAE
    history: TrainingHistory
    best_state: dict
    best_epoch: int | None
    best_value: float | None
    optimizer: Optimizer
    epochs_run: int
    stopped_early: bool = False
    checkpoint_path: str | None = None


def _step_rng(seed, epoch, batch_index):
    ss = np.random.SeedSequence([int(seed), 0x7EA1, int(epoch), int(batch_index)])
    return np.random.Generator(np.random.Philox(ss))


def _blas_guard(strict):
    if not strict:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def choose_validation(nat, syn, config):
    """Split off a stratified validation set from the labeled natural pool (else synthetic)."""
    for origin, ds in (("natural", nat), ("synthetic", syn)):
        if ds is not None and len(ds) and (ds.labels >= 1).sum() >= 2:
            train, val = stratified_split(ds, config.val_fraction, config.seed)
            if len(val):
                if origin == "natural":
                    return train, syn, val
                return nat, train, val
    return nat, syn, None


def train(model, nat, syn, config, freeze_plan=None, val=None, out_dir=None, optimizer=None,
          decode_outer=True, epoch_offset=0, log_every=0, history_path=None):
    """Train ``model`` on the (natural, synthetic) pools; returns a :class:`TrainResult`.

    ``val`` is an explicit labeled validation set; when None a stratified
    ``val_fraction`` split of the labeled training data is held out.
    """
    if val is None:
        nat, syn, val = choose_validation(nat, syn, config)
    if optimizer is None:
        optimizer = Optimizer(model.parameters(), kind=config.optimizer, lr=config.learning_rate,
                              weight_decay_per_epoch=config.weight_decay_per_epoch)
    sampler = RatioSampler(config.ratio, config.batch_size, config.seed)
    sizes = {"natural": len(nat) if nat is not None else 0,
             "synthetic": len(syn) if syn is not None else 0}
    steps_per_epoch = sampler.batches_per_epoch(sizes)
    if config.regressor_delay_epochs >= config.max_epochs > 0:
        log.warning("regressor delay (%d) >= max_epochs (%d): regression loss never activates",
                    config.regressor_delay_epochs, config.max_epochs)
    history = TrainingHistory()
    ckpt_path = os.path.join(out_dir, "best.ckpt") if out_dir else None
    policy = CheckpointPolicy(config.checkpoint_criterion, path=ckpt_path)
    hist_path = history_path or (os.path.join(out_dir, "history.csv") if out_dir else None)
    if hist_path:
        with open(hist_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(HISTORY_COLUMNS)
    param_groups = {g: model.groups[g].parameters() for g in GROUPS}
    augment_origins = {"natural": True, "synthetic": config.augment_synthetic}
    t0 = time.perf_counter()
    stopped = False
    epoch = 0
    with _blas_guard(config.strict_deterministic):
        for epoch in range(config.max_epochs):
            frozen = freeze_plan.frozen_at(epoch) if freeze_plan is not None else set()
            for g, plist in param_groups.items():
                for p in plist:
                    p.frozen = g in frozen
            optimizer.lr = config.lr_at(epoch)
            regr_enabled = epoch >= config.regressor_delay_epochs
            sums = np.zeros(4)
            n_items = 0
            batches = make_batches(nat, syn, sampler, epoch, config.augment, augment_origins)
            for b, batch in enumerate(batches):
                rng = _step_rng(config.seed, epoch + epoch_offset, b)
                out = model.forward(batch.images.get("natural"), batch.images.get("synthetic"),
                                    train=True, rng=rng, decode_outer=decode_outer)
                lb, grads = loss_terms(out, batch, config.loss, epoch + epoch_offset,
                                       regr_enabled, decode_outer)
                if not math.isfinite(lb.total):
                    model.clear_caches()
                    raise NonFiniteLossError(epoch, b, {"reco": lb.reco, "regr": lb.regr,
                                                        "kld": lb.kld, "total": lb.total})
                # step on the batch-mean objective; the reported total stays a sum
                inv_n = 1.0 / lb.n
                grads["d_pred"] = grads["d_pred"] * inv_n
                grads["d_mu"] = grads["d_mu"] * inv_n
                grads["d_logvar"] = grads["d_logvar"] * inv_n
                grads["d_recon"] = {o: g * inv_n for o, g in grads["d_recon"].items()}
                model.zero_grad()
                model.backward(out, **grads)
                if frozen:
                    grads = {g: [p.grad for p in plist] for g, plist in param_groups.items()}
                    for g, masked in freeze_plan.mask(grads, epoch).items():
                        for p, gr in zip(param_groups[g], masked):
                            p.grad = gr
                inactive = set(GROUPS) - model.active_groups(out, decode_outer)
                optimizer.step(steps_per_epoch, skip_groups=inactive)
                sums += [lb.total, lb.reco * lb.n, lb.regr * lb.n, lb.kld * lb.n]
                n_items += lb.n
            means = sums / max(n_items, 1)
            history.epoch_losses.append((epoch + 1 + epoch_offset, float(means[0]),
                                         float(means[2])))
            done = epoch + 1
            if done % config.eval_every == 0 or done == 1 or done == config.max_epochs:
                metrics = evaluate(model, val) if val is not None and len(val) else None
                seconds = None if config.strict_deterministic else time.perf_counter() - t0
                rec = HistoryRecord(
                    done + epoch_offset, *map(float, means),
                    metrics.mae if metrics else None, metrics.mre if metrics else None,
                    metrics.acc if metrics else None, seconds,
                )
                history.add(rec)
                if hist_path:
                    with open(hist_path, "a", newline="") as fh:
                        csv.writer(fh, lineterminator="\n").writerow(history.csv_row(rec))
                if metrics is not None:
                    policy.update(metrics, done + epoch_offset, model, optimizer)
                    if early_stop_check(history, config.patience, config.min_delta) == "stop":
                        stopped = True
                        break
                if log_every and (done % log_every == 0):
                    log.info("epoch %d loss %.4f val_mae %s", done, means[0],
                             f"{metrics.mae:.3f}" if metrics else "-")
    for plist in param_groups.values():
        for p in plist:
            p.frozen = False
    model.clear_caches()
    if policy.best_state is None:
        policy.best_state = model.state_arrays()
        if ckpt_path:
            save_checkpoint(model, optimizer, ckpt_path, meta={"epoch": epoch_offset})
    return TrainResult(model, history, policy.best_state, policy.best_epoch, policy.best_value,
                       optimizer, len(history.epoch_losses), stopped, ckpt_path)
