"""Freeze plans, thaw schedules, transfer runs, double transfer and ratio sweeps."""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datapipe import format_ratio, parse_ratio
from .twinvae import CORE_GROUPS, GROUPS, OUTER_GROUPS, TwinVAE
from .trainer import TrainConfig, TrainingHistory, load_checkpoint, train

STRATEGIES = ("frozen_outer", "frozen_core", "simultaneous", "thawing")
DECODER_GROUPS = ("dec_outer_nat", "dec_outer_syn")
# inner-most first
THAW_STAGES = (("bottleneck",), ("enc_shared", "dec_shared"), OUTER_GROUPS)
SWEEP_COLUMNS = ("ratio", "seed", "final_mae", "final_mre", "final_acc", "epochs_to_milestone")


class UnknownGroupError(KeyError):
    pass


def _check_groups(names):
    unknown = set(names) - set(GROUPS)
    if unknown:
        raise UnknownGroupError(f"unknown parameter groups {sorted(unknown)}; valid: {list(GROUPS)}")


@dataclass(frozen=True)
class FreezePlan:
    strategy: str = "simultaneous"
    frozen_groups: frozenset = frozenset()
    thaw_schedule: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown freeze strategy {self.strategy!r}; valid: {list(STRATEGIES)}")
        object.__setattr__(self, "frozen_groups", frozenset(self.frozen_groups))
        _check_groups(self.frozen_groups)
        _check_groups(self.thaw_schedule)
        if self.strategy == "simultaneous" and self.frozen_groups:
            raise ValueError("the simultaneous plan freezes nothing")
        if set(self.thaw_schedule) - self.frozen_groups:
            raise ValueError("thaw_schedule names groups that are not frozen")
        if any(e < 0 for e in self.thaw_schedule.values()):
            raise ValueError("thaw epochs must be nonnegative")

    @classmethod
    def named(cls, strategy, max_epochs=None, thaw_fraction=0.25):
        if strategy == "simultaneous":
            return cls(strategy)
        if strategy == "frozen_outer":
            return cls(strategy, frozenset(OUTER_GROUPS))
        if strategy == "frozen_core":
            return cls(strategy, frozenset(CORE_GROUPS))
        if strategy == "thawing":
            if max_epochs is None or max_epochs < 1:
                raise ValueError("the thawing plan needs max_epochs >= 1")
            span = thaw_fraction * max_epochs
            schedule = {}
            for k, stage in enumerate(THAW_STAGES):
                for g in stage:
                    schedule[g] = int(math.floor(span * (k + 1) / len(THAW_STAGES)))
            return cls(strategy, frozenset(schedule), schedule)
        raise ValueError(f"unknown freeze strategy {strategy!r}; valid: {list(STRATEGIES)}")

    def validate(self, max_epochs):
        late = {g: e for g, e in self.thaw_schedule.items() if e >= max_epochs > 0}
        if late:
            raise ValueError(f"thaw epochs must be < max_epochs ({max_epochs}): {late}")

    def frozen_at(self, epoch):
        return {g for g in self.frozen_groups
                if g not in self.thaw_schedule or epoch < self.thaw_schedule[g]}

    def with_extra_frozen(self, groups):
        return replace(self, frozen_groups=self.frozen_groups | set(groups))

    def mask(self, grads, epoch):
        return apply_freeze_mask(grads, self, epoch)

    def to_dict(self):
        return {"strategy": self.strategy, "frozen_groups": sorted(self.frozen_groups),
                "thaw_schedule": dict(sorted(self.thaw_schedule.items()))}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("strategy", "simultaneous"), frozenset(d.get("frozen_groups", ())),
                   dict(d.get("thaw_schedule", {})))


def apply_freeze_mask(grads, plan, epoch):
    """Return ``grads`` (group -> array or list of arrays) with currently frozen groups zeroed.

    Only the update is masked: gradients flowing through a frozen group into the
    groups below it were already computed and are left alone.
    """
    _check_groups(grads)
    frozen = plan.frozen_at(epoch)
    out = {}
    for g, value in grads.items():
        if g not in frozen:
            out[g] = value
        elif isinstance(value, (list, tuple)):
            out[g] = [None if v is None else np.zeros_like(v) for v in value]
        else:
            out[g] = None if value is None else np.zeros_like(value)
    return out


# ---------------------------------------------------------------- transfer runs

@dataclass
class TransferConfig:
    source: object = None                  # checkpoint path or a TwinVAE
    plan: FreezePlan = field(default_factory=FreezePlan)
    ratio: float = 2.0
    train: TrainConfig = field(default_factory=TrainConfig)
    decoder_active: bool = True
    load_optimizer_state: bool = False

    def __post_init__(self):
        self.ratio = parse_ratio(self.ratio)
        if isinstance(self.plan, str):
            self.plan = FreezePlan.named(self.plan, self.train.max_epochs)
        self.plan.validate(self.train.max_epochs)

    def resolved_train(self):
        cfg = replace(self.train, ratio=self.ratio)
        if not self.decoder_active:
            cfg = replace(cfg, loss=replace(cfg.loss, c_reco={"natural": 0.0, "synthetic": 0.0}))
        return cfg

    def to_dict(self):
        return {
            "source": self.source if isinstance(self.source, str) else None,
            "plan": self.plan.to_dict(),
            "ratio": format_ratio(self.ratio),
            "train": self.train.to_dict(),
            "decoder_active": self.decoder_active,
            "load_optimizer_state": self.load_optimizer_state,
        }


def load_source(source):
    """A fresh TwinVAE initialised from a checkpoint path or copied from a model."""
    if isinstance(source, str | os.PathLike):
        model, _ = load_checkpoint(os.fspath(source))
        return model
    if isinstance(source, TwinVAE):
        model = TwinVAE(source.config)
        model.load_state_arrays(source.state_arrays())
        return model
    raise TypeError("transfer source must be a checkpoint path or a TwinVAE")


def transfer_train(cfg, nat, syn, val=None, out_dir=None, epoch_offset=0):
    """Initialise every group from ``cfg.source`` and keep training on the new data."""
    model = load_source(cfg.source)
    tcfg = cfg.resolved_train()
    plan = cfg.plan
    optimizer = None
    if cfg.load_optimizer_state and isinstance(cfg.source, str | os.PathLike):
        from .nncore import Optimizer
        optimizer = Optimizer(model.parameters(), kind=tcfg.optimizer, lr=tcfg.learning_rate,
                              weight_decay_per_epoch=tcfg.weight_decay_per_epoch)
        load_checkpoint(os.fspath(cfg.source), model, optimizer)
    # with the decoder off the outer decoders are inactive, so the optimizer skips them
    return train(model, nat, syn, tcfg, freeze_plan=plan, val=val, out_dir=out_dir,
                 optimizer=optimizer, decode_outer=cfg.decoder_active, epoch_offset=epoch_offset)


@dataclass
class DoubleTransferResult:
    model: TwinVAE
    first: object
    second: object
    history: TrainingHistory


def double_transfer(cfg_ab, data_b, cfg_ba, data_a, out_dir=None):
    """Transfer A->B, then use the best A->B state as the source for B->A.

    ``data_b`` / ``data_a`` are ``(nat, syn, val)`` tuples for each leg.
    """
    dirs = [None, None]
    if out_dir:
        dirs = [os.path.join(out_dir, "leg1"), os.path.join(out_dir, "leg2")]
        for d in dirs:
            os.makedirs(d, exist_ok=True)
    first = transfer_train(cfg_ab, *data_b, out_dir=dirs[0])
    bridge = first.model
    bridge.load_state_arrays(first.best_state)
    second = transfer_train(replace(cfg_ba, source=bridge), *data_a, out_dir=dirs[1],
                            epoch_offset=first.epochs_run)
    history = TrainingHistory()
    history.extend(first.history)
    history.extend(second.history)
    model = second.model
    model.load_state_arrays(second.best_state)
    return DoubleTransferResult(model, first, second, history)


# ---------------------------------------------------------------- ratio sweep

def epochs_to_milestone(history, target):
    """First recorded epoch whose validation MAE is <= ``target`` (None if never)."""
    for r in history.records:
        if r.val_mae is not None and r.val_mae <= target:
            return r.epoch
    return None


def _sweep_leg(args):
    cfg, nat, syn, val, milestone = args
    result = transfer_train(cfg, nat, syn, val)
    last = [r for r in result.history.records if r.val_mae is not None]
    rec = last[-1] if last else None
    return {
        "ratio": format_ratio(cfg.ratio),
        "seed": cfg.train.seed,
        "final_mae": rec.val_mae if rec else None,
        "final_mre": rec.val_mre if rec else None,
        "final_acc": rec.val_acc if rec else None,
        "epochs_to_milestone": (epochs_to_milestone(result.history, milestone)
                                if milestone is not None else None),
    }


def ratio_sweep(base, ratios, nat, syn, val=None, seeds=(0,), milestone=None, jobs=1):
    """One transfer run per (ratio, seed); returns rows with the sweep CSV columns."""
    ratios = [parse_ratio(r) for r in ratios]
    if not ratios or any(r <= 0 for r in ratios):
        raise ValueError("ratio_sweep needs positive ratios")
    legs = [(replace(base, ratio=r, train=replace(base.train, seed=s)), nat, syn, val, milestone)
            for r in ratios for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_leg, legs))
    return [_sweep_leg(leg) for leg in legs]


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow(["" if row[c] is None else row[c] for c in SWEEP_COLUMNS])
