"""Command-line entry point: ``twincount <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 I/O or dataset error,
4 non-finite loss, 5 checkpoint mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor

from . import __version__
from . import synthgen as sg
from .datapipe import AugmentConfig, DatasetError, format_ratio, load_dataset, parse_ratio
from .evalkit import (evaluate, export_embeddings, metrics_csv_text, write_metrics_csv,
                      write_report)
from .nncore.checkpoint import CheckpointError
from .trainer import (NonFiniteLossError, TrainConfig, TrainingHistory, load_checkpoint,
                      save_checkpoint, train)
from .transfer import FreezePlan, STRATEGIES, TransferConfig, double_transfer, transfer_train
from .twinvae import ModelConfig, TwinVAE

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_CHECKPOINT = 0, 2, 3, 4, 5
RUN_ROOT_ENV = "TWINCOUNT_RUN_ROOT"
SECTIONS = ("generator", "data", "model", "train", "transfer", "eval")
SECTION_KEYS = {
    "generator": set(sg.GeneratorConfig.__dataclass_fields__) | {"count_range", "n_images", "labeled"},
    "data": {"nat", "syn", "val"},
    "model": set(ModelConfig.__dataclass_fields__) | {"width_divisor", "seed"},
    "train": set(TrainConfig.__dataclass_fields__),
    "transfer": {"source", "strategy", "ratio", "decoder_active", "load_optimizer_state",
                 "thaw_fraction"},
    "eval": {"batch_size"},
}
# order in which `sweep` tunes parameters when no explicit order is given
SWEEP_ORDER = ("max_epochs", "strategy", "ratio", "noise_amplitude", "crop_scale",
               "c_reco", "c_regr", "c_kld", "learning_rate", "lr_schedule")

log = logging.getLogger("twincount")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- run config

def load_run_config(path=None, overrides=None):
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(raw) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; valid: {list(SECTIONS)} and 'seed'")
    cfg = {s: dict(raw.get(s, {})) for s in SECTIONS}
    cfg["seed"] = raw.get("seed")
    for section, values in (overrides or {}).items():
        cfg[section].update({k: v for k, v in values.items() if v is not None})
    for section in SECTIONS:
        bad = set(cfg[section]) - SECTION_KEYS[section]
        if bad:
            raise ConfigError(f"unknown keys in '{section}': {sorted(bad)}")
    return cfg


def _seeded(section, seed, key="seed"):
    if seed is not None and key not in section:
        section = {**section, key: seed}
    return section


def generator_config(cfg):
    g = _seeded(cfg["generator"], cfg["seed"])
    g = {k: v for k, v in g.items() if k not in ("n_images", "labeled")}
    if "count_range" in g:
        lo, hi = g.pop("count_range")
        g["count_weights"] = sg.uniform_weights(int(lo), int(hi))
    try:
        return sg.GeneratorConfig.from_dict(g)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def model_config(cfg):
    m = {k: v for k, v in cfg["model"].items() if k not in ("width_divisor", "seed")}
    div = cfg["model"].get("width_divisor", 1)
    try:
        return ModelConfig.scaled(div, **m) if div != 1 else ModelConfig(**m)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def train_config(cfg):
    try:
        return TrainConfig.from_dict(_seeded(cfg["train"], cfg["seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def resolved(cfg):
    """Every section with defaults applied, for config.resolved.json."""
    tcfg = train_config(cfg)
    out = {
        "version": __version__,
        "seed": cfg["seed"],
        "generator": generator_config(cfg).to_dict(),
        "data": cfg["data"],
        "model": {**model_config(cfg).to_dict(), "seed": cfg["model"].get("seed", cfg["seed"] or 0)},
        "train": tcfg.to_dict(),
        "transfer": {"strategy": "simultaneous", "ratio": format_ratio(tcfg.ratio),
                     "decoder_active": True, "load_optimizer_state": False,
                     "thaw_fraction": 0.25, **cfg["transfer"]},
        "eval": {"batch_size": 64, **cfg["eval"]},
    }
    return out


# ---------------------------------------------------------------- helpers

def prepare_run_dir(path, force):
    if path is None:
        raise ConfigError(f"--out is required (or set {RUN_ROOT_ENV})")
    if os.path.exists(path) and os.listdir(path):
        if not force:
            raise FileExistsError(f"{path} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def default_out(args, name):
    if args.out:
        return args.out
    root = os.environ.get(RUN_ROOT_ENV)
    return os.path.join(root, name) if root else None


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_pools(nat_dir, syn_dir, val_dir, ratio):
    nat = load_dataset(nat_dir, origin="natural") if nat_dir else None
    syn = load_dataset(syn_dir, origin="synthetic") if syn_dir else None
    if ratio > 0 and syn is None:
        raise ConfigError(f"ratio {format_ratio(ratio)} needs a synthetic pool: pass --syn")
    if not math.isinf(ratio) and nat is None:
        raise ConfigError(f"ratio {format_ratio(ratio)} needs a natural pool: pass --nat")
    val = None
    if val_dir:
        val = load_dataset(val_dir, origin="natural" if nat is not None else "synthetic", split="val")
    return nat, syn, val


def finish_run(run_dir, result, val, resolved_cfg, extra_meta=None):
    result.model.load_state_arrays(result.best_state)
    if result.checkpoint_path is None or not os.path.exists(result.checkpoint_path):
        save_checkpoint(result.model, result.optimizer, os.path.join(run_dir, "best.ckpt"))
    metrics = {}
    if val is not None and len(val) and (val.labels >= 1).any():
        metrics["val"] = evaluate(result.model, val)
        write_metrics_csv(metrics, os.path.join(run_dir, "metrics.csv"))
    if val is not None and len(val):
        export_embeddings(result.model, val, os.path.join(run_dir, "embeddings.csv"))
    if result.history.records:
        write_report(result.history, metrics, os.path.join(run_dir, "report"))
    meta = {"best_epoch": result.best_epoch, "best_value": result.best_value,
            "epochs_run": result.epochs_run, "stopped_early": result.stopped_early,
            **(extra_meta or {})}
    write_json(meta, os.path.join(run_dir, "run.json"))
    return metrics


def _overrides(args, **train_keys):
    return {"train": {k: v for k, v in train_keys.items() if v is not None}}


# ---------------------------------------------------------------- commands

def cmd_gen(args):
    cfg = load_run_config(args.config, {"generator": {"seed": args.seed}})
    if args.style:
        if args.style not in sg.STYLES:
            raise ConfigError(f"unknown style {args.style!r}; valid styles: {', '.join(sg.STYLES)}")
        cfg["generator"]["style"] = args.style
    n = args.n if args.n is not None else cfg["generator"].get("n_images")
    if n is None or n < 1:
        raise ConfigError("--n must be a positive integer")
    try:
        gcfg = generator_config(cfg)
    except sg.ConfigError as exc:
        raise ConfigError(str(exc)) from exc
    labeled = not args.unlabeled and cfg["generator"].get("labeled", True)
    sg.generate_dataset(gcfg, n, args.out, jobs=args.jobs, labeled=labeled)
    print(os.path.join(args.out, "manifest.json"))
    return EXIT_OK


def cmd_train(args):
    cfg = load_run_config(args.config, _overrides(args, max_epochs=args.max_epochs, ratio=args.ratio))
    data = cfg["data"]
    tcfg = train_config(cfg)
    mcfg = model_config(cfg)
    nat, syn, val = load_pools(args.nat or data.get("nat"), args.syn or data.get("syn"),
                               args.val or data.get("val"), tcfg.ratio)
    run_dir = prepare_run_dir(default_out(args, "train"), args.force)
    res = resolved(cfg)
    write_json(res, os.path.join(run_dir, "config.resolved.json"))
    model = TwinVAE(mcfg, seed=res["model"]["seed"])
    result = train(model, nat, syn, tcfg, val=val, out_dir=run_dir)
    finish_run(run_dir, result, val, res)
    print(run_dir)
    return EXIT_OK


def _transfer_config(cfg, args, checkpoint):
    tcfg = train_config(cfg)
    t = cfg["transfer"]
    strategy = args.freeze or t.get("strategy", "simultaneous")
    plan = FreezePlan.named(strategy, tcfg.max_epochs, t.get("thaw_fraction", 0.25)) \
        if strategy == "thawing" else FreezePlan.named(strategy)
    ratio = parse_ratio(args.ratio if args.ratio is not None else t.get("ratio", tcfg.ratio))
    decoder = t.get("decoder_active", True) and not args.no_decoder
    try:
        return TransferConfig(source=checkpoint, plan=plan, ratio=ratio, train=tcfg,
                              decoder_active=decoder,
                              load_optimizer_state=t.get("load_optimizer_state", False))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_transfer(args):
    cfg = load_run_config(args.config, _overrides(args, max_epochs=args.max_epochs))
    source = args.checkpoint or cfg["transfer"].get("source")
    if not source:
        raise ConfigError("transfer needs --checkpoint (or transfer.source)")
    tc = _transfer_config(cfg, args, source)
    data = cfg["data"]
    nat, syn, val = load_pools(args.nat or data.get("nat"), args.syn or data.get("syn"),
                               args.val or data.get("val"), tc.ratio)
    run_dir = prepare_run_dir(default_out(args, "transfer"), args.force)
    res = resolved(cfg)
    res["transfer"] = tc.to_dict()
    write_json(res, os.path.join(run_dir, "config.resolved.json"))
    result = transfer_train(tc, nat, syn, val=val, out_dir=run_dir)
    finish_run(run_dir, result, val, res, {"plan": tc.plan.to_dict()})
    print(run_dir)
    return EXIT_OK


def cmd_double_transfer(args):
    cfg = load_run_config(args.config, _overrides(args, max_epochs=args.max_epochs))
    tc = _transfer_config(cfg, args, args.checkpoint)
    pools_b = load_pools(args.nat_b, args.syn_b, args.val_b, tc.ratio)
    pools_a = load_pools(args.nat_a, args.syn_a, args.val_a, tc.ratio)
    run_dir = prepare_run_dir(default_out(args, "double-transfer"), args.force)
    res = resolved(cfg)
    res["transfer"] = tc.to_dict()
    write_json(res, os.path.join(run_dir, "config.resolved.json"))
    out = double_transfer(tc, pools_b, tc, pools_a, out_dir=run_dir)
    out.history.to_csv(os.path.join(run_dir, "history.csv"))
    save_checkpoint(out.model, out.second.optimizer, os.path.join(run_dir, "best.ckpt"))
    metrics = {}
    for name, (_, _, val) in (("b", pools_b), ("a", pools_a)):
        if val is not None:
            metrics[f"val_{name}"] = evaluate(out.model, val)
    if metrics:
        write_metrics_csv(metrics, os.path.join(run_dir, "metrics.csv"))
    write_report({"a_to_b": out.first.history, "b_to_a": out.second.history}, metrics,
                 os.path.join(run_dir, "report"))
    print(run_dir)
    return EXIT_OK


def _load_eval_data(args):
    origin = args.origin
    return load_dataset(args.data, origin=origin, split="test")


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = _load_eval_data(args)
    metrics = {os.path.basename(os.path.normpath(args.data)): evaluate(model, ds, args.batch_size)}
    if args.out:
        write_metrics_csv(metrics, args.out)
    sys.stdout.write(metrics_csv_text(metrics))
    return EXIT_OK


def cmd_embed(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = _load_eval_data(args)
    export_embeddings(model, ds, args.out)
    print(args.out)
    return EXIT_OK


def cmd_report(args):
    histories = {}
    for run in args.runs:
        path = os.path.join(run, "history.csv") if os.path.isdir(run) else run
        histories[os.path.basename(os.path.normpath(os.path.dirname(path) or run))] = \
            TrainingHistory.from_csv(path)
    written = write_report(histories, {}, args.out)
    for p in written:
        print(p)
    return EXIT_OK


# ---------------------------------------------------------------- sweep

def parse_grid(items):
    """``["learning_rate=1e-4,1.3e-4", "ratio=1,2"]`` -> ordered {name: [values]}."""
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} must look like name=v1,v2")
        name, values = item.split("=", 1)
        grid[name.strip()] = [_parse_value(v) for v in values.split(",") if v.strip()]
        if not grid[name.strip()]:
            raise ConfigError(f"grid entry {item!r} has no values")
    return grid


def _parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_setting(cfg, name, value):
    """Copy of ``cfg`` with one sweep parameter set; names resolve to their config section."""
    cfg = {s: dict(cfg[s]) if isinstance(cfg[s], dict) else cfg[s] for s in cfg}
    if name == "strategy":
        cfg["transfer"]["strategy"] = value
    elif name == "ratio":
        cfg["train"]["ratio"] = value
        cfg["transfer"]["ratio"] = value
    elif name in ("c_reco", "c_regr", "c_kld"):
        loss = dict(cfg["train"].get("loss", {}))
        loss[name] = value
        cfg["train"]["loss"] = loss
    elif name in ("noise_amplitude", "crop_scale"):
        aug = dict(cfg["train"].get("augment") or AugmentConfig().to_dict())
        if name not in aug:
            raise ConfigError(f"augmentation has no field {name!r}")
        aug[name] = value
        cfg["train"]["augment"] = aug
    elif name in TrainConfig.__dataclass_fields__:
        cfg["train"][name] = value
    elif name in SECTION_KEYS["model"]:
        cfg["model"][name] = value
    else:
        raise ConfigError(f"unknown sweep parameter {name!r}")
    return cfg


def _sweep_run(job):
    cfg, paths, checkpoint, run_dir = job
    tcfg = train_config(cfg)
    nat, syn, val = load_pools(paths["nat"], paths["syn"], paths["val"], tcfg.ratio)
    os.makedirs(run_dir, exist_ok=True)
    if checkpoint:
        t = cfg["transfer"]
        strategy = t.get("strategy", "simultaneous")
        plan = FreezePlan.named(strategy, tcfg.max_epochs) if strategy == "thawing" \
            else FreezePlan.named(strategy)
        tc = TransferConfig(source=checkpoint, plan=plan, ratio=tcfg.ratio, train=tcfg,
                            decoder_active=t.get("decoder_active", True))
        result = transfer_train(tc, nat, syn, val=val, out_dir=run_dir)
    else:
        model = TwinVAE(model_config(cfg), seed=cfg["model"].get("seed", cfg["seed"] or 0))
        result = train(model, nat, syn, tcfg, val=val, out_dir=run_dir)
    evals = [r for r in result.history.records if r.val_mae is not None]
    return evals[-1].val_mae if evals else math.inf


def one_at_a_time(cfg, grid, evaluate_setting, passes=1, jobs=1, order=None):
    """Tune one parameter at a time over its grid, carrying the best value forward.

    Returns the list of trial rows and the final chosen settings.
    """
    names = list(grid)
    if order:
        names = [n for n in order if n in grid] + [n for n in names if n not in order]
    best = {}
    rows = []
    for p in range(passes):
        for name in names:
            base = cfg
            for k, v in best.items():
                if k != name:
                    base = apply_setting(base, k, v)
            trials = [(value, apply_setting(base, name, value)) for value in grid[name]]
            scores = evaluate_setting([(name, value, c, p) for value, c in trials], jobs)
            for (value, _), score in zip(trials, scores):
                rows.append({"pass": p, "parameter": name, "value": value, "val_mae": score})
            best[name] = trials[min(range(len(scores)), key=lambda i: scores[i])][0]
    return rows, best


def cmd_sweep(args):
    cfg = load_run_config(args.config, _overrides(args, max_epochs=args.max_epochs))
    grid = parse_grid(args.grid)
    data = cfg["data"]
    paths = {"nat": args.nat or data.get("nat"), "syn": args.syn or data.get("syn"),
             "val": args.val or data.get("val")}
    checkpoint = args.checkpoint or cfg["transfer"].get("source")
    root = prepare_run_dir(default_out(args, "sweep"), args.force)
    for name, values in grid.items():
        for v in values:
            apply_setting(cfg, name, v)   # fail fast on unknown parameters
    counter = [0]

    def evaluate_setting(trials, jobs):
        work = []
        for name, value, c, p in trials:
            counter[0] += 1
            run_dir = os.path.join(root, f"run{counter[0]:03d}_p{p}_{name}_{value}")
            work.append((c, paths, checkpoint, run_dir))
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                return list(pool.map(_sweep_run, work))
        return [_sweep_run(w) for w in work]

    order = args.order.split(",") if args.order else SWEEP_ORDER
    rows, best = one_at_a_time(cfg, grid, evaluate_setting, args.passes, args.jobs, order)
    with open(os.path.join(root, "sweep.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, ["pass", "parameter", "value", "val_mae"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    write_json({"best": best, "runs": len(rows)}, os.path.join(root, "best.json"))
    print(os.path.join(root, "sweep.csv"))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="twincount", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--style")
    g.add_argument("--seed", type=int)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--unlabeled", action="store_true")
    g.set_defaults(func=cmd_gen)

    def run_args(sp, pools=True):
        sp.add_argument("--config")
        sp.add_argument("--out")
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--max-epochs", type=int)
        if pools:
            sp.add_argument("--nat")
            sp.add_argument("--syn")
            sp.add_argument("--val")

    t = sub.add_parser("train", help="train a model from scratch")
    run_args(t)
    t.add_argument("--ratio")
    t.set_defaults(func=cmd_train)

    def transfer_args(sp):
        sp.add_argument("--freeze", choices=STRATEGIES)
        sp.add_argument("--ratio")
        sp.add_argument("--no-decoder", action="store_true")

    tr = sub.add_parser("transfer", help="continue training from a checkpoint")
    run_args(tr)
    tr.add_argument("--checkpoint")
    transfer_args(tr)
    tr.set_defaults(func=cmd_transfer)

    dt = sub.add_parser("double-transfer", help="transfer A->B, then back B->A")
    run_args(dt, pools=False)
    dt.add_argument("--checkpoint", required=True)
    for leg in ("a", "b"):
        for pool in ("nat", "syn", "val"):
            dt.add_argument(f"--{pool}-{leg}")
    transfer_args(dt)
    dt.set_defaults(func=cmd_double_transfer)

    for name, func, help_text in (("eval", cmd_eval, "metrics of a checkpoint on a dataset"),
                                  ("embed", cmd_embed, "export latent means to CSV")):
        e = sub.add_parser(name, help=help_text)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--origin", choices=("natural", "synthetic"))
        e.add_argument("--out", required=(name == "embed"))
        e.add_argument("--batch-size", type=int, default=64)
        e.set_defaults(func=func)

    s = sub.add_parser("sweep", help="one-parameter-at-a-time search")
    run_args(s)
    s.add_argument("--checkpoint")
    s.add_argument("--grid", action="append", required=True, help="name=v1,v2 (repeatable)")
    s.add_argument("--passes", type=int, default=1)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--order", help="comma-separated parameter order")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="SVG/CSV report from run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteLossError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, sg.ConfigError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
