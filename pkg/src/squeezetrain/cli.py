"""Command-line entry point: ``squeezetrain <command> [options]``.

Commands: train, eval, attack, valley, ratio, angle, landscape.  Settings come
from an optional ``key=value`` config file (``--config``) whose keys carry a
section prefix (``data.``, ``train.``, ``attack.``, ``eval.``); flags and
``--set key=value`` override the file.  Every run writes its fully resolved
config to ``<out>/config.txt``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, craft
from .data_io import (Checkpoint, DataFormatError, Dataset, load_checkpoint,
                      load_cifar10_bin, load_idx, save_checkpoint, synth_blobs, write_metrics,
                      write_rows)
from .eval_landscape import (collab_ratio_probe, landscape_slice, perturbation_angles,
                             robust_eval, standard_suite, valley_curve)
from .models import ModelSpec
from .training import NumericError, TrainConfig, train

log = logging.getLogger("squeezetrain")

COMMANDS = ("train", "eval", "attack", "valley", "ratio", "angle", "landscape")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- value parsing ----------------------------------------------------------


def _float(s: str) -> float:
    s = s.strip()
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else _float(s)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(item):
    def parse(s: str):
        return tuple(item(p) for p in s.split(",") if p.strip())
    return parse


def _str(s: str) -> str:
    return s.strip()


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRAIN_TYPES = {
    "method": _str, "beta": _float, "reg": _str, "epsilon": _float, "alpha": _float,
    "steps": int, "init_sigma": _float, "at_start": _str, "collab_start": _str,
    "post_select": _bool, "epochs": int, "batch_size": int, "lr": _float, "momentum": _float,
    "weight_decay": _float, "lr_decay_epochs": _list(int), "lr_decay_factor": _float,
    "eval_steps": int, "eval_alpha": _opt_float, "selection_size": int,
    "track_collab_ratio": _bool, "epsilon_ramp_epochs": int, "seed": int,
}
assert set(_TRAIN_TYPES) == {f.name for f in fields(TrainConfig)}

KEYS = {
    "data.dataset": _str, "data.root": _str, "data.train_size": int, "data.test_size": int,
    "data.classes": int, "data.dim": int, "data.separation": _float, "data.sigma": _float,
    "data.seed": int,
    "train.model": _str, "train.widths": _list(int),
    **{f"train.{k}": t for k, t in _TRAIN_TYPES.items()},
    "attack.name": _str, "attack.epsilon": _float, "attack.alpha": _float, "attack.steps": int,
    "attack.start": _str, "attack.loss": _str, "attack.direction": _str, "attack.seed": int,
    "attack.init_sigma": _float, "attack.count": int, "attack.offset": int,
    "attack.budgets": _list(_float), "attack.grid": int, "attack.extent": _opt_float,
    "attack.u_mode": _str, "attack.bins": int,
    "eval.attacks": _list(_str), "eval.workers": int, "eval.batch": int, "eval.count": int,
}

# per-dataset budget, attack step and valley step; inner training steps (and the
# ratio probe, which replays them) default to a quarter of the budget
PRESETS = {
    "mnist": {"epsilon": 0.3, "alpha": 0.01, "valley_alpha": 0.01,
              "budgets": (0.05, 0.1, 0.2, 0.3)},
    "cifar10": {"epsilon": 8 / 255, "alpha": 2 / 255, "valley_alpha": 1 / 255,
                "budgets": (2 / 255, 4 / 255, 8 / 255, 16 / 255)},
    "blobs": {"epsilon": 0.1, "alpha": 0.01, "valley_alpha": 0.005,
              "budgets": (0.025, 0.05, 0.1)},
}

BASE_DEFAULTS = {
    "data.dataset": "mnist", "data.root": "", "data.train_size": 0, "data.test_size": 0,
    "data.classes": 3, "data.dim": 16, "data.separation": 0.5, "data.sigma": 0.05, "data.seed": 0,
    "train.model": "mlp", "train.widths": (),
    "attack.name": "pgd20", "attack.steps": 20, "attack.start": "uniform_random",
    "attack.loss": "ce", "attack.direction": "ascend", "attack.seed": 0,
    "attack.init_sigma": 0.001, "attack.count": 256, "attack.offset": 0, "attack.grid": 41,
    "attack.extent": None, "attack.u_mode": "collaborative", "attack.bins": 36,
    "eval.attacks": ("fgsm", "pgd20", "pgd100", "cw"), "eval.workers": 1, "eval.batch": 500,
    "eval.count": 0,
}

COMMAND_DEFAULTS = {
    "valley": {"attack.steps": 100, "attack.start": "benign", "attack.direction": "descend"},
    "ratio": {"attack.steps": 10, "attack.start": "gaussian"},
    "angle": {"attack.steps": 1, "attack.start": "benign"},
    "landscape": {"attack.steps": 10, "attack.start": "benign"},
}


def parse_assignment(line: str, where: str) -> tuple[str, str]:
    if "=" not in line:
        raise UsageError(f"{where}: expected key=value, got {line!r}")
    key, value = line.split("=", 1)
    key = key.strip()
    if key not in KEYS:
        raise UsageError(f"{where}: unknown key {key!r}")
    return key, value.strip()


def read_config_file(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for n, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                key, value = parse_assignment(line, f"{path}:{n}")
                out[key] = value
    return out


def _flag_overrides(args) -> dict[str, str]:
    section = "train" if args.command == "train" else "attack"
    raw = {}
    for flag, key in (("epsilon", f"{section}.epsilon"), ("alpha", f"{section}.alpha"),
                      ("steps", f"{section}.steps"), ("beta", "train.beta"),
                      ("reg", "train.reg"), ("method", "train.method"),
                      ("epochs", "train.epochs"), ("workers", "eval.workers"),
                      ("data", "data.dataset"), ("data_root", "data.root")):
        v = getattr(args, flag)
        if v is not None:
            raw[key] = str(v)
    if args.seed is not None:
        raw["train.seed"] = raw["attack.seed"] = str(args.seed)
    if args.attack is not None:
        raw["eval.attacks" if args.command == "eval" else "attack.name"] = args.attack
    for item in args.set or ():
        key, value = parse_assignment(item, "--set")
        raw[key] = value
    return raw


def resolve_config(args) -> dict:
    """File values, then flags, typed and completed with dataset/command defaults."""
    try:
        raw = read_config_file(args.config) if args.config else {}
    except (FileNotFoundError, IsADirectoryError) as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    raw.update(_flag_overrides(args))
    cfg = {}
    for key, value in raw.items():
        try:
            cfg[key] = KEYS[key](value)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    dataset = cfg.get("data.dataset", BASE_DEFAULTS["data.dataset"])
    if dataset not in PRESETS:
        raise UsageError(f"unknown dataset {dataset!r}; expected one of {sorted(PRESETS)}")
    preset = PRESETS[dataset]
    defaults = dict(BASE_DEFAULTS)
    defaults.update(COMMAND_DEFAULTS.get(args.command, {}))
    defaults.update({"attack.epsilon": preset["epsilon"], "attack.alpha": preset["alpha"],
                     "attack.budgets": preset["budgets"]})
    if args.command == "valley":
        defaults["attack.alpha"] = preset["valley_alpha"]
    elif args.command == "ratio":
        defaults["attack.alpha"] = cfg.get("attack.epsilon", preset["epsilon"]) / 4
    train_eps = cfg.get("train.epsilon", preset["epsilon"])
    tc = TrainConfig()
    defaults.update({f"train.{f.name}": getattr(tc, f.name) for f in fields(TrainConfig)})
    defaults.update({"train.epsilon": train_eps, "train.alpha": train_eps / 4,
                     "train.eval_alpha": preset["alpha"], "train.reg": tc.reg.value})
    for key, value in defaults.items():
        cfg.setdefault(key, value)
    return dict(sorted(cfg.items()))


def write_resolved(cfg: dict, out: Path):
    with open(out / "config.txt", "w", encoding="utf-8") as f:
        for key, value in cfg.items():
            f.write(f"{key}={_fmt(value)}\n")


# -- building blocks --------------------------------------------------------


def _find(root: Path, names) -> Path:
    for name in names:
        for candidate in (root / name, root / f"{name}.gz"):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"none of {list(names)} (or .gz) found under {root}")


def load_split(cfg: dict, split: str) -> Dataset:
    dataset = cfg["data.dataset"]
    size = cfg[f"data.{split}_size"]
    if dataset == "blobs":
        n = size or (600 if split == "train" else 200)
        seed = cfg["data.seed"] + (0 if split == "train" else 1)
        return synth_blobs(seed, n, cfg["data.classes"], cfg["data.dim"], cfg["data.separation"],
                           cfg["data.sigma"])
    if not cfg["data.root"]:
        raise UsageError(f"data.root is required for dataset {dataset}")
    root = Path(cfg["data.root"])
    if dataset == "mnist":
        prefix = "train" if split == "train" else "t10k"
        ds = load_idx(_find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"]),
                      _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"]),
                      split=split)
    else:
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
        ds = load_cifar10_bin([_find(root, [n]) for n in names], split=split)
    return ds.subset(np.arange(min(size, len(ds)))) if size else ds


def model_spec(cfg: dict, data: Dataset) -> ModelSpec:
    return ModelSpec(cfg["train.model"], data.input_shape, data.num_classes,
                     cfg["train.widths"] or None)


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{f.name: cfg[f"train.{f.name}"] for f in fields(TrainConfig)})


def attack_config(cfg: dict, name: str | None = None) -> AttackConfig:
    """Named attack (fgsm, pgd20, pgd100, cw) at the configured budget, or a custom one."""
    eps, alpha, seed = cfg["attack.epsilon"], cfg["attack.alpha"], cfg["attack.seed"]
    name = name if name is not None else cfg["attack.name"]
    suite = standard_suite(eps, alpha, seed)
    if name in suite:
        return suite[name]
    if name != "custom":
        raise UsageError(f"unknown attack {name!r}; expected one of {sorted(suite)} or custom")
    return AttackConfig(eps, alpha, cfg["attack.steps"], start=cfg["attack.start"],
                        loss=cfg["attack.loss"], direction=cfg["attack.direction"], seed=seed,
                        init_sigma=cfg["attack.init_sigma"])


def load_model(args) -> tuple[ModelSpec, dict]:
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    try:
        spec = ModelSpec.from_dict(ckpt.spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{args.checkpoint}: bad model spec ({exc})") from None
    return spec, ckpt.tensors


def _window(cfg: dict, data: Dataset) -> Dataset:
    lo = cfg["attack.offset"]
    hi = min(len(data), lo + cfg["attack.count"])
    if lo < 0 or lo >= hi:
        raise UsageError(f"attack.offset {lo} leaves no examples")
    return data.subset(np.arange(lo, hi))


# -- commands ---------------------------------------------------------------


def cmd_train(args, cfg, out: Path):
    data = load_split(cfg, "train")
    selection = load_split(cfg, "test")
    spec = model_spec(cfg, data)
    tc = train_config(cfg)
    result = train(spec, data, tc, selection=selection)
    meta = {k: _fmt(v) for k, v in cfg.items()}
    for name, params, epoch in (("best", result.best_params, result.best_epoch),
                                ("final", result.final_params, tc.epochs)):
        rec = result.metrics[epoch]
        save_checkpoint(out / f"{name}.stck", Checkpoint(
            spec.to_dict(), params, meta, epoch,
            {"clean_acc": rec.clean_acc, "pgd20_acc": rec.pgd20_acc}))
    write_metrics(out / "metrics.csv", result.metrics)
    if args.timing:
        write_rows(out / "timing.csv", ("epoch", "seconds"),
                   ((r.epoch, r.seconds) for r in result.metrics))
    best = result.metrics[result.best_epoch]
    print(f"best epoch {result.best_epoch}: clean {best.clean_acc:.4f} pgd20 {best.pgd20_acc:.4f}")


def cmd_eval(args, cfg, out: Path):
    spec, params = load_model(args)
    data = load_split(cfg, "test")
    if cfg["eval.count"]:
        data = data.subset(np.arange(min(cfg["eval.count"], len(data))))
    suite = {name: attack_config(cfg, name) for name in cfg["eval.attacks"]}
    report = robust_eval(spec, params, data, suite, batch=cfg["eval.batch"],
                         workers=cfg["eval.workers"])
    report.write_csv(out / "report.csv")
    print(report.summary())


def cmd_attack(args, cfg, out: Path):
    spec, params = load_model(args)
    data = _window(cfg, load_split(cfg, "test"))
    acfg = attack_config(cfg)
    result = craft(spec, params, data.inputs, data.labels, acfg)
    benign = craft(spec, params, data.inputs, data.labels,
                   AttackConfig(0.0, 1.0, 1, loss=acfg.loss)).losses
    save_checkpoint(out / "crafted.stck", Checkpoint(
        spec.to_dict(), {"crafted": result.examples, "benign": data.inputs,
                         "labels": data.labels.astype(np.float32)},
        {k: _fmt(v) for k, v in cfg.items()}))
    rows = ((int(cfg["attack.offset"] + i), int(y), float(b), float(c))
            for i, (y, b, c) in enumerate(zip(data.labels, benign, result.losses)))
    write_rows(out / "losses.csv", ("index", "label", "benign_loss", "crafted_loss"), rows)
    print(f"{len(data)} examples: mean loss {benign.mean():.4f} -> {result.losses.mean():.4f}")


def cmd_valley(args, cfg, out: Path):
    spec, params = load_model(args)
    data = _window(cfg, load_split(cfg, "test"))
    curve = valley_curve(spec, params, data, cfg["attack.budgets"], steps=cfg["attack.steps"],
                         alpha=cfg["attack.alpha"])
    curve.write_csv(out / "valley.csv", cfg["attack.steps"], cfg["attack.alpha"])
    for eps, m in zip(curve.budgets, curve.mean_ce):
        print(f"eps {eps:.4f}: mean CE {m:.6f}")


def cmd_ratio(args, cfg, out: Path):
    spec, params = load_model(args)
    data = _window(cfg, load_split(cfg, "test"))
    inner = AttackConfig(cfg["attack.epsilon"], cfg["attack.alpha"], cfg["attack.steps"],
                         start=cfg["attack.start"], seed=cfg["attack.seed"],
                         init_sigma=cfg["attack.init_sigma"])
    ratio = collab_ratio_probe(spec, params, data, inner)
    write_rows(out / "ratio.csv", ("epsilon", "alpha", "steps", "n", "collab_ratio"),
               [(inner.epsilon, inner.alpha, inner.steps, len(data), ratio)])
    print(f"collaborative ratio {ratio:.4f} over {len(data)} examples")


def cmd_angle(args, cfg, out: Path):
    spec, params = load_model(args)
    data = _window(cfg, load_split(cfg, "test"))
    base = AttackConfig(cfg["attack.epsilon"], cfg["attack.alpha"], cfg["attack.steps"],
                        start=cfg["attack.start"], loss=cfg["attack.loss"], seed=cfg["attack.seed"])
    hist = perturbation_angles(spec, params, data, base, base, bins=cfg["attack.bins"])
    hist.write_csv(out / "angles.csv")
    if len(hist.angles):
        print(f"{len(hist.angles)} angles, mean {hist.angles.mean():.3f} deg, skipped {hist.skipped}")
    else:
        print(f"no measurable angles, skipped {hist.skipped}")


def cmd_landscape(args, cfg, out: Path):
    spec, params = load_model(args)
    data = load_split(cfg, "test")
    i = cfg["attack.offset"]
    if not 0 <= i < len(data):
        raise UsageError(f"attack.offset {i} outside the test split")
    base = AttackConfig(cfg["attack.epsilon"], cfg["attack.alpha"], cfg["attack.steps"],
                        start=cfg["attack.start"], seed=cfg["attack.seed"])
    sl = landscape_slice(spec, params, data.inputs[i], data.labels[i], u_mode=cfg["attack.u_mode"],
                         grid=cfg["attack.grid"], extent=cfg["attack.extent"], cfg=base,
                         seed=cfg["attack.seed"])
    sl.write_csv(out / "landscape.csv")
    c = cfg["attack.grid"] // 2
    print(f"CE at centre {sl.ce[c, c]:.6f}, min {sl.ce.min():.6f}, max {sl.ce.max():.6f}")


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "valley": cmd_valley,
            "ratio": cmd_ratio, "angle": cmd_angle, "landscape": cmd_landscape}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="squeezetrain", description="Squeeze training, baselines and diagnostics.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=_float)
    p.add_argument("--alpha", type=_float)
    p.add_argument("--steps", type=int)
    p.add_argument("--beta", type=_float)
    p.add_argument("--reg", choices=("kl", "symkl", "js", "l2"))
    p.add_argument("--method", choices=("standard", "at", "trades", "collab", "st"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--attack", help="attack name, or a comma list for eval")
    p.add_argument("--workers", type=int)
    p.add_argument("--data", help="dataset: mnist, cifar10 or blobs")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--timing", action="store_true", help="train: also write timing.csv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out)
        HANDLERS[args.command](args, cfg, out)
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, ad.ShapeError, ad.BindingError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
