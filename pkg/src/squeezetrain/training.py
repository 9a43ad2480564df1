"""Outer optimisation for standard, AT, TRADES, collaborative-only and squeeze training."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, craft, divergence_ascent, pgd
from .data_io import Dataset, MetricsRecord
from .divergences import RegKind, ce_rows, kl_rows, reg_rows
from .models import ModelSpec, apply, correct, init_params, logits, probs
from .squeeze_inner import InnerConfig, SqueezePair, squeeze_pair

log = logging.getLogger(__name__)

METHODS = ("standard", "at", "trades", "collab", "st")


class NumericError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


@dataclass(frozen=True)
class TrainConfig:
    method: str = "st"
    beta: float = 6.0
    reg: RegKind = RegKind.SYM_KL
    epsilon: float = 0.3
    alpha: float = 0.075
    steps: int = 10
    init_sigma: float = 0.001
    at_start: str = "uniform_random"
    collab_start: str = "benign"
    post_select: bool = False
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    eval_steps: int = 20
    eval_alpha: float | None = None
    selection_size: int = 1000
    track_collab_ratio: bool = False
    # inner budget (and step) grow linearly to full size over the first epochs
    epsilon_ramp_epochs: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "reg", RegKind.parse(self.reg))
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.beta < 0 or self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("need beta >= 0, lr > 0, batch_size >= 1 and epochs >= 1")
        decays = self.lr_decay_epochs
        if any(b <= a for a, b in zip(decays, decays[1:])) or any(e >= self.epochs for e in decays):
            raise ValueError("lr_decay_epochs must be strictly increasing and below epochs")
        if self.epsilon_ramp_epochs < 0 or self.epsilon_ramp_epochs > self.epochs:
            raise ValueError("epsilon_ramp_epochs must lie in [0, epochs]")
        if self.method == "st" and not self.reg.symmetric:
            raise ValueError("st needs a symmetric regularizer")

    def inner_config(self, seed: int) -> InnerConfig:
        return InnerConfig(self.steps, self.alpha, self.epsilon, self.reg, self.init_sigma,
                           seed, self.post_select)

    def attack_config(self, seed: int, start: str, direction: str = "ascend") -> AttackConfig:
        return AttackConfig(self.epsilon, self.alpha, self.steps, start=start,
                            direction=direction, seed=seed, init_sigma=self.init_sigma)

    def eval_attack(self) -> AttackConfig:
        alpha = self.eval_alpha if self.eval_alpha is not None else self.alpha
        return pgd(self.epsilon, alpha, self.eval_steps, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reg"] = self.reg.value
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**{**d, "lr_decay_epochs": tuple(d.get("lr_decay_epochs", ()))})


@dataclass
class BatchLoss:
    """A scalar loss expression over the parameter slots, with its bindings.

    Inner crafting has already happened; crafted examples are bound as plain
    inputs so the outer gradient never flows through the attack.
    """

    expr: ad.Expr
    bindings: dict
    crafted: dict[str, np.ndarray] = field(default_factory=dict)
    pair: SqueezePair | None = None


def _input(spec, name, batch):
    return ad.slot(name, (batch, *spec.input_shape))


@lru_cache(maxsize=64)
def _loss_graph(method: str, spec: ModelSpec, batch: int, beta: float, reg: RegKind):
    y = ad.index_slot("y", batch)
    z = apply(spec, _input(spec, "x", batch))
    if method == "at":
        return ad.mean(ce_rows(apply(spec, _input(spec, "x_adv", batch)), y))
    clean = ad.mean(ce_rows(z, y))
    if method == "standard":
        return clean
    p = ad.softmax(z)
    if method == "trades":
        reg_term = kl_rows(ad.softmax(apply(spec, _input(spec, "x_adv", batch))), p)
    elif method == "collab":
        reg_term = kl_rows(ad.softmax(apply(spec, _input(spec, "x_col", batch))), p)
    else:
        p_adv = ad.softmax(apply(spec, _input(spec, "x_adv", batch)))
        p_col = ad.softmax(apply(spec, _input(spec, "x_col", batch)))
        reg_term = reg_rows(reg, p_adv, p_col)
    return clean + beta * ad.mean(reg_term)


def batch_loss(method: str, spec: ModelSpec, params, x_batch, y_batch, cfg: TrainConfig,
               seed: int = 0) -> BatchLoss:
    """Run the method's inner crafting and return the outer loss expression."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    x = np.asarray(x_batch, dtype=np.float32)
    y = np.asarray(y_batch)
    bindings = {**params, "x": x, "y": y}
    crafted: dict[str, np.ndarray] = {}
    pair = None
    if method == "at":
        crafted["x_adv"] = craft(spec, params, x, y, cfg.attack_config(seed, cfg.at_start)).examples
    elif method == "trades":
        ref = probs(spec, params, x)
        acfg = cfg.attack_config(seed, "gaussian")
        crafted["x_adv"] = divergence_ascent(spec, params, x, ref, acfg, RegKind.KL).examples
    elif method == "collab":
        acfg = cfg.attack_config(seed, cfg.collab_start, direction="descend")
        crafted["x_col"] = craft(spec, params, x, y, acfg).examples
    elif method == "st":
        pair = squeeze_pair(spec, params, x, y, cfg.inner_config(seed))
        crafted["x_adv"], crafted["x_col"] = pair.x_adv, pair.x_col
    bindings.update(crafted)
    expr = _loss_graph(method, spec, len(x), float(cfg.beta), cfg.reg)
    return BatchLoss(expr, bindings, crafted, pair)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    lr: float
    epoch: int = 0

    @classmethod
    def zeros(cls, params, lr: float) -> OptimizerState:
        return cls({k: np.zeros_like(v) for k, v in params.items()}, lr)


def sgd_step(params, grads, state: OptimizerState, weight_decay: float, momentum: float = 0.9):
    """``v <- momentum v + (g + wd theta)``; ``theta <- theta - lr v``.  Returns new params."""
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.shape}")
        v = np.float32(momentum) * state.velocity[name] + (g + np.float32(weight_decay) * p)
        state.velocity[name] = v
        new[name] = p - np.float32(state.lr) * v
    return new, state


def inner_budget(config: TrainConfig, epoch: int) -> TrainConfig:
    """Config whose inner ``epsilon``/``alpha`` apply at 0-based ``epoch`` under the ramp."""
    ramp = config.epsilon_ramp_epochs
    if ramp == 0 or epoch >= ramp:
        return config
    f = (epoch + 1) / ramp
    return replace(config, epsilon=config.epsilon * f, alpha=config.alpha * f)


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    decays = sum(1 for e in config.lr_decay_epochs if e <= epoch)
    return config.lr * config.lr_decay_factor ** decays


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    return gen.permutation(n)


def batch_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index, 1]).generate_state(1)[0])


def selection_subset(data: Dataset, size: int, seed: int) -> Dataset:
    n = min(size, len(data))
    idx = np.sort(np.random.default_rng([seed, 99]).permutation(len(data))[:n])
    return data.subset(idx)


def accuracy(spec, params, x, y, batch: int = 500) -> tuple[int, int]:
    hits = 0
    for i in range(0, len(x), batch):
        hits += int(correct(logits(spec, params, x[i:i + batch]), y[i:i + batch]).sum())
    return hits, len(x)


def robust_hits(spec, params, x, y, cfg: AttackConfig, batch: int = 500) -> tuple[int, int]:
    hits = 0
    for k, i in enumerate(range(0, len(x), batch)):
        xs, ys = x[i:i + batch], y[i:i + batch]
        adv = craft(spec, params, xs, ys, cfg.with_seed(cfg.seed + k)).examples
        hits += int(correct(logits(spec, params, adv), ys).sum())
    return hits, len(x)


@dataclass
class TrainResult:
    best_params: dict
    final_params: dict
    metrics: list[MetricsRecord]
    best_epoch: int

    def __iter__(self):
        return iter((self.best_params, self.final_params, self.metrics))


def _evaluate(spec, params, sel: Dataset, cfg: TrainConfig, epoch, lr, train_loss, t0):
    from .eval_landscape import collab_ratio_probe

    clean = accuracy(spec, params, sel.inputs, sel.labels)
    rob = robust_hits(spec, params, sel.inputs, sel.labels, cfg.eval_attack())
    ratio = None
    if cfg.track_collab_ratio:
        inner = AttackConfig(cfg.epsilon, cfg.alpha, cfg.steps, start="gaussian",
                             seed=cfg.seed, init_sigma=cfg.init_sigma)
        ratio = collab_ratio_probe(spec, params, sel, inner)
    return MetricsRecord(epoch=epoch, lr=lr, train_loss=train_loss,
                         clean_acc=clean[0] / clean[1], pgd20_acc=rob[0] / rob[1],
                         collab_ratio=ratio, seconds=time.perf_counter() - t0)


def train(spec: ModelSpec, data: Dataset, config: TrainConfig, selection: Dataset | None = None,
          monitor: Callable[[int, int, BatchLoss], None] | None = None,
          on_epoch: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    """Train for ``config.epochs`` epochs and keep the best-PGD-20 checkpoint.

    Epoch 0 in the metrics is the untrained model.  The best checkpoint is
    chosen among trained epochs (1..T), first maximum wins.  ``selection``
    defaults to a seeded subset of ``data``.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    sel = selection_subset(data if selection is None else selection, config.selection_size, config.seed)
    params = init_params(spec, config.seed)
    state = OptimizerState.zeros(params, config.lr)
    t0 = time.perf_counter()
    records = [_evaluate(spec, params, sel, config, 0, config.lr, None, t0)]
    if on_epoch:
        on_epoch(records[0])
    best, best_epoch, best_acc = params, 0, -1.0
    m = config.batch_size
    for epoch in range(config.epochs):
        state.lr = lr_at_epoch(config, epoch)
        state.epoch = epoch
        perm = epoch_permutation(config.seed, epoch, len(data))
        inner = inner_budget(config, epoch)
        total, count = 0.0, 0
        for b, i in enumerate(range(0, len(data), m)):
            idx = perm[i:i + m]
            # overflow is reported below as NumericError rather than as numpy warnings
            with np.errstate(over="ignore", invalid="ignore"):
                bl = batch_loss(config.method, spec, params, data.inputs[idx], data.labels[idx],
                                inner, seed=batch_seed(config.seed, epoch, b))
                if monitor is not None:
                    monitor(epoch, b, bl)
                value, grads, _ = ad.value_and_grad(bl.expr, bl.bindings, list(params))
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
                params, state = sgd_step(params, grads, state, config.weight_decay, config.momentum)
            if not all(np.isfinite(v).all() for v in params.values()):
                raise NumericError(f"non-finite parameters after epoch {epoch + 1}, batch {b}")
            total += float(value) * len(idx)
            count += len(idx)
        rec = _evaluate(spec, params, sel, config, epoch + 1, state.lr, total / count, t0)
        records.append(rec)
        log.info("epoch %d loss %.4f clean %.4f pgd %.4f", rec.epoch, rec.train_loss,
                 rec.clean_acc, rec.pgd20_acc)
        if on_epoch:
            on_epoch(rec)
        if rec.pgd20_acc > best_acc:
            best, best_epoch, best_acc = params, epoch + 1, rec.pgd20_acc
    return TrainResult(best, params, records, best_epoch)
