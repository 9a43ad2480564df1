"""Sign-gradient example crafting inside an l-inf ball intersected with [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autodiff as ad
from .divergences import RegKind, ce_rows, cw_margin, cw_rows, reg_rows  # noqa: F401
from .models import ModelSpec, apply, logits_graph

STARTS = ("benign", "uniform_random", "gaussian")
LOSSES = ("ce", "cw_margin")
DIRECTIONS = ("ascend", "descend")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    steps: int
    start: str = "uniform_random"
    loss: str = "ce"
    direction: str = "ascend"
    seed: int = 0
    init_sigma: float = 0.001  # only used by start="gaussian"

    def __post_init__(self):
        if self.epsilon < 0 or self.alpha <= 0 or self.steps < 1:
            raise ValueError("need epsilon >= 0, alpha > 0 and steps >= 1")
        if self.init_sigma < 0:
            raise ValueError("init_sigma must be non-negative")
        for value, allowed in ((self.start, STARTS), (self.loss, LOSSES),
                               (self.direction, DIRECTIONS)):
            if value not in allowed:
                raise ValueError(f"{value!r} not in {allowed}")

    def with_seed(self, seed: int) -> AttackConfig:
        return replace(self, seed=int(seed))


def fgsm(epsilon: float, seed: int = 0) -> AttackConfig:
    return AttackConfig(epsilon, max(epsilon, 1e-12), 1, start="benign", seed=seed)


def pgd(epsilon: float, alpha: float, steps: int, seed: int = 0, loss: str = "ce") -> AttackConfig:
    return AttackConfig(epsilon, alpha, steps, start="uniform_random", loss=loss, seed=seed)


@dataclass
class CraftedBatch:
    examples: np.ndarray
    losses: np.ndarray
    perturbation: np.ndarray


def project(x: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp ``x`` into ``[x0 - eps, x0 + eps]`` and then into ``[0, 1]``."""
    x = np.asarray(x)
    x0 = np.asarray(x0, dtype=x.dtype)
    if x.shape != x0.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x0.shape}")
    eps = x.dtype.type(epsilon)
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0, 1)


def start_point(x0: np.ndarray, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.start == "benign" or cfg.epsilon == 0:
        return x0.copy()
    if cfg.start == "uniform_random":
        noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape)
    else:
        noise = cfg.init_sigma * rng.standard_normal(x0.shape)
    return project(x0 + noise.astype(x0.dtype), x0, cfg.epsilon)


@lru_cache(maxsize=64)
def _loss_graph(spec: ModelSpec, batch: int, loss: str):
    z = logits_graph(spec, batch)
    labels = ad.index_slot("y", batch)
    rows = ce_rows(z, labels) if loss == "ce" else cw_rows(z, labels)
    return ad.sum(rows), rows


def example_losses(spec, params, x, y, loss: str = "ce") -> np.ndarray:
    """Per-example CE (or CW margin) for a batch."""
    _, rows = _loss_graph(spec, len(x), loss)
    return ad.forward(rows, {**params, "x": np.asarray(x, np.float32), "y": np.asarray(y)})


def sign_steps(x0, x, alpha, epsilon, steps, sgn, grad_fn, on_step=None):
    """``steps`` projected moves of ``sgn * alpha * sign(grad_fn(x))`` starting from ``x``."""
    a = x0.dtype.type(alpha)
    for t in range(steps):
        g = grad_fn(x)
        x = project(x + sgn * a * np.sign(g), x0, epsilon)
        if on_step is not None:
            on_step(t, x)
    return x


def craft(spec: ModelSpec, params, x_batch, y_batch, cfg: AttackConfig,
          on_step: Callable[[int, np.ndarray], None] | None = None) -> CraftedBatch:
    """Iterated sign-gradient steps on CE or CW margin, projected every step.

    ``direction="ascend"`` crafts adversarial examples, ``"descend"``
    collaborative ones.  ``on_step(t, x_t)`` observes every iterate.
    """
    x0 = np.asarray(x_batch, dtype=np.float32)
    y = np.asarray(y_batch)
    rng = np.random.default_rng(cfg.seed)
    x = start_point(x0, cfg, rng)
    if cfg.epsilon > 0:
        total, _ = _loss_graph(spec, len(x0), cfg.loss)
        sgn = 1 if cfg.direction == "ascend" else -1

        def grad_fn(xt):
            return ad.backward(total, {**params, "x": xt, "y": y}, ["x"])["x"]

        x = sign_steps(x0, x, cfg.alpha, cfg.epsilon, cfg.steps, sgn, grad_fn, on_step)
    losses = example_losses(spec, params, x, y, cfg.loss)
    return CraftedBatch(x, losses, x - x0)


@lru_cache(maxsize=64)
def _divergence_graph(spec: ModelSpec, batch: int, kind: RegKind):
    x = ad.slot("x", (batch, *spec.input_shape))
    ref = ad.slot("p_ref", (batch, spec.num_classes))
    rows = reg_rows(kind, ad.softmax(apply(spec, x)), ref)
    return ad.sum(rows), rows


def divergence_ascent(spec: ModelSpec, params, x_batch, ref_probs, cfg: AttackConfig,
                      kind=RegKind.KL, on_step=None) -> CraftedBatch:
    """Maximise ``reg(f(x'), ref_probs)`` over the ball; the reference is held fixed.

    This is the inner maximisation of TRADES when ``ref_probs = f(x)``.  The
    returned ``losses`` are the final per-example divergences.
    """
    kind = RegKind.parse(kind)
    x0 = np.asarray(x_batch, dtype=np.float32)
    ref = np.asarray(ref_probs, dtype=np.float32)
    rng = np.random.default_rng(cfg.seed)
    x = start_point(x0, cfg, rng)
    total, rows = _divergence_graph(spec, len(x0), kind)
    if cfg.epsilon > 0:
        def grad_fn(xt):
            return ad.backward(total, {**params, "x": xt, "p_ref": ref}, ["x"])["x"]

        x = sign_steps(x0, x, cfg.alpha, cfg.epsilon, cfg.steps, 1, grad_fn, on_step)
    losses = ad.forward(rows, {**params, "x": x, "p_ref": ref})
    return CraftedBatch(x, losses, x - x0)
