"""Joint crafting of one adversarial and one collaborative example per input.

Each step re-selects the pair from the triplet ``{x, x', x''}`` by
cross-entropy (highest becomes adversarial, lowest collaborative), then moves
both members with sign-gradient ascent on their mutual discrepancy.  Since the
benign input is always a candidate, ``CE(x_col) <= CE(x) <= CE(x_adv)`` holds
at every selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .attacks import example_losses, project
from .divergences import RegKind, reg_rows
from .models import ModelSpec, apply

COLLABORATIVE, ADVERSARIAL, NEUTRAL = "collaborative", "adversarial", "neutral"
NEIGHBOR_TOL = 1e-6


@dataclass(frozen=True)
class InnerConfig:
    K: int = 10
    alpha: float = 2 / 255
    epsilon: float = 8 / 255
    reg: RegKind = RegKind.SYM_KL
    init_sigma: float = 0.001
    seed: int = 0
    # K + 1 selections; the pair returned is the one selected before the last
    # update.  post_select adds one more selection after it.
    post_select: bool = False

    def __post_init__(self):
        object.__setattr__(self, "reg", RegKind.parse(self.reg))
        if self.K < 0 or self.init_sigma < 0 or self.epsilon < 0 or self.alpha <= 0:
            raise ValueError("need K >= 0, init_sigma >= 0, epsilon >= 0 and alpha > 0")
        if not self.reg.symmetric:
            raise ValueError("the pair regularizer must be symmetric (sym_kl, js or sq_l2)")


@dataclass
class StepRecord:
    ce_adv: np.ndarray
    ce_col: np.ndarray
    ce_benign: np.ndarray
    g_inner: np.ndarray


@dataclass
class SqueezePair:
    x_adv: np.ndarray
    x_col: np.ndarray
    trace: list[StepRecord] = field(default_factory=list)


@lru_cache(maxsize=64)
def _pair_graph(spec: ModelSpec, batch: int, kind: RegKind):
    shape = (batch, *spec.input_shape)
    p_adv = ad.softmax(apply(spec, ad.slot("x_adv", shape)))
    p_col = ad.softmax(apply(spec, ad.slot("x_col", shape)))
    rows = reg_rows(kind, p_adv, p_col)
    return ad.sum(rows), rows


def _select(x, x1, x2, ce, ce1, ce2):
    # np.argmax/argmin return the first extreme, so the stacking order encodes
    # the tie preference: x' > x > x'' for adv, x'' > x > x' for col.
    ces = np.stack([ce1, ce, ce2])
    pick_adv = ces.argmax(axis=0)
    pick_col = ces[::-1].argmin(axis=0)
    cands = np.stack([x1, x, x2])
    rows = np.arange(len(x))
    x_adv = cands[pick_adv, rows]
    x_col = cands[::-1][pick_col, rows]
    return x_adv, x_col, ces[pick_adv, rows], ces[::-1][pick_col, rows]


def squeeze_pair(spec: ModelSpec, params, x, y, cfg: InnerConfig) -> SqueezePair:
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    rng = np.random.default_rng(cfg.seed)
    sigma = np.float32(cfg.init_sigma)
    x1 = project(x + sigma * rng.standard_normal(x.shape).astype(np.float32), x, cfg.epsilon)
    x2 = project(x + sigma * rng.standard_normal(x.shape).astype(np.float32), x, cfg.epsilon)
    total, rows = _pair_graph(spec, len(x), cfg.reg)
    alpha = np.float32(cfg.alpha)
    ce = example_losses(spec, params, x, y)
    trace = []
    selections = cfg.K + 1 + (1 if cfg.post_select else 0)
    for step in range(selections):
        ce1 = example_losses(spec, params, x1, y)
        ce2 = example_losses(spec, params, x2, y)
        x_adv, x_col, ce_adv, ce_col = _select(x, x1, x2, ce, ce1, ce2)
        bindings = {**params, "x_adv": x_adv, "x_col": x_col}
        last = step == selections - 1
        if last:
            g_rows = ad.forward(rows, bindings)
        else:
            _, grads, (g_rows,) = ad.value_and_grad(total, bindings, ["x_adv", "x_col"], aux=(rows,))
            x1 = project(x_adv + alpha * np.sign(grads["x_adv"]), x, cfg.epsilon)
            x2 = project(x_col + alpha * np.sign(grads["x_col"]), x, cfg.epsilon)
        trace.append(StepRecord(ce_adv, ce_col, ce, g_rows))
    return SqueezePair(x_adv, x_col, trace)


def classify_neighbor(spec: ModelSpec, params, x, y, x_neighbor, tol: float = NEIGHBOR_TOL) -> np.ndarray:
    """Label each neighbor collaborative / adversarial / neutral by CE relative to ``x``."""
    x = np.asarray(x, dtype=np.float32)
    x_neighbor = np.asarray(x_neighbor, dtype=np.float32)
    if x.shape != x_neighbor.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_neighbor.shape}")
    ce = example_losses(spec, params, x, y)
    ce_n = example_losses(spec, params, x_neighbor, y)
    out = np.full(len(x), NEUTRAL, dtype=object)
    out[ce_n < ce - tol] = COLLABORATIVE
    out[ce_n > ce + tol] = ADVERSARIAL
    return out
