"""Robust evaluation and loss-landscape probes.

All probes are read-only over the parameters.  Accuracies are exact ratios
of integer hit counts.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, craft, divergence_ascent, example_losses, fgsm, pgd
from .data_io import Dataset, write_rows
from .divergences import RegKind
from .models import ModelSpec, correct, logits, probs
from .squeeze_inner import COLLABORATIVE, classify_neighbor


def standard_suite(epsilon: float, alpha: float, seed: int = 0) -> dict[str, AttackConfig]:
    """FGSM (benign start), PGD-20/PGD-100 (random start) and CW-inf (PGD-100 on the margin)."""
    return {
        "fgsm": fgsm(epsilon, seed),
        "pgd20": pgd(epsilon, alpha, 20, seed),
        "pgd100": pgd(epsilon, alpha, 100, seed),
        "cw": pgd(epsilon, alpha, 100, seed, loss="cw_margin"),
    }


@dataclass
class RobustReport:
    clean_acc: float
    robust_acc: dict[str, float]
    configs: dict[str, AttackConfig]
    n: int = 0

    def rows(self):
        yield ("clean", self.clean_acc, 0.0, 0.0, 0, "")
        for name, acc in self.robust_acc.items():
            c = self.configs[name]
            yield (name, acc, c.epsilon, c.alpha, c.steps, c.start)

    def write_csv(self, path):
        write_rows(path, ("attack", "accuracy", "epsilon", "alpha", "steps", "start"), self.rows())

    def summary(self) -> str:
        lines = [f"n={self.n}", f"clean    {self.clean_acc:.4f}"]
        lines += [f"{k:<8} {v:.4f}" for k, v in self.robust_acc.items()]
        return "\n".join(lines)


def _chunks(n: int, batch: int):
    return [(k, i, min(i + batch, n)) for k, i in enumerate(range(0, n, batch))]


def robust_eval(spec: ModelSpec, params, dataset: Dataset, attack_suite: dict[str, AttackConfig],
                batch: int = 500, workers: int = 1) -> RobustReport:
    """Clean and per-attack accuracy.  Chunk ``k`` uses seed ``cfg.seed + k``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    x, y = dataset.inputs, dataset.labels
    chunks = _chunks(len(dataset), batch)

    def run(chunk):
        k, lo, hi = chunk
        xs, ys = x[lo:hi], y[lo:hi]
        hits = {"clean": int(correct(logits(spec, params, xs), ys).sum())}
        for name, cfg in attack_suite.items():
            adv = craft(spec, params, xs, ys, cfg.with_seed(cfg.seed + k)).examples
            hits[name] = int(correct(logits(spec, params, adv), ys).sum())
        return hits

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    n = len(dataset)
    total = {k: sum(p[k] for p in parts) for k in parts[0]}
    return RobustReport(total.pop("clean") / n, {k: total[k] / n for k in attack_suite},
                        dict(attack_suite), n)


@dataclass
class ValleyCurve:
    budgets: list[float]
    mean_ce: list[float]
    std_ce: list[float]
    benign_mean: float
    benign_std: float

    def write_csv(self, path, steps: int, alpha: float):
        rows = zip(self.budgets, self.mean_ce, self.std_ce)
        write_rows(path, ("budget", "mean_ce", "std_ce"), rows,
                   comments=[f"steps={steps} alpha={alpha:.6g}",
                             f"benign_mean={self.benign_mean:.6g} benign_std={self.benign_std:.6g}"])


def valley_curve(spec: ModelSpec, params, dataset: Dataset, budgets, steps: int = 100,
                 alpha: float = 1 / 255, batch: int = 500) -> ValleyCurve:
    """Mean/std CE of collaborative examples (descent from the benign start) per budget.

    An ``epsilon = 0`` point is prepended when missing.
    """
    budgets = [float(b) for b in budgets]
    if not budgets:
        raise ValueError("budgets must be non-empty")
    if any(b <= a for a, b in zip(budgets, budgets[1:])) or budgets[0] < 0:
        raise ValueError("budgets must be non-negative and strictly increasing")
    if budgets[0] != 0.0:
        budgets = [0.0] + budgets
    x, y = dataset.inputs, dataset.labels
    benign = np.concatenate([example_losses(spec, params, x[i:j], y[i:j])
                             for _, i, j in _chunks(len(x), batch)]).astype(np.float64)
    means, stds = [], []
    for eps in budgets:
        if eps == 0:
            ce = benign
        else:
            cfg = AttackConfig(eps, alpha, steps, start="benign", direction="descend")
            ce = np.concatenate([craft(spec, params, x[i:j], y[i:j], cfg).losses
                                 for _, i, j in _chunks(len(x), batch)]).astype(np.float64)
        means.append(float(ce.mean()))
        stds.append(float(ce.std()))
    return ValleyCurve(budgets, means, stds, float(benign.mean()), float(benign.std()))


def collab_ratio_probe(spec: ModelSpec, params, dataset: Dataset, trades_inner: AttackConfig,
                       batch: int = 500) -> float:
    """Fraction of TRADES inner maximisers that are collaborative (lower CE than benign)."""
    x, y = dataset.inputs, dataset.labels
    collab = 0
    for k, i, j in _chunks(len(x), batch):
        ref = probs(spec, params, x[i:j])
        found = divergence_ascent(spec, params, x[i:j], ref, trades_inner.with_seed(trades_inner.seed + k),
                                  RegKind.KL).examples
        collab += int((classify_neighbor(spec, params, x[i:j], y[i:j], found) == COLLABORATIVE).sum())
    return collab / len(x)


@dataclass
class AngleHistogram:
    angles: np.ndarray
    bin_edges: np.ndarray
    counts: np.ndarray
    skipped: int = 0
    steps: tuple[int, int] = (0, 0)

    def write_csv(self, path):
        rows = zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts)
        write_rows(path, ("bin_lo", "bin_hi", "count"), rows,
                   comments=[f"adv_steps={self.steps[0]} col_steps={self.steps[1]}",
                             f"measured={len(self.angles)} skipped={self.skipped}"])


def angles_between(d_adv: np.ndarray, d_col: np.ndarray):
    """Per-row angle in degrees; rows where either vector is zero come back as NaN."""
    a = np.asarray(d_adv, dtype=np.float64).reshape(len(d_adv), -1)
    b = np.asarray(d_col, dtype=np.float64).reshape(len(d_col), -1)
    dot = (a * b).sum(axis=1)
    na, nb = (a * a).sum(axis=1), (b * b).sum(axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.full(len(a), np.nan)
    cos[ok] = np.clip(dot[ok] / np.sqrt(na[ok] * nb[ok]), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def perturbation_angles(spec: ModelSpec, params, dataset: Dataset, adv_cfg: AttackConfig,
                        col_cfg: AttackConfig, bins: int = 36) -> AngleHistogram:
    if adv_cfg.epsilon != col_cfg.epsilon:
        raise ValueError("adversarial and collaborative configs must share epsilon")
    x, y = dataset.inputs, dataset.labels
    adv = craft(spec, params, x, y, replace(adv_cfg, direction="ascend"))
    col = craft(spec, params, x, y, replace(col_cfg, direction="descend"))
    ang = angles_between(adv.perturbation, col.perturbation)
    valid = ang[~np.isnan(ang)]
    edges = np.linspace(0.0, 180.0, bins + 1)
    counts, _ = np.histogram(valid, bins=edges)
    return AngleHistogram(valid, edges, counts, int(np.isnan(ang).sum()),
                          (adv_cfg.steps, col_cfg.steps))


@dataclass
class LandscapeSlice:
    a: np.ndarray
    b: np.ndarray
    ce: np.ndarray  # ce[i, j] at x + a[i] u + b[j] v
    u: np.ndarray = field(repr=False, default=None)
    v: np.ndarray = field(repr=False, default=None)

    def write_csv(self, path):
        rows = ((ai, bj, self.ce[i, j]) for i, ai in enumerate(self.a) for j, bj in enumerate(self.b))
        write_rows(path, ("a", "b", "ce"), rows)


def landscape_slice(spec: ModelSpec, params, x, y, u_mode: str = "collaborative", grid: int = 41,
                    extent: float | None = None, cfg: AttackConfig | None = None,
                    seed: int = 0) -> LandscapeSlice:
    """CE over the plane spanned by a crafted direction ``u`` and a random ``v`` orthogonal to it.

    ``u`` comes from collaborative (or, with ``u_mode="adversarial"``,
    adversarial) crafting under ``cfg``.  Both directions are scaled to unit
    l-inf norm so grid coordinates read in input units; ``extent`` defaults
    to twice the crafting budget.  Probe points are clamped to [0, 1] only.
    """
    if grid < 2:
        raise ValueError("grid needs at least two points per axis")
    if u_mode not in ("collaborative", "adversarial"):
        raise ValueError(f"unknown u_mode {u_mode!r}")
    cfg = cfg or AttackConfig(8 / 255, 1 / 255, 10, start="benign")
    cfg = replace(cfg, direction="descend" if u_mode == "collaborative" else "ascend")
    x = np.asarray(x, dtype=np.float32).reshape(1, *spec.input_shape)
    y = np.atleast_1d(np.asarray(y))
    delta = craft(spec, params, x, y, cfg).perturbation.astype(np.float64).ravel()
    if not np.any(delta):
        raise ValueError("crafted perturbation is zero; cannot define direction u")
    u = delta / np.linalg.norm(delta)
    v = np.random.default_rng(seed).standard_normal(u.shape)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    u, v = u / np.abs(u).max(), v / np.abs(v).max()
    extent = 2 * cfg.epsilon if extent is None else float(extent)
    a = extent * np.linspace(-1.0, 1.0, grid)
    a[np.abs(a) < 1e-12 * max(extent, 1.0)] = 0.0
    b = a.copy()
    base = x.astype(np.float64).ravel()
    pts = base[None, None, :] + a[:, None, None] * u + b[None, :, None] * v
    pts = np.clip(pts, 0.0, 1.0).astype(np.float32).reshape(grid * grid, *spec.input_shape)
    yy = np.repeat(y, grid * grid)
    ce = np.concatenate([example_losses(spec, params, pts[i:i + 512], yy[i:i + 512])
                         for i in range(0, len(pts), 512)])
    return LandscapeSlice(a, b, ce.reshape(grid, grid), u, v)
