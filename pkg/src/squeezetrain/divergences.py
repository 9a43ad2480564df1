"""Cross-entropy, KL and the symmetric discrepancies used by squeeze training.

Each quantity has a row-wise expression builder (``*_rows``) used inside
training graphs, and an eager wrapper that evaluates it through the same
engine for plain arrays.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import autodiff as ad

PROB_FLOOR = 1e-12


class RegKind(str, Enum):
    KL = "kl"
    SYM_KL = "sym_kl"
    JS = "js"
    SQ_L2 = "sq_l2"

    @classmethod
    def parse(cls, value) -> RegKind:
        aliases = {"symkl": cls.SYM_KL, "l2": cls.SQ_L2}
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown regularizer {value!r}") from None

    @property
    def symmetric(self) -> bool:
        return self is not RegKind.KL


def ce_rows(logits: ad.Expr, labels: ad.Expr) -> ad.Expr:
    """Per-row cross-entropy ``logsumexp(z) - z[label]``."""
    return ad.logsumexp(logits) - ad.gather(logits, labels)


def cw_rows(logits: ad.Expr, labels: ad.Expr) -> ad.Expr:
    """Per-row margin ``max_{i != y} z_i - z_y``; positive iff misclassified."""
    return ad.max_except(logits, labels) - ad.gather(logits, labels)


def _safe_log(p: ad.Expr) -> ad.Expr:
    return ad.log(ad.clamp_min(p, PROB_FLOOR))


def kl_rows(p: ad.Expr, q: ad.Expr) -> ad.Expr:
    """Per-row ``sum_c p_c (log p_c - log q_c)``."""
    return ad.sum(p * (_safe_log(p) - _safe_log(q)), axis=-1)


def reg_rows(kind, p: ad.Expr, q: ad.Expr) -> ad.Expr:
    kind = RegKind.parse(kind)
    if kind is RegKind.KL:
        return kl_rows(p, q)
    if kind is RegKind.SYM_KL:
        return 0.5 * (kl_rows(p, q) + kl_rows(q, p))
    if kind is RegKind.SQ_L2:
        d = p - q
        return ad.sum(d * d, axis=-1)
    m = 0.5 * (p + q)
    return 0.5 * (kl_rows(m, p) + kl_rows(m, q))


# -- eager wrappers ---------------------------------------------------------


def _as_rows(v) -> tuple[np.ndarray, bool]:
    arr = np.asarray(v)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise ValueError(f"expected a vector or a 2-D batch of rows, got shape {arr.shape}")
    return arr, False


def _eval_pair(builder, p, q):
    p, single = _as_rows(p)
    q, _ = _as_rows(q)
    if p.shape != q.shape:
        raise ValueError(f"probability vectors differ in length: {p.shape} vs {q.shape}")
    out = ad.forward(builder(ad.slot("p", p.shape), ad.slot("q", q.shape)), {"p": p, "q": q})
    return float(out[0]) if single else out


def kl(p, q):
    """KL divergence with the first argument on the left of the bars."""
    return _eval_pair(kl_rows, p, q)


def reg_loss(kind, p, q):
    kind = RegKind.parse(kind)
    return _eval_pair(lambda a, b: reg_rows(kind, a, b), p, q)


def _eval_labelled(builder, logits, label):
    z, single = _as_rows(logits)
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if y.shape != (z.shape[0],):
        raise ValueError("need one label per logits row")
    if (y < 0).any() or (y >= z.shape[1]).any():
        raise ValueError(f"label out of range for {z.shape[1]} classes")
    expr = builder(ad.slot("z", z.shape), ad.index_slot("y", len(y)))
    out = ad.forward(expr, {"z": z, "y": y})
    return float(out[0]) if single else out


def cross_entropy(logits_row, label):
    return _eval_labelled(ce_rows, logits_row, label)


def cw_margin(logits_row, label):
    return _eval_labelled(cw_rows, logits_row, label)
