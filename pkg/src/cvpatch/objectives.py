"""Complex descriptor distance, training losses and verification metrics."""

from __future__ import annotations

import csv

import numpy as np

from . import autograd as ag
from .autograd import Node
from .ctensor import ComplexTensor, ShapeError

DISTANCE_MODES = ("modulus_sum", "literal_clamped")
LOSS_FORMS = ("corrected", "literal")
POLARITIES = ("larger_is_match", "smaller_is_match")


def _check_mode(mode):
    if mode not in DISTANCE_MODES:
        raise ValueError(f"unknown distance mode {mode!r}")


def complex_distance(f1: ComplexTensor, f2: ComplexTensor, mode: str = "modulus_sum") -> np.ndarray:
    """Distance between complex vectors, summed over the last axis.

    modulus_sum:     sum_i sqrt(dre_i^2 + dim_i^2)
    literal_clamped: sum_i sqrt(max(0, dre_i^2 - dim_i^2))
    """
    _check_mode(mode)
    if f1.shape != f2.shape:
        raise ShapeError(f"descriptor shapes differ: {f1.shape} vs {f2.shape}")
    dr = f1.real - f2.real
    di = f1.imag - f2.imag
    if mode == "modulus_sum":
        return np.hypot(dr, di).sum(axis=-1)
    return np.sqrt(np.maximum(dr * dr - di * di, 0.0)).sum(axis=-1)


def distance(f1: Node, f2: Node, mode: str = "modulus_sum") -> Node:
    """Row-wise differentiable distance between (N, D) complex descriptor nodes.

    Gradients are zero where a coordinate difference is exactly zero
    (modulus_sum) or where the clamp is active (literal_clamped).
    """
    _check_mode(mode)
    a, b = f1.value, f2.value
    if a.shape != b.shape:
        raise ShapeError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    dr = a.real - b.real
    di = a.imag - b.imag
    if mode == "modulus_sum":
        root = np.hypot(dr, di)
        margin = root
        kr, ki = dr, di
    else:
        q = dr * dr - di * di
        root = np.sqrt(np.maximum(q, 0.0))
        margin = np.abs(q)
        kr, ki = dr, -di
    active = root > 0
    safe = np.where(active, root, 1.0)

    def rule(g):
        w = np.where(active, g[:, None] / safe, 0.0)
        gr, gi = w * kr, w * ki
        return ComplexTensor(gr, gi), ComplexTensor(-gr, -gi)

    return f1.tape.record(f"distance_{mode}", (f1, f2), root.sum(axis=-1), rule,
                          kink_margin=float(margin.min()) if margin.size else None)


def softpn_value(d_pos, d_star, form: str = "corrected"):
    """SoftPN loss for given positive distance and minimal negative distance.

    With s = e^{d_pos} / (e^{d_pos} + e^{d_star}):
    literal   -> s^2 + (1 - s)^2
    corrected -> s^2 + (e^{d_star} / (e^{d_pos} + e^{d_star}) - 1)^2 = 2 s^2
    """
    d_pos = np.asarray(d_pos, dtype=float)
    d_star = np.asarray(d_star, dtype=float)
    # logistic(d_pos - d_star), overflow-free
    s = 0.5 * (1.0 + np.tanh(0.5 * (d_pos - d_star)))
    if form == "corrected":
        return 2.0 * s * s
    if form == "literal":
        return s * s + (1.0 - s) ** 2
    raise ValueError(f"unknown loss form {form!r}")


def softpn_from_distances(d_pos: Node, d_star: Node, form: str = "corrected") -> Node:
    """Batch-mean SoftPN loss on distance nodes."""
    s = ag.sigmoid(ag.sub(d_pos, d_star))
    if form == "corrected":
        per = ag.scale(ag.square(s), 2.0)
    elif form == "literal":
        per = ag.add(ag.square(s), ag.square(ag.sub(1.0, s)))
    else:
        raise ValueError(f"unknown loss form {form!r}")
    return ag.mean(per)


def softpn_loss(f_p1: Node, f_p2: Node, f_n: Node, mode: str = "modulus_sum",
                form: str = "corrected") -> Node:
    d_pos = distance(f_p1, f_p2, mode)
    d_star = ag.minimum(distance(f_p1, f_n, mode), distance(f_p2, f_n, mode))
    return softpn_from_distances(d_pos, d_star, form)


def mse_pair_loss(scores: Node, labels) -> Node:
    labels = np.asarray(labels, dtype=scores.value.dtype)
    if labels.shape != scores.shape:
        raise ShapeError(f"{scores.shape[0]} scores but {labels.size} labels")
    return ag.mse(scores, labels)


# -- evaluation metrics ------------------------------------------------------


def _match_scores(scores, labels, polarity):
    if polarity not in POLARITIES:
        raise ValueError(f"unknown polarity {polarity!r}")
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative example")
    s = scores if polarity == "larger_is_match" else -scores
    return s, labels, n_pos, n_neg


def _operating_points(s, labels):
    """Cumulative (tp, fp) after admitting each distinct score, highest first.

    Equal scores are admitted together: a threshold t predicts 'match' for
    every example with score >= t.
    """
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    ls = labels[order]
    tp = np.cumsum(ls)
    fp = np.cumsum(~ls)
    ends = np.flatnonzero(np.r_[ss[1:] != ss[:-1], True])
    return ss[ends], tp[ends], fp[ends]


def fpr95(scores, labels, polarity: str = "larger_is_match") -> float:
    """False-positive rate at the strictest threshold whose recall is >= 0.95."""
    s, labels, n_pos, n_neg = _match_scores(scores, labels, polarity)
    _, tp, fp = _operating_points(s, labels)
    # tp / n_pos >= 0.95, in exact integer arithmetic
    k = int(np.argmax(tp * 20 >= 19 * n_pos))
    return float(fp[k] / n_neg)


def roc_table(scores, labels, polarity: str = "larger_is_match"):
    """Rows (threshold, fpr, tpr), starting with (inf, 0, 0) and ending at (.., 1, 1).

    Thresholds are in the units of ``scores``: for larger_is_match a row means
    'score >= threshold', for smaller_is_match 'score <= threshold'.
    """
    s, labels, n_pos, n_neg = _match_scores(scores, labels, polarity)
    thr, tp, fp = _operating_points(s, labels)
    if polarity == "smaller_is_match":
        thr = -thr
    start = np.inf if polarity == "larger_is_match" else -np.inf
    rows = [(start, 0.0, 0.0)]
    rows += [(float(t), float(f / n_neg), float(p / n_pos)) for t, f, p in zip(thr, fp, tp)]
    return rows


def roc_curve(scores, labels, polarity: str = "larger_is_match") -> list[tuple[float, float]]:
    return [(f, t) for _, f, t in roc_table(scores, labels, polarity)]


def auc(points) -> float:
    pts = np.asarray(points, dtype=float)
    return float(np.trapezoid(pts[:, 1], pts[:, 0]))


def write_roc_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, fpr, tpr in rows:
            w.writerow([repr(float(t)), repr(fpr), repr(tpr)])
