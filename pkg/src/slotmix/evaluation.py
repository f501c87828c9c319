"""Set matching, set-prediction loss and the two scoring protocols (AP, FG-ARI).

Property vectors are laid out as a flat row:

    [x, y, size, shape one-hot (S), color one-hot (C), presence]

with coordinates in [-1, 1] and size normalized to [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ContractViolation, NonFiniteValue, ShapeError

N_SHAPES = 3
N_COLORS = 6
HUBER_DELTA = 1.0
SIZE_TOL = 0.25
SETPRED_THRESHOLDS = (float("inf"), 0.5, 0.25, 0.125, 0.0625, 0.03125)
VANILLA_THRESHOLDS = SETPRED_THRESHOLDS[:5]


@dataclass(frozen=True)
class PropertyLayout:
    n_shapes: int = N_SHAPES
    n_colors: int = N_COLORS

    @property
    def width(self):
        return 3 + self.n_shapes + self.n_colors + 1

    @property
    def coords(self):
        return slice(0, 2)

    @property
    def size(self):
        return 2

    @property
    def shape(self):
        return slice(3, 3 + self.n_shapes)

    @property
    def color(self):
        return slice(3 + self.n_shapes, 3 + self.n_shapes + self.n_colors)

    @property
    def presence(self):
        return self.width - 1


LAYOUT = PropertyLayout()


@dataclass
class PropertyVector:
    coords: tuple
    size: float
    shape: int
    color: int
    presence: float = 1.0

    def to_array(self, layout=LAYOUT):
        row = np.zeros(layout.width)
        row[layout.coords] = self.coords
        row[layout.size] = self.size
        row[layout.shape.start + self.shape] = 1.0
        row[layout.color.start + self.color] = 1.0
        row[layout.presence] = self.presence
        return row


def pad_targets(targets, k, layout=LAYOUT):
    """Stack target rows and pad with all-zero (presence 0) rows up to ``k``."""
    rows = [t.to_array(layout) if isinstance(t, PropertyVector) else np.asarray(t, float)
            for t in targets]
    if len(rows) > k:
        raise ContractViolation(f"{len(rows)} targets exceed {k} slots")
    out = np.zeros((k, layout.width))
    if rows:
        out[:len(rows)] = np.stack(rows)
    return out


# ------------------------------------------------------------------- matching
def hungarian(cost):
    """Minimum-cost perfect matching; ``result[row]`` is the matched column."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError("hungarian", cost.shape, detail="cost must be square")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteValue("hungarian: non-finite cost")
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return kernels.hungarian(cost)


def matching_cost(cost, assign):
    return float(sum(cost[i, assign[i]] for i in range(len(assign))))


def huber(pred, target, delta=HUBER_DELTA):
    """Summed Huber penalty between two vectors."""
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(r)
    return float(np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta)).sum())


def pairwise_huber(pred, target, delta=HUBER_DELTA):
    """(K, K) matrix cost[i, j] = huber(pred_i, target_j)."""
    r = pred[:, None, :] - target[None, :, :]
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta)).sum(axis=-1)


def set_loss(preds, targets, delta=HUBER_DELTA):
    """Hungarian-matched Huber loss, averaged over slots and scenes.

    ``preds`` is a (B, K, P) tensor (or (K, P)); ``targets`` a matching
    array already padded to K rows. The matching is discrete and carries no
    gradient. Returns (loss tensor, (B, K) assignment pred row -> target row).
    """
    preds = ad.as_tensor(preds)
    targets = np.asarray(targets, dtype=np.float64)
    single = preds.ndim == 2
    if single:
        preds = ad.reshape(preds, (1,) + preds.shape)
        targets = targets[None]
    if preds.shape != targets.shape:
        raise ShapeError("set_loss", preds.shape, targets.shape)
    b, k, _ = preds.shape
    assign = np.empty((b, k), dtype=np.int64)
    for s in range(b):
        assign[s] = hungarian(pairwise_huber(preds.data[s], targets[s], delta))
    matched = np.take_along_axis(targets, assign[:, :, None], axis=1)
    per = ad.huber(preds, matched, delta)
    loss = ad.mul(ad.sum_(per), 1.0 / (b * k))
    return loss, (assign[0] if single else assign)


# ----------------------------------------------------------------- detection AP
def decode_predictions(pred, layout=LAYOUT):
    """Map raw (..., P) predictions to (coords, size, shape id, color id, confidence)."""
    pred = np.asarray(pred)
    return (pred[..., layout.coords], pred[..., layout.size],
            pred[..., layout.shape].argmax(-1), pred[..., layout.color].argmax(-1),
            pred[..., layout.presence])


def average_precision(pred_sets, target_sets, threshold, layout=LAYOUT, size_tol=SIZE_TOL):
    """Detection-style AP pooled over scenes.

    ``pred_sets[s]`` is a (K, P) array of decoded-ready predictions; the
    presence entry is the confidence. ``target_sets[s]`` holds the scene's
    real objects (padding rows with presence 0 are ignored). Predictions are
    ranked by confidence (ties by scene then slot order); each one claims
    the closest still-unclaimed object that agrees on shape, color and size
    and lies within ``threshold`` in coordinates (inf ignores coordinates).
    AP is the area under the monotone (interpolated) precision-recall curve.
    """
    if not threshold > 0:
        raise ContractViolation("average_precision: threshold must be positive")
    scenes = []
    total = 0
    for targets in target_sets:
        t = np.asarray(targets, dtype=np.float64).reshape(-1, layout.width)
        t = t[t[:, layout.presence] > 0.5]
        scenes.append(t)
        total += len(t)
    if total == 0:
        raise ContractViolation("average_precision: no ground-truth objects")
    entries = []
    for s, preds in enumerate(pred_sets):
        preds = np.asarray(preds, dtype=np.float64).reshape(-1, layout.width)
        for j, row in enumerate(preds):
            entries.append((-row[layout.presence], s, j, row))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))

    claimed = [np.zeros(len(t), dtype=bool) for t in scenes]
    tp = np.zeros(len(entries))
    for n, (_, s, _, row) in enumerate(entries):
        t = scenes[s]
        if len(t) == 0:
            continue
        ok = ~claimed[s]
        ok &= t[:, layout.shape].argmax(-1) == row[layout.shape].argmax()
        ok &= t[:, layout.color].argmax(-1) == row[layout.color].argmax()
        ok &= np.abs(t[:, layout.size] - row[layout.size]) <= size_tol
        dist = np.sqrt(((t[:, layout.coords] - row[layout.coords]) ** 2).sum(-1))
        if np.isfinite(threshold):
            ok &= dist <= threshold
        if ok.any():
            best = np.flatnonzero(ok)[np.argmin(dist[ok])]
            claimed[s][best] = True
            tp[n] = 1.0
    return ap_from_ranked(tp, total)


def ap_from_ranked(tp, n_positives):
    """Interpolated PR area for a ranked list of true-positive flags."""
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    rank = np.arange(1, len(tp) + 1)
    precision = ctp / rank
    recall = ctp / n_positives
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]).sum())


# --------------------------------------------------------------------- FG-ARI
def _comb2(n):
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1) / 2.0


def adjusted_rand_index(labels_a, labels_b):
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("adjusted_rand_index", a.shape, b.shape)
    n = a.shape[0]
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / _comb2(n)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def fg_ari(true_labels, pred_assign, exclude_background=True):
    """Adjusted Rand Index restricted to points whose true label is not 0."""
    true_labels = np.asarray(true_labels)
    pred_assign = np.asarray(pred_assign)
    if true_labels.shape != pred_assign.shape:
        raise ShapeError("fg_ari", true_labels.shape, pred_assign.shape)
    if exclude_background:
        keep = true_labels != 0
        true_labels, pred_assign = true_labels[keep], pred_assign[keep]
    if true_labels.shape[0] < 2:
        raise ContractViolation("fg_ari: need at least 2 foreground points")
    return adjusted_rand_index(true_labels, pred_assign)
