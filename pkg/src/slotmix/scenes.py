"""Deterministic point-cloud scenes: shaped, colored objects plus background clutter.

Each point carries 2 coordinates, a color block (one-hot of the object's
color, all zeros for background, plus Gaussian noise) and pure-noise
channels. Shapes differ only in how points spread around the center:

- disc:   center + isotropic Gaussian with std size / 2
- ring:   center + size * (cos t, sin t) + jitter
- square: uniform on the perimeter of a square of half-side ``size`` + jitter
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .clustering import GmmState, gmm_fit
from .errors import ContractViolation, DatasetFormatError
from .evaluation import LAYOUT, PropertyVector, fg_ari, pad_targets

SHAPES = ("disc", "ring", "square")
MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class SceneSpec:
    max_objects: int = 6
    min_objects: int = 1
    points_per_object: int = 14
    background_points: int = 12
    n_colors: int = 6
    size_range: tuple = (0.05, 0.12)
    jitter: float = 0.01
    color_noise: float = 0.1
    noise_channels: int = 2
    min_separation: float = None  # default 3 * max size
    max_tries: int = 10_000

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ContractViolation("SceneSpec: need 1 <= min_objects <= max_objects")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ContractViolation("SceneSpec: invalid size range")
        if self.separation < 2 * hi:
            raise ContractViolation("SceneSpec: objects must be separated by >= 2 * max size")

    @property
    def separation(self):
        return 3.0 * self.size_range[1] if self.min_separation is None else self.min_separation

    @property
    def feature_dim(self):
        return 2 + self.n_colors + self.noise_channels

    @property
    def n_points(self):
        return self.max_objects * self.points_per_object + self.background_points

    def with_objects(self, count):
        """Same scene statistics with exactly ``count`` objects."""
        return SceneSpec(**{**self.__dict__, "min_objects": count, "max_objects": count,
                            "min_separation": self.separation})


@dataclass
class SceneRecord:
    features: np.ndarray   # (N, D)
    labels: np.ndarray     # (N,) 0 = background, j + 1 = object j
    targets: list = field(default_factory=list)  # PropertyVector per object

    @property
    def n_objects(self):
        return len(self.targets)

    def target_array(self, k):
        return pad_targets(self.targets, k, LAYOUT)

    def __eq__(self, other):
        return (isinstance(other, SceneRecord)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and self.targets == other.targets)


def splitmix64(state):
    z = (state + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def scene_seed(master, index):
    """The ``index``-th output of a splitmix64 stream seeded with ``master``."""
    return splitmix64((master + index * 0x9E3779B97F4A7C15) & MASK64)


def _place_centers(spec, n, rng):
    lo = -1.0 + 1.5 * spec.size_range[1]
    hi = -lo
    tries = 0
    centers = []
    while len(centers) < n:
        if tries >= spec.max_tries:
            raise ContractViolation(
                f"could not place {n} objects after {spec.max_tries} tries; spec too dense")
        tries += 1
        c = rng.uniform(lo, hi, size=2)
        if all(np.hypot(*(c - o)) >= spec.separation for o in centers):
            centers.append(c)
        elif tries % 200 == 0:
            centers = []  # restart the layout; sequential packing can jam
    return np.array(centers)


def _shape_points(shape, center, size, count, jitter, rng):
    if shape == "disc":
        return center + rng.normal(0.0, size / 2.0, size=(count, 2))
    if shape == "ring":
        t = rng.uniform(0.0, 2.0 * np.pi, size=count)
        pts = np.stack([np.cos(t), np.sin(t)], axis=1) * size
    else:
        # perimeter parameter in [0, 8 * size): four sides of length 2 * size
        u = rng.uniform(0.0, 8.0 * size, size=count)
        side = np.minimum((u // (2.0 * size)).astype(int), 3)
        o = u - side * 2.0 * size - size
        pts = np.empty((count, 2))
        pts[side == 0] = np.stack([o[side == 0], np.full((side == 0).sum(), -size)], 1)
        pts[side == 1] = np.stack([np.full((side == 1).sum(), size), o[side == 1]], 1)
        pts[side == 2] = np.stack([-o[side == 2], np.full((side == 2).sum(), size)], 1)
        pts[side == 3] = np.stack([np.full((side == 3).sum(), -size), -o[side == 3]], 1)
    return center + pts + rng.normal(0.0, jitter, size=(count, 2))


def gen_scene(spec: SceneSpec, rng) -> SceneRecord:
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    centers = _place_centers(spec, n_obj, rng)
    lo, hi = spec.size_range
    budget = spec.max_objects * spec.points_per_object
    counts = [budget // n_obj + (1 if j < budget % n_obj else 0) for j in range(n_obj)]
    feats, labels, targets = [], [], []
    for j in range(n_obj):
        size = float(rng.uniform(lo, hi))
        shape = int(rng.integers(len(SHAPES)))
        color = int(rng.integers(spec.n_colors))
        pts = _shape_points(SHAPES[shape], centers[j], size, counts[j], spec.jitter, rng)
        block = np.zeros((counts[j], spec.n_colors))
        block[:, color] = 1.0
        feats.append(np.concatenate([pts, block], axis=1))
        labels.append(np.full(counts[j], j + 1))
        norm_size = (size - lo) / (hi - lo) if hi > lo else 0.0
        targets.append(PropertyVector((float(centers[j][0]), float(centers[j][1])),
                                      float(norm_size), shape, color, 1.0))
    bg = spec.background_points
    feats.append(np.concatenate([rng.uniform(-1.0, 1.0, size=(bg, 2)),
                                 np.zeros((bg, spec.n_colors))], axis=1))
    labels.append(np.zeros(bg, dtype=int))
    x = np.concatenate(feats, axis=0)
    n = x.shape[0]
    x[:, 2:] += rng.normal(0.0, spec.color_noise, size=(n, spec.n_colors))
    noise = rng.normal(0.0, spec.color_noise, size=(n, spec.noise_channels))
    x = np.concatenate([x, noise], axis=1)
    return SceneRecord(x, np.concatenate(labels).astype(np.int64), targets)


def gen_dataset(spec: SceneSpec, n_scenes, seed):
    """``n_scenes`` scenes, scene i generated from its own splitmix-derived seed."""
    return [gen_scene(spec, np.random.default_rng(scene_seed(seed, i))) for i in range(n_scenes)]


def oracle_fg_ari(record: SceneRecord, iterations=1):
    """FG-ARI of classic GMM on the coordinates, initialized at each object's true statistics.

    One component per object with the object's point mean, variance and
    share of object points. Background points have no component of their
    own, so longer EM runs let components drift onto clutter; a single
    E-step from the oracle statistics measures separability itself.
    """
    xy = record.features[:, :2]
    k = record.n_objects
    if k == 1:
        return 1.0
    masks = [record.labels == j + 1 for j in range(k)]
    mu = np.stack([xy[m].mean(axis=0) for m in masks])
    var = np.stack([xy[m].var(axis=0) for m in masks])
    pi = np.array([m.sum() for m in masks], dtype=np.float64)
    _, gamma, _ = gmm_fit(xy, GmmState(mu, np.maximum(var, 1e-6), pi / pi.sum()), iterations)
    return fg_ari(record.labels, gamma.argmax(axis=1))


# ----------------------------------------------------------------------- I/O
def _fmt(v):
    return format(float(v), ".17g")


def _record_line(rec):
    feats = ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in rec.features)
    labels = ",".join(str(int(v)) for v in rec.labels)
    tgts = ",".join(
        '{"coords":[%s,%s],"size":%s,"shape":%d,"color":%d,"presence":%s}'
        % (_fmt(t.coords[0]), _fmt(t.coords[1]), _fmt(t.size), t.shape, t.color, _fmt(t.presence))
        for t in rec.targets)
    return '{"features":[%s],"labels":[%s],"targets":[%s]}\n' % (feats, labels, tgts)


def write_dataset(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(_record_line(rec))


def _parse_record(obj):
    feats = np.array(obj["features"], dtype=np.float64)
    labels = np.array(obj["labels"], dtype=np.int64)
    if feats.ndim != 2 and feats.size:
        raise ValueError("features must be a 2-D array")
    if labels.shape != (feats.shape[0],):
        raise ValueError("labels length does not match features")
    targets = [PropertyVector((float(t["coords"][0]), float(t["coords"][1])), float(t["size"]),
                              int(t["shape"]), int(t["color"]), float(t["presence"]))
               for t in obj["targets"]]
    return SceneRecord(feats, labels, targets)


def read_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    records = []
    offset = 0
    for line in raw.split(b"\n"):
        start = offset
        offset += len(line) + 1
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed JSON: {exc.msg}", start + exc.pos) from None
        except UnicodeDecodeError as exc:
            raise DatasetFormatError("invalid utf-8", start + exc.start) from None
        try:
            records.append(_parse_record(obj))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise DatasetFormatError(f"bad scene record ({exc})", start) from None
    return records
