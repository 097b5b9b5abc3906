"""Point clouds: synthetic shapes, augmentation, sampling/grouping, splits and file I/O.

A point cloud is an ``(N, 3)`` float64 array. A :class:`LabeledDataset`
holds clouds of a common size as one ``(S, N, 3)`` block. The vertical
axis is ``z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import seeded_rng

SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus", "pyramid", "plane_pair", "helix")

JITTER_SIGMA = 0.01
JITTER_CLIP = 0.05


class FormatError(ValueError):
    """Malformed point-set or scene file."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def as_cloud(pc) -> np.ndarray:
    pc = np.asarray(pc, dtype=np.float64)
    if pc.ndim != 2 or pc.shape[1] != 3 or pc.shape[0] < 1:
        raise ValueError(f"point cloud must have shape (N>=1, 3), got {pc.shape}")
    if not np.all(np.isfinite(pc)):
        raise ValueError("point cloud has non-finite coordinates")
    return pc


def normalize(pc) -> np.ndarray:
    """Center on the centroid and scale the farthest point to unit norm.

    A cloud whose points all coincide maps to all zeros.
    """
    pc = as_cloud(pc)
    centered = pc - pc.mean(axis=0)
    r = np.sqrt((centered ** 2).sum(axis=1)).max()
    if r <= 1e-300:
        return np.zeros_like(pc)
    return centered / r


# -- synthetic shapes --------------------------------------------------------

def _uniform_in_triangles(tris: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    which = rng.choice(len(tris), size=n, p=area / area.sum())
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    w0, w1, w2 = 1 - su, su * (1 - v), su * v
    return w0[:, None] * a[which] + w1[:, None] * b[which] + w2[:, None] * c[which]


def _sample_surface(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Noise-free surface samples in the shape's own frame (before normalization)."""
    if kind == "sphere":
        v = rng.standard_normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)
    if kind == "cube":
        # half-extent 1; six faces of equal area
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts = np.empty((n, 3))
        for ax in range(3):
            rows = axis == ax
            others = [o for o in range(3) if o != ax]
            pts[rows, ax] = sign[rows]
            pts[rows, others[0]] = uv[rows, 0]
            pts[rows, others[1]] = uv[rows, 1]
        return pts
    if kind == "cylinder":
        r, h = 1.0, 2.0
        side, cap = 2 * math.pi * r * h, math.pi * r * r
        part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * math.pi, n)
        rad = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
        z = np.where(part == 0, rng.uniform(-h / 2, h / 2, n), np.where(part == 1, -h / 2, h / 2))
        return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])
    if kind == "cone":
        r, h = 1.0, 2.0
        side, base = math.pi * r * math.hypot(r, h), math.pi * r * r
        on_side = rng.random(n) < side / (side + base)
        theta = rng.uniform(0, 2 * math.pi, n)
        t = np.sqrt(rng.random(n))  # fraction of the way from apex (side) / from center (base)
        rad = r * t
        z = np.where(on_side, h / 2 - h * t, -h / 2)
        return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])
    if kind == "torus":
        big, small = 1.0, 0.35
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            theta = rng.uniform(0, 2 * math.pi, m)
            phi = rng.uniform(0, 2 * math.pi, m)
            keep = rng.random(m) < (big + small * np.cos(phi)) / (big + small)
            theta, phi = theta[keep], phi[keep]
            ring = big + small * np.cos(phi)
            out = np.vstack([out, np.column_stack(
                [ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)])])
        return out[:n]
    if kind == "pyramid":
        b = np.array([[-1, -1, -0.5], [1, -1, -0.5], [1, 1, -0.5], [-1, 1, -0.5]], float)
        apex = np.array([0.0, 0.0, 1.0])
        tris = [[b[i], b[(i + 1) % 4], apex] for i in range(4)]
        tris += [[b[0], b[1], b[2]], [b[0], b[2], b[3]]]
        return _uniform_in_triangles(np.array(tris), n, rng)
    if kind == "plane_pair":
        xy = rng.uniform(-1.0, 1.0, size=(n, 2))
        z = np.where(rng.random(n) < 0.5, -0.4, 0.4)
        return np.column_stack([xy, z])
    if kind == "helix":
        turns, radius, height = 3.0, 1.0, 2.0
        t = rng.random(n)  # constant speed, so uniform t is uniform in arc length
        ang = 2 * math.pi * turns * t
        return np.column_stack([radius * np.cos(ang), radius * np.sin(ang), height * (t - 0.5)])
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def generate_shape(kind: str, n_points: int, noise_sigma: float, rng: np.random.Generator,
                   scale: Sequence[float] | None = None) -> np.ndarray:
    """Sample ``n_points`` uniformly on a parametric surface, add noise, normalize.

    ``scale`` optionally stretches the shape per axis before the noise is added.
    """
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n_points < 8:
        raise ValueError("n_points must be at least 8")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    pts = _sample_surface(kind, n_points, rng)
    if scale is not None:
        pts = pts * np.asarray(scale, dtype=np.float64)
    if noise_sigma > 0:
        pts = pts + noise_sigma * rng.standard_normal(pts.shape)
    return normalize(pts)


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def augment(pc, rng: np.random.Generator, sigma: float = JITTER_SIGMA, clip: float = JITTER_CLIP,
            angle: float | None = None) -> np.ndarray:
    """Random rotation about the vertical axis plus clipped Gaussian jitter.

    ``angle`` fixes the rotation instead of drawing it; ``sigma=0`` disables jitter.
    """
    pc = as_cloud(pc)
    if angle is None:
        angle = rng.uniform(0.0, 2 * math.pi)
    out = pc @ rotation_z(angle).T
    if sigma > 0:
        out = out + np.clip(sigma * rng.standard_normal(pc.shape), -clip, clip)
    return out


def augment_batch(points: np.ndarray, rng: np.random.Generator, sigma: float = JITTER_SIGMA,
                  clip: float = JITTER_CLIP) -> np.ndarray:
    """:func:`augment` over a ``(B, N, 3)`` block with one angle per cloud."""
    angles = rng.uniform(0.0, 2 * math.pi, size=points.shape[0])
    c, s = np.cos(angles), np.sin(angles)
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    out = np.stack([c[:, None] * x - s[:, None] * y, s[:, None] * x + c[:, None] * y, z], axis=-1)
    if sigma > 0:
        out = out + np.clip(sigma * rng.standard_normal(points.shape), -clip, clip)
    return out


# -- sampling and grouping ---------------------------------------------------

def _sq_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Squared distances, shape (..., M, N), computed per element (order independent)."""
    d = points[..., None, :, :] - centers[..., :, None, :]
    return d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2


def fps_batch(points: np.ndarray, m: int, start: np.ndarray) -> np.ndarray:
    """Farthest point sampling over a ``(B, N, 3)`` block; returns ``(B, m)`` indices."""
    b, n, _ = points.shape
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from {n}")
    rows = np.arange(b)
    picked = np.empty((b, m), dtype=np.int64)
    picked[:, 0] = start
    mind = np.full((b, n), np.inf)
    cur = np.asarray(start, dtype=np.int64)
    for j in range(1, m):
        c = points[rows, cur]
        d = points - c[:, None, :]
        d = d[..., 0] ** 2 + d[..., 1] ** 2 + d[..., 2] ** 2
        mind = np.minimum(mind, d)
        mind[rows, cur] = -1.0  # never re-pick, even among duplicate points
        cur = np.argmax(mind, axis=1)
        picked[:, j] = cur
    return picked


def farthest_point_sampling(pc, m: int, start_index: int = 0) -> list[int]:
    """Greedy FPS: start at ``start_index``; each next pick maximizes the
    distance to the already picked set, lowest index on ties."""
    pc = as_cloud(pc)
    n = len(pc)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} points from {n}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    return fps_batch(pc[None], m, np.array([start_index]))[0].tolist()


def knn_batch(points: np.ndarray, center_idx: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbours of each center; ``(B, M)`` centers -> ``(B, M, k)`` indices."""
    b, n, _ = points.shape
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rows = np.arange(b)[:, None]
    centers = points[rows, center_idx]
    d = _sq_dist(points, centers)
    # the center leads its own group even if a duplicate point sits at distance 0
    d[rows, np.arange(center_idx.shape[1])[None, :], center_idx] = -1.0
    if k == n:
        return np.argsort(d, axis=-1, kind="stable")
    part = np.argpartition(d, k - 1, axis=-1)[..., :k]
    kth = np.take_along_axis(d, part, axis=-1).max(axis=-1, keepdims=True)
    tied = (d <= kth).sum(axis=-1) > k
    # order the k winners by (distance, index)
    part = np.sort(part, axis=-1)
    dp = np.take_along_axis(d, part, axis=-1)
    out = np.take_along_axis(part, np.argsort(dp, axis=-1, kind="stable"), axis=-1)
    if tied.any():
        # a tie straddles the k-th place: the partition may have picked the wrong index
        out[tied] = np.argsort(d[tied], axis=-1, kind="stable")[:, :k]
    return out


def knn_group(pc, center_indices: Sequence[int], k: int) -> list[list[int]]:
    """Per center, indices of its ``k`` nearest points (center first, ties by index)."""
    pc = as_cloud(pc)
    if k > len(pc):
        raise ValueError(f"k={k} exceeds the {len(pc)} available points")
    idx = np.asarray(center_indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(pc)):
        raise ValueError("center index out of range")
    return knn_batch(pc[None], idx[None], k)[0].tolist()


# -- datasets ----------------------------------------------------------------

@dataclass(frozen=True)
class LabeledDataset:
    points: np.ndarray       # (S, N, 3)
    labels: np.ndarray       # (S,)
    class_names: tuple[str, ...]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if pts.ndim != 3 or pts.shape[2] != 3 or pts.shape[1] < 1:
            raise ValueError(f"points must have shape (S, N, 3), got {pts.shape}")
        if labels.shape != (pts.shape[0],):
            raise ValueError("one label per sample is required")
        if len(self.class_names) < 2:
            raise ValueError("at least two classes are required")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise ValueError("label out of range")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite coordinate")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.class_names == other.class_names
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.points, other.points))

    __hash__ = None  # type: ignore[assignment]


def make_dataset(kinds: Sequence[str] = SHAPE_KINDS, train_per_class: int = 100,
                 test_per_class: int = 40, n_points: int = 256, noise_sigma: float = 0.02,
                 stretch: float = 0.35, seed: int = 0) -> LabeledDataset:
    """Synthetic dataset, ordered class by class (training clouds, then test clouds).

    Each cloud is stretched per axis by a factor drawn from
    ``[1 - stretch, 1 + stretch]`` so classes overlap a little.
    """
    if len(kinds) < 2:
        raise ValueError("need at least two shape kinds")
    rng = seeded_rng(seed)
    per = train_per_class + test_per_class
    clouds = []
    labels = []
    for label, kind in enumerate(kinds):
        for _ in range(per):
            scale = rng.uniform(1 - stretch, 1 + stretch, size=3)
            clouds.append(generate_shape(kind, n_points, noise_sigma, rng, scale=scale))
            labels.append(label)
    return LabeledDataset(np.stack(clouds), np.array(labels), tuple(kinds))


def split_dataset(ds: LabeledDataset, test_per_class: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/test indices: the last ``test_per_class`` clouds of each class (file order) are test."""
    train, test = [], []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) <= test_per_class:
            raise ValueError(f"class {ds.class_names[c]!r} has only {len(idx)} samples")
        cut = len(idx) - test_per_class
        train.extend(idx[:cut].tolist())
        test.extend(idx[cut:].tolist())
    return np.array(sorted(train)), np.array(sorted(test))


@dataclass(frozen=True)
class BaggingSpec:
    mode: str = "full"           # full | without_replacement | with_replacement
    fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "without_replacement", "with_replacement"):
            raise ValueError(f"unknown bagging mode {self.mode!r}")
        if self.mode == "without_replacement" and not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")


def make_split(pool: Sequence[int], spec: BaggingSpec) -> np.ndarray:
    """Training indices drawn from ``pool`` according to ``spec``."""
    pool = np.asarray(pool, dtype=np.int64)
    n = len(pool)
    if n == 0:
        raise ValueError("empty training pool")
    if spec.mode == "full":
        return pool.copy()
    rng = seeded_rng(spec.seed)
    if spec.mode == "with_replacement":
        return pool[rng.integers(0, n, size=n)]
    size = int(math.floor(spec.fraction * n + 0.5))
    if size == 0:
        raise ValueError(f"fraction {spec.fraction} of {n} samples rounds to zero")
    return pool[np.sort(rng.choice(n, size=size, replace=False))]


# -- file I/O ----------------------------------------------------------------

def fmt(x: float) -> str:
    return "%.17g" % x


def _write_points(f, pts: np.ndarray) -> None:
    f.write("".join(f"{fmt(x)} {fmt(y)} {fmt(z)}\n" for x, y, z in pts.tolist()))


def write_dataset(ds: LabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"PSET 1 {len(ds)} {ds.n_classes} {ds.n_points}\n")
        f.write(" ".join(ds.class_names) + "\n")
        for pts, label in zip(ds.points, ds.labels.tolist()):
            f.write(f"{label}\n")
            _write_points(f, pts)


class _Lines:
    """Line reader that remembers 1-based line numbers for error messages."""

    def __init__(self, path):
        self.lines = Path(path).read_text(encoding="utf-8").splitlines()
        self.pos = 0

    def next(self, what: str) -> tuple[int, str]:
        if self.pos >= len(self.lines):
            raise FormatError(f"unexpected end of file, expected {what}", self.pos + 1)
        self.pos += 1
        return self.pos, self.lines[self.pos - 1]

    def ints(self, what: str, count: int) -> tuple[int, list[int]]:
        no, line = self.next(what)
        toks = line.split()
        if len(toks) != count:
            raise FormatError(f"expected {count} integer(s) for {what}", no)
        try:
            return no, [int(t) for t in toks]
        except ValueError:
            raise FormatError(f"expected integer(s) for {what}", no) from None

    def floats(self, what: str, count: int) -> list[float]:
        no, line = self.next(what)
        toks = line.split()
        if len(toks) != count:
            raise FormatError(f"expected {count} numbers for {what}", no)
        try:
            vals = [float(t) for t in toks]
        except ValueError:
            raise FormatError(f"malformed number in {what}", no) from None
        if not all(math.isfinite(v) for v in vals):
            raise FormatError(f"non-finite value in {what}", no)
        return vals

    def points(self, n: int) -> np.ndarray:
        return np.array([self.floats("coordinates", 3) for _ in range(n)])


def read_header(lines: _Lines, magic: str) -> tuple[int, int, int, tuple[str, ...]]:
    if not lines.lines or not lines.lines[0].strip():
        raise FormatError("missing header", 1)
    no, line = lines.next("header")
    toks = line.split()
    if len(toks) != 5 or toks[0] != magic:
        raise FormatError(f"malformed header, expected '{magic} 1 <n_samples> <n_classes> <n_points>'", no)
    if toks[1] != "1":
        raise FormatError(f"unsupported format version {toks[1]}", no)
    try:
        n_samples, n_classes, n_points = (int(t) for t in toks[2:])
    except ValueError:
        raise FormatError("malformed header counts", no) from None
    if n_samples < 0 or n_classes < 2 or n_points < 1:
        raise FormatError("header counts out of range", no)
    no, line = lines.next("class names")
    names = tuple(line.split())
    if len(names) != n_classes:
        raise FormatError(f"expected {n_classes} class names, found {len(names)}", no)
    return n_samples, n_classes, n_points, names


def read_label(lines: _Lines, n_classes: int) -> int:
    no, (label,) = lines.ints("label", 1)
    if not 0 <= label < n_classes:
        raise FormatError(f"label {label} out of range for {n_classes} classes", no)
    return label


def read_dataset(path) -> LabeledDataset:
    lines = _Lines(path)
    n_samples, n_classes, n_points, names = read_header(lines, "PSET")
    pts = np.empty((n_samples, n_points, 3))
    labels = np.empty(n_samples, dtype=np.int64)
    for i in range(n_samples):
        labels[i] = read_label(lines, n_classes)
        pts[i] = lines.points(n_points)
    if any(l.strip() for l in lines.lines[lines.pos:]):
        raise FormatError("trailing content after last sample", lines.pos + 1)
    return LabeledDataset(pts, labels, names)


def import_clouds(clouds: Sequence[np.ndarray], labels: Sequence[int], class_names: Sequence[str],
                  n_points: int, seed: int = 0) -> LabeledDataset:
    """Bring externally sampled clouds (e.g. sampled from CAD meshes) to a common size.

    Larger clouds are reduced by FPS from a seeded random start, smaller ones
    are padded by repeating seeded random points; all are normalized.
    """
    rng = seeded_rng(seed)
    out = []
    for pc in clouds:
        pc = as_cloud(pc)
        if len(pc) >= n_points:
            start = int(rng.integers(0, len(pc)))
            pc = pc[farthest_point_sampling(pc, n_points, start)]
        else:
            extra = rng.integers(0, len(pc), size=n_points - len(pc))
            pc = np.vstack([pc, pc[extra]])
        out.append(normalize(pc))
    return LabeledDataset(np.stack(out), np.asarray(labels), tuple(class_names))
