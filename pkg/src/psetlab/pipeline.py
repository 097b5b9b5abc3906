"""Toy three-stage frustum detector: point segmentation, centering and amodal box estimation.

A scene holds the points ``I`` of one frustum (object + clutter), the object
class ``c``, a per-point object mask and the ground-truth box. One pipeline
instance predicts

    P = segment(I, c);  O = mask_points(I, P);  T = center(O);
    C = O - T;          B = estimate_box(C) shifted back by T.

``ensemble_last`` averages only the box heads of N instances on the first
instance's ``C``; ``ensemble_all`` additionally averages the per-point
probabilities (before thresholding) and the translations.

Boxes: z is vertical, heading is a rotation about z in [-pi, pi) and the
bird's-eye view is the x-y plane.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import MLPLayout, init_params, mlp_backward, mlp_forward, seeded_rng, softmax
from .pointcloud import FormatError, _Lines, fmt, read_header, read_label

SCENE_CLASSES = ("car", "pedestrian", "cyclist")
N_HEADING_BINS = 4
BIN_WIDTH = 2 * math.pi / N_HEADING_BINS
BIN_CENTERS = -math.pi + BIN_WIDTH * (np.arange(N_HEADING_BINS) + 0.5)
SIZE_TEMPLATE = np.array([2.0, 1.0, 1.6])
MASK_THRESHOLD = 0.5
BOX_OUT = 3 + 3 + 2 * N_HEADING_BINS


def wrap_angle(a: float) -> float:
    w = (a + math.pi) % (2 * math.pi) - math.pi
    return -math.pi if w >= math.pi else w


def heading_bin(a: float) -> int:
    return min(int((wrap_angle(a) + math.pi) // BIN_WIDTH), N_HEADING_BINS - 1)


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    heading: float

    def __post_init__(self):
        c = tuple(float(x) for x in self.center)
        s = tuple(float(x) for x in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("center and size need three components")
        if not all(math.isfinite(x) for x in c + s + (float(self.heading),)):
            raise ValueError("box parameters must be finite")
        if min(s) <= 0:
            raise ValueError(f"degenerate box extents {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))

    def bev_corners(self) -> np.ndarray:
        """Counter-clockwise x-y corners."""
        l, w = self.size[0] / 2, self.size[1] / 2
        c, s = math.cos(self.heading), math.sin(self.heading)
        local = np.array([[-l, -w], [l, -w], [l, w], [-l, w]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.asarray(pts) - np.array(self.center)
        c, s = math.cos(self.heading), math.sin(self.heading)
        u = d[:, 0] * c + d[:, 1] * s
        v = -d[:, 0] * s + d[:, 1] * c
        half = np.array(self.size) / 2
        return (np.abs(u) <= half[0]) & (np.abs(v) <= half[1]) & (np.abs(d[:, 2]) <= half[2])


# -- IoU ---------------------------------------------------------------------------

def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of ``subject`` inside the convex CCW polygon ``clipper``."""
    out = [tuple(p) for p in subject]
    for i in range(len(clipper)):
        a, b = clipper[i], clipper[(i + 1) % len(clipper)]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        if not inp:
            break
        prev = inp[-1]
        for cur in inp:
            sc, sp = side(cur), side(prev)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev = cur
    return np.array(out).reshape(-1, 2)


def bev_intersection(a: Box3D, b: Box3D) -> float:
    return polygon_area(clip_polygon(a.bev_corners(), b.bev_corners()))


def iou(a: Box3D, b: Box3D, mode: str = "full3d") -> float:
    """Bird's-eye-view (``ground``) or volumetric (``full3d``) IoU of two oriented boxes."""
    inter = bev_intersection(a, b)
    area_a, area_b = a.size[0] * a.size[1], b.size[0] * b.size[1]
    if mode == "ground":
        return min(1.0, max(0.0, inter / (area_a + area_b - inter)))
    if mode != "full3d":
        raise ValueError(f"unknown IoU mode {mode!r}")
    za = (a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2)
    zb = (b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2)
    dz = max(0.0, min(za[1], zb[1]) - max(za[0], zb[0]))
    vi = inter * dz
    return min(1.0, max(0.0, vi / (area_a * a.size[2] + area_b * b.size[2] - vi)))


def average_precision(predicted: Sequence[Box3D], truth: Sequence[Box3D], iou_threshold: float = 0.5,
                      mode: str = "full3d") -> float:
    """Toy AP with one detection per scene: the fraction of scenes with IoU >= threshold."""
    if len(predicted) != len(truth) or not truth:
        raise ValueError("need one prediction per ground-truth box")
    return sum(iou(p, t, mode) >= iou_threshold for p, t in zip(predicted, truth)) / len(truth)


# -- scenes ------------------------------------------------------------------------

@dataclass(frozen=True)
class FrustumScene:
    points: np.ndarray      # (N, 3)
    label: int
    mask: np.ndarray        # (N,) 0/1
    box: Box3D

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 3 or mask.shape != (len(pts),):
            raise ValueError("mask must have one entry per point")
        if mask.sum() < 1:
            raise ValueError("scene needs at least one object point")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "mask", mask)


_SIZE_RANGES = {
    "car": ((3.4, 4.6), (1.5, 1.9), (1.3, 1.7)),
    "pedestrian": ((0.7, 1.0), (0.4, 0.6), (1.6, 1.9)),
    "cyclist": ((1.5, 1.9), (0.5, 0.7), (1.4, 1.8)),
}


def _object_local(kind: str, size: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points filling a class-specific solid whose tight box is ``size`` (centered at 0)."""
    l, w, h = size
    u = rng.random((n, 3))
    if kind == "car":
        # body (lower 60 %) + centered cabin (half length, upper 40 %), volume-weighted
        cabin = rng.random(n) < (0.5 * 0.4) / (0.6 + 0.5 * 0.4)
        x = np.where(cabin, (u[:, 0] - 0.5) * 0.5 * l, (u[:, 0] - 0.5) * l)
        z = np.where(cabin, 0.6 * h + u[:, 2] * 0.4 * h, u[:, 2] * 0.6 * h) - h / 2
        pts = np.column_stack([x, (u[:, 1] - 0.5) * w, z])
        # the extreme corners pin the tight box to exactly ``size``
        pts[:2] = [[-l / 2, -w / 2, -h / 2], [l / 2, w / 2, -h / 2]]
        pts[2, :] = [0.0, 0.0, h / 2]
        return pts
    if kind == "pedestrian":
        r = np.sqrt(u[:, 0])
        t = 2 * math.pi * u[:, 1]
        pts = np.column_stack([r * np.cos(t) * l / 2, r * np.sin(t) * w / 2, (u[:, 2] - 0.5) * h])
        pts[:4] = [[l / 2, 0, -h / 2], [-l / 2, 0, h / 2], [0, w / 2, 0], [0, -w / 2, 0]]
        return pts
    if kind == "cyclist":
        # wedge: full width at the bottom, narrowing to a ridge at the top
        z = 1 - np.sqrt(u[:, 2])
        pts = np.column_stack([(u[:, 0] - 0.5) * l, (u[:, 1] - 0.5) * w * (1 - z), (z - 0.5) * h])
        pts[:3] = [[-l / 2, -w / 2, -h / 2], [l / 2, w / 2, -h / 2], [0, 0, h / 2]]
        return pts
    raise ValueError(f"unknown scene class {kind!r}")


def generate_scene(kind: str, n_object_points: int, n_clutter_points: int, rng: np.random.Generator,
                   noise_sigma: float = 0.01) -> FrustumScene:
    """Posed object plus uniform clutter in a surrounding slab, shuffled.

    The box is the tight oriented box of the noise-free object; clutter never
    falls inside it.
    """
    if kind not in SCENE_CLASSES:
        raise ValueError(f"unknown scene class {kind!r}")
    if n_object_points < 1 or n_clutter_points < 0:
        raise ValueError("need >= 1 object point and >= 0 clutter points")
    size = np.array([rng.uniform(*r) for r in _SIZE_RANGES[kind]])
    heading = rng.uniform(-math.pi / 2, math.pi / 2)
    center = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), size[2] / 2])
    box = Box3D(center, size, heading)
    local = _object_local(kind, size, n_object_points, rng)
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    obj = local @ rot.T + center
    if noise_sigma > 0:
        obj = obj + noise_sigma * rng.standard_normal(obj.shape)
    clutter = np.empty((0, 3))
    while len(clutter) < n_clutter_points:
        m = 2 * (n_clutter_points - len(clutter)) + 8
        cand = np.column_stack([rng.uniform(-4.0, 4.0, m), rng.uniform(-4.0, 4.0, m),
                                rng.uniform(0.0, 2.5, m)])
        clutter = np.vstack([clutter, cand[~box.contains(cand)]])
    clutter = clutter[:n_clutter_points]
    pts = np.vstack([obj, clutter])
    mask = np.r_[np.ones(n_object_points, dtype=np.int64), np.zeros(n_clutter_points, dtype=np.int64)]
    order = rng.permutation(len(pts))
    return FrustumScene(pts[order], SCENE_CLASSES.index(kind), mask[order], box)


def generate_scenes(n: int, n_object_points: int = 128, n_clutter_points: int = 128,
                    seed: int = 0) -> list[FrustumScene]:
    rng = seeded_rng(seed)
    return [generate_scene(SCENE_CLASSES[i % len(SCENE_CLASSES)], n_object_points,
                           n_clutter_points, rng) for i in range(n)]


def write_scenes(scenes: Sequence[FrustumScene], path) -> None:
    n_points = len(scenes[0].points) if scenes else 0
    if any(len(s.points) != n_points for s in scenes):
        raise ValueError("all scenes in a file need the same point count")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"PSCENE 1 {len(scenes)} {len(SCENE_CLASSES)} {max(n_points, 1)}\n")
        f.write(" ".join(SCENE_CLASSES) + "\n")
        for s in scenes:
            f.write(f"{s.label}\n")
            f.write(" ".join(str(v) for v in s.mask.tolist()) + "\n")
            b = s.box
            f.write(" ".join(fmt(v) for v in (*b.center, *b.size, b.heading)) + "\n")
            f.write("".join(f"{fmt(x)} {fmt(y)} {fmt(z)}\n" for x, y, z in s.points.tolist()))


def read_scenes(path) -> list[FrustumScene]:
    lines = _Lines(path)
    n_scenes, n_classes, n_points, _ = read_header(lines, "PSCENE")
    scenes = []
    for _ in range(n_scenes):
        label = read_label(lines, n_classes)
        no, line = lines.next("mask")
        toks = line.split()
        if len(toks) != n_points or any(t not in ("0", "1") for t in toks):
            raise FormatError(f"expected {n_points} mask flags (0/1)", no)
        box_vals = lines.floats("box", 7)
        try:
            box = Box3D(box_vals[:3], box_vals[3:6], box_vals[6])
        except ValueError as e:
            raise FormatError(str(e), lines.pos) from None
        pts = lines.points(n_points)
        try:
            scenes.append(FrustumScene(pts, label, [int(t) for t in toks], box))
        except ValueError as e:
            raise FormatError(str(e), no) from None
    return scenes


# -- stage networks ------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineArch:
    n_classes: int = len(SCENE_CLASSES)
    local_widths: tuple[int, ...] = (3, 32, 64)
    seg_head_hidden: tuple[int, ...] = (32,)
    center_head_hidden: tuple[int, ...] = (32,)
    box_head_hidden: tuple[int, ...] = (32,)

    @property
    def local(self) -> MLPLayout:
        return MLPLayout(self.local_widths, activate_last=True)

    @property
    def seg_head(self) -> MLPLayout:
        f = self.local_widths[-1]
        return MLPLayout((2 * f + self.n_classes, *self.seg_head_hidden, 1))

    @property
    def center_head(self) -> MLPLayout:
        return MLPLayout((self.local_widths[-1], *self.center_head_hidden, 3))

    @property
    def box_head(self) -> MLPLayout:
        return MLPLayout((self.local_widths[-1], *self.box_head_hidden, BOX_OUT))

    def sizes(self) -> dict[str, int]:
        ln = self.local.n_params
        return {"seg": ln + self.seg_head.n_params, "center": ln + self.center_head.n_params,
                "box": ln + self.box_head.n_params}


def _split(params: np.ndarray, first: MLPLayout) -> tuple[np.ndarray, np.ndarray]:
    return params[: first.n_params], params[first.n_params:]


def seg_forward(arch: PipelineArch, params: np.ndarray, pts: np.ndarray, onehot: np.ndarray):
    """Per-point object logits for a (B, N, 3) block; returns (logits (B, N), cache)."""
    lp, hp = _split(params, arch.local)
    b, n, _ = pts.shape
    la = mlp_forward(lp, arch.local, pts.reshape(b * n, 3))
    loc = la[-1].reshape(b, n, -1)
    arg = np.argmax(loc, axis=1)
    glob = np.take_along_axis(loc, arg[:, None, :], axis=1)
    feat = np.concatenate([loc, np.broadcast_to(glob, loc.shape),
                           np.broadcast_to(onehot[:, None, :], (b, n, onehot.shape[1]))], axis=-1)
    x = feat.reshape(b * n, -1)
    ha = mlp_forward(hp, arch.seg_head, x)
    return ha[-1].reshape(b, n), (pts, la, arg, loc.shape, x, ha)


def seg_backward(arch: PipelineArch, params: np.ndarray, cache, dlogits: np.ndarray) -> np.ndarray:
    lp, hp = _split(params, arch.local)
    pts, la, arg, shape, x, ha = cache
    b, n, f = shape
    gh, dx = mlp_backward(hp, arch.seg_head, x, dlogits.reshape(b * n, 1), acts=ha)
    dx = dx.reshape(b, n, -1)
    dloc = dx[..., :f].copy()
    dglob = dx[..., f:2 * f].sum(axis=1)
    rows = np.arange(b)[:, None]
    np.add.at(dloc, (rows, arg, np.arange(f)[None, :]), dglob)
    gl, _ = mlp_backward(lp, arch.local, pts.reshape(b * n, 3), dloc.reshape(b * n, f), acts=la)
    return np.concatenate([gl, gh])


def pooled_forward(local: MLPLayout, head: MLPLayout, params: np.ndarray, pts: np.ndarray):
    """Shared per-point MLP, max pool, head MLP on a (B, P, 3) block."""
    lp, hp = _split(params, local)
    b, p, _ = pts.shape
    la = mlp_forward(lp, local, pts.reshape(b * p, 3))
    loc = la[-1].reshape(b, p, -1)
    arg = np.argmax(loc, axis=1)
    g = np.take_along_axis(loc, arg[:, None, :], axis=1)[:, 0, :]
    ha = mlp_forward(hp, head, g)
    return ha[-1], (pts, la, arg, loc.shape, g, ha)


def pooled_backward(local: MLPLayout, head: MLPLayout, params: np.ndarray, cache, dout) -> np.ndarray:
    lp, hp = _split(params, local)
    pts, la, arg, shape, g, ha = cache
    b, p, f = shape
    gh, dg = mlp_backward(hp, head, g, dout, acts=ha)
    dloc = np.zeros(shape)
    np.put_along_axis(dloc, arg[:, None, :], dg[:, None, :], axis=1)
    gl, _ = mlp_backward(lp, local, pts.reshape(b * p, 3), dloc.reshape(b * p, f), acts=la)
    return np.concatenate([gl, gh])


@dataclass(frozen=True)
class PipelineInstance:
    arch: PipelineArch
    seg: np.ndarray      # segmentation network parameters
    center: np.ndarray   # centering network parameters
    box: np.ndarray      # box network parameters

    def __post_init__(self):
        sz = self.arch.sizes()
        for name in ("seg", "center", "box"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if p.shape != (sz[name],):
                raise ValueError(f"{name} parameters: expected {sz[name]}, got {p.shape}")
            object.__setattr__(self, name, p)


def zero_instance(arch: PipelineArch = PipelineArch()) -> PipelineInstance:
    s = arch.sizes()
    return PipelineInstance(arch, np.zeros(s["seg"]), np.zeros(s["center"]), np.zeros(s["box"]))


def _onehot(c: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[c] = 1.0
    return v


def segment(inst: PipelineInstance, points: np.ndarray, c: int) -> np.ndarray:
    """Object probability of every point."""
    logits, _ = seg_forward(inst.arch, inst.seg, np.asarray(points, float)[None],
                            _onehot(c, inst.arch.n_classes)[None])
    return 1.0 / (1.0 + np.exp(-logits[0]))


def mask_points(points: np.ndarray, prob: np.ndarray) -> np.ndarray:
    """Points with probability >= 0.5; the single most probable point if none qualifies."""
    points, prob = np.asarray(points), np.asarray(prob)
    if len(prob) != len(points):
        raise ValueError("one probability per point is required")
    keep = prob >= MASK_THRESHOLD
    if not keep.any():
        return points[[int(np.argmax(prob))]]
    return points[keep]


def center(inst: PipelineInstance, obj: np.ndarray) -> np.ndarray:
    out, _ = pooled_forward(inst.arch.local, inst.arch.center_head, inst.center,
                            np.asarray(obj, float)[None])
    return out[0]


def apply_center(obj: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.asarray(obj) - np.asarray(t)


@dataclass(frozen=True)
class BoxHeads:
    center_residual: np.ndarray    # (3,)
    log_size: np.ndarray           # (3,) relative to SIZE_TEMPLATE
    bin_scores: np.ndarray         # (H,) raw
    bin_residuals: np.ndarray      # (H,) radians

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "BoxHeads":
        h = N_HEADING_BINS
        return cls(v[:3], v[3:6], v[6:6 + h], v[6 + h:6 + 2 * h])

    def heading_distribution(self) -> np.ndarray:
        return softmax(self.bin_scores)

    def decode(self, t: np.ndarray) -> Box3D:
        """Box in the global frame: the centered-frame prediction shifted by ``t``."""
        b = int(np.argmax(self.bin_scores))
        return Box3D(np.asarray(t) + self.center_residual, SIZE_TEMPLATE * np.exp(self.log_size),
                     BIN_CENTERS[b] + self.bin_residuals[b])


def estimate_box_heads(inst: PipelineInstance, centered: np.ndarray) -> np.ndarray:
    out, _ = pooled_forward(inst.arch.local, inst.arch.box_head, inst.box,
                            np.asarray(centered, float)[None])
    return out[0]


def estimate_box(inst: PipelineInstance, centered: np.ndarray) -> tuple[Box3D, BoxHeads]:
    """Box in the centered frame plus the raw heads; callers shift it back by ``T``."""
    heads = BoxHeads.from_vector(estimate_box_heads(inst, centered))
    return heads.decode(np.zeros(3)), heads


def _shifted_mean(values: Sequence[np.ndarray]) -> np.ndarray:
    """Mean taken as first + mean deviation; exact when all members are equal."""
    first = np.asarray(values[0])
    return first + np.mean([np.asarray(v) - first for v in values], axis=0)


def _mean_heads(instances: Sequence[PipelineInstance], centered: np.ndarray) -> BoxHeads:
    return BoxHeads.from_vector(_shifted_mean([estimate_box_heads(i, centered) for i in instances]))


def predict_single(inst: PipelineInstance, scene: FrustumScene) -> Box3D:
    obj = mask_points(scene.points, segment(inst, scene.points, scene.label))
    t = center(inst, obj)
    _, heads = estimate_box(inst, apply_center(obj, t))
    return heads.decode(t)


def ensemble_last(instances: Sequence[PipelineInstance], scene: FrustumScene) -> Box3D:
    """Average the N box heads; segmentation and centering come from ``instances[0]``."""
    if not instances:
        raise ValueError("need at least one pipeline instance")
    ref = instances[0]
    obj = mask_points(scene.points, segment(ref, scene.points, scene.label))
    t = center(ref, obj)
    return _mean_heads(instances, apply_center(obj, t)).decode(t)


def ensemble_all(instances: Sequence[PipelineInstance], scene: FrustumScene) -> Box3D:
    """Average probabilities before masking, translations before centering, then box heads."""
    if not instances:
        raise ValueError("need at least one pipeline instance")
    prob = _shifted_mean([segment(i, scene.points, scene.label) for i in instances])
    obj = mask_points(scene.points, prob)
    t = _shifted_mean([center(i, obj) for i in instances])
    return _mean_heads(instances, apply_center(obj, t)).decode(t)


def mask_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    union = np.count_nonzero(pred | truth)
    return 1.0 if union == 0 else np.count_nonzero(pred & truth) / union


# -- training ----------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineTrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.97
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("invalid pipeline training configuration")


def pad_repeat(clouds: Sequence[np.ndarray]) -> np.ndarray:
    """Stack clouds of different sizes by repeating each cloud's first point (max pool ignores it)."""
    p = max(len(c) for c in clouds)
    return np.stack([np.vstack([c, np.repeat(c[:1], p - len(c), axis=0)]) for c in clouds])


def seg_loss(arch, params, pts, onehot, mask):
    logits, cache = seg_forward(arch, params, pts, onehot)
    p = 1.0 / (1.0 + np.exp(-logits))
    n = logits.size
    # log(1 + e^-|x|) form keeps the binary cross-entropy finite for large logits
    loss = (np.maximum(logits, 0) - logits * mask + np.log1p(np.exp(-np.abs(logits)))).sum() / n
    return float(loss), seg_backward(arch, params, cache, (p - mask) / n)


def center_loss(arch, params, pts, target):
    out, cache = pooled_forward(arch.local, arch.center_head, params, pts)
    d = out - target
    b = len(target)
    return float((d ** 2).sum() / b), pooled_backward(arch.local, arch.center_head, params, cache, 2 * d / b)


def box_targets(box: Box3D, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, int, float]:
    b = heading_bin(box.heading)
    return (np.array(box.center) - t, np.log(np.array(box.size) / SIZE_TEMPLATE), b,
            box.heading - BIN_CENTERS[b])


def box_loss(arch, params, pts, res_t, size_t, bins, resid_t):
    out, cache = pooled_forward(arch.local, arch.box_head, params, pts)
    b = len(bins)
    h = N_HEADING_BINS
    rows = np.arange(b)
    dout = np.zeros_like(out)
    d_res = out[:, :3] - res_t
    d_size = out[:, 3:6] - size_t
    p = softmax(out[:, 6:6 + h], axis=1)
    d_ang = out[rows, 6 + h + bins] - resid_t
    loss = ((d_res ** 2).sum() + (d_size ** 2).sum() - np.log(p[rows, bins]).sum() + (d_ang ** 2).sum()) / b
    dout[:, :3] = 2 * d_res / b
    dout[:, 3:6] = 2 * d_size / b
    g = p.copy()
    g[rows, bins] -= 1
    dout[:, 6:6 + h] = g / b
    dout[rows, 6 + h + bins] = 2 * d_ang / b
    return float(loss), pooled_backward(arch.local, arch.box_head, params, cache, dout)


def _sgd(loss_grad, params, n, cfg: PipelineTrainConfig, rng):
    params = params.copy()
    vel = np.zeros_like(params)
    lr = cfg.learning_rate
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            loss, g = loss_grad(params, order[s:s + cfg.batch_size])
            if not math.isfinite(loss):
                raise RuntimeError("non-finite loss while training a pipeline stage")
            norm = float(np.linalg.norm(g))
            if norm > cfg.clip_norm:
                g = g * (cfg.clip_norm / norm)
            vel = cfg.momentum * vel - lr * g
            params += vel
        lr *= cfg.lr_decay
    return params


def train_pipeline(scenes: Sequence[FrustumScene], seed: int, cfg: PipelineTrainConfig = PipelineTrainConfig(),
                   arch: PipelineArch = PipelineArch()) -> PipelineInstance:
    """Train the three stages in sequence.

    Segmentation learns the ground-truth masks; centering and box estimation then train on
    the points the trained segmentation actually keeps, so they see the same kind of
    (imperfect) input at training and inference time.
    """
    init = seeded_rng(seed)
    order_rng = seeded_rng(seed + 1)
    sz = arch.sizes()

    def fresh(head: MLPLayout) -> np.ndarray:
        return np.concatenate([init_params(arch.local, init), init_params(head, init)])

    pts = np.stack([s.points for s in scenes])
    onehot = np.stack([_onehot(s.label, arch.n_classes) for s in scenes])
    masks = np.stack([s.mask for s in scenes]).astype(np.float64)
    seg_p = _sgd(lambda p, b: seg_loss(arch, p, pts[b], onehot[b], masks[b]),
                 fresh(arch.seg_head), len(scenes), cfg, order_rng)

    seg_only = PipelineInstance(arch, seg_p, np.zeros(sz["center"]), np.zeros(sz["box"]))
    objs = [mask_points(s.points, segment(seg_only, s.points, s.label)) for s in scenes]
    centers = np.stack([np.array(s.box.center) for s in scenes])
    ctr_p = _sgd(lambda p, b: center_loss(arch, p, pad_repeat([objs[i] for i in b]), centers[b]),
                 fresh(arch.center_head), len(scenes), cfg, order_rng)

    tmp = PipelineInstance(arch, seg_p, ctr_p, np.zeros(sz["box"]))
    ts = [center(tmp, o) for o in objs]
    cen = [o - t for o, t in zip(objs, ts)]
    tg = [box_targets(s.box, t) for s, t in zip(scenes, ts)]
    res_t = np.stack([x[0] for x in tg])
    size_t = np.stack([x[1] for x in tg])
    bins = np.array([x[2] for x in tg])
    ang_t = np.array([x[3] for x in tg])
    box_p = _sgd(lambda p, b: box_loss(arch, p, pad_repeat([cen[i] for i in b]), res_t[b], size_t[b],
                                       bins[b], ang_t[b]),
                 fresh(arch.box_head), len(scenes), cfg, order_rng)
    return PipelineInstance(arch, seg_p, ctr_p, box_p)


@dataclass(frozen=True)
class DetectionResult:
    scene_id: int
    mode: str           # none | last | all
    box: Box3D
    iou_ground: float
    iou_3d: float


ENSEMBLE_MODES = ("none", "last", "all")


def detect(instances: Sequence[PipelineInstance], scene: FrustumScene, mode: str) -> Box3D:
    if mode == "none":
        return predict_single(instances[0], scene)
    if mode == "last":
        return ensemble_last(instances, scene)
    if mode == "all":
        return ensemble_all(instances, scene)
    raise ValueError(f"unknown ensemble mode {mode!r}")


def evaluate_detection(instances: Sequence[PipelineInstance], scenes: Sequence[FrustumScene],
                       modes: Sequence[str] = ENSEMBLE_MODES) -> list[DetectionResult]:
    out = []
    for mode in modes:
        for i, s in enumerate(scenes):
            b = detect(instances, s, mode)
            out.append(DetectionResult(i, mode, b, iou(b, s.box, "ground"), iou(b, s.box, "full3d")))
    return out
