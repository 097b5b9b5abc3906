"""Toy permutation-invariant classifiers: training, inference, encoder/head split, model files.

Three families share one structure: a per-point network ``phi`` (ReLU on every
layer), a symmetric pool, and a classifier ``rho`` whose last layer emits raw
class scores.

* ``deepsets_lite``: ``phi`` on xyz, sum pool.
* ``pointnet_lite``: ``phi`` on xyz, max pool.
* ``hier_lite``: one sampling level. FPS picks ``n_centroids`` centers,
  each is grouped with its ``group_k`` nearest points, ``phi`` sees
  ``[p - center, center]``, then max pool per group and max pool over groups.

The flat parameter vector is ``phi`` params followed by ``rho`` params; the
``phi`` slice is the encoder.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import (MLPLayout, cross_entropy, dropout_masks, init_params, mlp_backward,
                       mlp_forward, seeded_rng)
from .pointcloud import LabeledDataset, as_cloud, augment_batch, fmt, fps_batch, knn_batch
from .scores import ScoreMatrix

log = logging.getLogger(__name__)

FAMILIES = ("deepsets_lite", "pointnet_lite", "hier_lite")
CONST_SEED = 0xC0FFEE
FORMAT_VERSION = "1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelArch:
    family: str
    phi_widths: tuple[int, ...]
    rho_widths: tuple[int, ...]
    dropout_rate: float = 0.3
    n_centroids: int = 32
    group_k: int = 16
    # constant factor on the sum pool; the pool stays additive over multisets
    sum_scale: float = 1.0 / 256

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        object.__setattr__(self, "phi_widths", tuple(int(w) for w in self.phi_widths))
        object.__setattr__(self, "rho_widths", tuple(int(w) for w in self.rho_widths))
        in_width = 6 if self.family == "hier_lite" else 3
        if self.phi_widths[0] != in_width:
            raise ValueError(f"{self.family} phi input width must be {in_width}")
        if self.rho_widths[0] != self.phi_widths[-1]:
            raise ValueError("rho input width must equal the phi output width")
        if self.rho_widths[-1] < 2:
            raise ValueError("need at least two classes")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not self.sum_scale > 0:
            raise ValueError("sum_scale must be positive")
        if self.family == "hier_lite" and (self.n_centroids < 1 or self.group_k < 1):
            raise ValueError("n_centroids and group_k must be positive")

    @property
    def pooling(self) -> str:
        return "sum" if self.family == "deepsets_lite" else "max"

    @property
    def n_classes(self) -> int:
        return self.rho_widths[-1]

    @property
    def phi(self) -> MLPLayout:
        return MLPLayout(self.phi_widths, activate_last=True)

    @property
    def rho(self) -> MLPLayout:
        return MLPLayout(self.rho_widths)

    @property
    def n_encoder_params(self) -> int:
        return self.phi.n_params

    @property
    def n_params(self) -> int:
        return self.phi.n_params + self.rho.n_params


def default_arch(family: str, n_classes: int) -> ModelArch:
    if family == "hier_lite":
        return ModelArch(family, (6, 32, 64), (64, 32, n_classes))
    return ModelArch(family, (3, 32, 64), (64, 32, n_classes))


@dataclass(frozen=True)
class SeedBundle:
    """Seeds of the three removable random factors; ``None`` means the shared CONST value."""

    data_order: int | None = None
    init: int | None = None
    dropout: int | None = None

    @staticmethod
    def resolve(seed: int | None) -> int:
        return CONST_SEED if seed is None else int(seed)

    @classmethod
    def varied(cls, root: int, i: int) -> "SeedBundle":
        return cls(root + i, root + i, root + i)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.97
    optimizer: str = "sgd_momentum"
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer != "sgd_momentum":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class TrainedModel:
    arch: ModelArch
    params: np.ndarray
    seeds: SeedBundle = field(default_factory=SeedBundle)
    epochs: int = 0
    final_loss: float = float("nan")
    epoch_losses: tuple[float, ...] = ()

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite parameter")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    @property
    def family(self) -> str:
        return self.arch.family

    @property
    def param_count(self) -> int:
        return self.params.size

    @property
    def encoder_params(self) -> np.ndarray:
        return self.params[: self.arch.n_encoder_params]

    @property
    def rho_params(self) -> np.ndarray:
        return self.params[self.arch.n_encoder_params:]


# -- forward / backward --------------------------------------------------------

def _phi_inputs(arch: ModelArch, pts: np.ndarray) -> np.ndarray:
    """Per-point inputs of ``phi`` as (B, P, width)."""
    if arch.family != "hier_lite":
        return pts
    b, n, _ = pts.shape
    m = min(arch.n_centroids, n)
    k = min(arch.group_k, n)
    norms = pts[..., 0] ** 2 + pts[..., 1] ** 2 + pts[..., 2] ** 2
    # start FPS at the outermost point so the grouping ignores storage order
    start = np.argmax(norms, axis=1)
    centers = fps_batch(pts, m, start)
    groups = knn_batch(pts, centers, k)
    rows = np.arange(b)[:, None, None]
    grouped = pts[rows, groups]                          # (B, M, k, 3)
    ctr = pts[np.arange(b)[:, None], centers][:, :, None, :]
    feat = np.concatenate([grouped - ctr, np.broadcast_to(ctr, grouped.shape)], axis=-1)
    return feat.reshape(b, m * k, 6)


def _encode_batch(arch: ModelArch, phi_params: np.ndarray, pts: np.ndarray):
    x = _phi_inputs(arch, pts)
    b, p, w = x.shape
    acts = mlp_forward(phi_params, arch.phi, x.reshape(b * p, w))
    h = acts[-1].reshape(b, p, -1)
    if arch.pooling == "sum":
        g = h.sum(axis=1) * arch.sum_scale
        arg = None
    else:
        arg = np.argmax(h, axis=1)
        g = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
    return g, (x, acts, arg, h.shape)


def _encode_backward(arch: ModelArch, phi_params: np.ndarray, cache, dg: np.ndarray) -> np.ndarray:
    x, acts, arg, shape = cache
    b, p, f = shape
    if arch.pooling == "sum":
        dh = np.broadcast_to(dg[:, None, :] * arch.sum_scale, shape).copy()
    else:
        dh = np.zeros(shape)
        np.put_along_axis(dh, arg[:, None, :], dg[:, None, :], axis=1)
    gp, _ = mlp_backward(phi_params, arch.phi, x.reshape(b * p, -1), dh.reshape(b * p, f),
                         acts=acts)
    return gp


def loss_and_grad(arch: ModelArch, params: np.ndarray, pts: np.ndarray, labels: np.ndarray,
                  rho_dropout=None, train_encoder: bool = True) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of a batch and its gradient w.r.t. the full parameter vector."""
    ne = arch.n_encoder_params
    phi_p, rho_p = params[:ne], params[ne:]
    g, cache = _encode_batch(arch, phi_p, pts)
    acts = mlp_forward(rho_p, arch.rho, g, rho_dropout)
    loss, dscores = cross_entropy(acts[-1], labels)
    g_rho, dg = mlp_backward(rho_p, arch.rho, g, dscores, rho_dropout, acts=acts)
    if train_encoder:
        g_phi = _encode_backward(arch, phi_p, cache, dg)
    else:
        g_phi = np.zeros(ne)
    return loss, np.concatenate([g_phi, g_rho])


def encode_batch(model: TrainedModel, pts: np.ndarray) -> np.ndarray:
    return _encode_batch(model.arch, model.encoder_params, np.asarray(pts, dtype=np.float64))[0]


def classify(model: TrainedModel, features: np.ndarray) -> np.ndarray:
    """``rho``: pooled features -> raw class scores (dropout off)."""
    return mlp_forward(model.rho_params, model.arch.rho, features)[-1]


def encode(model: TrainedModel, pc) -> np.ndarray:
    """Pooled global signature of one cloud (the input of ``rho``)."""
    return encode_batch(model, as_cloud(pc)[None])[0]


def predict(model: TrainedModel, pc) -> np.ndarray:
    """Raw class scores of one cloud."""
    return classify(model, encode(model, pc)[None])[0]


def predict_batch(model: TrainedModel, pts: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = [classify(model, encode_batch(model, pts[i:i + chunk]))
           for i in range(0, len(pts), chunk)]
    return np.vstack(out) if out else np.empty((0, model.arch.n_classes))


# -- training --------------------------------------------------------------------

def _sgd(arch: ModelArch, params: np.ndarray, dataset: LabeledDataset, indices: np.ndarray,
         seeds: SeedBundle, cfg: TrainConfig, train_encoder: bool,
         rho_init_rng: np.random.Generator | None = None) -> tuple[np.ndarray, list[float]]:
    data_rng = seeded_rng(SeedBundle.resolve(seeds.data_order))
    drop_rng = seeded_rng(SeedBundle.resolve(seeds.dropout))
    params = params.copy()
    velocity = np.zeros_like(params)
    lr = cfg.learning_rate
    ne = arch.n_encoder_params
    losses = []
    for epoch in range(cfg.epochs):
        order = indices[data_rng.permutation(len(indices))]
        total = 0.0
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            pts = dataset.points[batch]
            if cfg.augment:
                pts = augment_batch(pts, data_rng)
            masks = dropout_masks(arch.rho, len(batch), arch.dropout_rate, drop_rng)
            loss, grad = loss_and_grad(arch, params, pts, dataset.labels[batch], masks,
                                       train_encoder=train_encoder)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            if not train_encoder:
                grad[:ne] = 0.0
            velocity = cfg.momentum * velocity - lr * grad
            params += velocity
            total += loss * len(batch)
        losses.append(total / len(order))
        lr *= cfg.lr_decay
    return params, losses


def train(arch: ModelArch, dataset: LabeledDataset, train_indices: Sequence[int],
          seeds: SeedBundle, cfg: TrainConfig = TrainConfig()) -> TrainedModel:
    """Train one instance with minibatch SGD + momentum on softmax cross-entropy.

    Shuffling and augmentation draw from ``seeds.data_order``, initial weights
    from ``seeds.init`` and dropout masks from ``seeds.dropout``; nothing else
    is random, so equal inputs give bit-identical parameters.
    """
    if dataset.n_classes != arch.n_classes:
        raise ValueError(f"dataset has {dataset.n_classes} classes, architecture outputs {arch.n_classes}")
    idx = np.asarray(train_indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= len(dataset):
        raise ValueError("invalid training indices")
    init_rng = seeded_rng(SeedBundle.resolve(seeds.init))
    p0 = np.concatenate([init_params(arch.phi, init_rng), init_params(arch.rho, init_rng)])
    params, losses = _sgd(arch, p0, dataset, idx, seeds, cfg, train_encoder=True)
    log.debug("trained %s seeds=%s final loss %.4f", arch.family, seeds, losses[-1])
    return TrainedModel(arch, params, seeds, cfg.epochs, losses[-1], tuple(losses))


def retrain_classifier(model: TrainedModel, dataset: LabeledDataset, train_indices: Sequence[int],
                       classifier_seed: int, epochs: int = 31, cfg: TrainConfig = TrainConfig(),
                       data_order_seed: int | None = None) -> TrainedModel:
    """Fresh ``rho`` trained on top of the frozen encoder of ``model``.

    ``rho`` is initialised and dropped out from ``classifier_seed``; the data
    order defaults to the one ``model`` was trained with.
    """
    arch = model.arch
    seeds = SeedBundle(model.seeds.data_order if data_order_seed is None else data_order_seed,
                       classifier_seed, classifier_seed)
    rho0 = init_params(arch.rho, seeded_rng(SeedBundle.resolve(seeds.init)))
    p0 = np.concatenate([model.encoder_params, rho0])
    params, losses = _sgd(arch, p0, dataset, np.asarray(train_indices, dtype=np.int64), seeds,
                          replace(cfg, epochs=epochs), train_encoder=False)
    params[: arch.n_encoder_params] = model.encoder_params
    return TrainedModel(arch, params, seeds, epochs, losses[-1], tuple(losses))


# -- accounting ------------------------------------------------------------------------

def param_count(model: TrainedModel | ModelArch) -> int:
    arch = model.arch if isinstance(model, TrainedModel) else model
    return arch.n_params


def time_inference(model: TrainedModel, batch: np.ndarray, repetitions: int = 10) -> dict:
    """Wall-clock seconds per forward pass of ``batch`` (one warm-up pass discarded)."""
    if repetitions < 3:
        raise ValueError("at least 3 timed repetitions are required")
    batch = np.asarray(batch, dtype=np.float64)
    predict_batch(model, batch)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        predict_batch(model, batch)
        times.append(time.perf_counter() - t0)
    t = np.array(times)
    return {"repetitions": repetitions, "batch_size": len(batch), "mean": float(t.mean()),
            "min": float(t.min()), "max": float(t.max()), "std": float(t.std()),
            "param_count": param_count(model)}


# -- model files -------------------------------------------------------------------------

def _seed_tok(s: int | None) -> str:
    return "CONST" if s is None else str(int(s))


def _parse_seed(tok: str) -> int | None:
    return None if tok == "CONST" else int(tok)


def save_model(model: TrainedModel, path) -> None:
    a = model.arch
    arch_line = (f"phi={','.join(map(str, a.phi_widths))} rho={','.join(map(str, a.rho_widths))} "
                 f"dropout={fmt(a.dropout_rate)} n_centroids={a.n_centroids} group_k={a.group_k} "
                 f"sum_scale={fmt(a.sum_scale)}")
    s = model.seeds
    seed_line = (f"data_order={_seed_tok(s.data_order)} init={_seed_tok(s.init)} "
                 f"dropout={_seed_tok(s.dropout)} epochs={model.epochs} final_loss={fmt(model.final_loss)}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"PMODEL {FORMAT_VERSION} {a.family}\n{arch_line}\n{seed_line}\n{model.param_count}\n")
        f.write("".join(fmt(x) + "\n" for x in model.params.tolist()))


class ModelFileError(ValueError):
    pass


def _kv(line: str, lineno: int) -> dict[str, str]:
    try:
        return dict(tok.split("=", 1) for tok in line.split())
    except ValueError:
        raise ModelFileError(f"line {lineno}: expected key=value tokens") from None


def load_model(path, expected_family: str | None = None) -> TrainedModel:
    """Read a model file. The family recorded in the file always wins over ``expected_family``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 4:
        raise ModelFileError("truncated model file: missing header lines")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "PMODEL":
        raise ModelFileError("line 1: not a model file")
    if head[1] != FORMAT_VERSION:
        raise ModelFileError(f"line 1: unsupported model format version {head[1]}")
    family = head[2]
    if expected_family is not None and expected_family != family:
        log.warning("%s holds a %s model, not %s", path, family, expected_family)
    try:
        kv = _kv(lines[1], 2)
        arch = ModelArch(family, tuple(int(w) for w in kv["phi"].split(",")),
                         tuple(int(w) for w in kv["rho"].split(",")), float(kv["dropout"]),
                         int(kv["n_centroids"]), int(kv["group_k"]), float(kv["sum_scale"]))
        sk = _kv(lines[2], 3)
        seeds = SeedBundle(_parse_seed(sk["data_order"]), _parse_seed(sk["init"]),
                           _parse_seed(sk["dropout"]))
        epochs, final_loss = int(sk["epochs"]), float(sk["final_loss"])
        count = int(lines[3])
    except (KeyError, ValueError) as e:
        raise ModelFileError(f"malformed model header: {e}") from None
    if count != arch.n_params:
        raise ModelFileError(f"line 4: parameter count {count} does not match architecture ({arch.n_params})")
    body = [l for l in lines[4:] if l.strip()]
    if len(body) != count:
        raise ModelFileError(f"truncated model file: {len(body)} of {count} parameters present")
    try:
        params = np.array([float(l) for l in body])
    except ValueError as e:
        raise ModelFileError(f"malformed parameter: {e}") from None
    if any(fmt(x) != l.strip() for x, l in zip(params.tolist(), body)):
        raise ModelFileError("parameters are not in canonical 17-digit form; round-trip not exact")
    return TrainedModel(arch, params, seeds, epochs, final_loss)


# -- scoring and batch training ---------------------------------------------------------

def predict_scores(model: TrainedModel, dataset: LabeledDataset, eval_indices: Sequence[int],
                   tag: str = "") -> ScoreMatrix:
    """Raw scores of ``model`` on the samples ``eval_indices`` (rows in that order)."""
    idx = np.asarray(eval_indices, dtype=np.int64)
    return ScoreMatrix(predict_batch(model, dataset.points[idx]), dataset.labels[idx], idx,
                       tag or model.family)


def _train_task(task):
    return train(*task)


def train_many(tasks: Sequence[tuple], jobs: int = 1) -> list[TrainedModel]:
    """``train(*task)`` for every task, optionally across processes; results keep task order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [train(*t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_train_task, tasks))
