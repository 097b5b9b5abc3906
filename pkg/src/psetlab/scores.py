"""Score matrices: raw per-sample class activations of one model (or ensemble)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import argmax_rows
from .pointcloud import fmt


class AlignmentError(ValueError):
    """Score matrices that do not describe the same samples in the same order."""


@dataclass(frozen=True)
class ScoreMatrix:
    scores: np.ndarray          # (n_samples, C)
    labels: np.ndarray          # (n_samples,)
    sample_ids: np.ndarray      # (n_samples,)
    source_tag: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] < 2:
            raise ValueError(f"scores must be (n_samples, C>=2), got {s.shape}")
        labels = np.asarray(self.labels, dtype=np.int64)
        ids = np.asarray(self.sample_ids, dtype=np.int64)
        if labels.shape != (s.shape[0],) or ids.shape != (s.shape[0],):
            raise ValueError("labels and sample ids need one entry per row")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        if labels.size and (labels.min() < 0 or labels.max() >= s.shape[1]):
            raise ValueError("label out of range")
        for a in (s, labels, ids):
            a.setflags(write=False)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n_samples(self) -> int:
        return self.scores.shape[0]

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    def with_scores(self, scores: np.ndarray, tag: str | None = None) -> "ScoreMatrix":
        return ScoreMatrix(scores, self.labels, self.sample_ids,
                           self.source_tag if tag is None else tag)


def check_aligned(matrices) -> None:
    if not matrices:
        raise ValueError("no score matrices given")
    ref = matrices[0]
    for m in matrices[1:]:
        if m.scores.shape != ref.scores.shape:
            raise AlignmentError(f"shape {m.scores.shape} != {ref.scores.shape}")
        if not np.array_equal(m.sample_ids, ref.sample_ids):
            raise AlignmentError(f"{m.source_tag!r} rows are not aligned with {ref.source_tag!r}")
        if not np.array_equal(m.labels, ref.labels):
            raise AlignmentError(f"{m.source_tag!r} labels differ from {ref.source_tag!r}")


def predictions(m: ScoreMatrix | np.ndarray) -> np.ndarray:
    """Per-row argmax; lowest class index wins ties."""
    return argmax_rows(m.scores if isinstance(m, ScoreMatrix) else m)


def write_scores(m: ScoreMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "label"] + [f"s_{j}" for j in range(m.n_classes)])
        for sid, lab, row in zip(m.sample_ids.tolist(), m.labels.tolist(), m.scores.tolist()):
            w.writerow([sid, lab] + [fmt(x) for x in row])


def read_scores(path, source_tag: str | None = None) -> ScoreMatrix:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty scores file")
    head = rows[0]
    c = len(head) - 2
    if head[:2] != ["sample_id", "label"] or head[2:] != [f"s_{j}" for j in range(c)]:
        raise ValueError(f"{path}: bad scores header")
    ids, labels, scores = [], [], []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != c + 2:
            raise ValueError(f"{path}:{i}: expected {c + 2} fields")
        try:
            ids.append(int(r[0]))
            labels.append(int(r[1]))
            scores.append([float(x) for x in r[2:]])
        except ValueError:
            raise ValueError(f"{path}:{i}: malformed number") from None
    return ScoreMatrix(np.array(scores).reshape(len(ids), c), labels, ids,
                       Path(path).stem if source_tag is None else source_tag)
