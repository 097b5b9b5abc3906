"""Dense-network primitives, seeded randomness and gradient checking.

Everything here runs in float64. Parameters of a dense stack live in one
flat vector; for each layer the weight matrix (fan_in x fan_out, row-major)
is followed by its bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

U64_MAX = 2**64 - 1


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``.

    PCG64 is a fixed, published algorithm, so a seed produces the same
    stream on every platform numpy supports.
    """
    seed = int(seed)
    if not 0 <= seed <= U64_MAX:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def argmax_rows(m: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. lowest index wins ties
    return np.argmax(np.asarray(m), axis=-1)


@dataclass(frozen=True)
class MLPLayout:
    """Widths of a dense stack, input width first.

    Hidden layers use ReLU. The last layer is linear unless
    ``activate_last`` is set (shared per-point networks feeding a pool).
    """

    widths: tuple[int, ...]
    activation: str = "relu"
    activate_last: bool = False

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) < 1 for w in self.widths):
            raise ValueError(f"bad layer widths {self.widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def activated(self, layer: int) -> bool:
        return layer < self.n_layers - 1 or self.activate_last

    def slices(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) of each layer inside the flat vector."""
        out = []
        off = 0
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            w = slice(off, off + a * b)
            off += a * b
            out.append((w, slice(off, off + b)))
            off += b
        return out

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 1 or params.shape[0] != self.n_params:
            raise ValueError(
                f"expected {self.n_params} parameters for widths {self.widths}, "
                f"got shape {params.shape}")
        return [(params[ws].reshape(a, b), params[bs])
                for (ws, bs), a, b in zip(self.slices(), self.widths[:-1], self.widths[1:])]


def init_params(layout: MLPLayout, rng: np.random.Generator) -> np.ndarray:
    """He-normal weights, zero biases."""
    parts = []
    for a, b in zip(layout.widths[:-1], layout.widths[1:]):
        parts.append(rng.standard_normal(a * b) * np.sqrt(2.0 / a))
        parts.append(np.zeros(b))
    return np.concatenate(parts)


def _as_rows(x: np.ndarray, width: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"input width {x.shape[-1]} does not match layout width {width}")
    return x


def dropout_masks(layout: MLPLayout, n_rows: int, rate: float,
                  rng: np.random.Generator) -> list[np.ndarray | None]:
    """Inverted-dropout masks for every hidden layer (None for the output layer)."""
    if rate <= 0.0:
        return [None] * layout.n_layers
    keep = 1.0 - rate
    masks: list[np.ndarray | None] = []
    for layer, b in enumerate(layout.widths[1:]):
        if layer < layout.n_layers - 1:
            masks.append((rng.random((n_rows, b)) < keep) / keep)
        else:
            masks.append(None)
    return masks


def mlp_forward(params: np.ndarray, layout: MLPLayout, x: np.ndarray,
                dropout: Sequence[np.ndarray | None] | None = None) -> list[np.ndarray]:
    """Run the stack on the rows of ``x``.

    Returns the activations of every layer, starting with the input itself;
    the last entry is the network output. A 1-D input is treated as one row.
    """
    layers = layout.unpack(params)
    a = _as_rows(x, layout.widths[0])
    if dropout is not None and len(dropout) != layout.n_layers:
        raise ValueError("one dropout entry per layer is required")
    acts = [a]
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        if layout.activated(i):
            z = np.maximum(z, 0.0)
        if dropout is not None and dropout[i] is not None:
            if dropout[i].shape != z.shape:
                raise ValueError(f"dropout mask shape {dropout[i].shape} != {z.shape}")
            z = z * dropout[i]
        acts.append(z)
        a = z
    return acts


def mlp_backward(params: np.ndarray, layout: MLPLayout, x: np.ndarray, grad_out: np.ndarray,
                 dropout: Sequence[np.ndarray | None] | None = None,
                 acts: list[np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Back-propagate ``grad_out`` (d loss / d output rows).

    Returns ``(grad_params, grad_input)``. ``acts`` may carry the result of a
    matching :func:`mlp_forward` call to avoid recomputing it.
    """
    layers = layout.unpack(params)
    if acts is None:
        acts = mlp_forward(params, layout, x, dropout)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != acts[-1].shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {acts[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * layout.n_layers)  # type: ignore[list-item]
    for i in range(layout.n_layers - 1, -1, -1):
        w, _ = layers[i]
        out = acts[i + 1]
        if dropout is not None and dropout[i] is not None:
            g = g * dropout[i]
        if layout.activated(i):
            g = g * (out > 0.0)
        a_in = acts[i]
        grads[2 * i] = (a_in.T @ g).ravel()
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ w.T
    return np.concatenate(grads), g


def central_differences(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                        epsilon: float = 1e-5, coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient estimate at the chosen coordinates (all by default)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = np.array(params, dtype=np.float64)
    idx = range(params.size) if coords is None else coords
    out = []
    for i in idx:
        orig = params[i]
        params[i] = orig + epsilon
        lp = float(loss_fn(params))
        params[i] = orig - epsilon
        lm = float(loss_fn(params))
        params[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise ValueError(f"non-finite loss while perturbing coordinate {i}")
        out.append((lp - lm) / (2.0 * epsilon))
    return np.array(out)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(1e-8, |a| + |b|) over entries (0 for empty input)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shapes differ")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def finite_diff_check(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                      analytic_grad: np.ndarray, epsilon: float = 1e-5,
                      coords: Sequence[int] | None = None) -> float:
    """Largest relative disagreement between ``analytic_grad`` and central differences.

    Per coordinate: |g_a - g_n| / max(1e-8, |g_a| + |g_n|). ``coords``
    restricts the check to a subset of parameter indices.
    """
    params = np.asarray(params, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != params.shape:
        raise ValueError("gradient and parameter shapes differ")
    idx = list(range(params.size)) if coords is None else list(coords)
    return relative_error(analytic_grad[idx], central_differences(loss_fn, params, epsilon, idx))


def smoothness_gap(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                   epsilon: float = 1e-5, coords: Sequence[int] | None = None) -> float:
    """Relative disagreement of central differences taken with steps ``epsilon`` and ``2 epsilon``.

    Small for a loss that is smooth around ``params``. A large gap means a ReLU
    switch or a max-pool argmax change lies within ``2 epsilon`` of some
    coordinate, where no finite-difference estimate is meaningful. Independent
    of any analytic gradient, so it can screen gradient-check points.
    """
    return relative_error(central_differences(loss_fn, params, epsilon, coords),
                          central_differences(loss_fn, params, 2 * epsilon, coords))


def cross_entropy(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over rows and its gradient w.r.t. ``scores``."""
    p = softmax(scores, axis=1)
    n = scores.shape[0]
    rows = np.arange(n)
    loss = -np.log(np.maximum(p[rows, labels], 1e-300)).mean()
    g = p.copy()
    g[rows, labels] -= 1.0
    return float(loss), g / n


def screened_gradient_check(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                            analytic_grad: np.ndarray, epsilon: float = 1e-5,
                            gap_tol: float = 1e-5, resolution: float = 1e-7) -> float | None:
    """:func:`finite_diff_check` at a point first screened for finite-difference validity.

    Returns None (point rejected) when the step-``epsilon`` and step-``2 epsilon``
    estimates disagree by more than ``gap_tol`` (a kink nearby) or when some
    coordinate's estimate is nonzero but smaller than ``resolution`` (swamped by
    rounding in the loss). The screen never looks at ``analytic_grad``.
    """
    n1 = central_differences(loss_fn, params, epsilon)
    n2 = central_differences(loss_fn, params, 2 * epsilon)
    if relative_error(n1, n2) > gap_tol:
        return None
    mag = np.maximum(np.abs(n1), np.abs(n2))
    if np.any((mag > 0) & (mag < resolution)):
        return None
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != n1.shape:
        raise ValueError("gradient and parameter shapes differ")
    return relative_error(analytic_grad, n1)
