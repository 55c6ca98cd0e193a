"""Dense float64 kernels shared by the model, balancing methods and metrics.

All randomness in the package flows through :func:`rng_for`, which derives a
counter-based Philox generator from a root seed plus a string label. There is
no global RNG state anywhere.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import CheckFailureError, InvalidInputError

Params = dict[str, np.ndarray]


def rng_for(seed: int, *labels: str) -> np.random.Generator:
    """Philox generator keyed by (seed, crc32(labels)); independent per label."""
    key = zlib.crc32("/".join(labels).encode("utf-8"))
    return np.random.Generator(np.random.Philox(key=(np.uint64(seed) << np.uint64(32)) + np.uint64(key)))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax along ``axis`` (max-subtraction before exponentiation)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InvalidInputError("softmax of empty input")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("softmax received non-finite input")
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def top_k_select(v: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries, descending by value, ties to the lowest index."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise InvalidInputError("top_k_select expects a vector")
    if not 1 <= k <= v.shape[0]:
        raise InvalidInputError(f"k={k} out of range for length {v.shape[0]}")
    # stable sort on the negated values keeps equal entries in index order
    return np.argsort(-v, kind="stable")[:k]


def top_k_rows(m: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k_select` for a (T, E) matrix; returns (T, k) indices."""
    if not 1 <= k <= m.shape[1]:
        raise InvalidInputError(f"k={k} out of range for width {m.shape[1]}")
    return np.argsort(-m, axis=1, kind="stable")[:, :k]


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean next-token cross entropy with its gradient w.r.t. the logits.

    logits (T, V), targets (T,) int. Returns (loss, (softmax - onehot)/T).
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise InvalidInputError("cross_entropy expects (T, V) logits and (T,) targets")
    T, V = logits.shape
    if T == 0:
        raise InvalidInputError("cross_entropy of empty batch")
    if targets.min() < 0 or targets.max() >= V:
        raise InvalidInputError("target index out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(T)
    loss = float(np.mean(logz - shifted[rows, targets]))
    grad = np.exp(shifted - logz[:, None])
    grad[rows, targets] -= 1.0
    grad /= T
    return loss, grad


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str
    probes: int


def grad_check(
    fn: Callable[[Params], tuple[float, Params]],
    params: Params,
    epsilon: float = 1e-4,
    probes: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` must be deterministic in ``params`` and return (loss, grads) with
    grads keyed like ``params``. A random subset of coordinates is probed.
    """
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    _, grads = fn(params)
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    rng = rng_for(seed, "grad_check")
    flat_idx = rng.choice(total, size=min(probes, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = (0.0, "none")
    for fi in sorted(int(i) for i in flat_idx):
        which = int(np.searchsorted(offsets, fi, side="right") - 1)
        name = names[which]
        local = fi - offsets[which]
        label = f"{name}[{local}]"
        flat = params[name].reshape(-1)
        orig = flat[local]
        flat[local] = orig + epsilon
        lp, _ = fn(params)
        flat[local] = orig - epsilon
        lm, _ = fn(params)
        flat[local] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise CheckFailureError(f"non-finite loss when perturbing {label}")
        fd = (lp - lm) / (2.0 * epsilon)
        an = float(grads[name].reshape(-1)[local])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        if rel > worst[0]:
            worst = (rel, label)
    return GradCheckReport(max_relative_error=worst[0], worst_parameter=worst[1], probes=len(flat_idx))
