"""Central finite-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConstantReplay, Tensor, constant_replay


def rel_error(analytic, numeric, floor: float = 1e-5):
    """|a - n| / max(|a|, |n|, floor); the floor keeps exactly-zero gradients from amplifying FD noise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numerical_grad(f, x: Tensor, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x``.

    ``indices`` restricts the probe to a list of flat positions; other entries
    of the returned array are left at zero.
    """
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


@dataclass
class GradcheckResult:
    name: str
    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def max_rel_error(self) -> float:
        if self.indices.size == 0:
            return 0.0
        return float(rel_error(self.analytic, self.numeric).max())


def gradcheck(f, inputs: dict[str, Tensor], h: float = 1e-5, n_probe: int | None = None,
              rng=None, indices: dict | None = None) -> list[GradcheckResult]:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` builds a fresh graph on every call. Values wrapped by
    :func:`refgroup.tensor.nondiff` (argmax one-hots, stop-gradient outputs)
    are recorded on the analytic pass and replayed during probing, so the
    oracle differentiates the same surrogate the tape does. ``indices`` maps
    input names to explicit flat positions and overrides ``n_probe``.
    """
    replay = ConstantReplay()
    for t in inputs.values():
        t.grad = None
    with constant_replay(replay):
        loss = f()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()}
    results = []
    with constant_replay(replay):
        def g():
            replay.replay()
            return f()
        for name, t in inputs.items():
            if indices is not None and name in indices:
                idx = np.sort(np.asarray(indices[name], dtype=np.int64))
            elif n_probe is None or n_probe >= t.size:
                idx = np.arange(t.size)
            else:
                idx = np.sort(rng.choice(t.size, size=n_probe, replace=False))
            num = numerical_grad(g, t, h=h, indices=idx).reshape(-1)[idx]
            results.append(GradcheckResult(name, idx, analytic[name].reshape(-1)[idx], num))
    return results
