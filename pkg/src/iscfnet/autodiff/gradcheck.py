"""Central-difference gradient verification for scalar-valued tensor functions."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import NotScalar, Tape, Tensor, backward, tensor


def _as_array(x) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else x
    return np.array(data, dtype=np.float64)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-5,
    sample: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must return a scalar tensor. Per coordinate the numeric gradient is
    (f(x+eps*e) - f(x-eps*e)) / (2*eps) and the relative error divides by
    max(|analytic|, |numeric|, 1e-8). With ``sample`` set, only that many
    coordinates per input are checked (chosen by ``rng``).
    """
    arrays = [_as_array(x) for x in inputs]
    with Tape() as tape:
        tracked = [tape.watch(tensor(a)) for a in arrays]
        loss = f(*tracked)
        if loss.data.size != 1:
            raise NotScalar(f"grad_check function returned shape {loss.shape}")
        grads = backward(loss)
        analytic = [grads.wrt(t) for t in tracked]

    def evaluate(args) -> float:
        out = f(*[tensor(a) for a in args])
        return float(out.data.reshape(()))

    if sample is not None and rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for idx, base in enumerate(arrays):
        if sample is None or sample >= base.size:
            coords = range(base.size)
        else:
            coords = rng.choice(base.size, size=sample, replace=False)
        for c in coords:
            bumped = [a.copy() if i == idx else a for i, a in enumerate(arrays)]
            bumped[idx].flat[c] = base.flat[c] + eps
            plus = evaluate(bumped)
            bumped[idx].flat[c] = base.flat[c] - eps
            minus = evaluate(bumped)
            numeric = (plus - minus) / (2.0 * eps)
            exact = analytic[idx].flat[c]
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
