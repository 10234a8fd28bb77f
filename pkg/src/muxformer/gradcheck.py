"""Central-difference gradient checking.

The analytic gradient is taken at the dtype of the given point (float32 for
model state); the finite differences are always evaluated in float64.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, Tensor, backward

__all__ = ["grad_check", "grad_check_params", "relative_error"]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def _probe_indices(size: int, probes: int | None, rng: np.random.Generator) -> np.ndarray:
    if probes is None or size <= probes:
        return np.arange(size)
    return np.sort(rng.choice(size, size=probes, replace=False))


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    epsilon: float = 1e-3,
    probes: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` must map a tensor to a scalar tensor and be dtype-agnostic. With
    ``probes`` set, only that many randomly chosen coordinates are compared.
    """
    x0 = np.asarray(point)
    if not np.issubdtype(x0.dtype, np.floating):
        x0 = x0.astype(np.float32)
    errs = grad_check_params(
        lambda p: f(p["x"]), {"x": x0}, epsilon=epsilon, probes=probes, seed=seed
    )
    return errs["x"]


def grad_check_params(
    loss_fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-3,
    probes: int | None = 10,
    seed: int = 0,
    names=None,
) -> dict[str, float]:
    """Per-parameter max relative error of the tape gradient of ``loss_fn``.

    ``loss_fn`` receives a dict of tensors keyed like ``params``. Returns
    ``{name: max relative error over probed coordinates}``.
    """
    names = list(params) if names is None else list(names)
    leaves = {k: Tensor(np.asarray(v), requires_grad=k in names) for k, v in params.items()}
    with Tape() as tape:
        loss = loss_fn(leaves)
    grads = backward(loss, tape, wrt=[leaves[k] for k in names])

    base64 = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(name: str, flat_index: int, delta: float) -> float:
        arr = base64[name].copy()
        arr.reshape(-1)[flat_index] += delta
        inputs = dict(base64)
        inputs[name] = arr
        return float(loss_fn({k: Tensor(v) for k, v in inputs.items()}).data.reshape(()))

    rng = np.random.default_rng(seed)
    result = {}
    for name in names:
        g = grads[leaves[name].node_id].reshape(-1)
        worst = 0.0
        for i in _probe_indices(g.size, probes, rng):
            cd = (evaluate(name, i, epsilon) - evaluate(name, i, -epsilon)) / (2 * epsilon)
            worst = max(worst, relative_error(float(g[i]), cd))
        result[name] = worst
    return result
