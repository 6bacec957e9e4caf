"""Central finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward

STEP = {np.float32: 1e-3, np.float64: 1e-6}
TOLERANCE = {np.float32: 1e-3, np.float64: 1e-6}


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    tolerance: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return bool(self.rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, safe when both gradients vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(fn, inputs: dict, name: str = "fn", rng: np.random.Generator | None = None,
                    max_coords: int | None = None, step: float | None = None,
                    tolerance: float | None = None, reference: tuple | None = None) -> GradCheckResult:
    """Compare ``backward`` against central differences of ``fn()``.

    ``fn`` takes no arguments and returns a scalar Tensor built from the
    tensors in ``inputs`` (name -> leaf Tensor with requires_grad). When
    ``max_coords`` is set, roughly that many coordinates are sampled,
    spread evenly over the inputs so every tensor is probed.

    ``reference=(fn64, inputs64)`` takes the differences from a float64 twin
    of the same function (same names, values cast up). A float32 forward
    is too noisy to difference through deep ReLU stacks: small steps drown
    in round-off and large ones cross kinks.
    """
    dtype = next(iter(inputs.values())).dtype.type
    tol = TOLERANCE[dtype] if tolerance is None else tolerance
    num_fn, num_inputs = (fn, inputs) if reference is None else reference
    if reference is not None:
        for k, t in inputs.items():
            num_inputs[k].data[...] = t.data
    h = STEP[next(iter(num_inputs.values())).dtype.type] if step is None else step
    params = list(inputs.values())
    grads = backward(fn(), params=params)
    if max_coords is not None and sum(t.size for t in params) > max_coords:
        rng = rng or np.random.default_rng(0)
        per = max(1, max_coords // len(inputs))
        coords = [(k, int(i)) for k, t in inputs.items()
                  for i in np.sort(rng.choice(t.size, size=min(per, t.size), replace=False))]
    else:
        coords = [(k, i) for k, t in inputs.items() for i in range(t.size)]
    analytic, numeric = [], []
    for key, i in coords:
        flat = num_inputs[key].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = float(num_fn().data)
        flat[i] = orig - h
        fm = float(num_fn().data)
        flat[i] = orig
        numeric.append((fp - fm) / (2.0 * h))
        analytic.append(float(grads[inputs[key]].reshape(-1)[i]))
    return GradCheckResult(name, relative_error(np.array(analytic), np.array(numeric)), tol, len(coords))


def leaf(values, dtype) -> Tensor:
    return Tensor(np.array(values, dtype=dtype), requires_grad=True, dtype=dtype)


def projected_loss(out: Tensor, rng: np.random.Generator) -> tuple:
    """Scalar probe ``sum(out * R)`` with a fixed float64 projection ``R``.

    Reducing in float64 keeps summation round-off out of 32-bit checks, so
    the measured error reflects only the op under test.
    """
    r = Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return r, lambda y: (y * r).sum()

