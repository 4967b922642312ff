"""Central finite-difference gradient checks."""

import numpy as np

from .autodiff import Tensor, backward


def finite_difference_check(scalar_fn, point, eps=1e-6):
    """Max relative error between autodiff and central differences.

    ``scalar_fn`` maps a list of Tensors to a scalar Tensor; ``point`` is a
    list of arrays (or a single array). The relative error per coordinate
    is |a - c| / (|a| + |c| + 1e-12).
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must be in (0, 1e-3], got {eps}")
    single = isinstance(point, np.ndarray)
    arrays = [np.array(p, dtype=np.float64) for p in ([point] if single else point)]

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = scalar_fn(leaves[0] if single else leaves)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite function value at check point")
    backward(loss)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    def evaluate(vals):
        ts = [Tensor(v) for v in vals]
        out = float(scalar_fn(ts[0] if single else ts).data)
        if not np.isfinite(out):
            raise FloatingPointError("non-finite function value during differencing")
        return out

    worst = 0.0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        for j in range(flat.size):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k].reshape(-1)[j] += eps
            minus[k].reshape(-1)[j] -= eps
            central = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            an = analytic[k].reshape(-1)[j]
            err = abs(an - central) / (abs(an) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
