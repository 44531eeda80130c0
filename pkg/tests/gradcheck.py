"""Central finite-difference gradient checking against the autodiff engine."""

import numpy as np

from fusionlane.tensor import Tensor, backward


def fd_check(build_loss, tensors, rng, h=1e-3, rel_tol=1e-2, atol=1e-3, coords_per_tensor=4):
    """Compare analytic gradients with central finite differences.

    ``build_loss`` recomputes the scalar loss from the current tensor data.
    The absolute floor ``atol`` covers float32 forward-pass noise, which caps
    finite-difference resolution around 1e-4 regardless of operator.
    """
    loss = build_loss()
    backward(loss)
    analytic = {id(t): t.grad.copy() for t in tensors}
    for t in tensors:
        t.grad = None

    checked = 0
    for t in tensors:
        flat = t.data.reshape(-1)
        n = min(coords_per_tensor, flat.size)
        idxs = rng.choice(flat.size, size=n, replace=False)
        for idx in idxs:
            orig = flat[idx]
            flat[idx] = orig + h
            f_plus = float(build_loss().data)
            flat[idx] = orig - h
            f_minus = float(build_loss().data)
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[id(t)].reshape(-1)[idx])
            err = abs(a - numeric)
            bound = rel_tol * max(abs(a), abs(numeric)) + atol
            assert err <= bound, (
                f"gradient mismatch at flat index {idx}: analytic {a:.6g}, "
                f"numeric {numeric:.6g}, err {err:.3g} > bound {bound:.3g}")
            checked += 1
    return checked


def projection_loss(out: Tensor, rng) -> tuple:
    """A fixed random projection of an op output, as a scalar loss builder."""
    r = Tensor(rng.standard_normal(out.data.shape).astype(np.float32))
    return r
