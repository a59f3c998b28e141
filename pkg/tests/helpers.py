"""Shared test utilities: a finite-difference oracle kept independent of the
reverse-mode path it checks."""

import numpy as np

from istanet import engine


def fd_grad(fn, arrays, wrt, eps=1e-6):
    """Central-difference gradient of scalar fn(*arrays) w.r.t. arrays[wrt].

    fn receives plain numpy arrays and must return a float.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[wrt]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(*base)
        flat[i] = orig - eps
        lo = fn(*base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_op_gradients(op, arrays, eps=1e-6, tol=1e-4, loss="sumsq"):
    """Compare reverse-mode gradients of sum(op(...)^2) (or plain sum) against
    central differences for every input; returns the worst relative error."""
    tensors = [engine.Tensor(np.array(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    out = op(*tensors)
    scalar = (out * out).sum() if loss == "sumsq" else out.sum()
    scalar.backward()

    def forward_np(*arrs):
        res = op(*[engine.Tensor(a) for a in arrs]).data
        return float((res * res).sum() if loss == "sumsq" else res.sum())

    worst = 0.0
    for i, t in enumerate(tensors):
        fd = fd_grad(forward_np, arrays, wrt=i, eps=eps)
        worst = max(worst, rel_err(fd, t.grad))
    assert worst <= tol, f"gradient mismatch: rel err {worst:.3e} > {tol}"
    return worst
