"""Central finite-difference gradient checks (run in float64)."""
import numpy as np

from .tensor import Tensor, default_dtype


def relative_error(a, b, floor=1e-7):
    """Norm-relative difference. ``floor`` keeps gradients that are exactly
    zero (e.g. a bias feeding a per-channel norm) from turning finite-difference
    roundoff into an O(1) error."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f, tensors, h=1e-4):
    """Central differences of scalar ``f()`` w.r.t. each tensor's data."""
    out = []
    for t in tensors:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def gradcheck(fn, inputs, h=1e-4, seed=0):
    """Compare reverse-mode and finite-difference gradients of ``fn(*inputs)``.

    The (possibly tensor-valued) output is contracted with a fixed random
    projection so every output element contributes. Each input is checked at
    steps ``h`` and ``h / 100`` and keeps the better of the two: a relu kink
    within ``h`` of a sample spoils only the large step, roundoff only the
    small one, while a wrong derivative fails both. Returns the worst
    relative error over the inputs that require gradients.
    """
    with default_dtype(np.float64):
        for t in inputs:
            if t.data.dtype != np.float64:
                raise TypeError("gradcheck inputs must be float64")
        probe_shape = fn(*inputs).shape
        w = Tensor(np.random.default_rng(seed).normal(size=probe_shape))

        def scalar():
            return (fn(*inputs) * w).sum()

        wrt = [t for t in inputs if t.requires_grad]
        for t in wrt:
            t.grad = None
        scalar().backward()
        analytic = [t.grad.copy() for t in wrt]
        errs = []
        for t, a in zip(wrt, analytic):
            e = relative_error(a, numeric_grad(scalar, [t], h)[0])
            if e > 1e-6:
                e = min(e, relative_error(a, numeric_grad(scalar, [t], h / 100.0)[0]))
            errs.append(e)
    return max(errs)
