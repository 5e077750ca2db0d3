"""Shared test oracles: central finite differences and error metrics."""

import numpy as np

from defectscan import autodiff as ad


def central_differences(f, arrays, h=1e-3):
    """Coordinate-wise central finite differences of scalar f() w.r.t. arrays.

    `f` must re-read `arrays` on every call; arrays are perturbed in place and
    restored.  Everything runs in float64.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-2):
    """Max elementwise |a-b| scaled by max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def tape_gradients(build, arrays):
    """Analytic gradients of a scalar loss built by `build(tensors) -> Tensor`.

    Wraps each array in a requires_grad Tensor, runs forward under a tape,
    backpropagates and returns the gradients in input order.
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.GradientTape() as tape:
        loss = build(tensors)
    ad.backward(loss, tape)
    return [t.grad for t in tensors]


def gradcheck(build, arrays, h=1e-3, tol=1e-3):
    """Compare tape gradients of build() against central finite differences.

    `build(tensors)` -> scalar Tensor; `arrays` are float64 ndarrays.
    Returns the worst relative error (asserting it is <= tol).
    """
    analytic = tape_gradients(build, arrays)

    def f():
        tensors = [ad.Tensor(a) for a in arrays]
        return float(build(tensors).data)

    numeric = central_differences(f, arrays, h=h)
    worst = max(rel_error(a, n) for a, n in zip(analytic, numeric))
    assert worst <= tol, f"gradient mismatch: rel error {worst:.3e} > {tol:.0e}"
    return worst


def weighted_sum(out, weights):
    """sum(out * weights) as a scalar Tensor, for generic non-uniform loss seeds."""
    return ad.sum_all(ad.mul(out, ad.Tensor(weights)))
