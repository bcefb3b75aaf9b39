"""Shared test helpers: finite-difference gradient checking."""

import numpy as np


def fd_gradients(loss_fn, tensors, h=1e-6):
    """Central-difference gradients of a scalar re-evaluated loss.

    `loss_fn` must recompute the forward pass from the tensors' current
    `.data` (which is perturbed in place, one coordinate at a time).
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = loss_fn()
            flat[i] = saved - h
            down = loss_fn()
            flat[i] = saved
            gf[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-3):
    """Largest elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def assert_grads_close(loss_fn, tensors, tol=1e-4, h=1e-6):
    """FD-check every coordinate of every tensor's autodiff gradient."""
    numeric = fd_gradients(loss_fn, tensors, h=h)
    for t, num in zip(tensors, numeric):
        assert t.grad is not None, "missing autodiff gradient"
        err = rel_error(t.grad, num)
        assert err < tol, f"gradient mismatch: rel error {err:.3e}"
