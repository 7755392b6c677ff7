"""Shared oracles: central finite differences and relative error norms."""

import numpy as np
import torch


def fd_grad(fn, x, eps=1e-5):
    """Central finite-difference gradient of the scalar function fn at x.

    fn must not capture x by reference to autograd state; it is called with
    a plain perturbed tensor.
    """
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + eps
        fp = float(fn(x).detach())
        flat[i] = orig - eps
        fm = float(fn(x).detach())
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a, b, floor=1e-7):
    """Max-norm relative error with an absolute floor on the denominator."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / denom)
