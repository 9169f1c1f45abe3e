"""Central finite-difference gradient verification.

Compares autograd gradients of a scalar-valued closure against central
differences at 64-bit precision, parameter element by parameter element.
"""

import torch

FD_STEP = 1e-4
REL_TOL = 1e-4
# below this gradient magnitude the comparison falls back to a scaled
# absolute error (relative error is meaningless near zero)
SMALL_GRAD = 1e-3


def fd_max_rel_error(make_loss, params, h=FD_STEP):
    """Max relative error between autograd and central differences.

    `make_loss()` re-evaluates the scalar loss from the current parameter
    values; `params` are the leaf tensors to check (every element is
    perturbed by +/- h).
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("parameter does not require grad")
        if p.dtype != torch.float64:
            raise ValueError("gradient checks must run at 64-bit precision")
    loss = make_loss()
    grads = torch.autograd.grad(loss, params)

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(make_loss())
                flat[i] = orig - h
                fm = float(make_loss())
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                analytic = gflat[i].item()
                scale = max(abs(numeric), abs(analytic), SMALL_GRAD)
                worst = max(worst, abs(numeric - analytic) / scale)
    return worst


def check_module_gradients(module, make_loss, h=FD_STEP, tol=REL_TOL):
    """fd_max_rel_error over every parameter of `module`; returns the error
    and raises AssertionError above `tol`."""
    err = fd_max_rel_error(make_loss, module.parameters(), h=h)
    if err >= tol:
        raise AssertionError(f"gradient check failed: max rel error {err:.3e}")
    return err
