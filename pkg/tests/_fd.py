"""Central finite-difference gradient checking at float64."""

import numpy as np
import torch

EPS = 1e-5
RTOL = 1e-4


def fd_grad_check(make_loss, tensors, *, eps=EPS, rtol=RTOL, max_coords=12,
                  rng=None):
    """Compare autograd gradients of a scalar against central differences.

    make_loss is a zero-argument closure recomputing the loss from the given
    leaf tensors (float64, requires_grad=True). For each tensor, a random
    subset of coordinates is perturbed in place by +/- eps.
    """
    rng = rng or np.random.default_rng(0)
    loss = make_loss()
    assert loss.dim() == 0
    grads = torch.autograd.grad(loss, tensors)
    for t, g in zip(tensors, grads):
        assert t.dtype == torch.float64
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        for i in rng.choice(n, size=min(max_coords, n), replace=False):
            analytic = gflat[i].item()
            orig = flat[i].item()
            # A piecewise-linear kink within eps of the evaluation point makes
            # the central difference straddle two branches; shrinking eps
            # resolves it, while a genuinely wrong gradient stays wrong.
            for e in (eps, eps / 10, eps / 100):
                flat[i] = orig + e
                fp = make_loss().item()
                flat[i] = orig - e
                fm = make_loss().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * e)
                err = abs(numeric - analytic) / max(abs(numeric),
                                                    abs(analytic), 1e-6)
                if err < rtol:
                    break
            assert err < rtol, (
                f"coord {i}: analytic {analytic:.8g} vs numeric "
                f"{numeric:.8g} (rel err {err:.2e})")


def module_params(module):
    """All trainable parameters of a float64-converted module."""
    return [p for p in module.parameters() if p.requires_grad]
