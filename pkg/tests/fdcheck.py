"""Central finite differences against autograd, for float64 modules."""

import numpy as np
import torch


def fd_relative_errors(loss_fn, named_params, samples_per_param=4, eps=1e-6, seed=0, floor=1e-3):
    """Compare autograd with central differences on a few entries of each parameter.

    ``loss_fn()`` must rebuild the scalar from the current parameter values.
    Returns ``{name: relative error}`` with the error measured as
    ``||fd - analytic|| / max(||fd||, ||analytic||, floor)`` over the sampled entries.
    The floor keeps exactly-zero gradients (for example a conv bias that a
    following group norm cancels) from turning roundoff into a relative error of 1;
    below it the comparison is effectively absolute (``floor * threshold``).
    """
    rng = np.random.default_rng(seed)
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in named_params], allow_unused=True)
    errors = {}
    with torch.no_grad():
        for (name, p), g in zip(named_params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(samples_per_param, flat.numel()), replace=False)
            fd, an = [], []
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
                fd.append((up - down) / (2 * eps))
                an.append(g.reshape(-1)[i].item())
            fd, an = np.array(fd), np.array(an)
            scale = max(np.linalg.norm(fd), np.linalg.norm(an), floor)
            errors[name] = float(np.linalg.norm(fd - an) / scale)
    return errors
