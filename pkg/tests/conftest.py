from contextlib import contextmanager

import numpy as np
import torch
import torch.nn.functional as F


@contextmanager
def _recording_relu(store):
    original = F.relu

    def wrapped(x, *args, **kwargs):
        store.append(float(x.detach().abs().min()))
        return original(x, *args, **kwargs)

    F.relu = wrapped
    try:
        yield
    finally:
        F.relu = original


def min_relu_preactivation(module, x):
    """Smallest |input| seen by any ReLU during one forward pass.

    A pre-activation within the finite-difference step of zero makes the
    numeric derivative at that point undefined (the stencil straddles the
    kink); callers use this to reject such degenerate samples before a
    gradient check.
    """
    magnitudes: list[float] = []
    with torch.no_grad(), _recording_relu(magnitudes):
        module(x)
    return min(magnitudes) if magnitudes else float("inf")


def seeded_input(shape, seed, dtype=torch.float64, low=0.0, high=1.0):
    rng = np.random.default_rng(seed)
    arr = rng.uniform(low, high, size=shape)
    return torch.from_numpy(arr).to(dtype)


def fd_gradient(fn, tensor, step=1e-6):
    """Central-difference gradient of the scalar fn() w.r.t. `tensor`.

    Perturbs the tensor's storage in place, so fn must read the same
    storage on every call.
    """
    flat = tensor.detach().reshape(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        original = flat[i].item()
        flat[i] = original + step
        upper = fn()
        flat[i] = original - step
        lower = fn()
        flat[i] = original
        grad[i] = (upper - lower) / (2.0 * step)
    return grad.reshape(tensor.shape)


def max_relative_error(analytic_list, numeric_list):
    """Infinity-norm relative error of the whole gradient vector.

    max_i |a_i - n_i| / max(||a||_inf, ||n||_inf): the per-coordinate
    discrepancy measured against the gradient's scale. A 1e-6-step central
    difference in float64 carries rounding noise of roughly
    eps * |f| / (2 * step) in absolute terms, so coordinates whose own
    magnitude sits below that floor cannot be compared relatively to
    themselves by any implementation; the gradient-wide scale is the
    measurable contract. The 1e-12 floor only guards all-zero gradients.
    """
    if not isinstance(analytic_list, (list, tuple)):
        analytic_list, numeric_list = [analytic_list], [numeric_list]
    scale = max(
        max(a.abs().max().item() for a in analytic_list),
        max(n.abs().max().item() for n in numeric_list),
        1e-12,
    )
    worst = max(
        (a - n).abs().max().item() for a, n in zip(analytic_list, numeric_list)
    )
    return worst / scale


def check_module_gradients(module, x, step=1e-6, tol=1e-5):
    """Autodiff vs central differences for sum(module(x)), w.r.t. x and params.

    Module and input must be float64. Returns the relative error.
    """
    module = module.double()
    x = x.double().clone().requires_grad_(True)

    output = module(x).sum()
    grads = torch.autograd.grad(output, [x, *module.parameters()])

    def forward():
        with torch.no_grad():
            return float(module(x).sum())

    targets = [x.data, *(p.data for p in module.parameters())]
    numeric = [fd_gradient(forward, target, step) for target in targets]
    error = max_relative_error(list(grads), numeric)
    assert error < tol, f"gradient mismatch: rel error {error:.3e} >= {tol}"
    return error


def check_loss_gradients(loss_fn, s, y, step=1e-6, tol=1e-5):
    """Autodiff vs central differences for a scalar loss, w.r.t. s."""
    s = s.double().clone().requires_grad_(True)
    y = y.double()
    (analytic,) = torch.autograd.grad(loss_fn(s, y), [s])

    def forward():
        with torch.no_grad():
            return float(loss_fn(s, y))

    numeric = fd_gradient(forward, s.data, step)
    error = max_relative_error(analytic, numeric)
    assert error < tol, f"loss gradient mismatch: rel error {error:.3e} >= {tol}"
    return error
