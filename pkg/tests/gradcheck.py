"""Central finite-difference check shared by the gradient tests."""

import torch

REL_TOL = 1e-3


def numeric_grad(fn, inputs, index, eps=1e-6):
    x = inputs[index]
    grad = torch.zeros_like(x)
    flat = x.detach().reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = fn(*inputs).item()
        flat[i] = orig - eps
        minus = fn(*inputs).item()
        flat[i] = orig
        grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = torch.linalg.vector_norm(a - b).item()
    den = max(torch.linalg.vector_norm(a).item(), torch.linalg.vector_norm(b).item(), 1e-12)
    return num / den


def assert_grad_matches(fn, inputs, params=()):
    """Analytic gradients of ``fn(*inputs)`` (a scalar) w.r.t. every input
    tensor and every tensor in ``params`` agree with central differences."""
    inputs = [x.detach().clone().to(torch.float64).requires_grad_(True) for x in inputs]
    params = list(params)
    out = fn(*inputs)
    targets = inputs + params
    grads = torch.autograd.grad(out, targets, allow_unused=True)
    with torch.no_grad():
        for i, x in enumerate(inputs):
            num = numeric_grad(fn, inputs, i)
            ana = grads[i] if grads[i] is not None else torch.zeros_like(x)
            err = relative_error(ana, num)
            assert err < REL_TOL, f"input {i}: relative error {err:.2e}"
        for j, p in enumerate(params):
            num = numeric_grad(lambda *_: fn(*inputs), [p], 0)
            ana = grads[len(inputs) + j]
            ana = ana if ana is not None else torch.zeros_like(p)
            err = relative_error(ana, num)
            assert err < REL_TOL, f"param {j}: relative error {err:.2e}"
