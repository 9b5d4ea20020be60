import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("ci", max_examples=50, deadline=None)
settings.load_profile("ci")


def fd_grad(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``x`` (mutated in place)."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = fn().item()
        flat[i] = old - eps
        down = fn().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).norm().item()
    den = max(a.norm().item() + b.norm().item(), 1e-12)
    return num / den


def grad_check(fn, tensors, eps: float = 1e-6) -> float:
    """Max relative error between autograd and finite differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone()
        with torch.no_grad():
            numeric = fd_grad(fn, t, eps)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_bench():
    from ccreid.synthdata import generate_dataset
    return generate_dataset(seed=7, n_identities=4, outfits_per_id=(2, 2), images_per_outfit=(3, 3),
                            n_cameras=2, image_size=(32, 16), n_test_identities=3)
