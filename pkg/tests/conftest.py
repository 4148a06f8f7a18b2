import numpy as np
import pytest
import torch

from soundingvideo import config as C


@pytest.fixture(scope="session")
def small_cfg():
    """Reduced-geometry config used by unit tests (64^2 frames, tiny nets)."""
    return C.overfit_config(0)


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


def finite_difference_grad(fn, tensors, eps=1e-5):
    """Central-difference gradients of a scalar function of double tensors."""
    grads = []
    for tensor in tensors:
        flat = tensor.reshape(-1)
        grad = torch.zeros_like(flat)
        for k in range(flat.numel()):
            orig = float(flat[k])
            flat[k] = orig + eps
            up = float(fn().detach())
            flat[k] = orig - eps
            down = float(fn().detach())
            flat[k] = orig
            grad[k] = (up - down) / (2 * eps)
        grads.append(grad.reshape(tensor.shape))
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-10):
    for a, n in zip(analytic, numeric):
        scale = torch.maximum(a.abs(), n.abs())
        err = (a - n).abs()
        assert torch.all(err <= rtol * scale + atol), \
            f"max rel err {float((err / (scale + 1e-30)).max()):.3e}"
