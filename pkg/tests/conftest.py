import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def triangle_quadrature(order: int = 6):
    """Collapsed Gauss-Legendre rule on the reference triangle (independent of the
    package's own quadrature).  Returns barycentric points (Q, 3) and weights
    summing to 1."""
    x, w = np.polynomial.legendre.leggauss(order)
    x, w = 0.5 * (x + 1.0), 0.5 * w
    s, t = np.meshgrid(x, x, indexing="ij")
    ws, wt = np.meshgrid(w, w, indexing="ij")
    # Duffy map (s, t) -> (xi, eta) = (s, t (1 - s)); jacobian (1 - s)
    xi, eta = s.ravel(), (t * (1 - s)).ravel()
    weights = (ws * wt * (1 - s)).ravel() * 2.0
    bary = np.column_stack([1 - xi - eta, xi, eta])
    return bary, weights
