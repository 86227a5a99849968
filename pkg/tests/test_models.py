import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from operon.fem import build_rect_mesh
from operon.models import (ElasticityConfig, PoissonConfig, elasticity_solve, full_dirichlet,
                           make_model, default_flux, default_source, poisson_dirichlet, poisson_solve, solve_fwd,
                           zero_function)
from operon.prior import build_prior


@pytest.fixture(scope="module")
def mesh():
    return build_rect_mesh(12, 12)


@pytest.fixture(scope="module")
def prior(mesh):
    return build_prior(mesh)


def test_homogeneous_poisson(mesh):
    cfg = PoissonConfig(mesh, source=zero_function, flux=zero_function)
    u = poisson_solve(cfg, np.ones(mesh.num_nodes))
    assert np.all(u == 0)


def test_poisson_default_setup_boundary_values():
    mesh = build_rect_mesh(50, 50)
    u = poisson_solve(PoissonConfig(mesh), np.ones(mesh.num_nodes))
    assert np.all(np.isfinite(u))
    fixed = poisson_dirichlet(mesh)
    # left, bottom and top edges; the right-hand corners belong to the flux edge
    assert fixed.sum() == 3 * 50 - 1
    assert np.all(u[fixed] == 0)
    assert np.max(np.abs(u[mesh.boundary["right"]])) > 0.1


def test_poisson_scaling(mesh, rng):
    # -div(c m grad u) = f  <=>  -div(m grad u) = f / c
    m = np.exp(0.3 * rng.standard_normal(mesh.num_nodes))
    c = 3.0
    u1 = poisson_solve(PoissonConfig(mesh), c * m)
    u2 = poisson_solve(PoissonConfig(mesh, source=lambda x: default_source(x) / c,
                                      flux=lambda x: default_flux(x) / c), m)
    np.testing.assert_allclose(u1, u2, atol=1e-8 * np.abs(u2).max())


def test_poisson_load_superposition(mesh, rng):
    m = np.exp(0.3 * rng.standard_normal(mesh.num_nodes))
    full = poisson_solve(PoissonConfig(mesh), m)
    src = poisson_solve(PoissonConfig(mesh, flux=zero_function), m)
    flx = poisson_solve(PoissonConfig(mesh, source=zero_function), m)
    np.testing.assert_allclose(full, src + flx, atol=1e-8 * np.abs(full).max())


def test_homogeneous_elasticity(mesh):
    cfg = ElasticityConfig(mesh, traction=(0.0, 0.0))
    assert np.all(elasticity_solve(cfg, np.ones(mesh.num_nodes)) == 0)


def test_elasticity_constant_strain_patch(mesh):
    cfg = ElasticityConfig(mesh, traction=(0.0, 0.0), clamped=full_dirichlet,
                           dirichlet_value=lambda x: np.column_stack([x[:, 0], np.zeros(len(x))]))
    u = elasticity_solve(cfg, np.ones(mesh.num_nodes))
    n = mesh.num_nodes
    np.testing.assert_allclose(u[:n], mesh.nodes[:, 0], atol=1e-10)
    np.testing.assert_allclose(u[n:], 0.0, atol=1e-10)


def test_elasticity_tip_moves_up(mesh, prior):
    model = make_model("linear_elasticity", mesh, prior)
    E = model.sample_prior(np.random.default_rng(3), transform=True)
    assert E.min() > 1000
    u = model.solve_fwd(E)
    n = mesh.num_nodes
    tip = np.flatnonzero(mesh.boundary["right"])
    assert np.all(u[n + tip] > 0)
    assert np.all(u[:n][mesh.boundary["left"]] == 0)


def test_solve_fwd_transform_equivalence(mesh, prior):
    w = np.zeros(mesh.num_nodes)
    p = make_model("poisson", mesh, prior)
    assert np.array_equal(solve_fwd(p, w, transform=True),
                          poisson_solve(PoissonConfig(mesh), np.ones(mesh.num_nodes)))
    e = make_model("linear_elasticity", mesh, prior)
    assert np.array_equal(solve_fwd(e, w, transform=True),
                          elasticity_solve(ElasticityConfig(mesh), np.full(mesh.num_nodes, 1100.0)))


def test_solve_fwd_is_deterministic(mesh, prior, rng):
    model = make_model("poisson", mesh, prior)
    m = model.sample_prior(rng, transform=True)
    assert solve_fwd(model, m).tobytes() == solve_fwd(model, m).tobytes()


def test_bad_inputs(mesh, prior):
    model = make_model("poisson", mesh, prior)
    with pytest.raises(ValueError):
        model.solve_fwd(-np.ones(mesh.num_nodes))
    with pytest.raises(ValueError):
        model.solve_fwd(np.ones(5))
    with pytest.raises(ValueError):
        make_model("heat", mesh, prior)
    with pytest.raises(ValueError):
        make_model("poisson", build_rect_mesh(3, 3), prior)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 10.0), st.floats(0.1, 10.0))
def test_elasticity_scales_inversely_with_modulus(e, c):
    mesh = build_rect_mesh(4, 4)
    cfg = ElasticityConfig(mesh)
    u1 = elasticity_solve(cfg, np.full(mesh.num_nodes, e))
    u2 = elasticity_solve(cfg, np.full(mesh.num_nodes, c * e))
    np.testing.assert_allclose(u1, c * u2, rtol=1e-7, atol=1e-9 * np.abs(u1).max())
