import io

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from magloc.grid import build_grid
from magloc.magop import (DirichletSolver, OperatorError, assemble, dirichlet_eigenvalues_1d, dirichlet_mode,
                          dirichlet_spectrum)
from magloc.vfield import example1, example3, sample_field, sample_scalar

SQ = (-1.0, 1.0, -1.0, 1.0)


def test_single_interior_node():
    op = assemble(build_grid(SQ, 3))
    assert op.matrix.toarray().tolist() == [[4.0]]


def test_zero_field_is_real_five_point_laplacian():
    g = build_grid(SQ, 9)
    op = assemble(g)
    assert op.is_real
    m = g.interior_shape[0]
    T = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(m, m))
    L = (sp.kron(T, sp.identity(m)) + sp.kron(sp.identity(m), T)) / g.h ** 2
    np.testing.assert_array_equal(op.matrix.toarray(), L.toarray())


def test_zero_field_matches_closed_form_spectrum():
    g = build_grid(SQ, 13)
    vals = np.linalg.eigvalsh(assemble(g).matrix.toarray())
    lam, p, q = dirichlet_spectrum(g)
    np.testing.assert_allclose(vals, lam, rtol=1e-12)
    # (4/h^2)(sin^2(m pi h/4) + sin^2(n pi h/4)) on the square
    h = g.h
    expect = 4 / h ** 2 * (np.sin(p * np.pi * h / 4) ** 2 + np.sin(q * np.pi * h / 4) ** 2)
    np.testing.assert_allclose(lam, expect, rtol=1e-13)


def test_sine_modes_are_eigenvectors():
    g = build_grid(SQ, 17)
    op = assemble(g)
    lam, p, q = dirichlet_spectrum(g)
    for k in range(6):
        v = dirichlet_mode(g, p[k], q[k])
        np.testing.assert_allclose(op.apply(v), lam[k] * v, atol=1e-9 * lam[k])
        assert g.h ** 2 * np.sum(v * v) == pytest.approx(1.0)


@pytest.mark.parametrize("example", [example1, example3])
def test_exact_hermiticity_and_structure(example):
    g = build_grid(SQ, 21)
    op = assemble(g, sample_field(example(), g))
    M = op.matrix.tocsr()
    assert (M - M.conj().T).count_nonzero() == 0
    assert np.all(M.diagonal().imag == 0)
    assert np.all(M.diagonal().real >= 4 / g.h ** 2)
    assert np.max(np.diff(M.indptr)) <= 5
    assert op.dim == g.n_interior


def test_potential_on_diagonal():
    g = build_grid(SQ, 9)
    V = sample_scalar("x^2 + 1", g)
    op = assemble(g, None, V)
    np.testing.assert_allclose(op.diagonal(), 4 / g.h ** 2 + V.interior())


def test_rayleigh_quotients_nonnegative(rng):
    g = build_grid(SQ, 25)
    op = assemble(g, sample_field(example3(), g), sample_scalar("abs(x)", g))
    for _ in range(100):
        v = rng.standard_normal(op.dim) + 1j * rng.standard_normal(op.dim)
        q = np.vdot(v, op.apply(v))
        scale = np.vdot(v, v).real * abs(op.matrix).sum(axis=1).max()
        assert abs(q.imag) <= 1e-13 * scale
        assert q.real >= 0


def test_apply_unit_vector_returns_column():
    g = build_grid(SQ, 7)
    op = assemble(g, sample_field(example3(), g))
    e = np.zeros(op.dim)
    e[0] = 1
    np.testing.assert_array_equal(op.apply(e), op.matrix[:, [0]].toarray().ravel())
    with pytest.raises(OperatorError):
        op.apply(np.ones(op.dim + 1))


def _grad_expr(g_expr, grad_x, grad_y, base):
    return (f"({base[0]}) + ({grad_x})", f"({base[1]}) + ({grad_y})")


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_gauge_covariance_quadratic(c1, c2, c3, c4, c5):
    # g = c1 x^2 + c2 y^2 + c3 xy + c4 x + c5 y: midpoint rule exact on its gradient
    grid = build_grid(SQ, 11)
    base = example3()
    gx = f"2*{c1!r}*x + {c3!r}*y + {c4!r}"
    gy = f"2*{c2!r}*y + {c3!r}*x + {c5!r}"
    H = assemble(grid, sample_field(base, grid)).matrix.toarray()
    Hg = assemble(grid, sample_field(_grad_expr(None, gx, gy, base), grid)).matrix.toarray()
    X, Y = grid.interior_mesh()
    gval = (c1 * X ** 2 + c2 * Y ** 2 + c3 * X * Y + c4 * X + c5 * Y).ravel()
    D = np.exp(1j * gval)
    np.testing.assert_allclose(Hg, D[:, None] * H * D.conj()[None, :], atol=1e-9 / grid.h ** 2)


def test_gauge_spectrum_for_smooth_non_polynomial_gauge():
    grid = build_grid(SQ, 15)
    base = example3()
    H = assemble(grid, sample_field(base, grid)).matrix.toarray()
    Hg = assemble(grid, sample_field((f"{base[0]} + cos(x)*y", f"{base[1]} + sin(x)"), grid)).matrix.toarray()
    np.testing.assert_allclose(np.linalg.eigvalsh(Hg)[:5], np.linalg.eigvalsh(H)[:5], rtol=5e-2)


def test_matrix_market_round_trip():
    g = build_grid(SQ, 7)
    op = assemble(g, sample_field(example3(), g))
    buf = io.BytesIO()
    op.write_matrix_market(buf)
    text = buf.getvalue().decode()
    assert text.startswith("%%MatrixMarket matrix coordinate complex hermitian")
    back = scipy.io.mmread(io.BytesIO(buf.getvalue())).tocsr()
    np.testing.assert_allclose(back.toarray(), op.matrix.toarray(), rtol=1e-15)


def test_dirichlet_solver_inverts_shifted_laplacian(rng):
    g = build_grid(SQ, 17)
    op = assemble(g)
    for shift in (0.0, 12.5):
        solve = DirichletSolver(g, shift)
        b = rng.standard_normal((op.dim, 3)) + 1j * rng.standard_normal((op.dim, 3))
        x = solve(b)
        np.testing.assert_allclose(op.matrix @ x + shift * x, b, atol=1e-10)


def test_dirichlet_eigenvalues_1d_bounds():
    lam = dirichlet_eigenvalues_1d(10, 0.1)
    assert np.all(np.diff(lam) > 0)
    assert lam[-1] < 4 / 0.01
