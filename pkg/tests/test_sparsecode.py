import warnings

import numpy as np
import pytest
import torch
from hypothesis import assume, given
from hypothesis import strategies as st

from spam.sparsecode import (
    LassoProblem,
    PaddedLayout,
    SparseCode,
    approx_sparse_code,
    batched_ista,
    default_step,
    ista,
    kkt_residual,
    lasso_objective,
    node_lipschitz,
    power_iteration,
    soft_threshold,
    solve_lasso_cd,
)

from oracles import lasso_grid, lasso_obj


def random_problem(rng, k=None, d=None, lam=None):
    k = int(rng.integers(1, 5)) if k is None else k
    d = int(rng.integers(1, 7)) if d is None else d
    lam = float(rng.uniform(0.05, 1.5)) if lam is None else lam
    return LassoProblem(rng.standard_normal(d), rng.standard_normal((d, k)) * 0.8, lam)


def test_soft_threshold_cases():
    assert soft_threshold(5.0, 2.0) == 3.0
    assert soft_threshold(-1.0, 2.0) == 0.0
    assert soft_threshold(-5.0, 2.0) == -3.0
    with pytest.raises(ValueError):
        soft_threshold(1.0, -0.1)
    t = soft_threshold(torch.tensor([3.0, -0.5], dtype=torch.float64), 1.0)
    assert t.tolist() == [2.0, -0.0]


def test_zero_solution_when_lambda_dominates(rng):
    p = random_problem(rng, k=3, d=4)
    lam = 2.0 * np.max(np.abs(p.V.T @ p.t)) + 1e-9
    q = LassoProblem(p.t, p.V, lam)
    sol = solve_lasso_cd(q)
    assert np.all(sol.alpha == 0)
    assert kkt_residual(q, np.zeros(3)) == 0.0


def test_orthonormal_closed_form(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    t = rng.standard_normal(6)
    p = LassoProblem(t, Q, 0.4)
    expect = soft_threshold(Q.T @ t, 0.2)
    assert np.max(np.abs(solve_lasso_cd(p).alpha - expect)) < 1e-10


def test_cd_matches_grid_oracle_frozen_instance():
    # grid minimum computed offline by the coarse-to-fine brute force in oracles.py
    rng = np.random.default_rng(2024)
    t = rng.standard_normal(4)
    V = rng.standard_normal((4, 3))
    p = LassoProblem(t, V, 0.3)
    sol = solve_lasso_cd(p)
    grid_best, _ = lasso_grid(t, V, 0.3)
    assert lasso_objective(p, sol.alpha) <= grid_best + 1e-4
    assert lasso_objective(p, sol.alpha) == pytest.approx(GRID_2024, abs=1e-4)


# frozen grid optimum for the instance above
GRID_2024 = 3.816375663218078


def test_kkt_residual_grows_with_perturbation(rng):
    p = random_problem(rng, k=3, d=5, lam=0.3)
    a = solve_lasso_cd(p).alpha
    assert kkt_residual(p, a) < 1e-6
    direction = rng.standard_normal(3)
    res = [kkt_residual(p, a + s * direction) for s in (0.01, 0.1, 0.5, 1.0)]
    assert all(b >= a_ - 1e-12 for a_, b in zip(res, res[1:]))
    assert res[-1] > res[0]


def test_zero_column_frozen_with_warning():
    V = np.array([[1.0, 0.0], [0.0, 0.0]])
    p = LassoProblem(np.array([2.0, 1.0]), V, 0.1)
    with pytest.warns(UserWarning, match="frozen"):
        sol = solve_lasso_cd(p)
    assert sol.alpha[1] == 0.0 and sol.frozen == [1]


def test_max_iter_flag():
    rng = np.random.default_rng(0)
    p = random_problem(rng, k=4, d=3, lam=0.01)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sol = solve_lasso_cd(p, tol=1e-300, max_iter=2)
    assert not sol.converged and sol.n_iter == 2


def test_empty_dictionary():
    p = LassoProblem(np.ones(3), np.zeros((3, 0)), 0.1)
    sol = solve_lasso_cd(p)
    assert len(sol.alpha) == 0
    assert len(approx_sparse_code(p).alpha) == 0


def test_invalid_inputs():
    with pytest.raises(ValueError):
        LassoProblem(np.ones(2), np.ones((2, 1)), 0.0)
    with pytest.raises(ValueError):
        LassoProblem(np.ones(2), np.array([[np.inf], [1.0]]), 0.1)
    with pytest.raises(ValueError):
        SparseCode(np.arange(2), np.zeros(3), 0.1)


def test_ista_one_step_exact_on_orthonormal(rng):
    Q, _ = np.linalg.qr(rng.standard_normal((5, 3)))
    t = rng.standard_normal(5)
    p = LassoProblem(t, Q, 0.3)
    a = approx_sparse_code(p, steps=1, step_size=0.5).alpha
    assert np.max(np.abs(a - solve_lasso_cd(p).alpha)) < 1e-12


def test_ista_zero_target_and_bad_args(rng):
    p = LassoProblem(np.zeros(4), rng.standard_normal((4, 3)), 0.1)
    assert np.all(approx_sparse_code(p, steps=1).alpha == 0)
    with pytest.raises(ValueError):
        approx_sparse_code(p, steps=0)
    with pytest.raises(ValueError):
        approx_sparse_code(p, steps=1, step_size=-1.0)


def test_ista_twenty_steps_within_five_percent():
    rng = np.random.default_rng(11)
    p = random_problem(rng, k=4, d=6, lam=0.2)
    exact = lasso_objective(p, solve_lasso_cd(p).alpha)
    assert lasso_objective(p, approx_sparse_code(p, steps=20).alpha) <= 1.05 * exact


def test_ista_twenty_steps_typical_gap():
    # ill-conditioned draws converge slowly at step 1/(2L); most land within 5%
    rng = np.random.default_rng(0)
    ratios = []
    for _ in range(200):
        p = random_problem(rng, k=4, d=6, lam=0.2)
        exact = lasso_objective(p, solve_lasso_cd(p).alpha)
        ratios.append(lasso_objective(p, approx_sparse_code(p, steps=20).alpha) / exact)
    ratios = np.array(ratios)
    assert np.median(ratios) <= 1.05
    assert np.mean(ratios <= 1.05) >= 0.75
    assert ratios.min() >= 1.0 - 1e-12


def test_default_step_uses_lipschitz_of_unhalved_loss(rng):
    V = rng.standard_normal((6, 3))
    L = np.linalg.eigvalsh(V.T @ V).max()
    eta = default_step(V)
    assert 1 / (2 * L) <= eta <= 1.2 / (2 * L)
    assert float(power_iteration(torch.as_tensor(V))) == pytest.approx(L, rel=0.2)


def test_batched_ista_matches_per_node(rng):
    n, d = 5, 4
    owner = torch.tensor([0, 0, 1, 1, 1, 3, 4])
    cols = torch.as_tensor(rng.standard_normal((7, d)))
    t = torch.as_tensor(rng.standard_normal((n, d)))
    got = batched_ista(t, cols, owner, 0.2, steps=4)
    L = node_lipschitz(cols, owner, n)
    for i in range(n):
        sel = (owner == i).nonzero().flatten()
        if len(sel) == 0:
            continue
        ref = ista(t[i], cols[sel].T, 0.2, 4, 1.0 / (2 * L[i]))
        assert torch.allclose(got[sel], ref, atol=1e-12)


def test_batched_ista_gradients_flow(rng):
    owner = torch.tensor([0, 0, 1])
    cols = torch.as_tensor(rng.standard_normal((3, 3)), dtype=torch.float64).requires_grad_()
    t = torch.as_tensor(rng.standard_normal((2, 3)), dtype=torch.float64).requires_grad_()
    a = batched_ista(t, cols, owner, 0.01, steps=3)
    a.sum().backward()
    assert cols.grad.abs().sum() > 0 and t.grad.abs().sum() > 0


def test_padded_layout_round_trip():
    owner = torch.tensor([2, 0, 2, 1, 2])
    lay = PaddedLayout.build(owner, 3)
    cols = torch.arange(10, dtype=torch.float64).reshape(5, 2)
    P = lay.pack(cols)
    assert P.shape == (3, 3, 2)
    assert torch.equal(P[lay.owner, lay.slot], cols)


# -- properties ---------------------------------------------------------------


@given(st.integers(0, 10_000))
def test_exact_solver_dominates_approximation(seed):
    rng = np.random.default_rng(seed)
    p = random_problem(rng)
    exact = lasso_objective(p, solve_lasso_cd(p).alpha)
    approx = lasso_objective(p, approx_sparse_code(p, steps=3).alpha)
    assert exact <= approx + 1e-9


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_kkt_scale_consistency(seed, c):
    rng = np.random.default_rng(seed)
    p = random_problem(rng)
    a = solve_lasso_cd(p).alpha
    scaled = LassoProblem(c * p.t, c * p.V, c * c * p.lam)
    assert kkt_residual(scaled, a) <= max(1.0, c * c) * 1e-6


@given(st.integers(0, 10_000))
def test_bad_columns_suppressed(seed):
    rng = np.random.default_rng(seed)
    # good columns span t; bad columns nearly orthogonal to t and to each other
    good = np.eye(6)[:, :2]
    bad = np.eye(6)[:, 2:4] + 0.05 * rng.standard_normal((6, 2))
    coef = rng.uniform(1.0, 2.0, 2) * rng.choice([-1, 1], 2)
    t = good @ coef
    V = np.hstack([good, bad])
    lam = 0.5
    Vn = V / np.linalg.norm(V, axis=0)
    assume(np.all(np.abs(bad.T @ t) < lam / 2))
    assume(np.abs(Vn.T @ Vn - np.eye(4)).max() < 0.3)
    sol = solve_lasso_cd(LassoProblem(t, V, lam))
    assert np.all(sol.alpha[2:] == 0)


@given(st.integers(0, 10_000), st.floats(0.1, 2.0))
def test_map_equivalence_on_grid(seed, sigma2):
    rng = np.random.default_rng(seed)
    t, V = rng.standard_normal(3), rng.standard_normal((3, 3))
    lam = 0.4
    b = sigma2 / lam  # Laplace scale matching lam
    axis = np.linspace(-2, 2, 21)
    pts = np.array(np.meshgrid(axis, axis, axis, indexing="ij")).reshape(3, -1).T
    r = t[None, :] - pts @ V.T
    # negative log posterior up to a constant: Gaussian likelihood, Laplace prior
    nlp = (r * r).sum(1) / sigma2 + np.abs(pts).sum(1) / b
    lasso = np.array([lasso_obj(t, V, lam, a) for a in pts])
    assert np.allclose(nlp, lasso / sigma2, rtol=1e-12, atol=1e-12)
    assert nlp.argmin() == lasso.argmin()
