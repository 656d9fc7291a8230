import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from trusformer.vicreg import VICRegWeights, covariance_term, variance_term, vicreg_loss

from oracles import finite_difference_grad, oracle_vicreg, relative_error


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def test_identical_views_zero_invariance():
    z = t64(np.random.default_rng(0).standard_normal((6, 4)))
    assert vicreg_loss(z, z).invariance.item() == 0.0


def test_constant_columns_saturate_hinge():
    z = t64(np.ones((5, 3)) * 2.0)
    eps = 1e-4
    v = variance_term(z, 1.0, eps).item()
    assert v == pytest.approx(1.0 - np.sqrt(eps), abs=1e-12)
    assert variance_term(z, 1.0, 0.0).item() == 1.0


def test_decorrelated_columns_zero_covariance():
    # columns with zero mean and orthogonal centred values
    z = t64([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    assert covariance_term(z).item() == 0.0


def test_wide_columns_no_variance_penalty():
    z = t64(np.random.default_rng(1).standard_normal((50, 4)) * 10)
    assert variance_term(z).item() == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(2, 9), rng.integers(1, 6)
    Z, Zp = rng.standard_normal((n, d)) * rng.uniform(0.2, 2), rng.standard_normal((n, d))
    got = vicreg_loss(t64(Z), t64(Zp))
    want = oracle_vicreg(Z, Zp)
    for g, w in zip(got, want):
        assert g.item() == pytest.approx(w, abs=1e-10, rel=1e-10)


def test_custom_weights_match_oracle():
    rng = np.random.default_rng(99)
    Z, Zp = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    w = VICRegWeights(lam=2.0, mu=3.0, nu=0.5, gamma=0.7, eps=1e-3)
    got = vicreg_loss(t64(Z), t64(Zp), w).total.item()
    assert got == pytest.approx(oracle_vicreg(Z, Zp, 2.0, 3.0, 0.5, 0.7, 1e-3)[0], abs=1e-10)


def test_batch_of_one_rejected():
    with pytest.raises(ValueError):
        vicreg_loss(torch.zeros(1, 3), torch.zeros(1, 3))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        vicreg_loss(torch.zeros(4, 3), torch.zeros(4, 2))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 10), d=st.integers(1, 6))
def test_row_permutation_invariance(seed, n, d):
    rng = np.random.default_rng(seed)
    Z, Zp = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    perm = rng.permutation(n)
    a = vicreg_loss(t64(Z), t64(Zp)).total.item()
    b = vicreg_loss(t64(Z[perm]), t64(Zp[perm])).total.item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("shape", [(4, 3), (8, 5)])
@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(shape, seed):
    rng = np.random.default_rng(seed)
    Z, Zp = rng.standard_normal(shape) * 0.6, rng.standard_normal(shape) * 0.6
    z = t64(Z).requires_grad_(True)
    zp = t64(Zp).requires_grad_(True)
    vicreg_loss(z, zp).total.backward()
    f1 = lambda x: vicreg_loss(t64(x), t64(Zp)).total.item()  # noqa: E731
    f2 = lambda x: vicreg_loss(t64(Z), t64(x)).total.item()  # noqa: E731
    assert relative_error(z.grad.numpy(), finite_difference_grad(f1, Z)) < 1e-4
    assert relative_error(zp.grad.numpy(), finite_difference_grad(f2, Zp)) < 1e-4
